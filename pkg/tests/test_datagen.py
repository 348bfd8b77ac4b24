import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalematch.datagen import (
    CameraView,
    PairRecord,
    annotate_scale_ratio,
    cross_visibility_count,
    generate_dataset,
    load_corpus,
    make_pair_downsample,
    make_pair_upsample,
    read_manifest,
    synthetic_corpus,
    visible_point_cloud,
    write_manifest,
)
from scalematch.datagen.annotation import (
    default_tau,
    load_camera_view,
    nearest_distances,
    write_depth_table,
)
from scalematch.datagen.synthetic import generate_pairs, overlap_areas, zoom_center_crop
from scalematch.imaging import resize, save_image


def rand_img(h, w, seed):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


# --------------------------------------------------------------------------
# generators


def test_downsample_m0_keeps_content():
    content, bg1, bg2 = rand_img(64, 64, 0), rand_img(160, 160, 1), rand_img(160, 160, 2)
    pair = make_pair_downsample(content, bg1, bg2, 0.0, 5)
    assert pair.gt_ratio == 1.0
    sy, sx = pair.placement["offset1"]
    np.testing.assert_array_equal(pair.image1[sy : sy + 64, sx : sx + 64], content)


def test_downsample_m3_256_content():
    content, bg = rand_img(256, 256, 0), rand_img(300, 300, 1)
    pair = make_pair_downsample(content, bg, bg, 3.0, 5)
    assert pair.placement["scaled_size"] == [32, 32]
    assert pair.gt_ratio == 8.0
    assert pair.provenance == "synthetic-down"


def test_downsample_is_deterministic():
    content, bg1, bg2 = rand_img(64, 64, 0), rand_img(160, 160, 1), rand_img(160, 160, 2)
    a = make_pair_downsample(content, bg1, bg2, 1.3, 9)
    b = make_pair_downsample(content, bg1, bg2, 1.3, 9)
    assert a.placement == b.placement
    np.testing.assert_array_equal(a.image1, b.image1)


@pytest.mark.parametrize("make", [make_pair_downsample, make_pair_upsample])
def test_generators_reject_bad_inputs(make):
    bg = rand_img(100, 100, 1)
    with pytest.raises(ValueError):
        make(rand_img(120, 120, 0), bg, bg, 1.0, 0)
    with pytest.raises(ValueError):
        make(rand_img(50, 50, 0), bg, bg, 7.5, 0)
    with pytest.raises(ValueError):
        make(rand_img(50, 50, 0), bg, bg, -0.1, 0)


def test_upsample_m0_crop_equals_content():
    content, bg1, bg2 = rand_img(64, 64, 0), rand_img(160, 160, 1), rand_img(160, 160, 2)
    pair = make_pair_upsample(content, bg1, bg2, 0.0, 5)
    py, px = pair.placement["offset2"]
    np.testing.assert_array_equal(pair.image2[py : py + 64, px : px + 64], content)
    assert pair.gt_ratio == 1.0


def test_upsample_m2_crops_central_quarter():
    content = rand_img(128, 128, 0)
    crop, (cy, cx), (zy, zx) = zoom_center_crop(content, 2.0)
    assert crop.shape == (128, 128, 3)
    assert (cy / zy, cx / zx) == (48.0, 48.0)
    # the crop is the central 32x32 block magnified 4x; compare away from the border
    reference = resize(content[48:80, 48:80], (128, 128))
    np.testing.assert_allclose(crop[4:-4, 4:-4], reference[4:-4, 4:-4], atol=1e-5)

    pair = make_pair_upsample(content, rand_img(160, 160, 1), rand_img(160, 160, 2), 2.0, 1)
    oy, ox = pair.placement["offset1"]
    assert pair.placement["overlap1"] == [oy + 48.0, ox + 48.0, 32.0, 32.0]


@settings(max_examples=25, deadline=None)
@given(m=st.floats(0, 4), seed=st.integers(0, 10_000), up=st.booleans(), side=st.integers(40, 120))
def test_warp_maps_covisible_rectangles(m, seed, up, side):
    content, bg1, bg2 = rand_img(side, side, seed), rand_img(160, 160, 1), rand_img(160, 160, 2)
    make = make_pair_upsample if up else make_pair_downsample
    pair = make(content, bg1, bg2, m, seed)
    rec = PairRecord("a", "b", pair.gt_ratio, pair.provenance, pair.placement, pair.warp)
    y1, x1, h1, w1 = pair.placement["overlap1"]
    y2, x2, h2, w2 = pair.placement["overlap2"]
    corners1 = np.array([[x1, y1], [x1 + w1, y1 + h1]])
    np.testing.assert_allclose(rec.warp_points(corners1), [[x2, y2], [x2 + w2, y2 + h2]], atol=1e-9)
    # image1 is the side whose covisible region is smaller
    a1, a2 = overlap_areas(pair.placement)
    assert a1 <= a2 + 1e-9
    # resizing by the SDAIM split equalises the two regions up to rounding
    r1, r2 = pair.gt_ratio**0.5, pair.gt_ratio**-0.5
    side1, side2 = np.sqrt(a1) * r1, np.sqrt(a2) * r2
    assert abs(side1 - side2) <= 0.5 * r1 + 0.5 * r2 + 1e-9


def test_generated_pair_content_matches_under_warp():
    content = synthetic_corpus(1, 128, seed=3)[0]
    bgs = synthetic_corpus(2, 160, seed=4, style="background")
    for make in (make_pair_downsample, make_pair_upsample):
        pair = make(content, bgs[0], bgs[1], 1.0, 2)
        rec = PairRecord("a", "b", pair.gt_ratio, pair.provenance, pair.placement, pair.warp)
        y1, x1, h1, w1 = pair.placement["overlap1"]
        ys, xs = np.mgrid[y1 + 0.25 * h1 : y1 + 0.75 * h1 : 4j, x1 + 0.25 * w1 : x1 + 0.75 * w1 : 4j]
        p1 = np.column_stack([xs.ravel(), ys.ravel()])
        p2 = rec.warp_points(p1)
        v1 = pair.image1[p1[:, 1].astype(int), p1[:, 0].astype(int)]
        v2 = pair.image2[p2[:, 1].astype(int), p2[:, 0].astype(int)]
        assert np.mean(np.abs(v1 - v2)) < 0.15


def test_generate_pairs_alternates_provenance():
    content = synthetic_corpus(2, 96, seed=0)
    bgs = synthetic_corpus(2, 96, seed=1, style="background")
    pairs = list(generate_pairs(content, bgs, 2, (0, 2), 0, 64))
    assert [p.provenance for p in pairs] == ["synthetic-down", "synthetic-up"]


def test_generate_pairs_ratio_range():
    content = synthetic_corpus(2, 96, seed=0)
    bgs = synthetic_corpus(2, 96, seed=1, style="background")
    pairs = list(generate_pairs(content, bgs, 10, (0, 7), 4, 64))
    assert all(1.0 <= p.gt_ratio <= 128.0 for p in pairs)


def test_generate_dataset_is_byte_identical(tmp_path):
    content = synthetic_corpus(2, 96, seed=0)
    bgs = synthetic_corpus(2, 96, seed=1, style="background")
    generate_dataset(content, bgs, 4, (0, 3), 11, tmp_path / "a", 64)
    generate_dataset(content, bgs, 4, (0, 3), 11, tmp_path / "b", 64)
    for name in ["manifest.jsonl", "000000_1.png", "000003_2.png"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    recs = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert [r.provenance for r in recs].count("synthetic-down") == 2


def test_manifest_roundtrip(tmp_path):
    recs = [
        PairRecord("a.png", "b.png", 2.5, "synthetic-down", {"m": 1.32}, [1.0, 2.0, 3.0, 4.0]),
        PairRecord("c.png", "d.png", 0.25, "annotated"),
    ]
    write_manifest(recs, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == recs


def test_manifest_rejects_bad_records(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"path1": "a", "path2": "b", "gt_ratio": -1, "provenance": "annotated"}))
    with pytest.raises(ValueError, match="m.jsonl:1"):
        read_manifest(tmp_path / "m.jsonl")


def test_corpus_loading(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "missing")
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)
    save_image(rand_img(40, 40, 0), tmp_path / "x.png")
    assert load_corpus(tmp_path)[0].shape == (40, 40, 3)


def test_synthetic_corpus_is_deterministic():
    a, b = synthetic_corpus(2, 64, seed=5), synthetic_corpus(2, 64, seed=5)
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        synthetic_corpus(1, 64, style="photo")


# --------------------------------------------------------------------------
# annotation


K = np.array([[100.0, 0, 50], [0, 100.0, 40], [0, 0, 1]])


def view(depth, pose=None, k=K):
    return CameraView(k, np.eye(4) if pose is None else pose, np.asarray(depth, dtype=float))


def test_principal_point_lands_on_optical_axis():
    np.testing.assert_allclose(visible_point_cloud(view([[50, 40, 3.0]])), [[0, 0, 3.0]])


def test_translated_camera_point_shifts_by_inverse_transform():
    pose = np.eye(4)
    pose[:3, 3] = [1.0, -2.0, 0.5]
    # x_cam = x_world + t, so x_world = (0, 0, 3) - t
    np.testing.assert_allclose(visible_point_cloud(view([[50, 40, 3.0]], pose)), [[-1.0, 2.0, 2.5]])


def test_rotated_camera():
    pose = np.eye(4)
    pose[:3, :3] = [[0, -1, 0], [1, 0, 0], [0, 0, 1]]
    np.testing.assert_allclose(visible_point_cloud(view([[150, 40, 1.0]], pose)), [[0, -1.0, 1.0]], atol=1e-12)


def test_view_validation():
    with pytest.raises(ValueError):
        visible_point_cloud(view(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        view([[1, 1, 1.0]], k=np.diag([0.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        view([[1, 1, -1.0]])


def test_single_point_counts():
    src, ref = np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 1]])
    assert cross_visibility_count(src, ref, 0.5) == 0
    assert cross_visibility_count(src, ref, 2.0) == 1


def test_identical_clouds_count_everything():
    p = np.random.default_rng(0).random((30, 3))
    assert cross_visibility_count(p, p, 1e-9) == 30


@pytest.mark.parametrize("n", [50, 200])
def test_count_matches_brute_force(n):
    rng = np.random.default_rng(n)
    a, b = rng.random((n, 3)), rng.random((n, 3))
    d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(1)
    for tau in [0.01, 0.05, 0.1, 0.3]:
        assert cross_visibility_count(a, b, tau) == int((d < tau).sum())
    np.testing.assert_array_equal(nearest_distances(a, b), d)


def test_default_tau_is_three_median_spacings():
    grid = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0), [0.0]), -1).reshape(-1, 3)
    assert default_tau(grid) == 3.0


def plane_view(step, n):
    # identity camera with unit focal length: pixel (u, v) at depth 1 is the point (u, v, 1)
    coords = np.arange(n) * step
    uu, vv = np.meshgrid(coords, coords)
    depth = np.column_stack([uu.ravel(), vv.ravel(), np.ones(n * n)])
    return CameraView(np.eye(3), np.eye(4), depth)


def test_plane_with_known_visibility_counts():
    fine, coarse = plane_view(0.05, 20), plane_view(0.1, 10)
    p1, p2 = visible_point_cloud(fine), visible_point_cloud(coarse)
    assert cross_visibility_count(p1, p2, 0.08) == 400
    assert cross_visibility_count(p2, p1, 0.08) == 100
    assert annotate_scale_ratio(fine, coarse, 0.08).value == 4.0


def test_same_view_has_unit_ratio():
    v = plane_view(0.1, 6)
    assert annotate_scale_ratio(v, v).value == 1.0


def test_disjoint_clouds_rejected():
    a = plane_view(0.1, 5)
    far = CameraView(np.eye(3), np.eye(4), a.depth + [100.0, 0, 0])
    with pytest.raises(ValueError, match="do not overlap"):
        annotate_scale_ratio(a, far, 0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.01, 0.5))
def test_reciprocity_and_monotonicity(seed, tau):
    rng = np.random.default_rng(seed)
    d1 = np.column_stack([rng.uniform(0, 1, 60), rng.uniform(0, 1, 60), rng.uniform(1, 2, 60)])
    d2 = np.column_stack([rng.uniform(0.3, 1.3, 40), rng.uniform(0, 1, 40), rng.uniform(1, 2, 40)])
    v1, v2 = CameraView(np.eye(3), np.eye(4), d1), CameraView(np.eye(3), np.eye(4), d2)
    p1, p2 = visible_point_cloud(v1), visible_point_cloud(v2)
    assert cross_visibility_count(p1, p2, tau) <= cross_visibility_count(p1, p2, tau * 1.5)
    try:
        s12 = annotate_scale_ratio(v1, v2, tau)
    except ValueError:
        return
    s21 = annotate_scale_ratio(v2, v1, tau)
    assert s12.log2_value + s21.log2_value == 0.0


def test_camera_view_file_roundtrip(tmp_path):
    depth = np.array([[10.0, 20.0, 1.5], [30.0, 5.0, 2.25]])
    write_depth_table(depth, tmp_path / "d.csv")
    (tmp_path / "v.json").write_text(json.dumps({"intrinsics": K.tolist(), "pose": np.eye(4).tolist(), "depth": "d.csv"}))
    v = load_camera_view(tmp_path / "v.json")
    np.testing.assert_array_equal(v.depth, depth)
    assert v.image is None
