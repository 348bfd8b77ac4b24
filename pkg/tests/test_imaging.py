import numpy as np
import pytest

from scalematch.imaging import (
    check_image,
    fit_square,
    load_image,
    rescale,
    resize,
    round_half_up,
    save_image,
    scaled_size,
    to_gray_u8,
)


def test_round_half_up():
    assert [round_half_up(v) for v in (16.5, 17.5, 141.42, 212.13, 0.49)] == [17, 18, 141, 212, 0]


def test_scaled_size():
    assert scaled_size(100, 150, 2**0.5) == (141, 212)


@pytest.mark.parametrize(
    "img",
    [
        np.zeros((40, 40)),
        np.zeros((40, 40, 4)),
        np.zeros((31, 40, 3)),
        np.full((40, 40, 3), 1.5),
        np.full((40, 40, 3), np.nan),
    ],
)
def test_check_image_rejects(img):
    with pytest.raises(ValueError):
        check_image(img)


def test_resize_preserves_constants_both_ways():
    img = np.full((50, 70, 3), 0.6, dtype=np.float32)
    for size in [(100, 140), (17, 23)]:
        out = resize(img, size)
        assert out.shape == (*size, 3)
        np.testing.assert_allclose(out, 0.6, atol=1e-6)


def test_rescale_and_fit_square():
    img = np.random.default_rng(0).random((60, 90, 3)).astype(np.float32)
    assert rescale(img, 0.5).shape == (30, 45, 3)
    sq, factor = fit_square(img, 64)
    assert sq.shape == (64, 64, 3) and factor == pytest.approx(64 / 90)
    assert np.all(sq[43:] == 0)


def test_image_io_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((33, 47, 3)).astype(np.float32)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-6)
    assert to_gray_u8(back).shape == (33, 47)
