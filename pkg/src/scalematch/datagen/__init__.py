from .annotation import (
    CameraView,
    annotate_scale_ratio,
    cross_visibility_count,
    default_tau,
    visible_point_cloud,
)
from .corpus import load_corpus, render_texture_image, synthetic_corpus
from .manifest import PairRecord, read_manifest, write_manifest
from .synthetic import SyntheticPair, generate_dataset, make_pair_downsample, make_pair_upsample

__all__ = [
    "CameraView",
    "PairRecord",
    "SyntheticPair",
    "annotate_scale_ratio",
    "cross_visibility_count",
    "default_tau",
    "generate_dataset",
    "load_corpus",
    "make_pair_downsample",
    "make_pair_upsample",
    "read_manifest",
    "render_texture_image",
    "synthetic_corpus",
    "visible_point_cloud",
    "write_manifest",
]
