"""Deformable 3D registration with a dual-stream feature pyramid."""

from ._core import (
    Checkpoint,
    DataError,
    NumericError,
    compose,
    dice,
    evaluate,
    level_shape,
    load_field,
    load_labels,
    load_volume,
    make_pair,
    nlcc,
    random_smooth_field,
    save_field,
    save_labels,
    save_volume,
    smoothness,
    synthesize_dataset,
    train,
    upsample_field,
    warp_nearest,
    warp_trilinear,
)

__all__ = [
    "Checkpoint",
    "DataError",
    "NumericError",
    "compose",
    "dice",
    "evaluate",
    "level_shape",
    "load_field",
    "load_labels",
    "load_volume",
    "make_pair",
    "nlcc",
    "random_smooth_field",
    "save_field",
    "save_labels",
    "save_volume",
    "smoothness",
    "synthesize_dataset",
    "train",
    "upsample_field",
    "warp_nearest",
    "warp_trilinear",
]
