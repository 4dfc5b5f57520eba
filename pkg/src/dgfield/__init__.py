"""Depth-guided factorized radiance fields on sparse RGB-D views."""

import os as _os

if "DGFIELD_NUM_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["DGFIELD_NUM_THREADS"])

from .field import FieldModel, GridSpec, init_from_point_clouds, param_count, upsample
from .geometry import CameraModel, DepthMap, PointCloud, Ray
from .render import DecoderMLP, NDCFrame, RenderedPixel, render_pixel
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "DecoderMLP", "DepthMap", "FieldModel", "GridSpec", "NDCFrame", "PointCloud", "Ray",
    "RenderedPixel", "TrainConfig", "init_from_point_clouds", "param_count", "render_pixel", "train",
    "upsample",
]
