"""On-disk RGB-D datasets: ``cameras.json`` plus 8-bit color and 16-bit depth PNGs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DGFieldError, LoadError
from .geometry import CameraModel, DepthMap

DEFAULT_DEPTH_SCALE = 2e-4
CAMERAS_FILE = "cameras.json"


@dataclass
class View:
    camera: CameraModel
    image: np.ndarray
    depth: DepthMap


@dataclass
class Dataset:
    views: list
    train: list = field(default_factory=list)
    held_out: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train:
            self.train = list(range(len(self.views)))
        if len(set(self.train)) != len(self.train) or set(self.train) & set(self.held_out):
            raise LoadError("train/held-out indices must be distinct")
        if any(not 0 <= i < len(self.views) for i in list(self.train) + list(self.held_out)):
            raise LoadError("view index out of range")

    def split(self, train) -> "Dataset":
        """Use ``train`` as training views; every other view is held out."""
        train = list(train)
        return Dataset(self.views, train, [i for i in range(len(self.views)) if i not in train])

    def train_views(self):
        return [self.views[i] for i in self.train]


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(path, img):
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_depth16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16) if im.mode.startswith("I;16") else np.asarray(im).astype(np.uint16)


def write_depth16(path, raw):
    raw = np.asarray(raw)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValueError("raw depth outside the 16-bit range")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def encode_depth(depth: DepthMap, depth_scale: float) -> np.ndarray:
    raw = np.where(depth.valid, np.rint(depth.values / depth_scale), 0)
    if raw.max(initial=0) > 65535:
        raise ValueError(f"depth {depth.values.max()} does not fit 16 bits at scale {depth_scale}")
    # a valid depth must never quantize to the hole marker
    raw = np.where(depth.valid, np.maximum(raw, 1), 0)
    return raw.astype(np.uint16)


def write_dataset(out_dir, views, depth_scale: float = DEFAULT_DEPTH_SCALE) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    records = []
    for i, v in enumerate(views):
        img_rel = f"images/view_{i:03d}.png"
        dep_rel = f"depth/view_{i:03d}.png"
        write_rgb(out / img_rel, v.image)
        write_depth16(out / dep_rel, encode_depth(v.depth, depth_scale))
        rec = v.camera.to_record()
        records.append({"image": img_rel, "depth": dep_rel, **rec, "depth_scale": depth_scale})
    (out / CAMERAS_FILE).write_text(json.dumps(records, indent=2))
    return out


def _field(rec, key, i, path):
    if key not in rec:
        raise LoadError(f"{path}: view {i} is missing field {key!r}")
    return rec[key]


def load_dataset(dir_path) -> Dataset:
    root = Path(dir_path)
    cam_path = root / CAMERAS_FILE
    if not cam_path.is_file():
        raise LoadError(f"{cam_path}: file not found")
    try:
        records = json.loads(cam_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{cam_path}: malformed JSON ({exc})") from exc
    if not isinstance(records, list) or not records:
        raise LoadError(f"{cam_path}: expected a non-empty array of views")
    views = []
    for i, rec in enumerate(records):
        try:
            cam = CameraModel(
                K=_field(rec, "K", i, cam_path), R=_field(rec, "R", i, cam_path),
                t=_field(rec, "t", i, cam_path), width=_field(rec, "width", i, cam_path),
                height=_field(rec, "height", i, cam_path),
            )
        except LoadError:
            raise
        except (DGFieldError, ValueError, TypeError) as exc:
            raise LoadError(f"{cam_path}: view {i}: invalid camera ({exc})") from exc
        scale = float(_field(rec, "depth_scale", i, cam_path))
        img_path = root / _field(rec, "image", i, cam_path)
        dep_path = root / _field(rec, "depth", i, cam_path)
        for p in (img_path, dep_path):
            if not p.is_file():
                raise LoadError(f"{p}: file not found (view {i})")
        image = read_rgb(img_path)
        raw = read_depth16(dep_path)
        if image.shape[:2] != (cam.height, cam.width) or raw.shape != (cam.height, cam.width):
            raise LoadError(f"view {i}: image/depth dimensions do not match width/height")
        valid = raw != 0
        views.append(View(cam, image, DepthMap(raw.astype(np.float64) * scale, valid)))
    return Dataset(views)
