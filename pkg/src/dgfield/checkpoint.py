"""Binary checkpoints.

Layout: ``b"DGPF"``, u32 version (1), u32 n, I, J, K, P, then per view the
six density arrays (vX, vY, vZ, MYZ, MXZ, MXY) followed by its six
appearance arrays, then B (P x 3n), then the decoder (W1, b1, W2, b2, W3,
b3).  Everything little-endian; arrays are float32, row-major.

The grid's bounding box and the rendering frame are not part of that
layout; they travel in a ``<checkpoint>.json`` sidecar.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .decoder import DecoderMLP
from .errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from .field import FACTOR_KEYS, FieldModel, GridSpec, factor_shapes

MAGIC = b"DGPF"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_F32 = np.dtype("<f4")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _layout(n, dims, P):
    shapes = factor_shapes(dims, n)
    for r in range(n):
        for family in ("density", "appearance"):
            for key in FACTOR_KEYS:
                yield (family, key, r), shapes[key][1:]
    yield ("basis",), (P, 3 * n)
    for name, shape in DecoderMLP.shapes(P).items():
        yield ("decoder", name), shape


def to_bytes(model: FieldModel) -> bytes:
    I, J, K = model.grid.dims
    chunks = [_HEADER.pack(MAGIC, VERSION, model.n, I, J, K, model.P)]
    for key, _ in _layout(model.n, model.grid.dims, model.P):
        if key[0] == "basis":
            arr = model.basis
        elif key[0] == "decoder":
            arr = getattr(model.decoder, key[1])
        else:
            family, name, r = key
            arr = getattr(model, family)[name][r]
        chunks.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(chunks)


def from_bytes(data: bytes, bbox_min=(-1.0, -1.0, 0.0), bbox_max=(1.0, 1.0, 1.0)) -> FieldModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("file ends inside the header")
    _, version, n, I, J, K, P = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader handles {VERSION}")
    layout = list(_layout(n, (I, J, K), P))
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for _, s in layout)
    if len(data) < expected:
        raise TruncatedCheckpointError(f"checkpoint has {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise CheckpointError(f"checkpoint has {len(data) - expected} trailing bytes")
    shapes = factor_shapes((I, J, K), n)
    density = {k: np.empty(s, dtype=np.float32) for k, s in shapes.items()}
    appearance = {k: np.empty(s, dtype=np.float32) for k, s in shapes.items()}
    dec = {}
    basis = None
    off = _HEADER.size
    for key, shape in layout:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=_F32, count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        if key[0] == "basis":
            basis = arr
        elif key[0] == "decoder":
            dec[key[1]] = arr
        else:
            family, name, r = key
            (density if family == "density" else appearance)[name][r] = arr
    grid = GridSpec((I, J, K), bbox_min, bbox_max)
    return FieldModel(grid, density, appearance, basis, DecoderMLP(**dec))


def save_checkpoint(model: FieldModel, path, frame=None, render=None) -> Path:
    """Write the binary checkpoint and its JSON sidecar (bbox, optional frame and render settings)."""
    path = Path(path)
    path.write_bytes(to_bytes(model))
    meta = {"bbox_min": model.grid.bbox_min.tolist(), "bbox_max": model.grid.bbox_max.tolist()}
    if frame is not None:
        meta["frame"] = frame.to_record()
    if render is not None:
        meta["render"] = dict(render)
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path):
    """Return ``(model, sidecar_metadata)``; the metadata dict is empty without a sidecar."""
    path = Path(path)
    data = path.read_bytes()
    meta = {}
    side = sidecar_path(path)
    if side.is_file():
        meta = json.loads(side.read_text())
    kw = {}
    if "bbox_min" in meta:
        kw = {"bbox_min": meta["bbox_min"], "bbox_max": meta["bbox_max"]}
    return from_bytes(data, **kw), meta
