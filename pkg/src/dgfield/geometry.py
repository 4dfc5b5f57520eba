"""Pinhole cameras, rays, depth lifting and the forward-facing NDC map.

Pixel coordinates are continuous: the raster pixel at (row, col) has its
center at ``(col + 0.5, row + 0.5)``.  Cameras look down +z and depth is
measured along the camera z-axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, InvalidCameraError, OutOfFrustumError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """World-to-camera pinhole model: ``x_cam = R @ x_world + t``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidCameraError("camera contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or np.linalg.det(R) <= 0:
            raise InvalidCameraError("R must be a proper rotation (orthonormal, det +1)")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise InvalidCameraError("K must be upper-triangular")
        if not (K[0, 0] > 0 and K[1, 1] > 0 and K[2, 2] == 1):
            raise InvalidCameraError("K needs positive focal lengths and K[2][2] == 1")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidCameraError("image dimensions must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def project(self, x_world):
        """Project world points to continuous pixel coordinates and z-depth."""
        x_cam = np.asarray(x_world, dtype=np.float64) @ self.R.T + self.t
        h = x_cam @ self.K.T
        return h[..., :2] / h[..., 2:3], x_cam[..., 2]

    def pixel_centers(self) -> np.ndarray:
        """All pixel centers in raster order, shape (height * width, 2)."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1).astype(np.float64)

    def to_record(self) -> dict:
        return {
            "K": self.K.ravel().tolist(),
            "R": self.R.ravel().tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CameraModel":
        return cls(K=rec["K"], R=rec["R"], t=rec["t"], width=rec["width"], height=rec["height"])


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.shape != valid.shape or values.ndim != 2:
            raise InputError("depth values and validity mask must be 2-D and share a shape")
        if np.any(~np.isfinite(values[valid])) or np.any(values[valid] <= 0):
            raise InputError("valid depths must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(d)
        if abs(norm - 1.0) > 1e-9:
            raise InputError(f"ray direction must be unit length, got norm {norm}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, s):
        return self.origin + np.multiply.outer(s, self.direction)


@dataclass
class PointCloud:
    """Colored points lifted from one view.

    ``positions`` are in NDC space (what the grid sees); ``world`` keeps the
    same points before the NDC map.
    """

    source_view: int
    positions: np.ndarray
    colors: np.ndarray
    world: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.positions)


def _check_pixels(cam: CameraModel, pixels: np.ndarray):
    u, v = pixels[..., 0], pixels[..., 1]
    if np.any(u < 0) or np.any(u > cam.width) or np.any(v < 0) or np.any(v > cam.height):
        raise InputError("pixel outside image bounds")


def pixel_to_world(cam: CameraModel, pixel, depth):
    """Lift pixel(s) with z-depth to world space: ``R^-1 (K^-1 x_p D - t)``.

    ``pixel`` may be ``(u, v)`` or homogeneous ``(u, v, 1)``, with arbitrary
    leading batch dimensions matching ``depth``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if pixel.shape[-1] == 3:
        pixel = pixel[..., :2] / pixel[..., 2:3]
    _check_pixels(cam, pixel)
    if np.any(~(depth > 0)):
        raise InputError("depth must be positive")
    try:
        K_inv = np.linalg.inv(cam.K)
    except np.linalg.LinAlgError as exc:
        raise InvalidCameraError("intrinsics matrix is singular") from exc
    x_p = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    x_cam = (x_p @ K_inv.T) * depth[..., None]
    # R orthonormal: R^-1 = R^T, applied on the right as (.) @ R
    return (x_cam - cam.t) @ cam.R


def world_to_ndc(point_cam, cam: CameraModel, near: float):
    """Map camera-space points with z >= near into [-1,1]^2 x [0,1)."""
    p = np.asarray(point_cam, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z < near):
        raise OutOfFrustumError(f"point closer than near plane {near}")
    ax = 2.0 * cam.K[0, 0] / cam.width
    ay = 2.0 * cam.K[1, 1] / cam.height
    return np.stack([ax * x / z, ay * y / z, 1.0 - near / z], axis=-1)


def camera_ray(cam: CameraModel, pixel) -> Ray:
    o, d = camera_rays(cam, np.asarray(pixel, dtype=np.float64)[None, :2])
    return Ray(o[0], d[0])


def camera_rays(cam: CameraModel, pixels):
    """Vectorized camera_ray: returns world origins and unit directions."""
    pixels = np.asarray(pixels, dtype=np.float64)
    _check_pixels(cam, pixels)
    x_p = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    d = np.linalg.solve(cam.K, x_p.reshape(-1, 3).T).T.reshape(x_p.shape) @ cam.R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def to_ndc_space(x_world, ref: CameraModel, near: float):
    """World points to the NDC space of the reference camera."""
    x_cam = np.asarray(x_world, dtype=np.float64) @ ref.R.T + ref.t
    return world_to_ndc(x_cam, ref, near)


def ndc_rays(origins, dirs, ref: CameraModel, near: float):
    """Map world rays into the reference camera's NDC space.

    Each origin is first slid along its ray onto the near plane.  NDC points
    along the mapped ray are ``o' + s d'`` with ``s`` in [0, 1) from the near
    plane to infinity; ``d'`` is returned unnormalized.
    """
    o = np.asarray(origins, dtype=np.float64) @ ref.R.T + ref.t
    d = np.asarray(dirs, dtype=np.float64) @ ref.R.T
    if np.any(d[..., 2] <= 0):
        raise OutOfFrustumError("ray does not travel towards +z of the reference camera")
    shift = (near - o[..., 2]) / d[..., 2]
    o = o + shift[..., None] * d
    ax = 2.0 * ref.K[0, 0] / ref.width
    ay = 2.0 * ref.K[1, 1] / ref.height
    oz = o[..., 2]
    o_ndc = np.stack([ax * o[..., 0] / oz, ay * o[..., 1] / oz, 1.0 - near / oz], axis=-1)
    d_ndc = np.stack(
        [
            ax * (d[..., 0] / d[..., 2] - o[..., 0] / oz),
            ay * (d[..., 1] / d[..., 2] - o[..., 1] / oz),
            near / oz,
        ],
        axis=-1,
    )
    return o_ndc, d_ndc


def build_point_cloud(cam: CameraModel, image, depth: DepthMap, *, view: int = 0,
                      ref: CameraModel | None = None, near: float = 1.0) -> PointCloud:
    """One colored NDC point per valid depth pixel of ``cam``'s view.

    The NDC map uses ``ref`` (default: ``cam`` itself) so that clouds from
    several views share one space.
    """
    image = np.asarray(image)
    if image.shape[:2] != depth.values.shape:
        raise InputError(
            f"image {image.shape[:2]} and depth {depth.values.shape} dimensions differ"
        )
    if (depth.height, depth.width) != (cam.height, cam.width):
        raise InputError("depth map does not match camera dimensions")
    ref = cam if ref is None else ref
    rows, cols = np.nonzero(depth.valid)
    if len(rows) == 0:
        empty = np.zeros((0, 3))
        return PointCloud(view, empty, empty.copy(), empty.copy())
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=-1).astype(np.float64)
    world = pixel_to_world(cam, pixels, depth.values[rows, cols])
    ndc = to_ndc_space(world, ref, near)
    colors = np.asarray(image[rows, cols, :3], dtype=np.float64)
    if image.dtype == np.uint8:
        colors = colors / 255.0
    return PointCloud(view, ndc, colors, world)
