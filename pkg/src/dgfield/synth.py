"""Analytic test scenes, depth-noise injection and image metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InputError
from .geometry import CameraModel, DepthMap, camera_rays


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if not self.radius > 0:
            raise InputError("sphere radius must be positive")

    def intersect(self, o, d):
        """Nearest positive hit distance per ray (inf on miss); ``d`` unit length."""
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        s0, s1 = -b - root, -b + root
        s = np.where(s0 > 1e-9, s0, np.where(s1 > 1e-9, s1, np.inf))
        return np.where(hit, s, np.inf)

    def residual(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius


@dataclass
class Box:
    min: np.ndarray
    max: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if not np.all(self.min < self.max):
            raise InputError("box min must be below max")

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.min - o) * inv
            t1 = (self.max - o) * inv
        tmin = np.nanmax(np.fmin(t0, t1), axis=1)
        tmax = np.nanmin(np.fmax(t0, t1), axis=1)
        s = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (s > 1e-9), s, np.inf)

    def residual(self, x):
        """Signed distance to the box surface (0 on the surface)."""
        q = np.abs(x - (self.min + self.max) / 2) - (self.max - self.min) / 2
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0)
        return outside + inside


@dataclass
class AnalyticScene:
    spheres: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def primitives(self):
        return list(self.spheres) + list(self.boxes)

    @classmethod
    def from_json(cls, text: str) -> "AnalyticScene":
        rec = json.loads(text)
        return cls(
            [Sphere(s["center"], s["radius"], s["albedo"]) for s in rec.get("spheres", [])],
            [Box(b["min"], b["max"], b["albedo"]) for b in rec.get("boxes", [])],
            np.asarray(rec.get("background", [0, 0, 0]), dtype=np.float64),
        )

    def to_json(self) -> str:
        return json.dumps({
            "background": self.background.tolist(),
            "spheres": [{"center": s.center.tolist(), "radius": s.radius, "albedo": s.albedo.tolist()}
                        for s in self.spheres],
            "boxes": [{"min": b.min.tolist(), "max": b.max.tolist(), "albedo": b.albedo.tolist()}
                      for b in self.boxes],
        }, indent=2)


def raycast_pixels(scene: AnalyticScene, cam: CameraModel, pixels):
    """Colors, z-depths (NaN on miss) and hit mask for continuous pixel coordinates."""
    o, d = camera_rays(cam, pixels)
    best = np.full(len(o), np.inf)
    color = np.broadcast_to(scene.background, (len(o), 3)).astype(np.float64)
    for prim in scene.primitives:
        s = prim.intersect(o, d)
        closer = s < best
        best = np.where(closer, s, best)
        color = np.where(closer[:, None], prim.albedo, color)
    hit = np.isfinite(best)
    x = o + np.where(hit, best, 0)[:, None] * d
    z = x @ cam.R[2] + cam.t[2]
    return color, np.where(hit, z, np.nan), hit


def raycast_view(scene: AnalyticScene, cam: CameraModel):
    """Flat-shaded RGB image (H, W, 3) in [0, 1] and the exact z-depth map."""
    color, z, hit = raycast_pixels(scene, cam, cam.pixel_centers())
    shape = (cam.height, cam.width)
    depth = DepthMap(np.where(hit, z, 0.0).reshape(shape), hit.reshape(shape))
    return color.reshape(shape + (3,)), depth


def add_depth_noise(depth: DepthMap, fraction: float, rng) -> DepthMap:
    """Replace a random ``fraction`` of valid depths by uniform noise over the valid range."""
    if not 0 <= fraction <= 1:
        raise InputError("noise fraction must lie in [0, 1]")
    values = depth.values.copy()
    valid = depth.valid
    if fraction == 0 or not valid.any():
        return DepthMap(values, valid.copy())
    lo, hi = values[valid].min(), values[valid].max()
    pick = valid & (rng.random(values.shape) < fraction)
    values[pick] = rng.uniform(lo, hi, size=int(pick.sum()))
    return DepthMap(values, valid.copy())


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


def gaussian_window(size: int = 11, sigma: float = 1.5):
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(a, b, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (grayscale)."""
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 1.0
    if min(a.shape) < win:
        raise InputError(f"images must be at least {win} pixels on each side")
    C1, C2 = 0.01**2, 0.03**2
    w = gaussian_window(win, sigma)
    r = win // 2

    def blur(x):
        y = correlate1d(correlate1d(x, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")
        return y[r:-r, r:-r]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    per_view: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def enc(v):
            return "inf" if v == float("inf") else v
        return {
            "psnr": enc(self.psnr), "psnr_infinite": self.psnr == float("inf"), "ssim": self.ssim,
            "per_view": [{**p, "psnr": enc(p["psnr"])} for p in self.per_view],
        }


def evaluate_images(pairs) -> MetricsReport:
    """Metrics over (view_index, predicted, ground_truth) triples; PSNR averaged in dB."""
    rows = []
    for view, pred, gt in pairs:
        rows.append({"view": int(view), "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)})
    if not rows:
        raise InputError("no views to evaluate")
    return MetricsReport(float(np.mean([r["psnr"] for r in rows])), float(np.mean([r["ssim"] for r in rows])), rows)


# ---------------------------------------------------------------------------
# reference toy scene


def toy_scene() -> AnalyticScene:
    """A sphere and a box on a black background; background pixels have no depth."""
    return AnalyticScene(
        spheres=[Sphere([-0.45, 0.05, 3.6], 0.75, [0.9, 0.35, 0.2])],
        boxes=[Box([0.25, -0.65, 3.0], [1.05, 0.35, 3.9], [0.2, 0.75, 0.35])],
    )


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def toy_cameras(size: int = 64, focal: float | None = None):
    """Four forward-facing cameras; views 0-2 train, view 3 is held out by convention."""
    focal = float(size) if focal is None else focal
    K = np.array([[focal, 0, size / 2], [0, focal, size / 2], [0, 0, 1.0]])
    eyes = [(0.0, 0.0, 0.0), (0.45, -0.2, 0.05), (-0.4, 0.25, -0.05), (0.15, 0.2, 0.1)]
    cams = []
    for eye in eyes:
        R, t = look_at(eye, (0.0, 0.0, 4.5))
        cams.append(CameraModel(K, R, t, size, size))
    return cams
