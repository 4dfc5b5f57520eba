"""Losses, analytic gradients, the optimizer and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DivergenceError, InputError, NumericalError
from .field import FieldModel, init_from_point_clouds, random_model, upsample
from .geometry import build_point_cloud
from .render import DENSITY_SCALE, NDCFrame, render_rays, render_rays_backward

log = logging.getLogger(__name__)

DEFAULT_UPSAMPLE_ITERS = (2000, 3000, 4000, 5500, 7000)


@dataclass
class LossWeights:
    omega_reg: float = 1e-4
    lambda_depth: float = 0.1

    def __post_init__(self):
        for name in ("omega_reg", "lambda_depth"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 4096
    lr_factors: float = 0.02
    lr_decoder: float = 1e-3
    omega_reg: float = 1e-4
    lambda_depth: float = 0.1
    q_samples: int = 64
    n0: int = 128
    n_final: int = 300
    upsample_iters: tuple = DEFAULT_UPSAMPLE_ITERS
    seed: int = 0
    near: float = 1.0
    far: float = 100.0
    # beyond the documented keys
    channels: int = 27
    density_scale: float = DENSITY_SCALE
    init: str = "pointcloud"
    log_every: int = 100
    jitter: bool = True
    dtype: str = "float32"
    bbox_margin: float = 0.05
    # "ndc_cube": n0/n_final count voxels over the whole NDC cube and the grid
    # covers the scene's part of it; "bbox": they count voxels over the box
    grid_reference: str = "ndc_cube"

    def __post_init__(self):
        self.upsample_iters = tuple(int(i) for i in self.upsample_iters)
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if any(b <= a for a, b in zip(self.upsample_iters, self.upsample_iters[1:])):
            raise InputError("upsample_iters must be strictly increasing")
        if self.init not in ("pointcloud", "random"):
            raise InputError(f"unknown init {self.init!r}")
        if self.grid_reference not in ("ndc_cube", "bbox"):
            raise InputError(f"unknown grid_reference {self.grid_reference!r}")
        if not self.far > self.near > 0:
            raise InputError("need far > near > 0")
        LossWeights(self.omega_reg, self.lambda_depth)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.omega_reg, self.lambda_depth)


def _parse_value(kind, text):
    if kind is bool:
        return text.strip().lower() in ("1", "true", "yes", "on")
    if kind is tuple:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    return kind(text.strip())


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines (``#`` comments, ``:`` also accepted)."""
    kinds = {f.name: type(f.default) for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise InputError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split(sep, 1))
        if key not in kinds:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(kinds[key], val)
        except ValueError as exc:
            raise InputError(f"config line {lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# losses


def factor_l1(model: FieldModel):
    """Mean absolute value over all density and appearance factor entries."""
    arrs = model.factor_parameters().values()
    total = sum(float(np.abs(a).sum(dtype=np.float64)) for a in arrs)
    return total / sum(a.size for a in arrs)


def rgb_loss(pred, gt, model: FieldModel, omega_reg: float) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mse = float(np.sum((pred - gt) ** 2)) / len(pred)
    reg = factor_l1(model) if omega_reg else 0.0
    return mse + omega_reg * reg


def depth_loss(pred_depth, gt_depth, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    diff = np.asarray(pred_depth, dtype=np.float64)[mask] - np.asarray(gt_depth, dtype=np.float64)[mask]
    return float(np.mean(diff**2))


def total_loss(rgb: float, depth: float, lambda_depth: float) -> float:
    return rgb + lambda_depth * depth


# ---------------------------------------------------------------------------
# gradients


@dataclass
class RayBatch:
    """Rays in NDC space plus their ground truth.

    ``depths`` are distances along the (unit-direction) NDC rays; ``mask``
    marks which of them are usable.
    """

    origins: np.ndarray
    dirs: np.ndarray
    nears: np.ndarray
    fars: np.ndarray
    viewdirs: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        n = len(self.origins)
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise InputError(f"ray batch field {f.name} has a different length")

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


@dataclass
class LossParts:
    total: float
    rgb: float
    depth: float
    mse: float


def _render(model, batch, cfg, rng=None, keep_cache=False):
    return render_rays(model, batch.origins, batch.dirs, batch.nears, batch.fars, cfg.q_samples,
                       rng=rng, viewdirs=batch.viewdirs, density_scale=cfg.density_scale,
                       keep_cache=keep_cache)


def _losses(model, batch, cfg, out) -> LossParts:
    rgb = rgb_loss(out.colors, batch.colors, model, cfg.omega_reg)
    dep = depth_loss(out.depths, batch.depths, batch.mask)
    mse = float(np.mean((out.colors.astype(np.float64) - batch.colors) ** 2))
    return LossParts(total_loss(rgb, dep, cfg.lambda_depth), rgb, dep, mse)


def loss_value(model: FieldModel, batch: RayBatch, cfg: TrainConfig) -> float:
    """Deterministic (unjittered) total loss; the function fd_gradient differentiates."""
    return _losses(model, batch, cfg, _render(model, batch, cfg)).total


def backward(model: FieldModel, batch: RayBatch, cfg: TrainConfig, rng=None):
    """Total loss and its exact gradient w.r.t. every array in ``model.parameters()``.

    Returns ``(loss, grads, parts)``.  ``rng`` jitters the samples; pass None
    for the deterministic path used by the finite-difference oracle.
    """
    if len(batch) == 0:
        raise InputError("empty ray batch")
    out = _render(model, batch, cfg, rng=rng, keep_cache=True)
    parts = _losses(model, batch, cfg, out)
    if not math.isfinite(parts.total):
        raise NumericalError("non-finite loss", block="loss")

    N = len(batch)
    g_rgb = 2.0 * (out.colors.astype(np.float64) - batch.colors) / N
    g_depth = np.zeros(N)
    mask = np.asarray(batch.mask, dtype=bool)
    if cfg.lambda_depth and mask.any():
        g_depth[mask] = cfg.lambda_depth * 2.0 * (out.depths[mask] - batch.depths[mask]) / mask.sum()
    grads = render_rays_backward(model, out, g_rgb, g_depth)

    if cfg.omega_reg:
        factors = model.factor_parameters()
        M = sum(a.size for a in factors.values())
        for name, arr in factors.items():
            grads[name] += (cfg.omega_reg / M) * np.sign(arr)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}", block=name)
    return parts.total, grads, parts


def fd_gradient(model: FieldModel, batch: RayBatch, cfg: TrainConfig, param: str, index, h: float = 1e-5,
                loss_fn=None) -> float:
    """Central difference of the loss w.r.t. one scalar ``model.parameters()[param][index]``."""
    if h <= 0:
        raise InputError("step must be positive")
    loss_fn = loss_fn or (lambda m: loss_value(m, batch, cfg))
    arr = model.parameters()[param]
    orig = arr[index].copy()
    try:
        arr[index] = orig + h
        up = loss_fn(model)
        arr[index] = orig - h
        down = loss_fn(model)
    finally:
        arr[index] = orig
    return (up - down) / (2 * h)


# ---------------------------------------------------------------------------
# optimizer


def param_group(name: str) -> str:
    return "decoder" if name.startswith("decoder.") else "factors"


@dataclass
class Adam:
    """Adaptive-moment optimizer with bias correction and per-group rates."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def reset(self, names):
        for k in names:
            self.m.pop(k, None)
            self.v.pop(k, None)

    def step(self, params: dict, grads: dict, lrs: dict):
        """Update ``params`` in place; ``lrs`` maps group name to learning rate."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            lr = lrs[param_group(name)]
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def step(optimizer: Adam, model: FieldModel, grads: dict, learning_rates: dict) -> FieldModel:
    optimizer.step(model.parameters(), grads, learning_rates)
    return model


# ---------------------------------------------------------------------------
# coarse-to-fine schedule


NDC_CUBE = (2.0, 2.0, 1.0)  # extent of [-1, 1] x [-1, 1] x [0, 1]


def dims_for_voxels(count: float, extent, reference=None) -> tuple:
    """Per-axis dims for a box of size ``extent``.

    Voxels are cubic and sized so that ``reference`` (default: the box
    itself) would hold ~``count`` of them.  With a larger reference the box
    gets the matching crop of that finer-grained lattice.
    """
    extent = np.asarray(extent, dtype=np.float64)
    ref = extent if reference is None else np.asarray(reference, dtype=np.float64)
    voxel = (np.prod(ref) / count) ** (1.0 / 3.0)
    return tuple(max(2, int(round(e / voxel))) for e in extent)


def grid_reference(cfg: TrainConfig):
    return NDC_CUBE if cfg.grid_reference == "ndc_cube" else None


def milestone_dims(i: int, cfg: TrainConfig, extent) -> tuple:
    """Grid dims after ``i`` of the configured milestones (0 = initial grid)."""
    k = len(cfg.upsample_iters)
    frac = i / k if k else 0.0
    log_count = (1 - frac) * math.log(cfg.n0**3) + frac * math.log(cfg.n_final**3)
    return dims_for_voxels(math.exp(log_count), extent, grid_reference(cfg))


def upsample_schedule(iteration: int, cfg: TrainConfig, extent=(1.0, 1.0, 1.0)):
    """New grid dims if ``iteration`` is a milestone, else None."""
    if iteration not in cfg.upsample_iters:
        return None
    return milestone_dims(cfg.upsample_iters.index(iteration) + 1, cfg, extent)


# ---------------------------------------------------------------------------
# training


def scene_frame(views, cfg: TrainConfig, ref_index: int = 0):
    """Reference frame, per-view point clouds and a bounding box enclosing them."""
    ref = views[ref_index].camera
    clouds = [
        build_point_cloud(v.camera, v.image, v.depth, view=r, ref=ref, near=cfg.near)
        for r, v in enumerate(views)
    ]
    pts = [c.positions for c in clouds if len(c)]
    if pts:
        allp = np.concatenate(pts)
        lo, hi = allp.min(axis=0), allp.max(axis=0)
    else:
        lo, hi = np.array([-1.0, -1.0, 0.0]), np.array([1.0, 1.0, 1.0])
    pad = cfg.bbox_margin * np.maximum(hi - lo, 1e-3)
    frame = NDCFrame(ref, cfg.near, cfg.far, lo - pad, hi + pad)
    return frame, clouds


def view_rays(views, frame: NDCFrame) -> RayBatch:
    """Every pixel of every view as one RayBatch."""
    parts = []
    for v in views:
        cam = v.camera
        pix = cam.pixel_centers()
        o, d, near, far, vd, _ = frame.rays(cam, pix)
        img = np.asarray(v.image, dtype=np.float64).reshape(-1, 3)
        if v.image.dtype == np.uint8:
            img = img / 255.0
        valid = v.depth.valid.ravel()
        gt = np.full(len(o), np.nan)
        if valid.any():
            gt[valid] = frame.depth_to_distance(cam, pix[valid], v.depth.values.ravel()[valid], o[valid])
        mask = valid & np.isfinite(gt)
        parts.append(RayBatch(o, d, near, far, vd, img, np.where(mask, gt, 0.0), mask))
    return RayBatch(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(RayBatch)))


@dataclass
class TrainResult:
    model: FieldModel
    frame: NDCFrame
    log: list
    initial_model: FieldModel = None


LOG_COLUMNS = ("iteration", "loss_total", "loss_rgb", "loss_depth", "train_psnr", "grid_dims", "wall_ms")


def initial_model(views, cfg: TrainConfig):
    frame, clouds = scene_frame(views, cfg)
    dims = milestone_dims(0, cfg, frame.bbox_max - frame.bbox_min)
    grid = frame.grid(dims)
    dtype = np.dtype(cfg.dtype)
    if cfg.init == "pointcloud":
        model = init_from_point_clouds(clouds, grid, cfg.channels, cfg.seed, dtype)
    else:
        model = random_model(grid, len(views), cfg.channels, cfg.seed, dtype)
    return model, frame


def train(views, cfg: TrainConfig, *, on_milestone=None, record_time: bool = False) -> TrainResult:
    """Fit a FieldModel to the given training views.

    ``views`` is a sequence of objects with ``camera``, ``image`` and
    ``depth`` attributes.  ``on_milestone(iteration, model, frame)`` is
    called after every upsampling.  Deterministic given ``cfg.seed``
    (``wall_ms`` is logged as 0 unless ``record_time``).
    """
    if len(views) < 1:
        raise InputError("need at least one training view")
    model, frame = initial_model(views, cfg)
    init_copy = model.copy()
    rays = view_rays(views, frame)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam()
    lrs = {"factors": cfg.lr_factors, "decoder": cfg.lr_decoder}
    extent = frame.bbox_max - frame.bbox_min
    rows = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        new_dims = upsample_schedule(it, cfg, extent)
        if new_dims is not None and tuple(new_dims) != model.grid.dims:
            new_dims = tuple(max(a, b) for a, b in zip(new_dims, model.grid.dims))
            model = upsample(model, new_dims)
            opt.reset(list(model.factor_parameters()))
            log.info("iteration %d: grid upsampled to %s", it, new_dims)
            if on_milestone is not None:
                on_milestone(it, model, frame)
        idx = rng.integers(0, len(rays), size=min(cfg.batch_size, len(rays)))
        batch = rays.subset(idx)
        try:
            loss, grads, parts = backward(model, batch, cfg, rng=rng if cfg.jitter else None)
        except NumericalError as exc:
            raise DivergenceError(f"training diverged at iteration {it}: {exc}", iteration=it) from exc
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            psnr = -10.0 * math.log10(parts.mse) if parts.mse > 0 else float("inf")
            rows.append({
                "iteration": it, "loss_total": loss, "loss_rgb": parts.rgb, "loss_depth": parts.depth,
                "train_psnr": psnr, "grid_dims": "x".join(map(str, model.grid.dims)),
                "wall_ms": round((time.perf_counter() - start) * 1000.0) if record_time else 0,
            })
            log.info("iteration %d loss %.6f psnr %.2f", it, loss, psnr)
        step(opt, model, grads, lrs)
    return TrainResult(model, frame, rows, init_copy)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)


__all__ = [
    "Adam", "LossWeights", "RayBatch", "TrainConfig", "TrainResult", "backward", "depth_loss",
    "fd_gradient", "format_config", "loss_value", "parse_config", "rgb_loss", "step", "total_loss",
    "train", "upsample_schedule",
]
