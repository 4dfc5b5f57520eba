"""Vector-matrix factorized density and appearance grids, one component per view."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderMLP
from .errors import ConstructionError, MaterializationError, OutOfBoundsError, UnsupportedError

# (vector key, matrix key, vector axis, matrix axes)
MODES = (
    ("vX", "MYZ", 0, (1, 2)),
    ("vY", "MXZ", 1, (0, 2)),
    ("vZ", "MXY", 2, (0, 1)),
)
FACTOR_KEYS = ("vX", "vY", "vZ", "MYZ", "MXZ", "MXY")
MODE_NAMES = {"X": 0, "Y": 1, "Z": 2}

RANDOM_LOW, RANDOM_HIGH = 0.05, 0.35
DENSE_CAP = 64**3


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        lo = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"grid dims must be three integers >= 2, got {dims}")
        if not np.all(lo < hi):
            raise ValueError("bbox min must be below max on every axis")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.bbox_max - self.bbox_min

    def with_dims(self, dims) -> "GridSpec":
        return GridSpec(dims, self.bbox_min, self.bbox_max)

    def to_index(self, x):
        """Continuous node coordinates; node i sits at ``min + i * extent / (dim - 1)``."""
        scale = (np.asarray(self.dims) - 1) / self.extent
        return (np.asarray(x, dtype=np.float64) - self.bbox_min) * scale

    def contains(self, x):
        x = np.asarray(x)
        return np.all((x >= self.bbox_min) & (x <= self.bbox_max), axis=-1)

    def node_position(self, idx):
        return self.bbox_min + np.asarray(idx, dtype=np.float64) * self.extent / (np.asarray(self.dims) - 1)


@dataclass
class DensityFactor:
    vX: np.ndarray
    vY: np.ndarray
    vZ: np.ndarray
    MYZ: np.ndarray
    MXZ: np.ndarray
    MXY: np.ndarray


class AppearanceFactor(DensityFactor):
    pass


def factor_shapes(dims, n):
    I, J, K = dims
    return {
        "vX": (n, I), "vY": (n, J), "vZ": (n, K),
        "MYZ": (n, J, K), "MXZ": (n, I, K), "MXY": (n, I, J),
    }


@dataclass
class FieldModel:
    """The fused scene.

    Factor arrays are stacked over views: ``density["MYZ"][r]`` is view r's
    YZ-plane matrix.  ``basis`` is P x 3n with column ``3r + m`` paired with
    mode m (X, Y, Z) of view r.
    """

    grid: GridSpec
    density: dict
    appearance: dict
    basis: np.ndarray
    decoder: DecoderMLP = field(default=None)

    def __post_init__(self):
        shapes = factor_shapes(self.grid.dims, self.n)
        for family in (self.density, self.appearance):
            for key, shape in shapes.items():
                if family[key].shape != shape:
                    raise ValueError(f"{key} has shape {family[key].shape}, expected {shape}")
        if self.basis.shape[1] != 3 * self.n:
            raise ValueError("basis must have 3n columns")
        if self.decoder is None:
            self.decoder = DecoderMLP.zeros(self.P, dtype=self.dtype)

    @property
    def n(self) -> int:
        return self.density["vX"].shape[0]

    @property
    def P(self) -> int:
        return self.basis.shape[0]

    @property
    def dtype(self):
        return self.basis.dtype

    def density_factor(self, r: int) -> DensityFactor:
        return DensityFactor(**{k: self.density[k][r] for k in FACTOR_KEYS})

    def appearance_factor(self, r: int) -> AppearanceFactor:
        return AppearanceFactor(**{k: self.appearance[k][r] for k in FACTOR_KEYS})

    def factor_parameters(self) -> dict:
        out = {f"density.{k}": self.density[k] for k in FACTOR_KEYS}
        out.update({f"appearance.{k}": self.appearance[k] for k in FACTOR_KEYS})
        return out

    def parameters(self) -> dict:
        """Every trainable array, by name; the arrays are live references."""
        out = self.factor_parameters()
        out["basis"] = self.basis
        out.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return out

    def copy(self) -> "FieldModel":
        return FieldModel(
            self.grid,
            {k: v.copy() for k, v in self.density.items()},
            {k: v.copy() for k, v in self.appearance.items()},
            self.basis.copy(),
            self.decoder.copy(),
        )

    def astype(self, dtype) -> "FieldModel":
        return FieldModel(
            self.grid,
            {k: v.astype(dtype) for k, v in self.density.items()},
            {k: v.astype(dtype) for k, v in self.appearance.items()},
            self.basis.astype(dtype),
            self.decoder.astype(dtype),
        )

    def submodel(self, views) -> "FieldModel":
        """Model restricted to a subset of views (their B columns kept)."""
        views = list(views)
        cols = [3 * r + m for r in views for m in range(3)]
        return FieldModel(
            self.grid,
            {k: v[views].copy() for k, v in self.density.items()},
            {k: v[views].copy() for k, v in self.appearance.items()},
            self.basis[:, cols].copy(),
            self.decoder.copy(),
        )


# ---------------------------------------------------------------------------
# construction


def empty_model(grid: GridSpec, n: int, P: int, dtype=np.float32) -> FieldModel:
    shapes = factor_shapes(grid.dims, n)
    return FieldModel(
        grid,
        {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()},
        {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()},
        np.zeros((P, 3 * n), dtype=dtype),
        DecoderMLP.zeros(P, dtype=dtype),
    )


def random_model(grid: GridSpec, n: int, P: int, rng_seed: int, dtype=np.float32) -> FieldModel:
    """Every factor, B and decoder drawn at random (no point-cloud prior)."""
    rng = np.random.default_rng(rng_seed)
    shapes = factor_shapes(grid.dims, n)
    density = {k: rng.uniform(RANDOM_LOW, RANDOM_HIGH, s).astype(dtype) for k, s in shapes.items()}
    appearance = {k: rng.uniform(RANDOM_LOW, RANDOM_HIGH, s).astype(dtype) for k, s in shapes.items()}
    basis = rng.uniform(RANDOM_LOW, RANDOM_HIGH, (P, 3 * n)).astype(dtype)
    return FieldModel(grid, density, appearance, basis, DecoderMLP.init(P, rng, dtype))


def nearest_nodes(grid: GridSpec, points) -> np.ndarray:
    u = grid.to_index(points)
    return np.clip(np.rint(u).astype(np.int64), 0, np.asarray(grid.dims) - 1)


def _check_inside(cloud, grid: GridSpec, view: int):
    pts = np.asarray(cloud.positions)
    if len(pts) == 0:
        return
    outside = ~grid.contains(pts)
    if np.any(outside):
        bad = pts[np.argmax(outside)]
        raise ConstructionError(
            f"view {view}: point {bad.tolist()} lies outside the grid bounding box"
        )


def project_colors(cloud, grid: GridSpec) -> dict:
    """Per-plane mean RGB of the points landing on each matrix element.

    Returns ``{matrix_key: (mean_rgb[L1, L2, 3], count[L1, L2])}``; elements
    without points hold zeros.
    """
    idx = nearest_nodes(grid, cloud.positions)
    colors = np.asarray(cloud.colors, dtype=np.float64)
    out = {}
    for _, mkey, _, (a, b) in MODES:
        La, Lb = grid.dims[a], grid.dims[b]
        flat = idx[:, a] * Lb + idx[:, b]
        count = np.bincount(flat, minlength=La * Lb).astype(np.float64)
        sums = np.stack([np.bincount(flat, weights=colors[:, c], minlength=La * Lb) for c in range(3)], -1)
        mean = np.divide(sums, count[:, None], out=np.zeros_like(sums), where=count[:, None] > 0)
        out[mkey] = (mean.reshape(La, Lb, 3), count.reshape(La, Lb))
    return out


def init_from_point_clouds(clouds, grid: GridSpec, P: int, rng_seed: int, dtype=np.float32) -> FieldModel:
    """Indicator density factors and mean-color appearance matrices, one set per cloud.

    Each point is assigned to its nearest grid node on every axis.  Density
    vectors and matrices hold 1 wherever a point projects, 0 elsewhere.  An
    appearance matrix element holds the mean gray level (R+G+B)/3 of its
    points; appearance vectors, B and the decoder are seeded at random.
    """
    if not clouds:
        raise ConstructionError("at least one point cloud is required")
    for r, cloud in enumerate(clouds):
        _check_inside(cloud, grid, r)
    n = len(clouds)
    rng = np.random.default_rng(rng_seed)
    model = empty_model(grid, n, P, dtype)
    for r, cloud in enumerate(clouds):
        if len(cloud) == 0:
            continue
        idx = nearest_nodes(grid, cloud.positions)
        for vkey, mkey, axis, (a, b) in MODES:
            model.density[vkey][r, idx[:, axis]] = 1
            model.density[mkey][r, idx[:, a], idx[:, b]] = 1
        for mkey, (mean, _) in project_colors(cloud, grid).items():
            model.appearance[mkey][r] = mean.mean(axis=-1)
    for vkey, _, _, _ in MODES:
        model.appearance[vkey][...] = rng.uniform(RANDOM_LOW, RANDOM_HIGH, model.appearance[vkey].shape)
    model.basis[...] = rng.uniform(RANDOM_LOW, RANDOM_HIGH, model.basis.shape)
    model.decoder = DecoderMLP.init(P, rng, dtype)
    return model


# ---------------------------------------------------------------------------
# interpolation


def _axis_lookup(u, length):
    i0 = np.clip(np.floor(u).astype(np.int64), 0, length - 2)
    return i0, u - i0


def lookup(grid: GridSpec, x):
    """Lower node index and fractional offset per axis for each point."""
    u = grid.to_index(x)
    dims = np.asarray(grid.dims)
    u = np.clip(u, 0, dims - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
    return i0, u - i0


def interp_vector(v, i0, f):
    """Linear interpolation of ``v[..., L]`` along its last axis."""
    a = v[..., i0]
    return a + f * (v[..., i0 + 1] - a)


def interp_matrix(M, ia, fa, ib, fb):
    """Bilinear interpolation of ``M[..., La, Lb]`` over its last two axes."""
    m00 = M[..., ia, ib]
    m10 = M[..., ia + 1, ib]
    m01 = M[..., ia, ib + 1]
    m11 = M[..., ia + 1, ib + 1]
    top = m00 + fa * (m10 - m00)
    bot = m01 + fa * (m11 - m01)
    return top + fb * (bot - top)


def _require_inside(grid: GridSpec, x):
    if not np.all(grid.contains(x)):
        raise OutOfBoundsError("query point outside the grid bounding box")


def component_interp(v, M, x, grid: GridSpec, mode="X"):
    """Value of one rank-1 component ``v o M`` at continuous location(s) x."""
    x = np.asarray(x, dtype=np.float64)
    _require_inside(grid, x)
    m = MODE_NAMES[mode] if isinstance(mode, str) else int(mode)
    _, _, axis, (a, b) = MODES[m]
    i0, f = lookup(grid, x)
    return interp_vector(np.asarray(v), i0[..., axis], f[..., axis]) * interp_matrix(
        np.asarray(M), i0[..., a], f[..., a], i0[..., b], f[..., b]
    )


def mode_values(family: dict, i0, f):
    """Interpolated vector and matrix values for all views and modes.

    Returns two arrays of shape (n, 3, N).
    """
    vec, mat = [], []
    for vkey, mkey, axis, (a, b) in MODES:
        vec.append(interp_vector(family[vkey], i0[:, axis], f[:, axis]))
        mat.append(interp_matrix(family[mkey], i0[:, a], f[:, a], i0[:, b], f[:, b]))
    return np.stack(vec, axis=1), np.stack(mat, axis=1)


def density_preactivation(model: FieldModel, x):
    """Summed density components before rectification (no bbox check)."""
    x = np.atleast_2d(x)
    i0, f = lookup(model.grid, x)
    f = f.astype(model.dtype)
    vec, mat = mode_values(model.density, i0, f)
    return (vec * mat).sum(axis=(0, 1))


def sample_density(model: FieldModel, x):
    """Rectified density max(0, sum over views and modes) at point(s) x."""
    x = np.asarray(x, dtype=np.float64)
    _require_inside(model.grid, x)
    sigma = np.maximum(density_preactivation(model, x.reshape(-1, 3)), 0)
    return sigma.reshape(x.shape[:-1])


def appearance_components(model: FieldModel, x):
    """Stacked component values, shape (N, 3n), ordered view-major then mode."""
    i0, f = lookup(model.grid, np.atleast_2d(x))
    f = f.astype(model.dtype)
    vec, mat = mode_values(model.appearance, i0, f)
    comp = vec * mat
    return comp.reshape(3 * model.n, -1).T


def sample_appearance(model: FieldModel, x):
    """P-channel feature ``B @ [A_{c,r}^m(x)]``."""
    x = np.asarray(x, dtype=np.float64)
    _require_inside(model.grid, x)
    feat = appearance_components(model, x.reshape(-1, 3)) @ model.basis.T
    return feat.reshape(x.shape[:-1] + (model.P,))


# ---------------------------------------------------------------------------
# resolution and accounting


def _resample_axis(arr, axis, new_len):
    old_len = arr.shape[axis]
    if new_len == old_len:
        return arr.copy()
    u = np.arange(new_len) * ((old_len - 1) / (new_len - 1))
    i0, f = _axis_lookup(u, old_len)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new_len
    f = f.reshape(shape).astype(arr.dtype)
    return a + f * (b - a)


def upsample(model: FieldModel, new_dims) -> FieldModel:
    """Linearly resample vectors and bilinearly resample matrices onto new_dims."""
    new_dims = tuple(int(d) for d in new_dims)
    if any(nd < od for nd, od in zip(new_dims, model.grid.dims)):
        raise UnsupportedError(f"cannot shrink grid from {model.grid.dims} to {new_dims}")
    grid = model.grid.with_dims(new_dims)

    def resample(family):
        out = {}
        for vkey, mkey, axis, (a, b) in MODES:
            out[vkey] = _resample_axis(family[vkey], 1, new_dims[axis])
            out[mkey] = _resample_axis(_resample_axis(family[mkey], 1, new_dims[a]), 2, new_dims[b])
        return out

    return FieldModel(grid, resample(model.density), resample(model.appearance),
                      model.basis.copy(), model.decoder.copy())


def param_count(model_or_dims, n=None, P=None):
    """(factorized scalar count, dense-grid equivalent, ratio).

    Accepts a FieldModel, or raw ``dims, n, P`` so large configurations can
    be counted without allocating them.
    """
    if isinstance(model_or_dims, FieldModel):
        model = model_or_dims
        dims, n, P = model.grid.dims, model.n, model.P
        factorized = sum(a.size for a in model.parameters().values())
    else:
        dims = tuple(model_or_dims)
        shapes = factor_shapes(dims, n)
        factors = 2 * sum(int(np.prod(s)) for s in shapes.values())
        decoder = sum(int(np.prod(s)) for s in DecoderMLP.shapes(P).values())
        factorized = factors + 3 * n * P + decoder
    dense = int(np.prod(dims)) * (P + 1)
    return factorized, dense, factorized / dense


def dense_reconstruct(model: FieldModel, cap: int = DENSE_CAP):
    """Materialize the voxel tensors voxel by voxel.

    Returns the density tensor before rectification (I, J, K) and the
    appearance tensor (I, J, K, P).  Test oracle only.
    """
    I, J, K = model.grid.dims
    if I * J * K > cap:
        raise MaterializationError(f"{I}x{J}x{K} exceeds the materialization cap of {cap} voxels")
    d, a = model.density, model.appearance
    dens = np.zeros((I, J, K), dtype=np.float64)
    comps = np.zeros((I, J, K, 3 * model.n), dtype=np.float64)
    for r in range(model.n):
        dens += np.einsum("i,jk->ijk", d["vX"][r], d["MYZ"][r])
        dens += np.einsum("j,ik->ijk", d["vY"][r], d["MXZ"][r])
        dens += np.einsum("k,ij->ijk", d["vZ"][r], d["MXY"][r])
        comps[..., 3 * r] = np.einsum("i,jk->ijk", a["vX"][r], a["MYZ"][r])
        comps[..., 3 * r + 1] = np.einsum("j,ik->ijk", a["vY"][r], a["MXZ"][r])
        comps[..., 3 * r + 2] = np.einsum("k,ij->ijk", a["vZ"][r], a["MXY"][r])
    app = comps @ model.basis.T.astype(np.float64)
    return dens, app
