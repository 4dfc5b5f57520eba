"""Ray sampling, alpha compositing and the batched field renderer.

``render_rays`` is the workhorse: it evaluates a whole batch of rays in
one vectorized pass and can keep the intermediates needed by
``render_rays_backward`` to push color/depth gradients back onto every
trainable array of a FieldModel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderMLP, decode_color, encode_direction  # noqa: F401
from .errors import ContractError, InputError
from .field import MODES, FieldModel, GridSpec, lookup, mode_values
from .geometry import CameraModel, camera_rays, ndc_rays, pixel_to_world, to_ndc_space

DENSITY_SCALE = 25.0


@dataclass
class RaySamples:
    positions: np.ndarray
    deltas: np.ndarray
    distances: np.ndarray


@dataclass
class RenderedPixel:
    color: np.ndarray
    depth: float
    weights: np.ndarray
    final_transmittance: float


def stratified_distances(nears, fars, Q: int, rng=None):
    """Bin-centered (or jittered within each bin) distances, shape (R, Q)."""
    nears = np.asarray(nears, dtype=np.float64)
    fars = np.asarray(fars, dtype=np.float64)
    width = (fars - nears) / Q
    if rng is None:
        offs = np.broadcast_to(np.arange(Q) + 0.5, nears.shape + (Q,))
    else:
        offs = np.arange(Q) + rng.random(nears.shape + (Q,))
    return nears[..., None] + offs * width[..., None], np.broadcast_to(width[..., None], nears.shape + (Q,))


def sample_along_ray(ray, Q: int, near: float, far: float, jitter: bool = False, rng=None) -> RaySamples:
    if not far > near:
        raise InputError(f"degenerate sampling interval [{near}, {far}]")
    if Q < 1:
        raise InputError("need at least one sample")
    if jitter and rng is None:
        raise InputError("jittered sampling needs an rng")
    t, delta = stratified_distances(np.array(near), np.array(far), Q, rng if jitter else None)
    return RaySamples(ray.at(t), np.array(delta), t)


def composite(sigmas, colors, deltas) -> RenderedPixel:
    """Alpha-composite Q samples front to back over a black background."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not (len(sigmas) == len(colors) == len(deltas)):
        raise ContractError("sigmas, colors and deltas must have equal length")
    if np.any(sigmas < 0) or np.any(deltas <= 0):
        raise ContractError("densities must be >= 0 and step sizes > 0")
    weights, final = alpha_weights(sigmas * deltas)
    return RenderedPixel(weights @ colors, 0.0, weights, float(final))


def alpha_weights(optical_depth):
    """Weights ``T_q (1 - exp(-tau_q))`` and final transmittance along the last axis."""
    cum = np.cumsum(optical_depth, axis=-1)
    trans = np.exp(-(cum - optical_depth))
    weights = trans * -np.expm1(-optical_depth)
    return weights, np.exp(-cum[..., -1])


def expected_depth(weights, distances) -> float:
    return float(np.dot(weights, distances))


# ---------------------------------------------------------------------------
# batched renderer


@dataclass
class RenderOutput:
    colors: np.ndarray
    depths: np.ndarray
    weights: np.ndarray
    final_transmittance: np.ndarray
    distances: np.ndarray
    cache: dict = None


def render_rays(model: FieldModel, origins, dirs, nears, fars, Q: int, *, rng=None,
                viewdirs=None, density_scale: float = DENSITY_SCALE,
                keep_cache: bool = False) -> RenderOutput:
    """Render R rays with Q stratified samples each.

    ``rng`` enables jitter.  ``viewdirs`` (default ``dirs``) feeds the
    decoder.  Samples outside the grid's box have zero density; the decoder
    runs only on samples with nonzero weight, which is exact since the
    others contribute neither color nor gradient.
    """
    dtype = model.dtype
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = origins.shape[0]
    t, delta = stratified_distances(nears, fars, Q, rng)
    x = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    grid = model.grid
    inside = np.all((x >= grid.bbox_min) & (x <= grid.bbox_max), axis=-1)
    i0, f = lookup(grid, x)
    f = f.astype(dtype)

    dvec, dmat = mode_values(model.density, i0, f)
    pre = (dvec * dmat).sum(axis=(0, 1))
    live = inside & (pre > 0)
    sigma = np.where(live, pre, 0).astype(dtype)
    step = (density_scale * delta).astype(dtype)
    tau = sigma.reshape(R, Q) * step
    weights, final = alpha_weights(tau)

    active = np.flatnonzero(weights.ravel() > 0)
    ray_of = active // Q
    ia, fa = i0[active], f[active]
    avec, amat = mode_values(model.appearance, ia, fa)
    comps = (avec * amat).reshape(3 * model.n, -1).T
    feat = comps @ model.basis.T
    vd = dirs if viewdirs is None else np.asarray(viewdirs, dtype=np.float64)
    enc = encode_direction(vd).astype(dtype)
    c_act, mlp_cache = model.decoder.forward(feat, enc[ray_of], cache=True)

    colors = np.zeros((R * Q, 3), dtype=dtype)
    colors[active] = c_act
    colors = colors.reshape(R, Q, 3)
    rgb = np.einsum("rq,rqc->rc", weights, colors)
    depth = (weights * t).sum(axis=1)
    cache = None
    if keep_cache:
        cache = dict(
            R=R, Q=Q, t=t, step=step, tau=tau, weights=weights, colors=colors,
            i0=i0, f=f, dvec=dvec, dmat=dmat, live=live, active=active, ray_of=ray_of,
            avec=avec, amat=amat, comps=comps, mlp=mlp_cache,
        )
    return RenderOutput(rgb, depth, weights, final, t, cache)


def _scatter_family(grid_dims, n, i0, f, g_vec, g_mat, dtype):
    """Accumulate per-sample gradients of (vector, matrix) values onto the factors.

    ``g_vec``/``g_mat`` have shape (n, 3, N).  Summation order is fixed by
    ``np.bincount`` so results are deterministic.
    """
    out = {}
    views = np.arange(n)[:, None]
    for m, (vkey, mkey, axis, (a, b)) in enumerate(MODES):
        L = grid_dims[axis]
        ia, fa = i0[:, axis], f[:, axis]
        g = g_vec[:, m]
        idx = np.concatenate([views * L + ia, views * L + ia + 1], axis=1).ravel()
        w = np.concatenate([g * (1 - fa), g * fa], axis=1).ravel()
        out[vkey] = np.bincount(idx, weights=w, minlength=n * L).reshape(n, L).astype(dtype)

        La, Lb = grid_dims[a], grid_dims[b]
        pa, qa = i0[:, a], f[:, a]
        pb, qb = i0[:, b], f[:, b]
        g = g_mat[:, m]
        base = views * (La * Lb) + pa * Lb + pb
        idx = np.concatenate([base, base + Lb, base + 1, base + Lb + 1], axis=1).ravel()
        w = np.concatenate(
            [g * ((1 - qa) * (1 - qb)), g * (qa * (1 - qb)), g * ((1 - qa) * qb), g * (qa * qb)], axis=1
        ).ravel()
        out[mkey] = np.bincount(idx, weights=w, minlength=n * La * Lb).reshape(n, La, Lb).astype(dtype)
    return out


def render_rays_backward(model: FieldModel, out: RenderOutput, g_rgb, g_depth) -> dict:
    """Gradients of a scalar loss given dL/d(color) (R,3) and dL/d(depth) (R,)."""
    c = out.cache
    if c is None:
        raise ContractError("render_rays was not run with keep_cache=True")
    dtype = model.dtype
    R, Q = c["R"], c["Q"]
    g_rgb = np.asarray(g_rgb, dtype=dtype)
    g_depth = np.asarray(g_depth, dtype=dtype)
    weights, colors, tau, t = c["weights"], c["colors"], c["tau"], c["t"]

    # d/d weights, then through the transmittance recursion
    g_w = np.einsum("rqc,rc->rq", colors, g_rgb) + g_depth[:, None] * t
    gw_w = g_w * weights
    later = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w
    trans_next = np.exp(-np.cumsum(tau, axis=1))
    g_tau = g_w * trans_next - later
    g_pre = np.where(c["live"], (g_tau * c["step"]).ravel(), 0).astype(dtype)

    grads = {}
    n = model.n
    dens = _scatter_family(model.grid.dims, n, c["i0"], c["f"],
                           g_pre[None, None, :] * c["dmat"], g_pre[None, None, :] * c["dvec"], dtype)
    grads.update({f"density.{k}": v for k, v in dens.items()})

    active, ray_of = c["active"], c["ray_of"]
    g_col = (weights.ravel()[active][:, None] * g_rgb[ray_of]).astype(dtype)
    dec_grads, g_feat = model.decoder.backward(g_col, c["mlp"])
    grads.update({f"decoder.{k}": v.astype(dtype) for k, v in dec_grads.items()})
    grads["basis"] = (g_feat.T @ c["comps"]).astype(dtype)
    g_comp = (g_feat @ model.basis).T.reshape(n, 3, -1)
    app = _scatter_family(model.grid.dims, n, c["i0"][active], c["f"][active],
                          g_comp * c["amat"], g_comp * c["avec"], dtype)
    grads.update({f"appearance.{k}": v for k, v in app.items()})
    return grads


def render_pixel(model: FieldModel, ray, Q: int, near: float, far: float, jitter: bool = False,
                 rng=None, density_scale: float = DENSITY_SCALE) -> RenderedPixel:
    if not far > near:
        raise InputError(f"degenerate sampling interval [{near}, {far}]")
    if jitter and rng is None:
        raise InputError("jittered sampling needs an rng")
    out = render_rays(model, ray.origin[None], ray.direction[None], np.array([near]), np.array([far]),
                      Q, rng=rng if jitter else None, density_scale=density_scale)
    w = out.weights[0]
    return RenderedPixel(out.colors[0], float(out.depths[0]), w, float(out.final_transmittance[0]))


def ray_box_interval(origins, dirs, lo, hi):
    """Entry/exit distances of rays against an axis-aligned box (slab test).

    Rays that miss get ``near == far == 0``.  Entry is clamped at 0.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.fmin(t0, t1)
    tmax = np.fmax(t0, t1)
    # parallel rays: inside slab -> unbounded, outside -> empty
    par = dirs == 0
    in_slab = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(in_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(in_slab, np.inf, -np.inf), tmax)
    near = np.maximum(tmin.max(axis=-1), 0.0)
    far = tmax.min(axis=-1)
    hit = far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0)


@dataclass
class NDCFrame:
    """The shared space all views are rendered in.

    ``ref`` defines the NDC map (with its world-space ``near`` plane); samples
    are confined to the grid box and to NDC depth below ``1 - near / far``.
    """

    ref: CameraModel
    near: float
    far: float
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def to_record(self) -> dict:
        return {
            "ref": self.ref.to_record(), "near": self.near, "far": self.far,
            "bbox_min": np.asarray(self.bbox_min).tolist(), "bbox_max": np.asarray(self.bbox_max).tolist(),
        }

    @classmethod
    def from_record(cls, rec) -> "NDCFrame":
        return cls(CameraModel.from_record(rec["ref"]), float(rec["near"]), float(rec["far"]),
                   np.asarray(rec["bbox_min"], dtype=np.float64), np.asarray(rec["bbox_max"], dtype=np.float64))

    def rays(self, cam: CameraModel, pixels=None):
        """NDC rays for ``cam``'s pixels.

        Returns origins, unit directions, per-ray sample interval, the
        world-space view directions, and the NDC ray scale |d'| (ray length
        per unit of NDC depth).
        """
        pixels = cam.pixel_centers() if pixels is None else np.asarray(pixels, dtype=np.float64)
        o_w, d_w = camera_rays(cam, pixels)
        o, d = ndc_rays(o_w, d_w, self.ref, self.near)
        scale = np.linalg.norm(d, axis=-1)
        d = d / scale[:, None]
        near, far = ray_box_interval(o, d, self.bbox_min, self.bbox_max)
        cap = (1.0 - self.near / self.far) * scale
        far = np.minimum(far, cap)
        far = np.where(far > near, far, near)
        return o, d, near, far, d_w, scale

    def depth_to_distance(self, cam: CameraModel, pixels, depth, origins):
        """Ground-truth z-depths as distances along the NDC rays; NaN if unmappable."""
        x_w = pixel_to_world(cam, pixels, depth)
        z_ref = x_w @ self.ref.R[2] + self.ref.t[2]
        ok = z_ref >= self.near
        out = np.full(len(depth), np.nan)
        if np.any(ok):
            ndc = to_ndc_space(x_w[ok], self.ref, self.near)
            out[ok] = np.linalg.norm(ndc - origins[ok], axis=-1)
        return out

    def grid(self, dims) -> GridSpec:
        return GridSpec(dims, self.bbox_min, self.bbox_max)


def render_view(model: FieldModel, frame: NDCFrame, cam: CameraModel, Q: int,
                density_scale: float = DENSITY_SCALE, chunk: int = 4096):
    """Deterministic full-image render: (H, W, 3) colors and (H, W) NDC-ray depths."""
    o, d, near, far, vd, _ = frame.rays(cam)
    rgb = np.zeros((len(o), 3))
    depth = np.zeros(len(o))
    for s in range(0, len(o), chunk):
        sl = slice(s, s + chunk)
        out = render_rays(model, o[sl], d[sl], near[sl], far[sl], Q, viewdirs=vd[sl],
                          density_scale=density_scale)
        rgb[sl] = out.colors
        depth[sl] = out.depths
    return rgb.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)
