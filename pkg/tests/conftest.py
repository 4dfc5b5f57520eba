import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dgfield.field import GridSpec, random_model
from dgfield.geometry import CameraModel


def random_camera(rng, width=None, height=None):
    width = width or int(rng.integers(16, 640))
    height = height or int(rng.integers(16, 480))
    fx, fy = rng.uniform(20, 800, 2)
    K = np.array([[fx, rng.uniform(-2, 2), rng.uniform(0, width)],
                  [0, fy, rng.uniform(0, height)],
                  [0, 0, 1.0]])
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-5, 5, 3)
    return CameraModel(K, R, t, width, height)


def random_factor_model(rng, dims=(16, 16, 16), n=2, P=8, low=-0.5, high=1.0, dtype=np.float64):
    grid = GridSpec(dims, [-1, -1, -1], [1, 1, 1])
    model = random_model(grid, n, P, int(rng.integers(1 << 30)), dtype=dtype)
    for name, arr in model.parameters().items():
        if not name.startswith("decoder"):
            arr[...] = rng.uniform(low, high, arr.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


def gradient_instance(seed, dims=(16, 16, 16), n=2, P=8, R=8):
    """A random double-precision model plus a batch of rays crossing its box."""
    from dgfield.train import RayBatch

    rng = np.random.default_rng(seed)
    model = random_factor_model(rng, dims=dims, n=n, P=P)
    o = rng.uniform(-0.5, 0.5, (R, 3))
    o[:, 2] = -1.5
    d = rng.normal(size=(R, 3))
    d[:, 2] = 3.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    batch = RayBatch(o, d, np.full(R, 0.6), np.full(R, 3.2), d, rng.random((R, 3)), rng.random(R) * 2,
                     rng.random(R) < 0.7)
    return model, batch


def gradient_mismatches(model, batch, cfg, per_block=6, seed=0, h=1e-5):
    """Compare backward() against central differences.

    Checks ``per_block`` random entries and ``per_block`` entries with a
    nonzero analytic gradient in every parameter block.  Returns the list
    of failures as (name, index, fd, analytic).
    """
    from dgfield.train import backward, fd_gradient

    rng = np.random.default_rng(seed)
    _, grads, _ = backward(model, batch, cfg)
    bad = []
    checked = 0
    for name, arr in model.parameters().items():
        picks = [tuple(int(rng.integers(0, s)) for s in arr.shape) for _ in range(per_block)]
        nz = np.argwhere(grads[name] != 0)
        if len(nz):
            picks += [tuple(map(int, nz[i])) for i in rng.choice(len(nz), min(per_block, len(nz)), replace=False)]
        for idx in picks:
            fd = fd_gradient(model, batch, cfg, name, idx, h)
            an = float(grads[name][idx])
            checked += 1
            if abs(fd - an) > max(1e-4 * max(abs(fd), abs(an)), 1e-7):
                bad.append((name, idx, fd, an))
    return bad, checked


@pytest.fixture(scope="session")
def toy_views_16():
    """The toy scene ray-cast at 16x16 from its three training cameras."""
    from dgfield.dataset import View
    from dgfield.synth import raycast_view, toy_cameras, toy_scene

    scene = toy_scene()
    return [View(c, *raycast_view(scene, c)) for c in toy_cameras(16)[:3]]
