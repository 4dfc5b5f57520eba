import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from dgfield.decoder import DecoderMLP, decode_color, encode_direction
from dgfield.errors import ContractError, InputError
from dgfield.field import GridSpec, empty_model
from dgfield.geometry import Ray
from dgfield.render import (
    alpha_weights, composite, expected_depth, ray_box_interval, render_pixel, render_rays, sample_along_ray,
)

from conftest import random_factor_model

Z_RAY = Ray([0, 0, 0], [0, 0, 1])


def test_sample_along_ray_single_and_stratified():
    s = sample_along_ray(Z_RAY, 1, 0.2, 1.0)
    np.testing.assert_allclose(s.distances, [0.6])
    np.testing.assert_allclose(s.deltas, [0.8])
    s = sample_along_ray(Z_RAY, 4, 0.0, 1.0)
    np.testing.assert_allclose(s.distances, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(s.deltas, 0.25)
    np.testing.assert_allclose(s.positions[:, 2], s.distances)
    with pytest.raises(InputError):
        sample_along_ray(Z_RAY, 4, 1.0, 1.0)


def test_jittered_samples_stay_in_their_bins():
    rng = np.random.default_rng(3)
    edges = np.linspace(0.5, 2.5, 9)
    for _ in range(10_000 // 100):
        for _ in range(100):
            t = sample_along_ray(Z_RAY, 8, 0.5, 2.5, jitter=True, rng=rng).distances
            assert np.all((t >= edges[:-1]) & (t <= edges[1:]))
    a = sample_along_ray(Z_RAY, 8, 0, 1, jitter=False).distances
    b = sample_along_ray(Z_RAY, 8, 0, 1, jitter=False).distances
    np.testing.assert_array_equal(a, b)


def test_decoder_neutral_and_deterministic(rng):
    zero = DecoderMLP.zeros(27, dtype=np.float64)
    np.testing.assert_array_equal(decode_color(rng.random(27), [0, 0, 1], zero), [0.5, 0.5, 0.5])
    dec = DecoderMLP.init(27, np.random.default_rng(5), dtype=np.float64)
    f, d = rng.random(27), np.array([0.6, 0, 0.8])
    c = decode_color(f, d, dec)
    np.testing.assert_array_equal(c, decode_color(f, d, DecoderMLP.init(27, np.random.default_rng(5), np.float64)))
    assert np.all((c > 0) & (c < 1))
    assert encode_direction(d).shape == (15,)


def test_decoder_lipschitz_bound(rng):
    for seed in range(5):
        dec = DecoderMLP.init(8, np.random.default_rng(seed), dtype=np.float64)
        for W in (dec.W1, dec.W2, dec.W3):
            W *= 3.0
        L = dec.lipschitz_bound()
        for _ in range(50):
            f = rng.normal(size=8)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            eps = rng.normal(size=8) * 10.0 ** rng.uniform(-6, 0)
            diff = np.linalg.norm(decode_color(f + eps, d, dec) - decode_color(f, d, dec))
            assert diff <= L * np.linalg.norm(eps) * (1 + 1e-9)


def test_composite_empty_space():
    px = composite(np.zeros(5), np.random.default_rng(0).random((5, 3)), np.full(5, 0.1))
    np.testing.assert_array_equal(px.color, 0)
    np.testing.assert_array_equal(px.weights, 0)
    assert px.final_transmittance == 1.0


def test_composite_opaque_first_sample():
    colors = np.array([[0.2, 0.4, 0.9], [1, 1, 1], [0, 1, 0]])
    px = composite(np.array([500.0, 3.0, 7.0]), colors, np.array([0.1, 0.1, 0.1]))
    np.testing.assert_allclose(px.color, colors[0], atol=1e-9)
    assert px.weights[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("sigma,L,Q", [(0.5, 2.0, 7), (3.0, 1.0, 64), (20.0, 0.3, 3)])
def test_composite_constant_medium_closed_form(sigma, L, Q):
    c = np.array([0.3, 0.7, 0.1])
    px = composite(np.full(Q, sigma), np.tile(c, (Q, 1)), np.full(Q, L / Q))
    np.testing.assert_allclose(px.color, c * (1 - np.exp(-sigma * L)), atol=1e-9)


def test_composite_contract_violations():
    with pytest.raises(ContractError):
        composite(np.array([-1.0]), np.zeros((1, 3)), np.array([0.1]))
    with pytest.raises(ContractError):
        composite(np.array([1.0]), np.zeros((1, 3)), np.array([0.0]))
    with pytest.raises(ContractError):
        composite(np.array([1.0, 2.0]), np.zeros((1, 3)), np.array([0.1]))


nonneg = arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e3))


@settings(max_examples=300, deadline=None)
@given(nonneg, st.floats(1e-4, 1.0))
def test_partition_of_unity_and_monotone_transmittance(sigmas, delta):
    w, final = alpha_weights(sigmas * delta)
    assert np.all(w >= 0)
    assert abs(w.sum() + final - 1.0) <= 1e-6
    # transmittance in front of each sample, recovered from the weights
    trans = final + np.cumsum(w[::-1])[::-1]
    assert np.all(np.diff(trans) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(nonneg, st.integers(0, 39), st.floats(0, 100))
def test_occlusion_ordering(sigmas, k, bump):
    k = k % len(sigmas)
    w0, _ = alpha_weights(sigmas * 0.05)
    s2 = sigmas.copy()
    s2[k] += bump
    w1, _ = alpha_weights(s2 * 0.05)
    assert np.all(w1[k + 1:] <= w0[k + 1:] + 1e-15)


def test_expected_depth_examples():
    assert expected_depth(np.array([1.0]), np.array([0.3])) == pytest.approx(0.3)
    assert expected_depth(np.zeros(4), np.linspace(0, 1, 4)) == 0.0


def test_expected_depth_matches_quadrature():
    sigma, a, b, Q = 2.5, 0.5, 2.0, 256
    s = sample_along_ray(Z_RAY, Q, a, b)
    w, _ = alpha_weights(np.full(Q, sigma) * s.deltas)
    got = expected_depth(w, s.distances)
    oracle, _ = quad(lambda t: t * sigma * np.exp(-sigma * (t - a)), a, b)
    assert abs(got - oracle) <= 1e-4


def test_refinement_halves_error():
    sigma, L = 4.0, 1.0

    def color(t):
        return np.stack([np.sin(3 * t), t**2, np.ones_like(t) * 0.5], -1)

    exact = np.array([quad(lambda t, i=i: sigma * np.exp(-sigma * t) * color(np.array([t]))[0, i], 0, L)[0]
                      for i in range(3)])
    errs = []
    for Q in (16, 32, 64, 128):
        s = sample_along_ray(Z_RAY, Q, 0, L)
        px = composite(np.full(Q, sigma), color(s.distances), s.deltas)
        errs.append(np.max(np.abs(px.color - exact)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > 1.8), ratios


def test_render_pixel_zero_model():
    model = empty_model(GridSpec((4, 4, 4), [-1, -1, 0], [1, 1, 1]), 2, 4, dtype=np.float64)
    px = render_pixel(model, Z_RAY, 16, 0.0, 1.0)
    np.testing.assert_array_equal(px.color, 0)
    assert px.depth == 0 and px.final_transmittance == 1


def test_render_pixel_opaque_slab_depth():
    grid = GridSpec((4, 4, 401), [-1, -1, 0], [1, 1, 1])
    model = empty_model(grid, 1, 4, dtype=np.float64)
    model.density["vZ"][0, 200:] = 1e3
    model.density["MXY"][0] = 1.0
    Q = 50
    px = render_pixel(model, Z_RAY, Q, 0.0, 1.0)
    assert abs(px.depth - 0.5) <= 1.0 / Q
    assert px.weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_render_pixel_deterministic(rng):
    model = random_factor_model(rng, dims=(8, 8, 8), n=2, P=4, low=0, high=0.5)
    ray = Ray([0.1, -0.2, -1], np.array([0.1, 0.2, 1.0]) / np.linalg.norm([0.1, 0.2, 1.0]))
    a = render_pixel(model, ray, 32, 0.2, 2.5)
    b = render_pixel(model, ray, 32, 0.2, 2.5)
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.depth == b.depth and a.final_transmittance == b.final_transmittance
    assert abs(a.weights.sum() + a.final_transmittance - 1) <= 1e-6


def test_render_pixel_matches_manual_pipeline(rng):
    from dgfield.field import sample_appearance, sample_density
    model = random_factor_model(rng, dims=(8, 8, 8), n=2, P=4, low=0, high=0.5)
    ray = Ray([0, 0, -0.9], [0, 0, 1])
    Q = 12
    s = sample_along_ray(ray, Q, 0.0, 1.8)
    sig = sample_density(model, s.positions)
    cols = decode_color(sample_appearance(model, s.positions), ray.direction, model.decoder)
    ref = composite(sig * 25.0, cols, s.deltas)
    got = render_pixel(model, ray, Q, 0.0, 1.8)
    np.testing.assert_allclose(got.color, ref.color, atol=1e-12)
    assert got.depth == pytest.approx(expected_depth(ref.weights, s.distances), abs=1e-12)


def test_outside_box_samples_have_no_density(rng):
    model = random_factor_model(rng, dims=(6, 6, 6), n=1, P=4, low=0.5, high=1.0)
    ray = Ray([0, 0, -5], [0, 0, 1])
    px = render_pixel(model, ray, 16, 0.0, 3.0)
    np.testing.assert_array_equal(px.weights, 0)


def test_ray_box_interval():
    o = np.array([[0.0, 0, -2], [5.0, 5, -2], [0.0, 0, 0]])
    d = np.array([[0.0, 0, 1], [0.0, 0, 1], [1.0, 0, 0]])
    near, far = ray_box_interval(o, d, np.array([-1.0, -1, -1]), np.array([1.0, 1, 1]))
    np.testing.assert_allclose(near, [1, 0, 0])
    np.testing.assert_allclose(far, [3, 0, 1])
    # axis-parallel rays outside the slab miss without producing inf
    near, far = ray_box_interval(np.array([[2.0, 0, -2]]), np.array([[0.0, 0, 1]]), -np.ones(3), np.ones(3))
    assert near[0] == far[0] == 0.0


def test_batched_render_matches_single(rng):
    model = random_factor_model(rng, dims=(8, 8, 8), n=2, P=4, low=0, high=0.5)
    o = rng.uniform(-0.5, 0.5, (5, 3))
    o[:, 2] = -1.2
    d = np.tile([0.0, 0.0, 1.0], (5, 1))
    out = render_rays(model, o, d, np.full(5, 0.1), np.full(5, 2.3), 16)
    for i in range(5):
        px = render_pixel(model, Ray(o[i], d[i]), 16, 0.1, 2.3)
        np.testing.assert_allclose(out.colors[i], px.color, atol=1e-14)
