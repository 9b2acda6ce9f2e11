import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evograd.trust_region import (OutsideTrustRegion, TrustRegion, classify_convergence,
                                  fit_value_normalizer, from_search, movement_threshold,
                                  shift_to, shrink_to, to_search)

LO, HI = np.full(3, -5.0), np.full(3, 5.0)


@pytest.fixture(params=["tanh", "linear"])
def tr(request):
    return TrustRegion.from_bounds(LO, HI, map_kind=request.param)


def test_origin_maps_to_center(tr):
    assert np.array_equal(to_search(tr, np.zeros(3)), tr.center)
    assert np.array_equal(from_search(tr, tr.center), np.zeros(3))


def test_tanh_asymptote():
    tr = TrustRegion.from_bounds(LO, HI, "tanh")
    assert np.allclose(to_search(tr, np.full(3, 50.0)), tr.center + tr.scale)
    with pytest.raises(OutsideTrustRegion):
        from_search(tr, tr.center + tr.scale)


def test_linear_identity_configuration():
    tr = TrustRegion(np.zeros(3), np.ones(3), LO, HI, "linear")
    u = np.array([0.3, -0.2, 0.1])
    assert np.array_equal(to_search(tr, u), u)


def test_linear_clips_and_rejects_outside():
    tr = TrustRegion.from_bounds(LO, HI, "linear")
    assert np.array_equal(to_search(tr, np.full(3, 4.0)), HI)
    with pytest.raises(OutsideTrustRegion):
        from_search(tr, np.full(3, 6.0))


def test_round_trip_1000_points(tr):
    g = np.random.default_rng(0)
    X = g.uniform(-4.99, 4.99, size=(1000, 3))
    assert np.max(np.abs(to_search(tr, from_search(tr, X)) - X)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(u=st.lists(st.floats(-8, 8), min_size=3, max_size=3), kind=st.sampled_from(["tanh", "linear"]))
def test_from_to_is_identity_on_normalized_space(u, kind):
    tr = TrustRegion(np.array([0.5, -1.0, 2.0]), np.array([1.0, 2.0, 0.5]), LO, HI, kind)
    u = np.array(u)
    x = to_search(tr, u)
    assert np.all(x >= LO) and np.all(x <= HI)
    if kind == "linear" and np.any((tr.center + tr.scale * u < LO) | (tr.center + tr.scale * u > HI)):
        return  # clipped, not invertible by design
    if kind == "tanh" and np.any(np.abs(np.tanh(u)) > 1 - 1e-9):
        return  # x is numerically on the asymptote
    assert np.allclose(from_search(tr, x), u, atol=1e-9 / (1 - np.tanh(np.abs(u)).max() ** 2 + 1e-300)
                       if kind == "tanh" else 1e-9)


def test_shrink_examples(tr):
    best = np.array([0.3, -0.2, 0.4])  # far enough from the bounds that no clamping occurs
    one = shrink_to(tr, best, 0.9)
    assert np.array_equal(one.scale, tr.scale * 0.9)
    assert np.array_equal(one.center, best)
    assert one.generation == tr.generation + 1
    two = shrink_to(one, best, 0.9)
    assert np.allclose(two.scale, tr.scale * 0.81, rtol=0, atol=1e-15)


def test_shift_keeps_scale_bit_identical(tr):
    tr = shrink_to(tr, np.zeros(3), 0.5)
    moved = shift_to(tr, np.array([0.1, 0.2, 0.3]))
    assert np.array_equal(moved.scale, tr.scale)
    assert np.array_equal(moved.center, [0.1, 0.2, 0.3])


def test_k_shrinks_compose_exactly():
    tr = TrustRegion.from_bounds(LO, HI, "tanh")
    expected = tr.scale.copy()
    for _ in range(7):
        tr = shrink_to(tr, np.zeros(3), 0.9)
        expected = expected * 0.9
    assert np.array_equal(tr.scale, expected)


@settings(max_examples=80, deadline=None)
@given(best=st.lists(st.floats(-4.999, 4.999), min_size=3, max_size=3), gamma=st.floats(0.05, 1.0))
def test_tanh_image_stays_in_domain(best, gamma):
    tr = TrustRegion.from_bounds(LO, HI, "tanh")
    tr = shrink_to(tr, np.array(best), gamma)
    assert np.all(tr.center - tr.scale >= LO - 1e-12)
    assert np.all(tr.center + tr.scale <= HI + 1e-12)
    assert np.all(np.abs(np.array(best) - tr.center) <= tr.scale + 1e-12)


def test_tanh_center_is_clamped_near_edges():
    tr = shrink_to(TrustRegion.from_bounds(LO, HI, "tanh"), np.array([4.9, 0.0, 0.0]), 0.5)
    assert tr.center[0] == pytest.approx(2.5)
    assert tr.center[1] == 0.0


def test_shrink_rejects_bad_gamma(tr):
    with pytest.raises(ValueError):
        shrink_to(tr, np.zeros(3), 1.5)


def test_classify_examples():
    assert classify_convergence(1.1, 25).kind == "boundary"
    assert classify_convergence(0.0, 25).kind == "interior"
    assert classify_convergence(0.39, 4).kind == "interior"
    assert classify_convergence(0.4, 4).kind == "boundary"
    assert movement_threshold(25) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        classify_convergence(-1.0, 2)


def test_normalizer_quantile_band():
    ys = np.arange(101.0)
    nz = fit_value_normalizer(ys, 0.1)
    assert nz.clip_low == pytest.approx(10.0) and nz.clip_high == pytest.approx(90.0)
    assert nz.shift == pytest.approx(50.0) and nz.scale == pytest.approx(80.0)


def test_normalizer_constant_values():
    nz = fit_value_normalizer([3.0, 3.0, 3.0])
    assert nz.shift == 3.0 and nz.scale == 1e-12


def test_normalizer_median_zero_on_retained():
    ys = np.random.default_rng(3).lognormal(size=500)
    nz = fit_value_normalizer(ys, 0.1)
    kept = ys[(ys >= nz.clip_low) & (ys <= nz.clip_high)]
    assert abs(np.median(nz(np.clip(ys, nz.clip_low, nz.clip_high)))) <= 1e-9
    assert kept.size > 0
    # affine and invertible
    assert np.allclose(nz.inverse(nz(ys)), ys)
    assert math.isclose(float(nz(nz.shift + nz.scale)), 1.0)


def test_normalizer_needs_two_values():
    with pytest.raises(ValueError):
        fit_value_normalizer([1.0])
