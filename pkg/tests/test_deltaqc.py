import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipcert.deltaqc import (ACTIVE, INACTIVE, UNKNOWN, AdmissibilityError, global_slope_bounds,
                             layer_slope_bounds, qc_form, qc_matrix, relu_partition, slope_bounds_smooth)
from lipcert.network import Activation, InputRegion, random_network
from lipcert.oracle import grid_slope_extrema
from lipcert.relaxation import IntervalError, propagate_bounds

TANH = Activation("tanh")
SIGMOID = Activation("sigmoid")


def test_tanh_symmetric_interval():
    a, b = slope_bounds_smooth(TANH, -1.0, 1.0)
    assert a[0] == pytest.approx(1 - np.tanh(1.0) ** 2, rel=1e-14)
    assert a[0] == pytest.approx(0.41997, abs=1e-5)
    assert b[0] == 1.0
    ga, gb = grid_slope_extrema(TANH, -1.0, 1.0, 1_000_000)
    assert abs(ga - a[0]) < 1e-6 and abs(gb - b[0]) < 1e-6


def test_tanh_positive_interval():
    a, b = slope_bounds_smooth(TANH, 1.0, 2.0)
    assert a[0] == pytest.approx(TANH.derivative(2.0))
    assert b[0] == pytest.approx(TANH.derivative(1.0))
    ga, gb = grid_slope_extrema(TANH, 1.0, 2.0, 1_000_000)
    assert abs(ga - a[0]) < 1e-6 and abs(gb - b[0]) < 1e-6


@pytest.mark.parametrize("act", [TANH, SIGMOID])
def test_degenerate_interval(act):
    a, b = slope_bounds_smooth(act, 0.7, 0.7)
    assert a[0] == b[0] == pytest.approx(act.derivative(0.7))


@settings(max_examples=100, deadline=None)
@given(act=st.sampled_from([TANH, SIGMOID]), l=st.floats(-8, 8), w=st.floats(0, 8))
def test_smooth_bounds_match_grid(act, l, w):
    u = l + w
    a, b = slope_bounds_smooth(act, l, u)
    ga, gb = grid_slope_extrema(act, l, u, 20_001)
    # the grid can only see less extreme values
    assert a[0] <= ga + 1e-15 and gb <= b[0] + 1e-15
    step = w / 20_000 if w else 0.0
    # derivative changes by at most 1 * step per grid cell (|phi''| <= 1)
    assert ga - a[0] <= step + 1e-12 and b[0] - gb <= step + 1e-12


def test_smooth_rejects_relu_and_empty():
    with pytest.raises(ValueError):
        slope_bounds_smooth(Activation("relu"), 0.0, 1.0)
    with pytest.raises(IntervalError):
        slope_bounds_smooth(TANH, 1.0, 0.0)


def test_partition_example():
    sb = relu_partition([1.0, -2.0, -1.0], [2.0, -1.0, 1.0])
    assert sb.partition == (ACTIVE, INACTIVE, UNKNOWN)
    plus, minus, unknown = sb.index_sets()
    assert plus.tolist() == [0] and minus.tolist() == [1] and unknown.tolist() == [2]
    np.testing.assert_array_equal(sb.alpha, [1, 0, 0])
    np.testing.assert_array_equal(sb.beta, [1, 0, 1])
    np.testing.assert_array_equal(sb.free, [True, True, False])


def test_partition_all_active():
    sb = relu_partition([0.0, 1.0], [2.0, 3.0])
    assert sb.partition == (ACTIVE, ACTIVE)
    np.testing.assert_array_equal(sb.alpha, [1, 1])


def test_partition_boundary_u_zero_is_unknown():
    assert relu_partition([-1.0], [0.0]).partition == (UNKNOWN,)


def test_leaky_partition():
    sb = relu_partition([1.0, -2.0, -1.0], [2.0, -1.0, 1.0], leak=0.1)
    np.testing.assert_allclose(sb.alpha, [1, 0.1, 0.1])
    np.testing.assert_allclose(sb.beta, [1, 0.1, 1])


def test_global_slopes():
    sb = global_slope_bounds(SIGMOID, 3)
    np.testing.assert_array_equal(sb.beta, [0.25] * 3)
    assert not sb.free.any()
    sb = global_slope_bounds(Activation("leaky_relu", 0.3), 2)
    np.testing.assert_array_equal(sb.alpha, [0.3, 0.3])


def test_identity_layer_is_fixed():
    sb = layer_slope_bounds(Activation("identity"), [-1.0], [1.0])
    assert sb.free.all() and sb.alpha[0] == sb.beta[0] == 1.0


def test_smooth_multipliers_stay_constrained_when_degenerate():
    sb = layer_slope_bounds(TANH, [0.5], [0.5])
    assert not sb.free.any()
    with pytest.raises(AdmissibilityError):
        qc_matrix(sb, [-1.0])


# ---------------------------------------------------------------- Q matrix

def test_qc_matrix_example():
    sb = relu_partition([-1.0], [1.0])
    np.testing.assert_array_equal(qc_matrix(sb, [1.0]), [[0.0, 1.0], [1.0, -2.0]])


def test_qc_matrix_zero():
    sb = layer_slope_bounds(TANH, -np.ones(3), np.ones(3))
    assert not qc_matrix(sb, np.zeros(3)).any()


def test_qc_matrix_symmetric_and_admissibility(rng):
    sb = relu_partition([1.0, -2.0, -1.0], [2.0, -1.0, 1.0])
    Q = qc_matrix(sb, [-3.0, -1.0, 2.0])  # free multipliers may be negative
    np.testing.assert_array_equal(Q, Q.T)
    with pytest.raises(AdmissibilityError):
        qc_matrix(sb, [1.0, 1.0, -0.5])
    with pytest.raises(ValueError):
        qc_matrix(sb, [1.0])


def test_qc_form_matches_matrix(rng):
    sb = layer_slope_bounds(TANH, -rng.random(4), rng.random(4))
    lam = rng.random(4)
    Q = qc_matrix(sb, lam)
    dx, dphi = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    v = np.hstack([dx, dphi])
    np.testing.assert_allclose(qc_form(sb, lam, dx, dphi), np.einsum("ni,ij,nj->n", v, Q, v), rtol=1e-12, atol=1e-12)


def _pairs_in_box(lo, hi, n, rng):
    return rng.uniform(lo, hi, (n, lo.size)), rng.uniform(lo, hi, (n, lo.size))


@pytest.mark.parametrize("act", ["tanh", "sigmoid", "relu", "leaky"])
def test_dqc_validity_on_propagated_boxes(act, rng):
    a = Activation("leaky_relu", 0.05) if act == "leaky" else Activation(act)
    net = random_network([3, 8, 8, 2], a, seed=9)
    b = propagate_bounds(net, InputRegion.ball(rng.normal(size=3), 0.6))
    for k, (lo, hi) in enumerate(b):
        sb = layer_slope_bounds(a, lo, hi)
        x, y = _pairs_in_box(lo, hi, 10_000, rng)
        lam = rng.exponential(size=sb.size)
        lam[sb.free] = rng.normal(size=int(sb.free.sum())) * 10
        form = qc_form(sb, lam, x - y, a(x) - a(y))
        assert form.min() >= -1e-10


def test_partition_consistent_with_samples(rng):
    net = random_network([2, 10, 10, 2], "relu", seed=2)
    region = InputRegion.ball(np.zeros(2), 0.3)
    b = propagate_bounds(net, region)
    tr = net.trace(region.sample(20_000, rng))
    for k, (lo, hi) in enumerate(b):
        sb = relu_partition(lo, hi)
        both = (tr.z[k] > 0).any(axis=0) & (tr.z[k] < 0).any(axis=0)
        assert not np.any(both & sb.free)


@settings(max_examples=100, deadline=None)
@given(act=st.sampled_from(["tanh", "sigmoid", "relu"]), l=st.floats(-6, 6), w=st.floats(0, 6),
       s1=st.floats(0, 1), s2=st.floats(0, 1))
def test_shrinking_never_widens(act, l, w, s1, s2):
    a = Activation(act)
    u = l + w
    l2 = l + s1 * w
    u2 = l2 + s2 * (u - l2)
    big = layer_slope_bounds(a, [l], [u])
    small = layer_slope_bounds(a, [l2], [u2])
    assert small.alpha[0] >= big.alpha[0] and small.beta[0] <= big.beta[0]


@pytest.mark.parametrize("leak", [0.0, 0.2])
def test_fixed_neuron_terms_vanish(leak, rng):
    a = Activation("leaky_relu", leak) if leak else Activation("relu")
    lo, hi = np.array([0.5, -3.0]), np.array([2.0, -0.5])
    sb = layer_slope_bounds(a, lo, hi)
    assert sb.free.all()
    x, y = _pairs_in_box(lo, hi, 1000, rng)
    d = a(x) - a(y)
    np.testing.assert_allclose(d[:, 0], (x - y)[:, 0], atol=1e-15)
    np.testing.assert_allclose(d[:, 1], leak * (x - y)[:, 1], atol=1e-15)
    assert np.abs(qc_form(sb, rng.normal(size=(2,)) * 100, x - y, d)).max() < 1e-10
