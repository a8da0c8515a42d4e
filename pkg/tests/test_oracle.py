import numpy as np
import pytest

from conftest import leq
from lipcert.lipschitz import local_lipschitz
from lipcert.network import Activation, InputRegion, Network, random_network
from lipcert.oracle import (BudgetExceeded, exact_local_lipschitz_enum, grid_slope_extrema, lyapunov_reference,
                            sample_lipschitz_lb)
from lipcert.stability import double_integrator, lqr_gain


def test_sampling_affine_close_to_svd(rng):
    W0, W1 = rng.normal(size=(3, 3)), rng.normal(size=(2, 3))
    net = Network.from_arrays([W0, W1], [np.zeros(3), np.zeros(2)], "identity")
    res = sample_lipschitz_lb(net, InputRegion.ball(np.zeros(3), 1.0), 100_000, seed=0, grad_points=0)
    s = np.linalg.svd(W1 @ W0, compute_uv=False)[0]
    assert leq(res.value, s) and res.value >= 0.98 * s
    assert res.kind == "lower-bound"


def test_sampling_zero_net():
    net = Network.from_arrays([np.zeros((3, 2)), np.zeros((1, 3))], [np.ones(3), np.ones(1)], "relu")
    assert sample_lipschitz_lb(net, InputRegion.ball(np.zeros(2), 1.0), 1000).value == 0.0


def test_sampling_deterministic():
    net = random_network([2, 6, 2], "tanh", seed=0)
    region = InputRegion.ball(np.zeros(2), 0.5)
    a = sample_lipschitz_lb(net, region, 5000, seed=3)
    b = sample_lipschitz_lb(net, region, 5000, seed=3)
    assert a.value == b.value and a.extra == b.extra


def test_enum_two_regions():
    net = Network.from_arrays([np.array([[2.0]]), np.array([[3.0]])], [np.zeros(1), np.zeros(1)], "relu")
    res = exact_local_lipschitz_enum(net, InputRegion.ball(np.zeros(1), 1.0))
    assert res.value == 6.0 and res.count == 2 and res.kind == "exact"


def test_enum_single_region(rng):
    net = random_network([2, 5, 2], "relu", seed=3)
    x = rng.normal(size=2)
    res = exact_local_lipschitz_enum(net, InputRegion.ball(x, 1e-9))
    assert res.count == 1
    assert res.value == pytest.approx(np.linalg.norm(net.jacobian(x), 2), rel=1e-12)


def test_enum_leaky():
    net = Network.from_arrays([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)],
                              Activation("leaky_relu", 0.5))
    assert exact_local_lipschitz_enum(net, InputRegion.ball(np.array([-2.0]), 1.0)).value == 0.5


def test_enum_budget():
    with pytest.raises(BudgetExceeded):
        exact_local_lipschitz_enum(random_network([2, 21, 1], "relu", seed=0), InputRegion.ball(np.zeros(2), 1.0))
    with pytest.raises(ValueError):
        exact_local_lipschitz_enum(random_network([2, 3, 1], "tanh", seed=0), InputRegion.ball(np.zeros(2), 1.0))


@pytest.mark.parametrize("seed", range(4))
def test_sandwich(seed):
    net = random_network([2, 10, 2], "relu", seed=seed)
    region = InputRegion.ball(np.zeros(2), 0.5)
    lb = sample_lipschitz_lb(net, region, 20_000, seed=seed).value
    ex = exact_local_lipschitz_enum(net, region).value
    L = local_lipschitz(net, region).L
    assert leq(lb, ex) and leq(ex, L)


def test_sampled_patterns_are_enumerated(rng):
    net = random_network([2, 6, 5, 2], "relu", seed=1)
    region = InputRegion.ball(np.zeros(2), 0.8)
    res = exact_local_lipschitz_enum(net, region, collect=True)
    found = set(res.extra["patterns_found"])
    tr = net.trace(region.sample(20_000, rng))
    sampled = {tuple(int(v) for v in row) for row in np.hstack([z > 0 for z in tr.z])}
    assert sampled <= found


def test_grid_extrema():
    a, b = grid_slope_extrema(Activation("tanh"), -1.0, 1.0, 1_000_000)
    assert a == pytest.approx(1 - np.tanh(1.0) ** 2, abs=1e-6) and b == pytest.approx(1.0, abs=1e-6)
    s = Activation("sigmoid")
    a, b = grid_slope_extrema(s, -10.0, 10.0, 1_000_001)
    assert a == pytest.approx(float(s.derivative(10.0)), rel=1e-9) and b == pytest.approx(0.25)
    assert grid_slope_extrema(s, 0.3, 0.3, 5) == (float(s.derivative(0.3)),) * 2


def test_lyapunov_reference():
    ref = lyapunov_reference(0.5 * np.eye(2))
    assert ref.feasible
    assert np.linalg.eigvalsh(0.25 * ref.P - ref.P).max() <= -1e-9
    assert not lyapunov_reference(np.diag([1.2, 0.1])).feasible
    plant = double_integrator()
    A_cl = plant.A + plant.B @ lqr_gain(plant)
    ref = lyapunov_reference(A_cl)
    assert ref.feasible
    np.testing.assert_allclose(A_cl.T @ ref.P @ A_cl - ref.P, -np.eye(2), atol=1e-9)
