import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipcert import data_path
from lipcert.network import (Activation, InputRegion, Network, NetworkSchemaError, UnsupportedActivationError,
                             dumps_network, load_network, loads_network, network_from_json, random_network,
                             saturated_linear_controller)


def affine(W0, b0, W1, b1, act="identity"):
    return Network.from_arrays([np.atleast_2d(W0), np.atleast_2d(W1)], [np.atleast_1d(b0), np.atleast_1d(b1)], act)


def test_affine_forward():
    net = affine([[1.0]], [0.0], [[2.0]], [1.0])
    assert net(np.array([3.0]))[0] == 7.0


@pytest.mark.parametrize("kx, expected", [(0.4, 0.4), (3.0, 1.0), (-3.0, -1.0)])
def test_saturated_controller_is_clip(kx, expected):
    net = saturated_linear_controller([[1.0, 0.0]])
    assert net(np.array([kx, 5.0]))[0] == pytest.approx(expected, abs=1e-15)


def test_saturated_controller_matches_clip_everywhere(rng):
    K = np.array([[0.7, -1.3]])
    net = saturated_linear_controller(K)
    x = rng.uniform(-3, 3, (1000, 2))
    np.testing.assert_allclose(net(x)[:, 0], np.clip(x @ K[0], -1, 1), atol=1e-14)


def test_zero_weight_net_is_constant(rng):
    net = Network.from_arrays([np.zeros((4, 3)), np.zeros((2, 4))], [rng.normal(size=4), np.array([1.5, -2.0])], "relu")
    for x in rng.normal(size=(5, 3)):
        np.testing.assert_array_equal(net(x), [1.5, -2.0])


def test_trace_exposes_intermediates():
    net = random_network([3, 5, 4, 2], "tanh", seed=3)
    x = np.array([0.1, -0.2, 0.3])
    tr = net.trace(x)
    assert len(tr.z) == 2 and len(tr.x) == 3
    np.testing.assert_allclose(tr.z[0], net.layers[0].W @ x + net.layers[0].b)
    np.testing.assert_allclose(tr.x[1], np.tanh(tr.z[0]))
    np.testing.assert_allclose(tr.output, net.W_out @ tr.x[2] + net.b_out)


def test_forward_dimension_mismatch():
    net = random_network([3, 4, 2], "relu", seed=0)
    with pytest.raises(ValueError):
        net(np.zeros(2))


def test_positive_preactivations_give_affine_composition(rng):
    W0 = np.abs(rng.normal(size=(6, 3)))
    W1 = np.abs(rng.normal(size=(4, 6)))
    W2 = rng.normal(size=(2, 4))
    net = Network.from_arrays([W0, W1, W2], [np.ones(6), np.ones(4), np.zeros(2)], "relu")
    x = rng.uniform(0, 1, (100, 3))
    expected = ((x @ W0.T + 1) @ W1.T + 1) @ W2.T
    np.testing.assert_array_equal(net(x), expected)


def test_jacobian_identity_activation(rng):
    Ws = [rng.normal(size=(4, 3)), rng.normal(size=(5, 4)), rng.normal(size=(2, 5))]
    net = Network.from_arrays(Ws, [rng.normal(size=4), rng.normal(size=5), rng.normal(size=2)], "identity")
    np.testing.assert_allclose(net.jacobian(rng.normal(size=3)), Ws[2] @ Ws[1] @ Ws[0], rtol=1e-12)


def test_jacobian_single_tanh_neuron():
    net = affine([[2.0]], [-1.0], [[3.0]], [0.0], "tanh")
    assert net.jacobian(np.array([0.5]))[0, 0] == pytest.approx(6.0)


def test_relu_derivative_at_kink_is_zero():
    assert Activation("relu").derivative(np.array([0.0]))[0] == 0.0
    assert Activation("leaky_relu", 0.1).derivative(np.array([0.0]))[0] == 0.1
    net = affine([[1.0]], [0.0], [[1.0]], [0.0], "relu")
    assert net.jacobian(np.array([0.0]))[0, 0] == 0.0


@pytest.mark.parametrize("act", ["tanh", "sigmoid"])
def test_jacobian_matches_central_differences(act, rng):
    net = random_network([3, 8, 2], act, seed=11)
    h = 1e-5
    for x in rng.uniform(-2, 2, (100, 3)):
        fd = np.stack([(net(x + h * e) - net(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        np.testing.assert_allclose(net.jacobian(x), fd, atol=1e-6)


def test_batched_jacobian_matches_pointwise(rng):
    net = random_network([3, 6, 5, 2], "tanh", seed=2)
    x = rng.normal(size=(7, 3))
    J = net.jacobian(x)
    for i in range(7):
        np.testing.assert_allclose(J[i], net.jacobian(x[i]), rtol=1e-12, atol=1e-13)


def test_activation_values():
    z = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(Activation("relu")(z), [0, 0, 3])
    np.testing.assert_allclose(Activation("leaky_relu", 0.25)(z), [-0.5, 0, 3])
    np.testing.assert_allclose(Activation("sigmoid")(np.array([-800.0, 0.0, 800.0])), [0.0, 0.5, 1.0])
    with pytest.raises(NetworkSchemaError):
        Activation("leaky_relu", 1.0)
    with pytest.raises(NetworkSchemaError):
        Activation("leaky_relu", -0.1)


# ---------------------------------------------------------------- documents

def test_bundled_controller_round_trips_text():
    text = data_path("saturated_lqr.json").read_text()
    assert dumps_network(loads_network(text)) == text


def test_load_save_identity_on_network(tmp_path):
    net = random_network([2, 5, 3, 1], "sigmoid", seed=4)
    path = tmp_path / "n.json"
    path.write_text(dumps_network(net))
    assert load_network(path) == net


@settings(max_examples=30, deadline=None)
@given(dims=st.lists(st.integers(1, 5), min_size=3, max_size=5),
       act=st.sampled_from(["relu", "tanh", "sigmoid", "identity"]),
       seed=st.integers(0, 10_000))
def test_round_trip_property(dims, act, seed):
    net = random_network(dims, act, seed=seed)
    again = loads_network(dumps_network(net))
    assert again == net
    assert dumps_network(again) == dumps_network(net)


def test_leak_survives_round_trip():
    net = Network.from_arrays([np.eye(2), np.ones((1, 2))], [np.zeros(2), np.zeros(1)], Activation("leaky_relu", 0.125))
    assert loads_network(dumps_network(net)).layers[0].act == Activation("leaky_relu", 0.125)


def _doc():
    return {"layers": [{"W": [[1.0, 0.0], [0.0, 1.0]], "b": [0.0, 0.0], "act": "relu"},
                       {"W": [[1.0, 1.0, 1.0]], "b": [0.0], "act": "relu"}],
            "final": {"W": [[1.0]], "b": [0.0]}}


def test_dimension_mismatch_names_layer():
    with pytest.raises(NetworkSchemaError) as info:
        network_from_json(_doc())
    assert info.value.layer == 1
    assert "layer 1" in str(info.value)


def test_unknown_activation():
    doc = _doc()
    doc["layers"][1]["W"] = [[1.0, 1.0]]
    doc["layers"][0]["act"] = "swish"
    with pytest.raises(UnsupportedActivationError):
        network_from_json(doc)


@pytest.mark.parametrize("bad", [
    {"layers": []},
    {"layers": [{"W": [[1.0]], "b": [0.0], "act": "relu"}], "final": {"W": [[float("nan")]], "b": [0.0]}},
    {"layers": [{"W": [[1.0]], "b": [0.0, 1.0], "act": "relu"}], "final": {"W": [[1.0]], "b": [0.0]}},
    {"layers": [{"W": [[1.0]], "b": [0.0]}], "final": {"W": [[1.0]], "b": [0.0]}},
])
def test_schema_errors(bad):
    with pytest.raises(NetworkSchemaError):
        network_from_json(bad)


def test_invalid_json_text():
    with pytest.raises(NetworkSchemaError):
        loads_network("{not json")


def test_network_is_immutable():
    net = random_network([2, 3, 1], "relu", seed=0)
    with pytest.raises(ValueError):
        net.layers[0].W[0, 0] = 1.0


def test_hidden_count_and_dims():
    net = random_network([3, 5, 4, 2], "relu", seed=0)
    assert net.dims == (3, 5, 4, 2)
    assert net.n_hidden == 9 and net.depth == 2


# ---------------------------------------------------------------- regions

def test_ball_expands_to_box():
    r = InputRegion.ball([1.0, -1.0], 0.5)
    np.testing.assert_array_equal(r.lower, [0.5, -1.5])
    np.testing.assert_array_equal(r.upper, [1.5, -0.5])
    assert r.contains(InputRegion.ball([1.0, -1.0], 0.25))
    assert not InputRegion.ball([1.0, -1.0], 0.25).contains(r)


@pytest.mark.parametrize("args", [([0.0], [-1.0]), ([0.0, 0.0], [1.0])])
def test_invalid_regions(args):
    with pytest.raises(ValueError):
        InputRegion(np.array(args[0]), np.array(args[1]))
    with pytest.raises(ValueError):
        InputRegion.ball([0.0], -1.0)


def test_bundled_files_load():
    for name in ("saturated_lqr.json", "classifier_4_16_3.json", "tanh_3_16_16_2_seed0.json"):
        load_network(data_path(name))
    doc = json.loads(data_path("classifier_input.json").read_text())
    assert len(doc["x"]) == 4
