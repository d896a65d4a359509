"""Tests for the MLP parameterization and its tape construction."""

import math

import numpy as np
import pytest

from volterra_ident import network
from volterra_ident.autodiff import Graph
from volterra_ident.network import MlpConfig


def test_default_parameter_count():
    config = MlpConfig()
    assert network.n_parameters(config) == 1803
    params = network.init_parameters(config)
    assert network.flatten(params).shape == (1803,)


def test_init_is_deterministic():
    a = network.init_parameters(MlpConfig(seed=0))
    b = network.init_parameters(MlpConfig(seed=0))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    c = network.init_parameters(MlpConfig(seed=1))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_respects_glorot_bounds():
    params = network.init_parameters(MlpConfig(seed=0))
    widths = (1, 40, 40, 2)
    for w, fan_in, fan_out in zip(params.weights, widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(w).max() < bound
    assert params.weights[0].shape == (40, 1)
    assert np.abs(params.weights[0]).max() < math.sqrt(6.0 / 41.0)
    for b in params.biases:
        assert np.all(b == 0.0)
    assert params.theta == 0.0


def test_flatten_unflatten_roundtrip():
    config = MlpConfig(layers=(1, 5, 3, 2), seed=4)
    params = network.init_parameters(config)
    vec = network.flatten(params)
    assert vec[-1] == params.theta
    back = network.unflatten(vec, config)
    for wa, wb in zip(params.weights, back.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(params.biases, back.biases):
        assert np.array_equal(ba, bb)
    assert back.theta == params.theta

    rng = np.random.default_rng(0)
    rand = rng.normal(size=vec.shape)
    assert np.array_equal(network.flatten(network.unflatten(rand, config)), rand)


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ValueError):
        network.unflatten(np.zeros(10), MlpConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(layers=(2, 40, 2))
    with pytest.raises(ValueError):
        MlpConfig(layers=(1, 40, 3))
    with pytest.raises(ValueError):
        MlpConfig(layers=(1, 2))
    with pytest.raises(ValueError):
        MlpConfig(layers=(1, 0, 2))


def test_forward_values_match_tape_forward():
    config = MlpConfig(layers=(1, 6, 5, 2), seed=11)
    params = network.init_parameters(config)
    vec = network.flatten(params)
    vec[-1] = 0.9

    g = Graph()
    net = network.parameter_variables(g, config)
    t = g.variable()
    u_expr, v_expr = network.forward_expressions(g, net, t)
    g.bind_many(net.flat, vec)

    for tv in (-1.0, 0.0, 0.35, 2.0):
        g.bind(t, tv)
        u_tape = g.evaluate(u_expr)
        v_tape = g.evaluate(v_expr)
        u_num, v_num = network.forward_values(network.unflatten(vec, config), tv)
        assert u_tape == pytest.approx(u_num, rel=1e-12, abs=1e-14)
        assert v_tape == pytest.approx(v_num, rel=1e-12, abs=1e-14)


def test_theta_is_last_flat_variable():
    g = Graph()
    net = network.parameter_variables(g, MlpConfig())
    assert net.flat[-1] is net.theta
    assert len(net.flat) == 1803


def test_forward_values_rejects_non_finite_parameters():
    params = network.init_parameters(MlpConfig())
    params.weights[0][0, 0] = np.nan
    with pytest.raises(ArithmeticError):
        network.forward_values(params, 0.5)


def test_parameters_json_roundtrip(tmp_path):
    config = MlpConfig(layers=(1, 4, 2), seed=2)
    params = network.init_parameters(config)
    path = tmp_path / "params.json"
    network.write_parameters_json(path, params, config)
    back, back_config = network.read_parameters_json(path)
    assert back_config == config
    assert np.array_equal(network.flatten(back), network.flatten(params))
