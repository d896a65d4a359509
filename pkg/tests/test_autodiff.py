"""Tests for the expression-tape autodiff engine."""

import math

import numpy as np
import pytest

from volterra_ident import autodiff, network
from volterra_ident.autodiff import Graph, NonFiniteValueError, cos, exp, sin, tanh


def central_diff(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def test_evaluate_basic_arithmetic():
    g = Graph()
    x, y, z = g.variable(), g.variable(), g.variable()
    expr = x * y + tanh(z)
    assert g.evaluate(expr, {x: 2.0, y: 3.0, z: 0.0}) == 6.0
    # rebinding reuses the same tape
    assert g.evaluate(expr, {z: 1.0}) == pytest.approx(6.0 + math.tanh(1.0), rel=1e-15)


def test_python_number_lifting():
    g = Graph()
    x = g.variable(2.0)
    expr = (1.0 + x) * 2.0 - 6.0 / x - x ** 2
    assert g.evaluate(expr) == pytest.approx((1 + 2) * 2 - 3 - 4, rel=1e-15)
    assert g.evaluate(2.0 - x) == 0.0
    assert g.evaluate(-x) == -2.0


def test_constant_dedup():
    g = Graph()
    a = g.constant(2.5)
    b = g.constant(2.5)
    assert a.index == b.index


def test_integer_powers():
    g = Graph()
    x = g.variable(2.0)
    assert g.evaluate(x ** 3) == 8.0
    assert g.evaluate(x ** 0) == 1.0
    assert g.evaluate(x ** -2) == 0.25
    with pytest.raises(TypeError):
        x ** 0.5


def test_gradient_closed_form():
    g = Graph()
    x, y, z = g.variable(1.5), g.variable(-2.0), g.variable(0.7)
    loss = x * y + tanh(z)
    grad = g.gradient(loss, [x, y, z])
    assert grad[0] == pytest.approx(-2.0, rel=1e-14)
    assert grad[1] == pytest.approx(1.5, rel=1e-14)
    assert grad[2] == pytest.approx(1.0 - math.tanh(0.7) ** 2, rel=1e-14)


def test_gradient_of_div_and_exp():
    g = Graph()
    x, y = g.variable(1.2), g.variable(0.4)
    loss = exp(x) / y - y / x
    gx, gy = g.gradient(loss, [x, y])
    assert gx == pytest.approx(math.exp(1.2) / 0.4 + 0.4 / 1.2 ** 2, rel=1e-13)
    assert gy == pytest.approx(-math.exp(1.2) / 0.4 ** 2 - 1 / 1.2, rel=1e-13)


def test_gradient_unused_variable_is_zero():
    g = Graph()
    x = g.variable(1.0)
    unused = g.variable(5.0)
    loss = x * x
    grad = g.gradient(loss, [x, unused])
    assert grad[1] == 0.0
    # variables created after the loss node also get a zero
    late = g.variable(1.0)
    assert g.gradient(loss, [late])[0] == 0.0


def test_gradient_matches_finite_differences_on_mlp():
    config = network.MlpConfig(layers=(1, 40, 40, 2), seed=7)
    params = network.init_parameters(config)
    vec = network.flatten(params)
    vec[-1] = 0.3  # make theta participate

    g = Graph()
    net = network.parameter_variables(g, config)
    t = g.variable(0.8)
    u, v = network.forward_expressions(g, net, t)
    loss = u * u + v + net.theta * u

    g.bind_many(net.flat, vec)
    grad = g.gradient(loss, net.flat)

    def loss_at(w):
        g.bind_many(net.flat, w)
        return g.evaluate(loss)

    h = 1e-5
    for i in range(len(vec)):
        wp = vec.copy()
        wm = vec.copy()
        wp[i] += h
        wm[i] -= h
        fd = (loss_at(wp) - loss_at(wm)) / (2 * h)
        err = abs(grad[i] - fd)
        assert err <= 1e-5 * max(abs(fd), 1.0) + 1e-8, f"coordinate {i}: {grad[i]} vs {fd}"


def test_input_derivative_closed_form():
    g = Graph()
    w, b, t = g.variable(1.7), g.variable(-0.3), g.variable(0.5)
    y = tanh(w * t + b)
    dy = g.input_derivative(y, t, order=1)
    d2y = g.input_derivative(y, t, order=2)
    z = 1.7 * 0.5 - 0.3
    th = math.tanh(z)
    assert g.evaluate(dy) == pytest.approx(1.7 * (1 - th * th), rel=1e-13)
    assert g.evaluate(d2y) == pytest.approx(-2 * 1.7 ** 2 * th * (1 - th * th), rel=1e-13)


def test_input_derivative_is_differentiable_in_parameters():
    g = Graph()
    w, b, t = g.variable(0.9), g.variable(0.2), g.variable(0.4)
    dy = g.input_derivative(tanh(w * t + b), t, order=1)

    grad_w = g.gradient(dy, [w])[0]

    def dy_at(wv):
        g.bind(w, wv)
        return g.evaluate(dy)

    fd = central_diff(dy_at, 0.9, 1e-6)
    assert grad_w == pytest.approx(fd, rel=1e-7)


def test_input_derivatives_match_finite_differences_on_mlp():
    config = network.MlpConfig(layers=(1, 8, 8, 2), seed=3)
    vec = network.flatten(network.init_parameters(config))

    g = Graph()
    net = network.parameter_variables(g, config)
    t = g.variable()
    u, v = network.forward_expressions(g, net, t)
    dv = g.input_derivative(v, t, order=1)
    d2v = g.input_derivative(v, t, order=2)
    g.bind_many(net.flat, vec)

    def v_at(tv):
        g.bind(t, tv)
        return g.evaluate(v)

    for t0 in (-0.9, 0.1, 1.3):
        g.bind(t, t0)
        first = g.evaluate(dv)
        second = g.evaluate(d2v)
        fd1 = central_diff(v_at, t0, 1e-5)
        fd2 = (v_at(t0 + 1e-4) - 2 * v_at(t0) + v_at(t0 - 1e-4)) / 1e-8
        assert first == pytest.approx(fd1, rel=1e-5, abs=1e-8)
        assert second == pytest.approx(fd2, rel=1e-3, abs=1e-6)


def test_input_derivative_of_independent_expression_is_zero():
    g = Graph()
    x, t = g.variable(2.0), g.variable(1.0)
    d = g.input_derivative(x * x + 3.0, t, order=1)
    assert g.evaluate(d) == 0.0


def test_input_derivative_order_validation():
    g = Graph()
    t = g.variable(0.0)
    with pytest.raises(ValueError):
        g.input_derivative(t * t, t, order=3)
    with pytest.raises(ValueError):
        g.input_derivative(t * t, t, order=0)
    with pytest.raises(ValueError):
        g.input_derivative(t * t, t * t, order=1)  # input must be a variable


def test_sin_cos_derivatives():
    g = Graph()
    t = g.variable(0.6)
    y = sin(t) * cos(t)
    dy = g.input_derivative(y, t, order=1)
    assert g.evaluate(y) == pytest.approx(math.sin(0.6) * math.cos(0.6), rel=1e-15)
    assert g.evaluate(dy) == pytest.approx(math.cos(1.2), rel=1e-13)
    d2 = g.input_derivative(sin(t), t, order=2)
    assert g.evaluate(d2) == pytest.approx(-math.sin(0.6), rel=1e-13)


def test_non_finite_detection_names_the_node():
    g = Graph()
    x = g.variable(1000.0)
    y = exp(x)
    with pytest.raises(NonFiniteValueError) as info:
        g.evaluate(y)
    assert "exp" in str(info.value)
    assert info.value.node_index == y.index

    g2 = Graph()
    a = g2.variable(1.0)
    with pytest.raises(NonFiniteValueError) as info2:
        g2.evaluate(a / g2.constant(0.0))
    assert "div" in str(info2.value)


def test_bind_validation():
    g = Graph()
    x = g.variable(1.0)
    with pytest.raises(ValueError):
        g.bind(x * x, 2.0)  # not a variable
    other = Graph()
    y = other.variable(1.0)
    with pytest.raises(ValueError):
        g.bind(y, 2.0)
    with pytest.raises(ValueError):
        _ = x + y  # cross-graph arithmetic


def test_evaluate_is_deterministic():
    g = Graph()
    x = g.variable(0.123456789)
    expr = tanh(exp(x) / (1.0 + x * x)) - x ** 3
    v1 = g.evaluate(expr)
    v2 = g.evaluate(expr)
    assert v1 == v2


def test_gradient_after_tape_growth():
    # appending nodes after a compile must not corrupt earlier results
    g = Graph()
    x = g.variable(2.0)
    first = x * x
    assert g.evaluate(first) == 4.0
    second = first + x
    assert g.evaluate(second) == 6.0
    assert g.gradient(second, [x])[0] == 5.0
