"""Loss components, adaptive weights, and the assembled loss tape."""

import math

import numpy as np
import pytest

from volterra_ident import network
from volterra_ident.autodiff import Graph, exp, sin
from volterra_ident.cases import get_case
from volterra_ident.losses import (
    WEIGHT_CAP,
    LossGraph,
    MeasurementSet,
    WeightState,
    adaptive_weights,
    mse_governing,
    mse_output_condition,
)
from volterra_ident.network import MlpConfig


# ---------------------------------------------------------------------------
# adaptive weights
# ---------------------------------------------------------------------------

def test_adaptive_weights_amplifies_larger_residual():
    ws = adaptive_weights(2.0, 1.0)
    assert ws.w_g == 2.0 and ws.w_o == 1.0 and ws.w_i == 1.0
    assert not ws.clamped

    ws = adaptive_weights(1.0, 2.0)
    assert ws.w_g == 1.0 and ws.w_o == 2.0
    assert ws.w_i == 2.0  # follows w_o by default


def test_adaptive_weights_equal_residuals_give_unit_weights():
    ws = adaptive_weights(0.37, 0.37)
    assert ws.w_g == 1.0 and ws.w_o == 1.0 and not ws.clamped


def test_adaptive_weights_cap_and_flag_on_tiny_denominator():
    ws = adaptive_weights(1e-40, 1.0)
    assert ws.clamped
    assert ws.w_g == 1.0          # raw 1e-10 clipped up to 1
    assert ws.w_o == WEIGHT_CAP   # raw 1e30 capped


def test_adaptive_weights_smaller_weight_is_always_one():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        g, o = np.exp(rng.uniform(-25, 5, size=2))
        ws = adaptive_weights(float(g), float(o))
        assert min(ws.w_g, ws.w_o) == 1.0
        assert max(ws.w_g, ws.w_o) >= 1.0


def test_adaptive_weights_scale_invariant():
    for c in (1e-6, 0.5, 3.0, 1e4):
        a = adaptive_weights(4.0e-3, 1.6e-2)
        b = adaptive_weights(c * 4.0e-3, c * 1.6e-2)
        assert math.isclose(a.w_g, b.w_g, rel_tol=1e-12)
        assert math.isclose(a.w_o, b.w_o, rel_tol=1e-12)


def test_adaptive_weights_explicit_initial_weight_override():
    ws = adaptive_weights(1.0, 5.0, w_i=2.5)
    assert ws.w_i == 2.5 and ws.w_o == 5.0


def test_adaptive_weights_rejects_bad_residuals():
    with pytest.raises(ValueError):
        adaptive_weights(-1.0, 1.0)
    with pytest.raises(ValueError):
        adaptive_weights(float("nan"), 1.0)


def test_weight_state_validation():
    with pytest.raises(ValueError):
        WeightState(w_m=2.0)
    with pytest.raises(ValueError):
        WeightState(w_g=0.0)
    with pytest.raises(ValueError):
        WeightState(w_o=float("inf"))


# ---------------------------------------------------------------------------
# measurement container
# ---------------------------------------------------------------------------

def test_measurement_set_validation():
    with pytest.raises(ValueError):
        MeasurementSet(np.array([0.0, 1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        MeasurementSet(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        MeasurementSet(np.array([0.0, 1.0]), np.array([1.0, float("nan")]))
    ms = MeasurementSet(np.array([0.0, 0.5, 1.0]), np.array([1.0, 2.0, 3.0]))
    assert ms.n == 3


# ---------------------------------------------------------------------------
# governing residual against the closed forms
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["case1", "case2", "case3"])
def test_governing_residual_vanishes_on_true_solution(name):
    case = get_case(name)
    g = Graph()
    ts = np.linspace(*case.domain, 9)
    us = [g.constant(case.true_solution(t)) for t in ts]
    vs = [g.constant(case.true_drift_integral(t)) for t in ts]
    theta = g.variable(case.true_theta)
    expr = mse_governing(g, case, ts, us, vs, theta)
    assert g.evaluate(expr) < 1e-20


@pytest.mark.parametrize("name", ["case1", "case2", "case3"])
def test_governing_residual_quadratic_in_drift_perturbation(name):
    # u = f - theta v exactly, so at theta+delta the residual is delta*v
    case = get_case(name)
    g = Graph()
    ts = np.linspace(*case.domain, 9)
    us = [g.constant(case.true_solution(t)) for t in ts]
    vs = [g.constant(case.true_drift_integral(t)) for t in ts]
    theta = g.variable(case.true_theta + 1e-3)
    expr = mse_governing(g, case, ts, us, vs, theta)
    v2 = np.mean([case.true_drift_integral(t) ** 2 for t in ts])
    assert g.evaluate(expr) == pytest.approx(1e-6 * v2, rel=1e-6)


# ---------------------------------------------------------------------------
# output conditions on manufactured exact solutions
# ---------------------------------------------------------------------------

def _manufactured_mse(case, make_u_v):
    """Evaluate the case's output-condition MSE on tape-built (u, v)."""
    g = Graph()
    ts = [float(t) for t in np.linspace(*case.domain, 7)]
    us, vs, dvs, d2vs = [], [], [], []
    for t in ts:
        t_var = g.variable(t)
        u, v = make_u_v(g, t_var)
        us.append(u)
        vs.append(v)
        dv = g.input_derivative(v, t_var, 1)
        dvs.append(dv)
        if case.output_condition.order >= 2:
            d2vs.append(g.input_derivative(dv, t_var, 1))
    expr = mse_output_condition(g, case, ts, us, vs, dvs, d2vs or None)
    return g.evaluate(expr)


def test_second_derivative_condition_exact_pair():
    # v = e^t has v'' = e^t, so u = e^t satisfies v'' - u = 0
    case = get_case("case1")
    mse = _manufactured_mse(case, lambda g, t: (exp(t), exp(t)))
    assert mse < 1e-24


def test_exponential_ode_condition_exact_pair():
    # v = e^(2t): v' - e^(2t) u - v = e^(2t)(2 - u - 1), zero at u = 1
    case = get_case("case2")
    mse = _manufactured_mse(
        case, lambda g, t: (g.constant(1.0), exp(g.constant(2.0) * t)))
    assert mse < 1e-24


def test_time_scaled_condition_exact_pair():
    # v = t^3: t v' - t^3 u - v = 3t^3 - t^3 u - t^3, zero at u = 2
    case = get_case("case3")
    mse = _manufactured_mse(case, lambda g, t: (g.constant(2.0), t ** 3))
    assert mse < 1e-24


def test_second_derivative_condition_detects_mismatch():
    # v = sin t has v'' = -sin t, but u = sin t: residual is -2 sin t
    case = get_case("case1")
    mse = _manufactured_mse(case, lambda g, t: (sin(t), sin(t)))
    ts = np.linspace(*case.domain, 7)
    assert mse == pytest.approx(np.mean(4.0 * np.sin(ts) ** 2), rel=1e-12)


# ---------------------------------------------------------------------------
# assembled loss tape
# ---------------------------------------------------------------------------

def _loss_graph(name="case2", n=10, **kwargs):
    case = get_case(name)
    times = np.linspace(*case.domain, n)
    lg = LossGraph(case, times, **kwargs)
    data = np.array([case.true_solution(t) for t in times])
    lg.set_data(data)
    return case, times, data, lg


def test_loss_graph_zero_network_components():
    case, times, data, lg = _loss_graph()
    n_params = len(network.flatten(network.init_parameters(MlpConfig())))
    lg.set_parameters(np.zeros(n_params))
    ws = WeightState(w_g=2.0, w_o=3.0, w_i=4.0)
    lg.set_weights(ws)
    total = lg.total_value()
    b = lg.breakdown(ws)
    # u = v = 0 everywhere: data term is mean(data^2), governing term is
    # mean(f^2), the structural terms vanish identically
    assert b.mse_m == pytest.approx(np.mean(data**2), rel=1e-12)
    f2 = np.mean([case.forcing(t) ** 2 for t in times])
    assert b.mse_g == pytest.approx(f2, rel=1e-12)
    assert b.mse_o == 0.0
    assert b.mse_i == 0.0
    assert total == pytest.approx(b.weighted_sum(), rel=1e-12)
    assert total == pytest.approx(b.mse_m + 2.0 * f2, rel=1e-12)


def test_loss_graph_matches_direct_recomputation():
    case, times, data, lg = _loss_graph()
    vec = network.flatten(network.init_parameters(MlpConfig(seed=3)))
    vec[-1] = 0.7
    lg.set_parameters(vec)
    lg.set_weights(WeightState())
    lg.total_value()
    u, v = lg.network_outputs()
    b = lg.breakdown(WeightState())
    f = np.array([case.forcing(t) for t in times])
    assert b.mse_m == pytest.approx(np.mean((u - data) ** 2), rel=1e-10)
    assert b.mse_g == pytest.approx(np.mean((u - f + 0.7 * v) ** 2), rel=1e-10)


def test_loss_gradient_matches_finite_differences():
    _, _, _, lg = _loss_graph(n=6)
    vec = network.flatten(network.init_parameters(MlpConfig(seed=1)))
    vec[-1] = 0.3
    lg.set_weights(WeightState(w_g=1.5, w_o=2.0))
    lg.set_parameters(vec)
    lg.total_value()
    grad = lg.gradient()

    rng = np.random.default_rng(0)
    idx = list(rng.choice(len(vec) - 1, size=6, replace=False)) + [len(vec) - 1]
    h = 1e-6
    for i in idx:
        bumped = vec.copy()
        bumped[i] += h
        lg.set_parameters(bumped)
        f_plus = lg.total_value()
        bumped[i] -= 2 * h
        lg.set_parameters(bumped)
        f_minus = lg.total_value()
        fd = (f_plus - f_minus) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=2e-5, abs=1e-8)


def test_pinned_initial_slope_adds_nonnegative_term():
    _, _, _, lg_plain = _loss_graph("case1", n=8)
    _, _, _, lg_pinned = _loss_graph("case1", n=8, pin_initial_slope=True)
    vec = network.flatten(network.init_parameters(MlpConfig(seed=5)))
    for lg in (lg_plain, lg_pinned):
        lg.set_parameters(vec)
        lg.set_weights(WeightState())
        lg.total_value()
    plain = lg_plain.breakdown(WeightState()).mse_i
    pinned = lg_pinned.breakdown(WeightState()).mse_i
    assert pinned >= plain  # the extra squared-slope term cannot reduce it
    assert pinned > plain   # and a random network has nonzero initial slope


def test_loss_graph_input_validation():
    case = get_case("case2")
    with pytest.raises(ValueError):
        LossGraph(case, np.array([-1.0, 0.5, 1.0]))  # beyond domain end
    with pytest.raises(ValueError):
        LossGraph(case, np.array([0.0, 0.0, 0.1]))   # not strictly increasing
    lg = LossGraph(case, np.linspace(-1.0, 0.5, 5))
    with pytest.raises(ValueError):
        lg.set_data(np.zeros(4))
