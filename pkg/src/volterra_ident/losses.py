"""Loss construction for drift-coefficient identification.

The network outputs (u, v) are tied to the data and to the structure of
the integral equation through four mean-square residuals:

* measurement:       u(t_i) - u_i                    (data fit)
* governing:         u(t_i) - f(t_i) + theta v(t_i)   (the equation itself,
                     with the noise term dropped since its mean is zero)
* output condition:  the case's differential relation between v and u
* initial:           v(t_0)                           (the drift integral
                     starts empty)

The total is a weighted sum with weights rebalanced adaptively from the
relative size of the governing and output-condition terms; see
:func:`adaptive_weights`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import network
from .autodiff import Expression, Graph
from .cases import CaseDefinition
from .network import MlpConfig

__all__ = [
    "LossBreakdown",
    "LossGraph",
    "MeasurementSet",
    "WeightState",
    "WEIGHT_CAP",
    "WEIGHT_DENOMINATOR_FLOOR",
    "adaptive_weights",
    "mse_governing",
    "mse_initial",
    "mse_measurement",
    "mse_output_condition",
]

WEIGHT_DENOMINATOR_FLOOR = 1e-30
WEIGHT_CAP = 1e6


@dataclass(frozen=True)
class MeasurementSet:
    """Observed state values u_i at strictly increasing times t_i."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or times.shape != values.shape:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if times.size < 2:
            raise ValueError("need at least two measurements")
        if not (np.isfinite(times).all() and np.isfinite(values).all()):
            raise ValueError("measurements must be finite")
        if not np.all(np.diff(times) > 0):
            raise ValueError("measurement times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class WeightState:
    """Loss weights; the measurement weight is pinned at 1."""

    w_m: float = 1.0
    w_g: float = 1.0
    w_i: float = 1.0
    w_o: float = 1.0
    clamped: bool = False

    def __post_init__(self):
        if self.w_m != 1.0:
            raise ValueError("the measurement weight is fixed at 1")
        for w in (self.w_g, self.w_i, self.w_o):
            if not (math.isfinite(w) and w > 0.0):
                raise ValueError("weights must be finite and positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Component values, the weights in force, and the weighted total."""

    mse_m: float
    mse_g: float
    mse_o: float
    mse_i: float
    weights: WeightState
    total: float

    def weighted_sum(self) -> float:
        w = self.weights
        return (w.w_m * self.mse_m + w.w_g * self.mse_g
                + w.w_i * self.mse_i + w.w_o * self.mse_o)


def adaptive_weights(mse_g: float, mse_o: float, w_i: float | None = None) -> WeightState:
    """Rebalance weights from the governing/output residual magnitudes.

    Both weights are the ratio of their own term to the smaller of the
    two, so the larger residual is amplified and the smaller keeps weight
    one.  The denominator is floored at ``WEIGHT_DENOMINATOR_FLOOR``,
    weights are clipped to [1, ``WEIGHT_CAP``], and ``clamped`` reports
    whether any clipping fired.  The initial-condition weight follows the
    output-condition weight unless given explicitly.
    """
    if not (math.isfinite(mse_g) and math.isfinite(mse_o)):
        raise ValueError("residuals must be finite")
    if mse_g < 0.0 or mse_o < 0.0:
        raise ValueError("mean-square residuals cannot be negative")
    denom = min(mse_g, mse_o)
    clamped = False
    if denom < WEIGHT_DENOMINATOR_FLOOR:
        denom = WEIGHT_DENOMINATOR_FLOOR
        clamped = True

    def clip(raw):
        nonlocal clamped
        if raw < 1.0:
            clamped = True
            return 1.0
        if raw > WEIGHT_CAP:
            clamped = True
            return WEIGHT_CAP
        return raw

    w_g = clip(mse_g / denom)
    w_o = clip(mse_o / denom)
    if w_i is None:
        w_i = w_o
    return WeightState(w_m=1.0, w_g=w_g, w_i=w_i, w_o=w_o, clamped=clamped)


def _mean_of_squares(graph: Graph, residuals) -> Expression:
    acc = residuals[0] ** 2
    for r in residuals[1:]:
        acc = acc + r ** 2
    return acc / graph.constant(float(len(residuals)))


def mse_measurement(graph: Graph, us, measured) -> Expression:
    """Mean square of u(t_i) - u_i."""
    residuals = []
    for u, m in zip(us, measured):
        m_expr = m if isinstance(m, Expression) else graph.constant(float(m))
        residuals.append(u - m_expr)
    return _mean_of_squares(graph, residuals)


def mse_governing(graph: Graph, case: CaseDefinition, ts, us, vs, theta) -> Expression:
    """Mean square of u(t_i) - f(t_i) + theta v(t_i).

    The stochastic term of the equation has zero mean, so it does not
    appear: the residual targets the mean dynamics.
    """
    residuals = []
    for t, u, v in zip(ts, us, vs):
        f_t = graph.constant(float(case.forcing(t)))
        residuals.append(u - f_t + theta * v)
    return _mean_of_squares(graph, residuals)


def mse_output_condition(graph: Graph, case: CaseDefinition, ts, us, vs,
                         dvs, d2vs=None) -> Expression:
    """Mean square of the case's differential relation between v and u."""
    residuals = case.output_condition.residuals(graph, ts, us, vs, dvs, d2vs)
    return _mean_of_squares(graph, residuals)


def mse_initial(graph: Graph, v0: Expression, dv0: Expression | None = None) -> Expression:
    """Square of v at the domain start, where the drift integral is empty.

    When ``dv0`` is given, its square is added: kernels that vanish on the
    diagonal (k(t,t)=0) also start with a flat drift integral, and pinning
    the initial slope removes the spurious degree of freedom that a
    second-order output condition leaves open.
    """
    if dv0 is None:
        return v0 ** 2
    return v0 ** 2 + dv0 ** 2


class LossGraph:
    """The total identification loss as one reusable expression tape.

    Built once for a (case, measurement-times, architecture) triple;
    network parameters, loss weights, and measurement values are tape
    variables, so refitting with new data, new seeds, or rebalanced
    weights only re-binds values and re-runs the tape.
    """

    def __init__(self, case: CaseDefinition, times, config: MlpConfig | None = None,
                 pin_initial_slope: bool = False):
        config = config or MlpConfig()
        times = np.asarray(times, dtype=float)
        t0, t_end = case.domain
        eps = 1e-12 * max(1.0, abs(t0), abs(t_end))
        if times.min() < t0 - eps or times.max() > t_end + eps:
            raise ValueError("measurement times fall outside the case domain")
        if not np.all(np.diff(times) > 0):
            raise ValueError("measurement times must be strictly increasing")

        self.case = case
        self.config = config
        self.times = times
        self.pin_initial_slope = pin_initial_slope

        g = Graph()
        self.graph = g
        self.net = network.parameter_variables(g, config)
        self.data_vars = [g.variable() for _ in range(times.size)]

        order = case.output_condition.order
        ts = [float(t) for t in times]
        us, vs, dvs, d2vs = [], [], [], []
        for t in ts:
            t_var = g.variable(t)
            u, v = network.forward_expressions(g, self.net, t_var)
            us.append(u)
            vs.append(v)
            dv = g.input_derivative(v, t_var, 1)
            dvs.append(dv)
            if order >= 2:
                d2vs.append(g.input_derivative(dv, t_var, 1))
        t0_var = g.variable(t0)
        _, v_at_start = network.forward_expressions(g, self.net, t0_var)
        dv_at_start = (g.input_derivative(v_at_start, t0_var, 1)
                       if pin_initial_slope else None)

        self.u_exprs = us
        self.v_exprs = vs

        self.mse_m = mse_measurement(g, us, self.data_vars)
        self.mse_g = mse_governing(g, case, ts, us, vs, self.net.theta)
        self.mse_o = mse_output_condition(g, case, ts, us, vs, dvs, d2vs or None)
        self.mse_i = mse_initial(g, v_at_start, dv_at_start)

        self.w_g_var = g.variable(1.0)
        self.w_i_var = g.variable(1.0)
        self.w_o_var = g.variable(1.0)
        self.total = (self.mse_m + self.w_g_var * self.mse_g
                      + self.w_i_var * self.mse_i + self.w_o_var * self.mse_o)

    # -- binding ---------------------------------------------------------
    def set_data(self, values) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.data_vars),):
            raise ValueError(f"expected {len(self.data_vars)} measurement values")
        self.graph.bind_many(self.data_vars, values)

    def set_parameters(self, vec: np.ndarray) -> None:
        self.graph.bind_many(self.net.flat, vec)

    def set_weights(self, ws: WeightState) -> None:
        self.graph.bind(self.w_g_var, ws.w_g)
        self.graph.bind(self.w_i_var, ws.w_i)
        self.graph.bind(self.w_o_var, ws.w_o)

    # -- evaluation --------------------------------------------------------
    def total_value(self) -> float:
        """Forward pass; returns the weighted total."""
        return self.graph.evaluate(self.total)

    def gradient(self) -> np.ndarray:
        """Gradient of the total with respect to the flat parameter vector."""
        return self.graph.gradient(self.total, self.net.flat)

    def network_outputs(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) at the measurement times from the most recent forward pass."""
        g = self.graph
        u = np.array([g.value_of(e) for e in self.u_exprs])
        v = np.array([g.value_of(e) for e in self.v_exprs])
        return u, v

    def breakdown(self, ws: WeightState) -> LossBreakdown:
        """Component values from the most recent forward pass."""
        g = self.graph
        return LossBreakdown(
            mse_m=g.value_of(self.mse_m),
            mse_g=g.value_of(self.mse_g),
            mse_o=g.value_of(self.mse_o),
            mse_i=g.value_of(self.mse_i),
            weights=ws,
            total=g.value_of(self.total),
        )
