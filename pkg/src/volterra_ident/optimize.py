"""L-BFGS with a strong-Wolfe line search, and the case-fitting driver.

The optimizer is the textbook limited-memory BFGS: a two-loop recursion
over the last ``history`` curvature pairs gives the search direction, a
bracket-and-zoom line search enforces the strong Wolfe conditions, and
pairs with negligible curvature are skipped.

``CaseFitter.fit`` wires the loss tape into it under a per-case
:class:`FitSchedule`.  Two failure modes of naive joint training drive
the schedule's design:

* Starting the drift coefficient at zero, the governing residual reads
  ``u - f``: it drags the primary output toward the forcing and away
  from the data, and the surrogate picks up a wrong-signed transient
  that the drift coefficient then locks onto.  A *staged* schedule
  therefore starts the governing term at a small weight, keeps the
  drift coefficient's gradient masked while the surrogate settles, and
  releases only when the one-dimensional least-squares value
  ``theta* = <(f-u), v> / <v, v>`` is positive and switching to
  ``(theta*, w_g=1)`` does not increase the total.  Both release edits
  can only lower the loss (theta* minimizes the governing term; the
  guard enforces the rest), so the recorded history stays monotone.
* With noisy measurements the surrogate relation is the only thing
  anchoring the drift coefficient; at unit weight the network can bend
  the surrogate off the integral relation and absorb the noise into a
  wrong drift value.  A *direct* schedule with a heavier surrogate
  weight from iteration 0 closes that leak.

Adaptive re-weighting candidates are computed once per outer iteration
and applied only when (a) no weight falls below the schedule's initial
value — above-unit starting weights are protective, and cutting one
loose would re-open the failure the schedule exists to prevent — and
(b) the re-weighted total does not exceed the current one; combined
with the Wolfe decrease within each iteration this keeps the recorded
loss history non-increasing end to end:

    total_{k+1} = O_{k+1}(x_{k+2}) <= O_{k+1}(x_{k+1}) <= O_k(x_{k+1}) = total_k,

where O_k is the objective under the weights used during iteration k.
(The candidates scale the larger of the governing/surrogate residuals
up from 1, which always raises the instantaneous total when the current
weights are at most 1, so in practice they are recomputed each
iteration and never accepted.)
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import network
from .cases import CaseDefinition
from .losses import LossBreakdown, LossGraph, MeasurementSet, WeightState, adaptive_weights
from .network import MlpConfig, ParameterSet

__all__ = [
    "CaseFitter",
    "FitResult",
    "FitSchedule",
    "MinimizeResult",
    "OptimizerConfig",
    "fit_case",
    "fit_schedule_for",
    "minimize",
    "read_fit_json",
    "write_fit_json",
    "write_loss_history_csv",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs for :func:`minimize`.

    ``initial_step`` scales the first trial of the first line search
    only; later line searches start from a unit step, as usual for
    quasi-Newton directions.
    """

    max_iterations: int = 200
    initial_step: float = 0.01
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_line_trials: int = 25
    grad_tol: float = 1e-9

    def __post_init__(self):
        if self.max_iterations < 1 or self.history < 1 or self.max_line_trials < 1:
            raise ValueError("iteration counts must be positive")
        if self.initial_step <= 0 or self.grad_tol <= 0:
            raise ValueError("initial_step and grad_tol must be positive")
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    grad_norm: float
    value_history: np.ndarray
    iterations: int
    termination: str


def _cubic_min(a1, f1, g1, a2, f2, g2, lo, hi):
    """Minimizer of the cubic model through two (step, value, slope)
    samples, clamped to [lo, hi]; falls back to the midpoint whenever the
    model is degenerate or any input is non-finite."""
    if all(map(math.isfinite, (f1, g1, f2, g2))) and a1 != a2:
        d1 = g1 + g2 - 3.0 * (f1 - f2) / (a1 - a2)
        disc = d1 * d1 - g1 * g2
        if disc >= 0.0:
            d2 = math.copysign(math.sqrt(disc), a2 - a1)
            denom = g2 - g1 + 2.0 * d2
            if denom != 0.0:
                cand = a2 - (a2 - a1) * (g2 + d2 - d1) / denom
                if math.isfinite(cand):
                    return min(max(cand, lo), hi)
    return 0.5 * (lo + hi)


def _strong_wolfe(phi, f0, slope0, alpha_first, c1, c2, max_trials):
    """Bracket-and-zoom search for a step satisfying strong Wolfe.

    ``phi(alpha) -> (value, slope)`` evaluates the restriction of the
    objective to the ray.  Cubic interpolation picks the trial steps.
    Returns ``(alpha, value, ok, trials)``; a non-finite value is treated
    as "stepped too far", which shrinks the bracket instead of aborting.
    """
    armijo = lambda a, f: f <= f0 + c1 * a * slope0

    def zoom(lo_a, lo_f, lo_g, hi_a, hi_f, hi_g, trials):
        stalled = False
        while trials < max_trials:
            left, right = min(lo_a, hi_a), max(lo_a, hi_a)
            a = _cubic_min(lo_a, lo_f, lo_g, hi_a, hi_f, hi_g, left, right)
            # force progress when interpolation keeps hugging an endpoint
            margin = 0.1 * (right - left)
            if min(a - left, right - a) < margin:
                if stalled or a <= left or a >= right:
                    a = right - margin if abs(a - right) < abs(a - left) else left + margin
                    stalled = False
                else:
                    stalled = True
            else:
                stalled = False
            f, slope = phi(a)
            trials += 1
            if not math.isfinite(f):
                hi_a, hi_f, hi_g = a, math.inf, math.inf
                continue
            if not armijo(a, f) or f >= lo_f:
                hi_a, hi_f, hi_g = a, f, slope
            else:
                if abs(slope) <= -c2 * slope0:
                    return a, f, True, trials
                if slope * (hi_a - lo_a) >= 0.0:
                    hi_a, hi_f, hi_g = lo_a, lo_f, lo_g
                lo_a, lo_f, lo_g = a, f, slope
        return lo_a, lo_f, False, trials

    prev_a, prev_f, prev_g = 0.0, f0, slope0
    a = alpha_first
    trials = 0
    while trials < max_trials:
        f, slope = phi(a)
        trials += 1
        if not math.isfinite(f):
            # bracket between the last good point and the blow-up
            return zoom(prev_a, prev_f, prev_g, a, math.inf, math.inf, trials)
        if not armijo(a, f) or (trials > 1 and f >= prev_f):
            return zoom(prev_a, prev_f, prev_g, a, f, slope, trials)
        if abs(slope) <= -c2 * slope0:
            return a, f, True, trials
        if slope >= 0.0:
            return zoom(a, f, slope, prev_a, prev_f, prev_g, trials)
        # extrapolate: the cubic model suggests the next trial, kept within
        # a [small growth, 10x] window of the current step
        new_a = _cubic_min(prev_a, prev_f, prev_g, a, f, slope,
                           a + 0.01 * (a - prev_a), 10.0 * a)
        prev_a, prev_f, prev_g = a, f, slope
        a = new_a
    return prev_a, prev_f, False, trials


def _two_loop(memory, grad):
    """Standard two-loop recursion; returns the descent direction."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s_last, y_last, _ = memory[-1]
    gamma = (s_last @ y_last) / (y_last @ y_last)
    r = gamma * q
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * (y @ r)
        r += (a - b) * s
    return -r


def minimize(objective: Callable, start, config: OptimizerConfig | None = None,
             callback: Callable | None = None) -> MinimizeResult:
    """Minimize ``objective(x) -> (value, gradient)`` from ``start``.

    ``callback(k, x, value, grad)`` runs after each accepted step; it may
    return a replacement ``(value, gradient)`` pair when it has changed
    the objective (used for adaptive loss weights), or None.

    Termination reason is one of ``gradient-tolerance``,
    ``max-iterations``, ``line-search-failure``.
    """
    cfg = config or OptimizerConfig()
    x = np.array(start, dtype=float)
    f, g = objective(x)
    if not (math.isfinite(f) and np.isfinite(g).all()):
        raise ValueError("objective is not finite at the starting point")

    memory: deque = deque(maxlen=cfg.history)
    history: list[float] = []
    termination = "max-iterations"

    for k in range(cfg.max_iterations):
        if float(np.linalg.norm(g)) <= cfg.grad_tol:
            termination = "gradient-tolerance"
            break

        d = _two_loop(memory, g) if memory else -g
        slope = float(d @ g)
        if not np.isfinite(d).all() or slope >= 0.0:
            memory.clear()
            d = -g
            slope = float(d @ g)

        trial_grad = {}

        def phi(alpha):
            value, grad_a = objective(x + alpha * d)
            trial_grad["g"] = grad_a
            return value, float(grad_a @ d)

        alpha_first = cfg.initial_step if k == 0 else 1.0
        alpha, f_new, ok, _ = _strong_wolfe(phi, f, slope, alpha_first,
                                            cfg.c1, cfg.c2, cfg.max_line_trials)
        if not ok:
            termination = "line-search-failure"
            break

        g_new = trial_grad["g"]
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            memory.append((s, y, 1.0 / sy))

        x = x + s
        f, g = f_new, g_new
        history.append(f)

        if callback is not None:
            replacement = callback(k, x, f, g)
            if replacement is not None:
                f, g = replacement

    return MinimizeResult(
        x=x,
        value=f,
        grad_norm=float(np.linalg.norm(g)),
        value_history=np.array(history),
        iterations=len(history),
        termination=termination,
    )


@dataclass(frozen=True)
class FitSchedule:
    """Training schedule for one identification run.

    ``theta_hold > 0`` selects the staged schedule: the drift
    coefficient's gradient is masked for at least that many iterations,
    and from then on each iteration attempts the guarded release
    (``theta`` from 1-D least squares, governing weight back to 1),
    applying it only when the projected value is positive and the total
    does not increase.  ``theta_hold == 0`` trains all parameters
    jointly from the start at the initial weights.

    ``initial_*`` are the iteration-0 loss weights (the adaptive rule
    needs a previous breakdown, so iteration 0 is free); ``initial_w_i``
    of None follows ``initial_w_o``.  ``pin_initial_slope`` additionally
    pins the surrogate's initial slope — only meaningful for cases whose
    output condition is second order and therefore leaves that slope
    free.  ``lbfgs_history`` sets the optimizer memory when the caller
    does not pass an explicit optimizer config.
    """

    initial_w_g: float = 1.0
    initial_w_o: float = 1.0
    initial_w_i: float | None = None
    theta_hold: int = 0
    pin_initial_slope: bool = False
    lbfgs_history: int = 30

    def __post_init__(self):
        if self.theta_hold < 0:
            raise ValueError("theta_hold must be >= 0")
        if min(self.initial_w_g, self.initial_w_o,
               self.initial_w_i if self.initial_w_i is not None else 1.0) <= 0:
            raise ValueError("initial weights must be positive")

    def initial_weights(self, w_i: float | None = None) -> WeightState:
        w_i_eff = w_i if w_i is not None else (
            self.initial_w_i if self.initial_w_i is not None else self.initial_w_o)
        return WeightState(w_g=self.initial_w_g, w_o=self.initial_w_o, w_i=w_i_eff)


_STAGED = FitSchedule(initial_w_g=0.1, theta_hold=60)
_FIT_SCHEDULES = {
    # second-order output condition leaves v'(t0) free: pin it
    "case1": replace(_STAGED, pin_initial_slope=True),
    "case2": _STAGED,
    # small-scale, sign-mixed drift integral: the least-squares release is
    # ill-conditioned, but joint training converges when the surrogate
    # relation is weighted heavily enough that noise cannot bend it
    "case3": FitSchedule(initial_w_o=10.0),
}


def fit_schedule_for(case: CaseDefinition) -> FitSchedule:
    """The validated per-case schedule, or the staged default."""
    return _FIT_SCHEDULES.get(case.name, _STAGED)


@dataclass
class FitResult:
    """Everything produced by one identification run."""

    case_name: str
    net_config: MlpConfig
    opt_config: OptimizerConfig
    params: ParameterSet
    theta_hat: float
    theta_history: np.ndarray
    breakdowns: list[LossBreakdown]
    value_history: np.ndarray
    iterations: int
    termination: str
    release_iteration: int | None = None

    def final_weights(self) -> WeightState:
        return self.breakdowns[-1].weights if self.breakdowns else WeightState()


class CaseFitter:
    """Reusable fitting context for one case and one measurement layout.

    Building the loss tape dominates setup time, so this class builds it
    once and lets callers run many fits (different data, seeds, noise
    levels) against it.
    """

    def __init__(self, case: CaseDefinition, times, net_config: MlpConfig | None = None,
                 w_i: float | None = None, schedule: FitSchedule | None = None):
        self.case = case
        self.net_config = net_config or MlpConfig()
        self.w_i = w_i
        self.schedule = schedule or fit_schedule_for(case)
        self.loss_graph = LossGraph(case, times, self.net_config,
                                    pin_initial_slope=self.schedule.pin_initial_slope)
        self._forcing = np.array([case.forcing(t) for t in self.loss_graph.times])

    def _projected_theta(self) -> float:
        """1-D least squares for theta on the governing residual, using the
        (u, v) values of the most recent forward pass."""
        u, v = self.loss_graph.network_outputs()
        denom = float(np.mean(v * v))
        if denom < 1e-12:
            return 0.0
        return float(np.mean((self._forcing - u) * v)) / denom

    def fit(self, values, seed: int | None = None,
            opt_config: OptimizerConfig | None = None) -> FitResult:
        sched = self.schedule
        if opt_config is None:
            opt_config = OptimizerConfig(history=sched.lbfgs_history)
        config = self.net_config if seed is None else replace(self.net_config, seed=seed)
        lg = self.loss_graph
        lg.set_data(np.asarray(values, dtype=float))

        x0 = network.flatten(network.init_parameters(config))

        # iteration 0 has no previous breakdown to adapt from: it runs at
        # the schedule's initial weights, and the per-iteration refresh
        # takes over from there. Those initial weights also act as floors:
        # above-unit starting weights exist to keep a residual from being
        # ignored, and a refresh that cut one loose would re-open exactly
        # the failure the schedule guards against.
        floor = sched.initial_weights(self.w_i)
        state = {
            "ws": floor,
            "held": sched.theta_hold > 0,
        }
        lg.set_weights(state["ws"])
        release_iteration: int | None = None

        breakdowns: list[LossBreakdown] = []
        thetas: list[float] = []

        def objective(x):
            lg.set_parameters(x)
            value = lg.total_value()
            grad = lg.gradient()
            if state["held"]:
                grad = grad.copy()
                grad[-1] = 0.0
            return value, grad

        def try_release(x, f_cur):
            """Guarded switch to joint training; edits x in place on success."""
            theta_s = self._projected_theta()
            if theta_s <= 0.0:
                return None
            ws_rel = replace(state["ws"], w_g=1.0)
            x_rel = x.copy()
            x_rel[-1] = theta_s
            lg.set_parameters(x_rel)
            lg.set_weights(ws_rel)
            f_rel = lg.total_value()
            if f_rel > f_cur:
                lg.set_parameters(x)
                lg.set_weights(state["ws"])
                return None
            state["held"] = False
            state["ws"] = ws_rel
            x[:] = x_rel
            return f_rel, lg.gradient()

        def per_iteration(k, x, f, g):
            # record this iteration under the weights it actually used
            lg.set_parameters(x)
            f_cur = lg.total_value()
            breakdowns.append(lg.breakdown(state["ws"]))
            thetas.append(float(x[-1]))
            nonlocal release_iteration
            if state["held"]:
                if k + 1 < sched.theta_hold:
                    return None
                released = try_release(x, f_cur)
                if released is not None:
                    release_iteration = k + 1
                return released
            comp = breakdowns[-1]
            cand = adaptive_weights(comp.mse_g, comp.mse_o, self.w_i)
            ws = state["ws"]
            if (cand.w_g, cand.w_i, cand.w_o) == (ws.w_g, ws.w_i, ws.w_o):
                return None
            if (cand.w_g < floor.w_g or cand.w_o < floor.w_o
                    or cand.w_i < floor.w_i):
                return None
            # accept the rebalanced weights only if they do not undo the
            # decrease already achieved at this point
            lg.set_weights(cand)
            f_cand = lg.total_value()
            if f_cand <= f_cur:
                state["ws"] = cand
                return f_cand, lg.gradient()
            lg.set_weights(ws)
            return None

        res = minimize(objective, x0, opt_config, callback=per_iteration)

        return FitResult(
            case_name=self.case.name,
            net_config=config,
            opt_config=opt_config,
            params=network.unflatten(res.x, config),
            theta_hat=float(res.x[-1]),
            theta_history=np.array(thetas),
            breakdowns=breakdowns,
            value_history=res.value_history,
            iterations=res.iterations,
            termination=res.termination,
            release_iteration=release_iteration,
        )


def fit_case(case: CaseDefinition, data: MeasurementSet,
             net_config: MlpConfig | None = None,
             opt_config: OptimizerConfig | None = None,
             seed: int | None = None, w_i: float | None = None,
             schedule: FitSchedule | None = None) -> FitResult:
    """Identify theta from measurements of one case.

    Convenience wrapper building a single-use :class:`CaseFitter`.
    """
    fitter = CaseFitter(case, data.times, net_config, w_i=w_i, schedule=schedule)
    return fitter.fit(data.values, seed=seed, opt_config=opt_config)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_loss_history_csv(path, fit: FitResult) -> None:
    """Per-iteration loss components, weights, total and theta."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iter,mse_m,mse_g,mse_o,mse_i,w_g,w_o,total,theta\n")
        for k, (b, theta) in enumerate(zip(fit.breakdowns, fit.theta_history), start=1):
            fh.write(",".join([
                str(k), _fmt(b.mse_m), _fmt(b.mse_g), _fmt(b.mse_o), _fmt(b.mse_i),
                _fmt(b.weights.w_g), _fmt(b.weights.w_o), _fmt(b.total), _fmt(theta),
            ]) + "\n")


def write_fit_json(path, fit: FitResult, loss_history_csv: str | None = None) -> None:
    """Fit summary plus the full parameter vector."""
    payload = {
        "case": fit.case_name,
        "layers": list(fit.net_config.layers),
        "seed": fit.net_config.seed,
        "theta_hat": fit.theta_hat,
        "iterations": fit.iterations,
        "termination": fit.termination,
        "release_iteration": fit.release_iteration,
        "optimizer": asdict(fit.opt_config),
        "final_weights": {
            "w_m": fit.final_weights().w_m,
            "w_g": fit.final_weights().w_g,
            "w_i": fit.final_weights().w_i,
            "w_o": fit.final_weights().w_o,
        },
        "loss_history_csv": loss_history_csv,
        "parameters": [float(p) for p in network.flatten(fit.params)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_fit_json(path) -> dict:
    """Raw payload written by :func:`write_fit_json`."""
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
