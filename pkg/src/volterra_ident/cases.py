"""Benchmark problems and their structure for identification.

Each case bundles what the simulator needs (domain, forcing, kernel,
noise shape) with what the identification stage needs: the relation that
the drift integral v(t) = int_{t0}^t k(t, s) u(s) ds satisfies along the
solution, expressed as a differential residual ("output condition").
For the built-in benchmarks that relation is closed-form; custom kernels
fall back to differentiating under the integral sign and quadrature.

Sign convention: the governing equation is u(t) = f(t) - theta * v(t)
(+ noise), so the simulator kernel is -theta * k(t, s) and theta = 1
reproduces each benchmark's closed-form solution.

Benchmarks (time already shifted so the grid variable s runs over the
stated domain):

* ``case1`` on [0, 3]: f = 4 e^t + 3 t - 4, k = t - s, integrand B dB;
  solution 2 e^t - 2 cos t + 5 sin t; here v'' = u.
* ``case2`` on [-1, 0.5]: f = e^-t + e^3t + e^t (t+1)
  + e^t (e^4t - e^-4) / 4, k = e^(t+s), integrand B dB; solution
  e^-t + e^3t; here v' = e^2t u + v.
* ``case3`` on [-1, 0.5]: f = e^(-t^2) + t e^-1 / 2 - t e^(-t^2) / 2,
  k = t s, additive Brownian noise; solution e^(-t^2); here
  t v' = t^3 u + v (the relation v' = t^2 u + v / t multiplied through
  by t, which removes the singularity at t = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .simulate import NoiseMode, ProblemSpec, make_grid

__all__ = [
    "CaseDefinition",
    "ExponentialOdeCondition",
    "QuadratureCondition",
    "SecondDerivativeCondition",
    "TimeScaledOdeCondition",
    "case_names",
    "generic_case",
    "get_case",
    "problem_spec",
]


class SecondDerivativeCondition:
    """Residual v'' - u, for kernels linear in t - s."""

    order = 2

    def residuals(self, graph, ts, us, vs, dvs, d2vs):
        return [d2v - u for d2v, u in zip(d2vs, us)]


class ExponentialOdeCondition:
    """Residual v' - e^(2t) u - v, for the kernel e^(t+s)."""

    order = 1

    def residuals(self, graph, ts, us, vs, dvs, d2vs):
        out = []
        for t, u, v, dv in zip(ts, us, vs, dvs):
            coeff = graph.constant(math.exp(2.0 * t))
            out.append(dv - coeff * u - v)
        return out


class TimeScaledOdeCondition:
    """Residual t v' - t^3 u - v, for the kernel t*s."""

    order = 1

    def residuals(self, graph, ts, us, vs, dvs, d2vs):
        out = []
        for t, u, v, dv in zip(ts, us, vs, dvs):
            out.append(graph.constant(t) * dv - graph.constant(t ** 3) * u - v)
        return out


class QuadratureCondition:
    """Generic residual via differentiation under the integral sign.

    v'(t) = k(t, t) u(t) + int_{t0}^{t} dk/dt (t, s) u(s) ds, with the
    integral approximated by the left-endpoint rule on the measurement
    times themselves.
    """

    order = 1

    def __init__(self, kernel, kernel_dt):
        self.kernel = kernel
        self.kernel_dt = kernel_dt

    def residuals(self, graph, ts, us, vs, dvs, d2vs):
        out = []
        for i, (t, u, dv) in enumerate(zip(ts, us, dvs)):
            acc = graph.constant(self.kernel(t, t)) * u
            for j in range(i):
                w = ts[j + 1] - ts[j]
                acc = acc + graph.constant(self.kernel_dt(t, ts[j]) * w) * us[j]
            out.append(dv - acc)
        return out


@dataclass(frozen=True)
class CaseDefinition:
    """A benchmark or user-defined identification problem."""

    name: str
    domain: tuple[float, float]
    forcing: Callable[[float], float]
    kernel: Callable[[float, float], float]
    noise_mode: NoiseMode
    output_condition: object
    true_theta: float = 1.0
    true_solution: Callable[[float], float] | None = None
    true_drift_integral: Callable[[float], float] | None = None
    lambda_grid: tuple[float, ...] = (0.0,)
    default_n: int = 1000
    prediction_horizon: tuple[float, float] | None = None
    prediction_lambda: float | None = None

    def signed_kernel(self, theta, t, s):
        """The simulator kernel -theta * k(t, s)."""
        return -theta * self.kernel(t, s)


def problem_spec(case: CaseDefinition, lam: float, n: int | None = None,
                 theta: float | None = None) -> ProblemSpec:
    """Simulation problem for a case at noise level ``lam``.

    ``theta`` defaults to the case's true drift coefficient; passing the
    fitted value instead turns this into the prediction model.
    """
    t0, t_end = case.domain
    grid = make_grid(t0, t_end, case.default_n if n is None else n)
    return ProblemSpec(
        grid=grid,
        forcing=case.forcing,
        kernel=lambda th, t, s: -th * case.kernel(t, s),
        lam=float(lam),
        theta=case.true_theta if theta is None else float(theta),
        noise_mode=case.noise_mode,
    )


def _case1() -> CaseDefinition:
    return CaseDefinition(
        name="case1",
        domain=(0.0, 3.0),
        forcing=lambda t: 4.0 * np.exp(t) + 3.0 * t - 4.0,
        kernel=lambda t, s: t - s,
        noise_mode=NoiseMode.BROWNIAN_INTEGRAND,
        output_condition=SecondDerivativeCondition(),
        true_solution=lambda t: 2.0 * np.exp(t) - 2.0 * np.cos(t) + 5.0 * np.sin(t),
        true_drift_integral=lambda t: 2.0 * np.exp(t) + 2.0 * np.cos(t) - 5.0 * np.sin(t) + 3.0 * t - 4.0,
        lambda_grid=(0.0, 1.0, 5.0, 20.0),
        prediction_horizon=(3.0, 4.0),
        prediction_lambda=5.0,
    )


def _case2() -> CaseDefinition:
    def forcing(t):
        return (np.exp(-t) + np.exp(3.0 * t) + np.exp(t) * (t + 1.0)
                + 0.25 * np.exp(t) * (np.exp(4.0 * t) - np.exp(-4.0)))

    return CaseDefinition(
        name="case2",
        domain=(-1.0, 0.5),
        forcing=forcing,
        kernel=lambda t, s: np.exp(t + s),
        noise_mode=NoiseMode.BROWNIAN_INTEGRAND,
        output_condition=ExponentialOdeCondition(),
        true_solution=lambda t: np.exp(-t) + np.exp(3.0 * t),
        true_drift_integral=lambda t: np.exp(t) * (t + 1.0) + 0.25 * np.exp(t) * (np.exp(4.0 * t) - np.exp(-4.0)),
        lambda_grid=(0.0, 0.1, 1.0, 2.0),
        prediction_horizon=(0.5, 1.0),
        prediction_lambda=1.0,
    )


def _case3() -> CaseDefinition:
    return CaseDefinition(
        name="case3",
        domain=(-1.0, 0.5),
        forcing=lambda t: np.exp(-t * t) + 0.5 * t * np.exp(-1.0) - 0.5 * t * np.exp(-t * t),
        kernel=lambda t, s: t * s,
        noise_mode=NoiseMode.ADDITIVE_BROWNIAN,
        output_condition=TimeScaledOdeCondition(),
        true_solution=lambda t: np.exp(-t * t),
        true_drift_integral=lambda t: 0.5 * t * np.exp(-1.0) - 0.5 * t * np.exp(-t * t),
        lambda_grid=(0.0, 0.1, 1.0, 2.0),
        prediction_horizon=(0.5, 1.0),
        prediction_lambda=1.0,
    )


_REGISTRY: dict[str, Callable[[], CaseDefinition]] = {
    "case1": _case1,
    "case2": _case2,
    "case3": _case3,
}


def case_names() -> tuple[str, ...]:
    return tuple(_REGISTRY)


def get_case(name: str) -> CaseDefinition:
    """Look up a built-in benchmark by name."""
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ValueError(
            f"unknown case {name!r}; available: {', '.join(_REGISTRY)}"
        ) from None


def generic_case(name, domain, forcing, kernel, *, kernel_dt=None,
                 noise_mode=NoiseMode.ADDITIVE_BROWNIAN, true_theta=1.0,
                 true_solution=None, lambda_grid=(0.0,), default_n=1000,
                 prediction_horizon=None, prediction_lambda=None) -> CaseDefinition:
    """Assemble a user-defined case.

    ``kernel_dt`` (the time derivative of the kernel) is required for
    fitting because the generic output condition differentiates under
    the integral sign; simulation-only cases may omit it.
    """
    if kernel_dt is None:
        condition = _MissingKernelDerivative()
    else:
        condition = QuadratureCondition(kernel, kernel_dt)
    return CaseDefinition(
        name=str(name),
        domain=(float(domain[0]), float(domain[1])),
        forcing=forcing,
        kernel=kernel,
        noise_mode=noise_mode,
        output_condition=condition,
        true_theta=float(true_theta),
        true_solution=true_solution,
        lambda_grid=tuple(float(x) for x in lambda_grid),
        default_n=int(default_n),
        prediction_horizon=prediction_horizon,
        prediction_lambda=prediction_lambda,
    )


class _MissingKernelDerivative:
    order = 1

    def residuals(self, graph, ts, us, vs, dvs, d2vs):
        raise ValueError(
            "fitting a custom case requires kernel_dt (the time derivative "
            "of the kernel) for the quadrature output condition"
        )
