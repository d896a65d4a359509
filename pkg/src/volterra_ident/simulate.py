"""Finite-difference simulation of Volterra integral equations with noise.

Solves

    X(t) = f(t) + int_{t0}^{t} k(theta, t, s) X(s) ds
                + lam * int_{t0}^{t} h(t, s) dB_s

on a uniform grid t_i = t0 + i*dt by the left-endpoint rule: the drift
integral at t_i is approximated by dt * sum_{j<i} k(theta, t_i, t_j) X_j,
which makes the recursion explicit,

    X_0 = f(t_0),
    X_i = f(t_i) + dt * sum_{j<i} k(theta, t_i, t_j) X_j + lam * I_i.

The stochastic term I_i is evaluated exactly (given the Brownian path at
the nodes) through closed-form Ito integrals rather than a discretized
sum; see :func:`ito_term` for the two supported integrand shapes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "BrownianPath",
    "Ensemble",
    "NoiseMode",
    "NumericalBlowupError",
    "ProblemSpec",
    "TimeGrid",
    "Trajectory",
    "ito_term",
    "make_grid",
    "read_ensemble_csv",
    "read_measurements_csv",
    "read_trajectory_csv",
    "sample_brownian",
    "simulate_ensemble",
    "solve_fdm",
    "subsample_measurements",
    "write_ensemble_csv",
    "write_measurements_csv",
    "write_trajectory_csv",
]


class NumericalBlowupError(ArithmeticError):
    """The forward recursion produced inf or nan."""

    def __init__(self, step: int, time: float, path_index: int | None = None):
        where = f"step {step} (t = {time:g})"
        if path_index is not None:
            where += f" on path {path_index}"
        super().__init__(f"solution became non-finite at {where}")
        self.step = step
        self.time = time
        self.path_index = path_index


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of n+1 nodes on [t0, t_end]; build with :func:`make_grid`."""

    t0: float
    t_end: float
    n: int
    dt: float
    nodes: np.ndarray


def make_grid(t0: float, t_end: float, n: int) -> TimeGrid:
    """Uniform grid with n subintervals (n + 1 nodes) on [t0, t_end]."""
    t0, t_end = float(t0), float(t_end)
    if not (math.isfinite(t0) and math.isfinite(t_end)):
        raise ValueError("grid endpoints must be finite")
    if not t_end > t0:
        raise ValueError("grid requires t_end > t0")
    n = int(n)
    if n < 1:
        raise ValueError("grid requires at least one subinterval")
    return TimeGrid(t0, t_end, n, (t_end - t0) / n, np.linspace(t0, t_end, n + 1))


def _same_grid(a: TimeGrid, b: TimeGrid) -> bool:
    return a is b or (a.n == b.n and np.array_equal(a.nodes, b.nodes))


class NoiseMode(enum.Enum):
    """Shape of the stochastic integrand h(t, s)."""

    ADDITIVE_BROWNIAN = "additive-brownian"    # h = 1:     int dB   = B(t)
    BROWNIAN_INTEGRAND = "brownian-integrand"  # h = B(s):  int B dB = (B(t)^2 - (t - t0)) / 2


@dataclass(frozen=True)
class BrownianPath:
    """Standard Brownian motion sampled at the grid nodes, B(t0) = 0."""

    grid: TimeGrid
    values: np.ndarray


def sample_brownian(grid: TimeGrid, seed: int) -> BrownianPath:
    """Draw one Brownian path on the grid.

    Increments are i.i.d. Normal(0, dt); the same seed always yields the
    bitwise-identical path.
    """
    rng = np.random.default_rng(seed)
    increments = rng.normal(0.0, math.sqrt(grid.dt), grid.n)
    values = np.empty(grid.n + 1)
    values[0] = 0.0
    np.cumsum(increments, out=values[1:])
    return BrownianPath(grid, values)


def ito_term(path: BrownianPath, mode: NoiseMode) -> np.ndarray:
    """Closed-form Ito integral of the noise integrand along the path.

    ADDITIVE_BROWNIAN:   I(t) = B(t)
    BROWNIAN_INTEGRAND:  I(t) = (B(t)^2 - (t - t0)) / 2

    The elapsed time t - t0 is measured from the start of the grid, so a
    grid beginning at a negative time still gets Brownian time starting
    at zero.
    """
    if mode is NoiseMode.ADDITIVE_BROWNIAN:
        return path.values.copy()
    if mode is NoiseMode.BROWNIAN_INTEGRAND:
        elapsed = path.grid.nodes - path.grid.t0
        return 0.5 * path.values ** 2 - 0.5 * elapsed
    raise ValueError(f"unknown noise mode: {mode!r}")


@dataclass(frozen=True)
class ProblemSpec:
    """One simulation problem: grid, data functions and noise settings.

    ``forcing`` maps a time to a real; ``kernel`` maps
    (theta, t, s) to a real and should broadcast over numpy arrays in its
    last two arguments (a slow elementwise fallback covers kernels that
    do not).  ``lam`` scales the noise; ``theta`` is the drift
    coefficient passed through to the kernel.
    """

    grid: TimeGrid
    forcing: Callable[[float], float]
    kernel: Callable[[float, float, float], float]
    lam: float
    theta: float
    noise_mode: NoiseMode

    def __post_init__(self):
        if not callable(self.forcing) or not callable(self.kernel):
            raise ValueError("forcing and kernel must be callable")
        if not math.isfinite(self.theta):
            raise ValueError("theta must be finite")
        if not (math.isfinite(self.lam) and self.lam >= 0.0):
            raise ValueError("lam must be finite and non-negative")
        if not isinstance(self.noise_mode, NoiseMode):
            raise ValueError("noise_mode must be a NoiseMode")


@dataclass(frozen=True)
class Trajectory:
    """One solution path sampled at the grid nodes."""

    grid: TimeGrid
    values: np.ndarray


@dataclass(frozen=True)
class Ensemble:
    """A family of solution paths plus their pointwise mean."""

    grid: TimeGrid
    paths: np.ndarray  # shape (n_paths, n + 1)
    mean: np.ndarray   # shape (n + 1,)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]


def _forcing_values(spec: ProblemSpec) -> np.ndarray:
    return np.array([float(spec.forcing(t)) for t in spec.grid.nodes])


def _kernel_matrix(spec: ProblemSpec) -> np.ndarray:
    """k(theta, t_i, t_j) tabulated for all node pairs (only j < i is used)."""
    t = spec.grid.nodes
    m = t.size
    try:
        k = np.asarray(spec.kernel(spec.theta, t[:, None], t[None, :]), dtype=float)
        if k.shape == (m, m):
            return k
    except Exception:
        pass
    return np.array([[float(spec.kernel(spec.theta, ti, tj)) for tj in t] for ti in t])


def _advance(kernel_matrix, forcing_values, noise, dt, nodes):
    """The explicit left-endpoint recursion shared by all entry points."""
    m = forcing_values.size
    x = np.empty(m)
    x[0] = forcing_values[0] + noise[0]
    if not math.isfinite(x[0]):
        raise NumericalBlowupError(0, nodes[0])
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, m):
            xi = forcing_values[i] + dt * (kernel_matrix[i, :i] @ x[:i]) + noise[i]
            if not math.isfinite(xi):
                raise NumericalBlowupError(i, nodes[i])
            x[i] = xi
    return x


def solve_fdm(spec: ProblemSpec, path: BrownianPath | None = None) -> Trajectory:
    """Solve one realization of the integral equation.

    Parameters
    ----------
    spec : ProblemSpec
        Problem definition; ``spec.lam == 0`` gives the deterministic
        solution, in which case ``path`` may be omitted.
    path : BrownianPath, optional
        Driving noise, sampled on the same grid as ``spec``.

    Returns
    -------
    Trajectory
        The solution at the grid nodes.
    """
    if path is None:
        if spec.lam != 0.0:
            raise ValueError("a Brownian path is required when lam > 0")
        noise = np.zeros(spec.grid.n + 1)
    else:
        if not _same_grid(path.grid, spec.grid):
            raise ValueError("Brownian path grid does not match the problem grid")
        noise = spec.lam * ito_term(path, spec.noise_mode)
    values = _advance(_kernel_matrix(spec), _forcing_values(spec), noise,
                      spec.grid.dt, spec.grid.nodes)
    return Trajectory(spec.grid, values)


def simulate_ensemble(spec: ProblemSpec, n_paths: int, seed: int) -> Ensemble:
    """Simulate ``n_paths`` independent realizations and their mean.

    Path p uses the Brownian path seeded with ``seed + p``, so an
    ensemble is reproducible and any member can be regenerated in
    isolation.  The kernel table and forcing values are shared across
    paths; the arithmetic per path is identical to :func:`solve_fdm`.
    """
    n_paths = int(n_paths)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    kernel_matrix = _kernel_matrix(spec)
    forcing_values = _forcing_values(spec)
    grid = spec.grid
    paths = np.empty((n_paths, grid.n + 1))
    for p in range(n_paths):
        brownian = sample_brownian(grid, seed + p)
        noise = spec.lam * ito_term(brownian, spec.noise_mode)
        try:
            paths[p] = _advance(kernel_matrix, forcing_values, noise, grid.dt, grid.nodes)
        except NumericalBlowupError as err:
            raise NumericalBlowupError(err.step, err.time, path_index=p) from err
    return Ensemble(grid, paths, paths.mean(axis=0))


def subsample_measurements(traj: Trajectory, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``count`` nodes spread evenly over the trajectory.

    Index j of the subsample maps to node round(j * n / (count - 1)), so
    the first and last grid nodes are always included and the returned
    times are strictly increasing.  ``count`` must be between 2 and the
    number of nodes.
    """
    n = traj.grid.n
    count = int(count)
    if count < 2:
        raise ValueError("need at least two measurement points")
    if count > n + 1:
        raise ValueError(f"cannot pick {count} distinct nodes from {n + 1}")
    j = np.arange(count)
    idx = np.floor(j * n / (count - 1) + 0.5).astype(int)
    return traj.grid.nodes[idx], traj.values[idx]


# ---------------------------------------------------------------------------
# CSV serialization.  All floats are written with 17 significant digits so
# files round-trip exactly and identical runs are byte-identical.
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """Write columns t,x."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,x\n")
        for t, x in zip(traj.grid.nodes, traj.values):
            fh.write(f"{_fmt(t)},{_fmt(x)}\n")


def read_trajectory_csv(path) -> Trajectory:
    """Read a file written by :func:`write_trajectory_csv`."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, x = data[:, 0], data[:, 1]
    grid = _grid_from_nodes(t)
    return Trajectory(grid, x)


def write_ensemble_csv(path, ens: Ensemble) -> None:
    """Write columns t,mean,p0,...,p{k-1} (one column per path)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,mean," + ",".join(f"p{i}" for i in range(ens.n_paths)) + "\n")
        for i, t in enumerate(ens.grid.nodes):
            row = [_fmt(t), _fmt(ens.mean[i])]
            row.extend(_fmt(x) for x in ens.paths[:, i])
            fh.write(",".join(row) + "\n")


def read_ensemble_csv(path) -> Ensemble:
    """Read a file written by :func:`write_ensemble_csv`."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    grid = _grid_from_nodes(data[:, 0])
    mean = data[:, 1]
    paths = data[:, 2:].T.copy()
    return Ensemble(grid, paths, mean)


def write_measurements_csv(path, times: np.ndarray, values: np.ndarray) -> None:
    """Write columns t,u."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,u\n")
        for t, u in zip(times, values):
            fh.write(f"{_fmt(t)},{_fmt(u)}\n")


def read_measurements_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a file written by :func:`write_measurements_csv`."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def _grid_from_nodes(t: np.ndarray) -> TimeGrid:
    grid = make_grid(t[0], t[-1], t.size - 1)
    if not np.allclose(grid.nodes, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t[-1]))):
        raise ValueError("file grid is not uniform")
    return grid
