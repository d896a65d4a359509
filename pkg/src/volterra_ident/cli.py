"""Configuration-driven pipeline: simulate, fit, predict, report.

Each subcommand reads one experiment configuration (JSON file and/or
flags), performs its stage, writes plot-ready CSV/JSON artifacts into
the output directory, and records a manifest of what it produced.

Every random stream is derived from the master seed with fixed,
well-separated offsets (ensembles consume one Brownian seed per path,
so stages must not share seed ranges):

* data ensemble for the j-th noise level:  seed + 10000*(j+1)
* network initialization:                  seed
* prediction band ensemble:                seed + 444000
* truth trajectories for coverage:         seed + 555000

Running the same configuration twice therefore reproduces every
result file byte for byte; manifests carry wall-clock times and are
the one deliberate exception.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, network
from .autodiff import NonFiniteValueError
from .cases import CaseDefinition, case_names, get_case, problem_spec
from .optimize import (
    CaseFitter,
    OptimizerConfig,
    read_fit_json,
    write_fit_json,
    write_loss_history_csv,
)
from .predict import (
    coverage_check,
    predict_band,
    simulate_truth,
    write_band_csv,
    write_coverage_json,
)
from .simulate import (
    NumericalBlowupError,
    Trajectory,
    read_measurements_csv,
    simulate_ensemble,
    subsample_measurements,
    write_ensemble_csv,
    write_measurements_csv,
    write_trajectory_csv,
)

__all__ = [
    "ExperimentConfig",
    "cmd_fit",
    "cmd_predict",
    "cmd_report",
    "cmd_simulate",
    "load_config",
    "main",
]

_DATA_SEED_STRIDE = 10_000
_BAND_SEED_OFFSET = 444_000
_TRUTH_SEED_OFFSET = 555_000

_DEFAULT_LAMBDAS = {
    "case1": (0.0, 1.0, 5.0, 20.0),
    "case2": (0.0, 0.1, 1.0, 2.0),
    "case3": (0.0, 0.1, 1.0, 2.0),
}


@dataclass
class ExperimentConfig:
    """One experiment: which case, which noise levels, which budgets."""

    case: str = "case1"
    lambdas: tuple[float, ...] | None = None
    n: int = 1000
    n_paths: int = 100
    n_measurements: int = 50
    optimizer: dict = field(default_factory=dict)
    band_paths: int = 1000
    band_steps: int = 250
    truth_count: int = 20
    horizon: tuple[float, float] | None = None
    prediction_lambda: float | None = None
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.case not in case_names():
            raise ValueError(f"unknown case {self.case!r}; choose from {case_names()}")
        if self.lambdas is None:
            self.lambdas = _DEFAULT_LAMBDAS[self.case]
        self.lambdas = tuple(float(lam) for lam in self.lambdas)
        if not self.lambdas:
            raise ValueError("need at least one noise level")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("noise levels must be non-negative")
        for name in ("n", "n_paths", "n_measurements", "band_paths",
                     "band_steps", "truth_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 2 <= self.n_measurements <= self.n + 1:
            raise ValueError("n_measurements must be between 2 and n+1")
        allowed = {f.name for f in fields(OptimizerConfig)}
        unknown = set(self.optimizer) - allowed
        if unknown:
            raise ValueError(f"unknown optimizer settings: {sorted(unknown)}")
        if self.horizon is not None:
            self.horizon = (float(self.horizon[0]), float(self.horizon[1]))

    # -- derived seeds ----------------------------------------------------
    def data_seed(self, lam_index: int) -> int:
        return self.seed + _DATA_SEED_STRIDE * (lam_index + 1)

    @property
    def band_seed(self) -> int:
        return self.seed + _BAND_SEED_OFFSET

    @property
    def truth_seed(self) -> int:
        return self.seed + _TRUTH_SEED_OFFSET

    # -- file layout -------------------------------------------------------
    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    def lam_tag(self, lam: float) -> str:
        return f"{self.case}_lam{lam:g}"


def load_config(path) -> ExperimentConfig:
    """Read an :class:`ExperimentConfig` from a JSON file."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown config keys in {path}: {sorted(unknown)}")
    return ExperimentConfig(**raw)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _write_manifest(cfg: ExperimentConfig, command: str, files: list[Path],
                    seeds: dict, elapsed: float) -> Path:
    for f in files:
        if not Path(f).is_file() or Path(f).stat().st_size == 0:
            raise OSError(f"stage output missing or empty: {f}")
    payload = {
        "command": command,
        "config": asdict(cfg),
        "versions": {
            "volterra-ident": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "files": [str(f) for f in files],
        "seeds": seeds,
        "wall_clock_seconds": round(elapsed, 3),
    }
    out = cfg.path(f"manifest_{command}.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig) -> list[Path]:
    """Ensemble, mean trajectory, and measurement CSVs per noise level."""
    t_start = time.perf_counter()
    case = get_case(cfg.case)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    seeds = {}
    for j, lam in enumerate(cfg.lambdas):
        spec = problem_spec(case, lam, n=cfg.n)
        seed = cfg.data_seed(j)
        seeds[f"lambda={lam:g}"] = seed
        ens = simulate_ensemble(spec, cfg.n_paths, seed=seed)
        times, values = subsample_measurements(
            Trajectory(ens.grid, ens.mean), cfg.n_measurements)
        tag = cfg.lam_tag(lam)
        triplet = {
            f"{tag}_ensemble.csv": lambda p, e=ens: write_ensemble_csv(p, e),
            f"{tag}_mean.csv": lambda p, e=ens: write_trajectory_csv(
                p, Trajectory(e.grid, e.mean)),
            f"{tag}_measurements.csv": lambda p, t=times, v=values:
                write_measurements_csv(p, t, v),
        }
        for name, write in triplet.items():
            out = cfg.path(name)
            write(out)
            files.append(out)
    files.append(_write_manifest(cfg, "simulate", files, seeds,
                                 time.perf_counter() - t_start))
    return files


def _require_file(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run `{hint}` first")
    return path


def cmd_fit(cfg: ExperimentConfig) -> list[Path]:
    """Identify the drift coefficient per noise level; write fit artifacts."""
    t_start = time.perf_counter()
    case = get_case(cfg.case)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    fitter = None
    fitter_times = None
    for lam in cfg.lambdas:
        tag = cfg.lam_tag(lam)
        meas = _require_file(cfg.path(f"{tag}_measurements.csv"), "simulate")
        times, values = read_measurements_csv(meas)
        if fitter is None or not np.array_equal(fitter_times, times):
            fitter = CaseFitter(case, times)
            fitter_times = times
        opt_config = None
        if cfg.optimizer:
            base = {"history": fitter.schedule.lbfgs_history}
            base.update(cfg.optimizer)
            opt_config = OptimizerConfig(**base)
        result = fitter.fit(values, seed=cfg.seed, opt_config=opt_config)
        loss_csv = cfg.path(f"{tag}_loss.csv")
        write_loss_history_csv(loss_csv, result)
        fit_json = cfg.path(f"{tag}_fit.json")
        write_fit_json(fit_json, result, loss_history_csv=loss_csv.name)
        files.extend([loss_csv, fit_json])
    files.append(_write_manifest(cfg, "fit", files, {"network_init": cfg.seed},
                                 time.perf_counter() - t_start))
    return files


def _prediction_lambda(cfg: ExperimentConfig, case: CaseDefinition) -> float:
    return (case.prediction_lambda if cfg.prediction_lambda is None
            else cfg.prediction_lambda)


def cmd_predict(cfg: ExperimentConfig) -> list[Path]:
    """Confidence band, coverage report, and a long-format plotting CSV."""
    t_start = time.perf_counter()
    case = get_case(cfg.case)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    lam = _prediction_lambda(cfg, case)
    fit_json = _require_file(cfg.path(f"{cfg.lam_tag(lam)}_fit.json"), "fit")
    theta_hat = float(read_fit_json(fit_json)["theta_hat"])

    band = predict_band(case, theta_hat, lam, horizon=cfg.horizon,
                        n_paths=cfg.band_paths, n_steps=cfg.band_steps,
                        seed=cfg.band_seed)
    truth = simulate_truth(case, lam=lam, horizon=cfg.horizon,
                           count=cfg.truth_count, seed=cfg.truth_seed)
    report = coverage_check(band, truth)

    band_csv = cfg.path(f"{cfg.case}_band.csv")
    write_band_csv(band_csv, band)
    coverage_json = cfg.path(f"{cfg.case}_coverage.json")
    write_coverage_json(coverage_json, report)
    long_csv = cfg.path(f"{cfg.case}_band_long.csv")
    _write_long_csv(long_csv, band, truth)

    files = [band_csv, coverage_json, long_csv]
    files.append(_write_manifest(
        cfg, "predict", files,
        {"band": cfg.band_seed, "truth": cfg.truth_seed},
        time.perf_counter() - t_start))
    return files


def _write_long_csv(path, band, truth) -> None:
    """`t,series,value` rows: band curves plus each truth trajectory."""
    nodes = band.grid.nodes
    series = [("lower", band.lower), ("upper", band.upper), ("mean", band.mean)]
    for i, traj in enumerate(truth):
        series.append((f"truth_{i:02d}",
                       np.interp(nodes, traj.grid.nodes, traj.values)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,series,value\n")
        for name, values in series:
            for t, v in zip(nodes, values):
                fh.write(f"{t:.17g},{name},{v:.17g}\n")


def cmd_report(cfg: ExperimentConfig) -> list[Path]:
    """Aggregate fit results across noise levels into one summary CSV."""
    t_start = time.perf_counter()
    case = get_case(cfg.case)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in cfg.lambdas:
        tag = cfg.lam_tag(lam)
        payload = read_fit_json(_require_file(cfg.path(f"{tag}_fit.json"), "fit"))
        times, measured = read_measurements_csv(
            _require_file(cfg.path(f"{tag}_measurements.csv"), "simulate"))
        params = network.unflatten(
            np.array(payload["parameters"]),
            network.MlpConfig(layers=tuple(payload["layers"])))
        u_pred = np.array([network.forward_values(params, t)[0] for t in times])
        abs_err = np.abs(u_pred - measured)
        theta_pred = payload["theta_hat"]
        rows.append((lam, case.true_theta, theta_pred,
                     (theta_pred - case.true_theta) / case.true_theta,
                     float(abs_err.sum()), float(abs_err.mean())))

    summary = cfg.path(f"{cfg.case}_summary.csv")
    with open(summary, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("lambda,theta_true,theta_pred,theta_rel_err,"
                 "u_abs_err_sum,u_abs_err_mean\n")
        for row in rows:
            fh.write(",".join(format(x, ".17g") for x in row) + "\n")

    print(f"{'lambda':>8} {'theta_pred':>12} {'rel_err':>12} {'u_err_sum':>12}")
    for lam, _, theta_pred, rel, err_sum, _ in rows:
        print(f"{lam:8g} {theta_pred:12.6f} {rel:12.3e} {err_sum:12.4f}")

    files = [summary]
    files.append(_write_manifest(cfg, "report", files, {},
                                 time.perf_counter() - t_start))
    return files


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volterra-ident",
        description="Simulate, identify, and validate integral-equation models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--case", choices=case_names())
        p.add_argument("--lambda", dest="lambdas",
                       help="comma-separated noise levels, e.g. 0,1,5,20")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(
        case=args.case or "case1")
    overrides = {}
    if args.case:
        overrides["case"] = args.case
    if args.lambdas:
        try:
            overrides["lambdas"] = tuple(
                float(s) for s in args.lambdas.split(","))
        except ValueError:
            raise ValueError(f"cannot parse noise levels {args.lambdas!r}") from None
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if overrides:
        merged = asdict(cfg)
        # switching case without an explicit list re-resolves the default
        if "case" in overrides and "lambdas" not in overrides \
                and cfg.lambdas == _DEFAULT_LAMBDAS[cfg.case]:
            merged["lambdas"] = None
        merged.update(overrides)
        cfg = ExperimentConfig(**merged)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        _COMMANDS[args.command](cfg)
    except NumericalBlowupError as err:
        print(f"error: numerical-blowup: {err}", file=sys.stderr)
        return 4
    except NonFiniteValueError as err:
        print(f"error: non-finite-value: {err}", file=sys.stderr)
        return 5
    except ValueError as err:
        print(f"error: invalid-argument: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: io-error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
