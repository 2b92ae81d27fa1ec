"""Command-line runner.

Subcommands ``integrate``, ``train``, ``convergence``, ``enclosure-audit``
and ``model inspect``. Runs are driven by one JSON document with the
top-level keys ``experiment``, ``system``, ``integrator``, ``training``,
``output`` and ``seed``; unknown keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import statistics
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_ad as ad
from .dynamics import LinearField, PendulumField, stiff_system, LinearStiffSystem
from .experiments import (
    AUDIT_COLUMNS,
    CONVERGENCE_COLUMNS,
    LEARN_COLUMNS,
    SWEEP_COLUMNS,
    KnownStiffRecipe,
    LearnStiffRecipe,
    convergence_sweep,
    enclosure_audit,
    integration_sweep,
    learn_stiff,
    learn_stiff_data,
    train_known_stiff_hypereuler,
    train_known_stiff_midpoint,
)
from .integrators import StiffnessError
from .midpoint import SingularMatrixError
from .modelio import MODEL_SUFFIX, ModelFormatError, inspect_model, load_model, save_model
from .training import LOG_COLUMNS, TrainingAborted, TrainingLog

__all__ = ["main", "ConfigError", "ExperimentConfig", "load_config", "write_csv"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

EXPERIMENTS = ("known-stiff", "learn-stiff", "convergence", "enclosure-audit")
TOP_KEYS = ("experiment", "system", "integrator", "training", "output", "seed")
SYSTEM_KEYS = {"name", "lambdas", "rotation", "A", "g_over_l"}
INTEGRATOR_KEYS = {"schemes", "horizons", "orders", "n_states", "timing_reps", "dts", "x0", "samples"}
OUTPUT_KEYS = {"dir", "models"}
_KNOWN_TRAINING = {f.name for f in dataclasses.fields(KnownStiffRecipe)} - {
    "horizons", "orders", "n_states", "timing_reps"}
_LEARN_TRAINING = {f.name for f in dataclasses.fields(LearnStiffRecipe)} | {"schemes"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    system: dict = field(default_factory=dict)
    integrator: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(TOP_KEYS))
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        exp = doc.get("experiment")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {exp!r}")
        sections = {}
        for key, allowed in (("system", SYSTEM_KEYS), ("integrator", INTEGRATOR_KEYS),
                             ("output", OUTPUT_KEYS),
                             ("training", _LEARN_TRAINING if exp == "learn-stiff" else _KNOWN_TRAINING)):
            sec = doc.get(key, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"'{key}' must be an object")
            bad = sorted(set(sec) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in '{key}': {', '.join(bad)}")
            sections[key] = dict(sec)
        seed = doc.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cls(exp, sections["system"], sections["integrator"], sections["training"],
                   sections["output"], seed)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "system": dict(self.system),
                "integrator": dict(self.integrator), "training": dict(self.training),
                "output": dict(self.output), "seed": self.seed}

    @property
    def out_dir(self) -> Path:
        return Path(self.output.get("dir", "out"))

    @property
    def model_dir(self) -> Path:
        return Path(self.output.get("models", self.out_dir / "models"))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc.msg} (line {exc.lineno})") from None
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def _linear_system(sec: dict) -> LinearStiffSystem:
    name = sec.get("name", "stiff")
    if name == "stiff":
        lambdas = tuple(sec.get("lambdas", (-1.0, -1000.0)))
        if len(lambdas) != 2:
            raise ConfigError("stiff system needs two eigenvalues")
        return stiff_system(lambdas, sec.get("rotation"))
    if name == "linear":
        if "A" not in sec:
            raise ConfigError("linear system needs a matrix 'A'")
        A = np.asarray(sec["A"], dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("'A' must be a square matrix")
        ev = np.linalg.eigvals(A)
        return LinearStiffSystem(A, tuple(float(v.real) for v in ev[:2]))
    raise ConfigError(f"system '{name}' is not linear")


def _recipe(cls, sec: dict, extra: dict | None = None):
    kwargs = {}
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in {**sec, **(extra or {})}.items():
        if k not in allowed:
            continue
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _known_recipe(cfg: ExperimentConfig) -> KnownStiffRecipe:
    extra = {k: cfg.integrator[k] for k in ("horizons", "orders", "n_states", "timing_reps")
             if k in cfg.integrator}
    r = _recipe(KnownStiffRecipe, cfg.training, extra)
    if any(h <= 0 for h in r.horizons):
        raise ConfigError("horizons must be positive")
    if any(p < 1 or p > 3 for p in r.orders):
        raise ConfigError("orders must lie in 1..3")
    return r


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (np.floating,)):
        return _fmt(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    """RFC-4180 CSV: fixed header, CRLF line ends, minimal quoting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError("row width does not match the header")
            w.writerow([_fmt(v) for v in row])
    return path


def _hkey(h: float) -> str:
    return f"{h:g}"


def _midpoint_path(cfg, p, h) -> Path:
    return cfg.model_dir / f"midpoint-p{p}-h{_hkey(h)}{MODEL_SUFFIX}"


def _hyper_path(cfg, h) -> Path:
    return cfg.model_dir / f"hypereuler-h{_hkey(h)}{MODEL_SUFFIX}"


def _write_log(path, log: TrainingLog):
    write_csv(path, LOG_COLUMNS, log.rows())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    if cfg.experiment == "known-stiff":
        system = _linear_system(cfg.system)
        recipe = _known_recipe(cfg)
        for h in recipe.horizons:
            for p in recipe.orders:
                res = train_known_stiff_midpoint(system, h, p, recipe, cfg.seed)
                save_model(res.midpoint, _midpoint_path(cfg, p, h),
                           {"p": p, "dt": h, "seed": cfg.seed, "output_shape": res.midpoint.output_shape})
                _write_log(out / f"train_log_midpoint-p{p}-h{_hkey(h)}.csv", res.log)
                print(f"midpoint p={p} horizon={h:g}: {len(res.log)} steps")
            net = train_known_stiff_hypereuler(system, h, recipe, cfg.seed)
            save_model(net, _hyper_path(cfg, h), {"dt": h, "seed": cfg.seed})
            print(f"hypereuler horizon={h:g}: trained")
        return EXIT_OK
    if cfg.experiment == "learn-stiff":
        system = _linear_system(cfg.system)
        sec = dict(cfg.training)
        schemes = sec.pop("schemes", ["tl", "rk4", "truncated_taylor"])
        recipe = _recipe(LearnStiffRecipe, sec)
        data = learn_stiff_data(system, recipe, cfg.seed)
        summary = []
        for s in schemes:
            try:
                res, mse, wall = learn_stiff(system, recipe, s, cfg.seed, data)
            except TrainingAborted as exc:
                _save_learn(cfg, s, exc.result, recipe)
                raise
            _save_learn(cfg, s, res, recipe)
            summary.append((s, recipe.p if s in ("tl", "truncated_taylor") else 0, recipe.steps, mse, wall))
            print(f"{s}: held-out MSE {mse:.4e} ({wall:.1f} s)")
        write_csv(out / "learn_summary.csv", LEARN_COLUMNS, summary)
        return EXIT_OK
    raise ConfigError(f"'train' does not apply to experiment '{cfg.experiment}'")


def _save_learn(cfg, scheme, res, recipe):
    meta = {"scheme": scheme, "p": recipe.p, "dt": recipe.horizon, "seed": cfg.seed}
    save_model(res.field, cfg.model_dir / f"dynamics-{scheme}{MODEL_SUFFIX}", meta)
    if scheme == "tl":
        save_model(res.midpoint, cfg.model_dir / f"midpoint-learn{MODEL_SUFFIX}", meta)
    _write_log(cfg.out_dir / f"train_log_{scheme}.csv", res.log)


def cmd_integrate(cfg: ExperimentConfig) -> int:
    if cfg.experiment != "known-stiff":
        raise ConfigError("'integrate' runs the known-stiff experiment")
    system = _linear_system(cfg.system)
    recipe = _known_recipe(cfg)
    schemes = cfg.integrator.get("schemes", ["tl", "truncated_taylor", "rk4", "hypereuler", "dopri5"])
    midpoints, residuals = {}, {}
    for h in recipe.horizons:
        if "tl" in schemes:
            for p in recipe.orders:
                midpoints[(p, h)] = load_model(_midpoint_path(cfg, p, h), expect_n=2)
        if "hypereuler" in schemes:
            residuals[h] = load_model(_hyper_path(cfg, h), expect_n=2)
    rows = integration_sweep(system, recipe, cfg.seed, midpoints, residuals, schemes)
    write_csv(cfg.out_dir / "integrate.csv", SWEEP_COLUMNS, rows)
    groups = defaultdict(list)
    for r in rows:
        groups[(r[0], r[1], r[2])].append(r)
    summary = []
    for (s, p, h), rs in groups.items():
        summary.append((s, p, h, float(np.mean([r[4] for r in rs])), float(np.mean([r[5] for r in rs])),
                        int(statistics.median([r[6] for r in rs]))))
        print(f"{s:17s} p={p} horizon={h:<5g} mean error {summary[-1][3]:.3e} "
              f"nfe {summary[-1][4]:.0f} median {summary[-1][5]} ns")
    write_csv(cfg.out_dir / "integrate_summary.csv",
              ("scheme", "p", "horizon", "mean_normalized_error", "mean_nfe", "median_wall_ns"), summary)
    return EXIT_OK


def cmd_convergence(cfg: ExperimentConfig) -> int:
    system = _linear_system(cfg.system or {"name": "stiff"})
    dts = cfg.integrator.get("dts", list(np.logspace(-5, -4, 6)))
    x0 = np.asarray(cfg.integrator.get("x0", [0.3, 0.3]), dtype=np.float64)
    if x0.shape != (system.A.shape[0],):
        raise ConfigError("x0 does not match the system dimension")
    if any(d <= 0 for d in dts):
        raise ConfigError("dts must be positive")
    rows = convergence_sweep(system.A, x0, dts)
    write_csv(cfg.out_dir / "convergence.csv", CONVERGENCE_COLUMNS, rows)
    seen = set()
    for s, p, _, _, slope in rows:
        if (s, p) not in seen:
            seen.add((s, p))
            print(f"{s:17s} p={p} slope {slope}")
    return EXIT_OK


def cmd_enclosure_audit(cfg: ExperimentConfig) -> int:
    samples = int(cfg.integrator.get("samples", 1000))
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    systems = {"linear": _linear_system(cfg.system or {"name": "stiff"}).field,
               "pendulum": PendulumField(float(cfg.system.get("g_over_l", 1.0)))}
    rows = enclosure_audit(systems, samples, cfg.seed)
    write_csv(cfg.out_dir / "enclosure_audit.csv", AUDIT_COLUMNS, rows)
    bad = 0
    for name in systems:
        rs = [r for r in rows if r[0] == name]
        g = sum(not r[5] for r in rs)
        e = sum(not r[7] for r in rs)
        bad += g + e
        print(f"{name}: {len(rs)} samples, gronwall violations {g}, enclosure violations {e}")
    return EXIT_NUMERIC if bad else EXIT_OK


def cmd_model_inspect(path) -> int:
    print(json.dumps(inspect_model(path), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "integrate": cmd_integrate,
    "train": cmd_train,
    "convergence": cmd_convergence,
    "enclosure-audit": cmd_enclosure_audit,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlode", description="Taylor-Lagrange ODE integration and training")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
    mp = sub.add_parser("model")
    msub = mp.add_subparsers(dest="model_command", required=True)
    ip = msub.add_parser("inspect")
    ip.add_argument("path")
    return ap


def _run(args) -> int:
    if args.command == "model":
        return cmd_model_inspect(args.path)
    cfg = load_config(args.config)
    if args.seed is not None:
        doc = cfg.to_dict()
        doc["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(doc)
    if args.out is not None:
        cfg.output["dir"] = args.out
    return COMMANDS[args.command](cfg)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StiffnessError, ad.NonFiniteError, TrainingAborted, SingularMatrixError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ModelFormatError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
