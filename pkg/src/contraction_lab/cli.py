"""Command-line front end.

Exit codes: 0 when every check passes, 2 when a check fails, 1 on errors.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .artifacts import atomic_write, dumps_json, write_csv, write_json, write_svg
from .config import config_hash, load_config, parse_value
from .coupling import CouplingKind, simulate_pairs
from .errors import ConfigError, LabError
from .harness import (
    COUPLING,
    EMPIRICAL_OT,
    ExperimentConfig,
    contraction_experiment,
    coupling_time_experiment,
    equilibrium_experiment,
    fit_rate,
    kuwada_check,
    survival_from_times,
)
from .model import model_from_config
from .ot import EmpiricalMeasure, YoungFunction, wasserstein_inf, wasserstein_p, wasserstein_phi
from .theory import (
    estimate_condition_sup,
    estimate_eb_constants,
    estimate_Kp,
    g_phi,
    lyapunov_constants,
    ppn_norm_bound,
    select_lambda0,
)

SUBCOMMANDS = ("check-conditions", "rates", "simulate", "wasserstein", "contraction", "coupling-time",
               "kuwada", "equilibrium", "gphi", "validate")
PASS, ERROR, FAIL = 0, 1, 2


class Run:
    """Collects the artifacts of one subcommand and writes the manifest."""

    def __init__(self, out_dir: Path, cfg: dict | None):
        self.out = out_dir
        self.cfg = cfg
        self.files: list[Path] = []
        self.started = datetime.now(timezone.utc).isoformat()

    def json(self, name: str, obj) -> None:
        self.files.append(write_json(self.out / name, obj))

    def csv(self, name: str, columns) -> None:
        self.files.append(write_csv(self.out / name, columns))

    def svg(self, name: str, series, **kw) -> None:
        self.files.append(write_svg(self.out / name, series, **kw))

    def manifest(self) -> dict:
        files = [{"path": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in self.files]
        man = {
            "tool": "contraction-lab",
            "version": __version__,
            "config_hash": config_hash(self.cfg) if self.cfg is not None else None,
            "seed": (self.cfg or {}).get("seed", 0),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "files": sorted(files, key=lambda f: f["path"]),
        }
        atomic_write(self.out / "manifest.json", dumps_json(man))
        return man


# config -> objects

def _require(cfg: dict, key: str) -> Any:
    if key not in cfg:
        raise ConfigError(f"this subcommand needs {key!r}", f"/{key}")
    return cfg[key]


def build_model(cfg: dict):
    try:
        return model_from_config(cfg["model"])
    except ConfigError:
        raise
    except LabError as exc:
        raise ConfigError(str(exc), "/model") from None


def build_coupling(cfg: dict, model) -> CouplingKind:
    spec = _require(cfg, "coupling")
    kind = spec["kind"]
    if kind == "synchronous":
        return CouplingKind.synchronous()
    lam = spec.get("lambda0", "auto")
    if lam == "auto":
        lam = select_lambda0(model, cfg.get("box", 3.0))
    if kind == "reflection":
        return CouplingKind.reflection(lam)
    if "r0" not in spec:
        raise ConfigError("hybrid coupling needs r0", "/coupling/r0")
    return CouplingKind.hybrid(lam, spec["r0"])


def build_distance(item):
    if isinstance(item, dict):
        return YoungFunction.from_expression(item["young"])
    if item == "inf":
        return math.inf
    return float(item)


def experiment_config(cfg: dict, workers: int):
    model = build_model(cfg)
    initial, time = _require(cfg, "initial"), _require(cfg, "time")
    if "horizon" not in time:
        raise ConfigError("this subcommand needs a horizon", "/time/horizon")
    return ExperimentConfig(
        model, build_coupling(cfg, model), initial["x"], initial["y"], time["horizon"], time["dt"],
        cfg.get("n_paths", 1000), time.get("grid_dt"), [build_distance(d) for d in cfg.get("distances", [2])],
        cfg.get("seed", 0), cfg.get("n_ot"), cfg.get("coupling", {}).get("couple_threshold", 0.0), workers,
    )


# subcommands

def cmd_validate(args, cfg, run) -> int:
    build_model(cfg)
    print("config valid")
    return PASS


def cmd_rates(args, cfg, run) -> int:
    theory = dict(cfg.get("theory", {})) if cfg else {}
    for key, val in (("K1", args.k1), ("K2", args.k2), ("r0", args.r0), ("lambda0", args.lambda0)):
        if val is not None:
            theory[key] = val
    missing = [k for k in ("K1", "K2", "r0") if k not in theory]
    if missing:
        raise ConfigError(f"rates needs {', '.join(missing)} (flags --k1/--k2/--r0 or a theory block)",
                          f"/theory/{missing[0]}")
    rep = lyapunov_constants(theory["K1"], theory["K2"], theory["r0"], theory.get("lambda0", 1.0))
    ok = rep.key_margin >= -1e-12 * (rep.K1 + rep.K2)
    run.json("rates.json", {**rep.to_dict(), "key_inequality_holds": ok})
    return PASS if ok else FAIL


def cmd_check_conditions(args, cfg, run) -> int:
    model = build_model(cfg)
    opts = cfg.get("conditions", {})
    box = cfg.get("box", 3.0)
    seed = cfg.get("seed", 0)
    n_pairs, steps = opts.get("n_pairs", 4096), opts.get("refine_steps", 20)
    lam = opts.get("lambda0")
    reports = {}
    for cond in opts.get("check", ["DSS", "EB"]):
        if cond == "DSS":
            rep = estimate_Kp(model, opts.get("p", 2.0), box, n_pairs, steps, seed)
        elif cond == "EB":
            lam_eb = lam or select_lambda0(model, box)
            rep = estimate_eb_constants(model, lam_eb, box, seed, opts.get("r0"), n_pairs, steps)
        else:
            needs_lam = cond in ("DSS2", "DSS3")
            rep = estimate_condition_sup(model, cond, box, n_pairs, steps, seed,
                                         (lam or select_lambda0(model, box)) if needs_lam else None)
        reports[cond] = rep.to_dict()
    run.json("conditions.json", reports)
    return PASS


def cmd_simulate(args, cfg, run) -> int:
    ec = experiment_config(cfg, args.workers)
    ens = simulate_pairs(ec.model, ec.coupling, ec.x, ec.y, ec.horizon, ec.dt, ec.seed, ec.n_paths, ec.grid_dt,
                         couple_threshold=ec.couple_threshold, workers=ec.workers)
    R = ens.rho
    ok = ~np.isnan(R).any(axis=1)
    mean = np.nanmean(R[ok], axis=0) if ok.any() else np.full(R.shape[1], np.nan)
    se = R[ok].std(axis=0, ddof=1) / math.sqrt(max(ok.sum(), 1)) if ok.sum() > 1 else np.zeros(R.shape[1])
    S, S_se = survival_from_times(ens.T, ens.times)
    run.csv("rho.csv", {"t": ens.times, "mean_rho": mean, "stderr": se, "survival": S})
    run.csv("coupling_times.csv", {"path": ens.path_indices, "T": ens.T})
    run.json("simulate.json", {"n_paths": ec.n_paths, "diverged": int(ens.diverged.sum()),
                               "coupled": int(np.sum(~np.isnan(ens.T)))})
    return PASS if not ens.diverged.any() else FAIL


def cmd_wasserstein(args, cfg, run) -> int:
    spec = _require(cfg, "wasserstein")
    mu, nu = EmpiricalMeasure.from_csv(spec["mu"]), EmpiricalMeasure.from_csv(spec["nu"])
    out = {}
    for item in spec.get("distances", [2]):
        dist = build_distance(item)
        if isinstance(dist, YoungFunction):
            res = wasserstein_phi(mu, nu, dist)
            out[f"phi[{dist.name}]"] = {"value": res.value, "plan": res.plan.permutation.tolist()}
        else:
            val, plan = wasserstein_inf(mu, nu) if math.isinf(dist) else wasserstein_p(mu, nu, dist)
            out["inf" if math.isinf(dist) else f"p{dist:g}"] = {"value": val, "plan": plan.permutation.tolist()}
    run.json("wasserstein.json", out)
    return PASS


def cmd_contraction(args, cfg, run) -> int:
    ec = experiment_config(cfg, args.workers)
    res = contraction_experiment(ec)
    rate = None
    if "theory" in cfg:
        th = cfg["theory"]
        rate = lyapunov_constants(th["K1"], th["K2"], th["r0"], th.get("lambda0", 1.0))
    fits, failed = {}, False
    for curve in res.curves:
        tag = f"{curve.distance}_{'coupling' if curve.estimator == COUPLING else 'ot'}"
        run.csv(f"curve_{tag}.csv", curve.columns())
        try:
            fit = fit_rate(curve, rate if curve.estimator == COUPLING else None, ec.rho0, seed=ec.seed)
            fits[tag] = fit.to_dict()
            failed |= bool(fit.envelope_violations)
        except LabError as exc:
            fits[tag] = {"error": str(exc)}
    failed |= any(v > 0 for v in res.ordering_violations.values())
    run.json("contraction.json", {
        "fits": fits, "ordering_violations": res.ordering_violations,
        "theory": rate.to_dict() if rate else None, "passed": not failed,
    })
    series = {f"{c.distance} {c.estimator}": (c.times, c.values) for c in res.curves}
    run.svg("contraction.svg", series, title="distance decay", log_y=True)
    return FAIL if failed else PASS


def cmd_coupling_time(args, cfg, run) -> int:
    ec = experiment_config(cfg, args.workers)
    surv = coupling_time_experiment(ec, cfg.get("survival", {}).get("thresholds", []))
    run.csv("survival.csv", surv.columns())
    run.json("coupling_time.json", {"n": surv.n, "censored": surv.censored,
                                    "threshold_sensitivity": surv.threshold_sensitivity})
    run.svg("survival.svg", {"P(T > t)": (surv.times, surv.survival)}, title="coupling time survival")
    return PASS


def cmd_kuwada(args, cfg, run) -> int:
    model = build_model(cfg)
    spec = _require(cfg, "kuwada")
    time = cfg.get("time", {})
    rep = kuwada_check(model, spec["f"], spec.get("p", 2.0), spec.get("t", 0.5), spec["probes"],
                       dt=time.get("dt", 1e-3), n_paths=cfg.get("n_paths", 10_000), seed=cfg.get("seed", 0),
                       K_p=spec.get("K_p"), eta=spec.get("eta"), box=cfg.get("box"))
    run.json("kuwada.json", rep.to_dict())
    return PASS if rep.passed else FAIL


def cmd_equilibrium(args, cfg, run) -> int:
    model = build_model(cfg)
    spec = _require(cfg, "equilibrium")
    dt = cfg.get("time", {}).get("dt", 1e-2)
    curve = equilibrium_experiment(model, spec["x0"], spec["times"], dt, spec.get("n", 4096), cfg.get("seed", 0),
                                   spec.get("n_chains", 64), spec.get("spacing"))
    run.csv("equilibrium.csv", curve.columns())
    run.json("equilibrium.json", {"spacing": curve.spacing, "floor": curve.floor, "n": curve.n,
                                  "values": curve.values, "stderr": curve.stderr})
    return PASS


def cmd_gphi(args, cfg, run) -> int:
    spec = _require(cfg, "gphi")
    if "samples" in spec:
        mu = EmpiricalMeasure.from_csv(spec["samples"])
    else:
        model = build_model(cfg)
        eq = cfg.get("equilibrium", {})
        from .harness import equilibrium_sample

        mu, _ = equilibrium_sample(model, eq.get("x0", [0.0] * model.d), eq.get("n", 512),
                                   cfg.get("time", {}).get("dt", 1e-2), cfg.get("seed", 0))
    phi = build_distance(spec.get("young", 2))
    if not isinstance(phi, YoungFunction):
        phi = YoungFunction.infinity() if math.isinf(phi) else YoungFunction.power(phi)
    nb = spec["norm_bound"]
    bound = ppn_norm_bound(nb["c"], nb["delta"])
    values = [g_phi(t, phi, mu, bound) for t in spec["times"]]
    run.json("gphi.json", {"times": spec["times"], "G": values, "n": mu.n})
    return PASS


COMMANDS = {
    "validate": cmd_validate, "rates": cmd_rates, "check-conditions": cmd_check_conditions,
    "simulate": cmd_simulate, "wasserstein": cmd_wasserstein, "contraction": cmd_contraction,
    "coupling-time": cmd_coupling_time, "kuwada": cmd_kuwada, "equilibrium": cmd_equilibrium, "gphi": cmd_gphi,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contraction-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name not in ("rates",))
        p.add_argument("--output-dir", type=Path, default=Path("out"))
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if name == "rates":
            p.add_argument("--k1", type=float)
            p.add_argument("--k2", type=float)
            p.add_argument("--r0", type=float)
            p.add_argument("--lambda0", type=float)
    return parser


def split_overrides(extra: list[str]) -> dict:
    """``--a.b=v`` or ``--a.b v`` pairs; anything else is an error."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            val = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"override {tok} has no value")
        if not key:
            raise ConfigError(f"empty override {tok!r}")
        out[key] = parse_value(val)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = split_overrides(extra)
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config, overrides)
        elif overrides:
            raise ConfigError("overrides need --config")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if cfg is not None and "workers" in cfg and "--workers" not in (argv or sys.argv):
            args.workers = cfg["workers"]
        run = Run(args.output_dir, cfg)
        code = COMMANDS[args.command](args, cfg, run)
        if args.command != "validate":
            run.manifest()
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ERROR
    except LabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
