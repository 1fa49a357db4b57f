"""Command-line harness: ``gen``, ``eval``, ``run`` and ``report``.

Every command accepts ``--config file.json``; keys in the file use the
flag names with dashes replaced by underscores, and explicit flags win.
Exit codes: 0 success, 2 invalid input, 3 budget cap, 4 unsatisfiable
coverage.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ._validation import BudgetExceededError, UnsatisfiableCoverageError
from .design import EpisodicEnv
from .ftpedel import ftpedel, write_diagnostics
from .instances import (
    InstanceBundle,
    gen_mab_verification,
    gen_minimax,
    gen_random_tabular,
    gen_separation,
    minimax_logging_schedule,
)
from .mdp import DeterministicPolicy, Policy, uniform_policy
from .offline import OfflineDataset, c_o2o, concentrability, generate_offline, offline_covariates, t_o2o
from .verify import check_verifiability_condition, default_verifiability_beta, offline_verify, verify_policy
from .visitation import class_profiles, enumerate_det_policies, exact_profile, policy_value

log = logging.getLogger("finetune_rl")

WORKERS_ENV = "FINETUNE_RL_WORKERS"
RECORD_COLUMNS = ["seed", "instance", "algorithm", "eps", "delta", "beta_scale", "online_episodes",
                  "returned", "gap", "success", "verdict", "diagnostics"]
SUMMARY_COLUMNS = ["instance", "algorithm", "eps", "runs", "success_rate", "median_episodes",
                   "returned_rate", "certified_rate", "paired_median_ratio", "slope", "r_squared"]

DEFAULTS = {
    "gen separation": {"eps": 0.05, "variant": 1, "out": None},
    "gen minimax": {"d": 2, "H": 2, "mu": None, "signs": None, "grid": None, "out": None},
    "gen mab": {"eps": 0.1, "arms": 4, "out": None},
    "gen random": {"S": 3, "A": 2, "H": 3, "seed": 0, "feature_mode": "basis", "dim": None, "out": None},
    "gen offline": {"instance": None, "episodes": 1000, "seed": 0, "logging": "bundle", "out": None},
    "eval": {"instance": None, "dataset": None, "eps": 0.05, "beta": 1.0, "ridge": None,
             "T_grid": [0, 10, 100, 1000], "steps": None, "fw_iters": 500, "policies": ["optimal"],
             "verify_beta": None, "out": None, "csv": None},
    "run": {"instance": None, "dataset": None, "algorithm": "ftpedel", "eps": 0.05, "delta": 0.1,
            "seeds": [0], "beta_scale": 1.0, "regmin": "policy_ucb", "candidate": "optimal",
            "prune": True, "records": None, "diag_dir": None, "timings": None},
    "report": {"records": None, "baseline": None, "out": None, "plot": None},
}


class ConfigError(ValueError):
    pass


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a), int(b)))
        elif part:
            out.append(int(part))
    return out


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def _bool(text):
    return str(text).lower() in ("1", "true", "yes", "on")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finetune-rl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write instance JSON or offline JSONL files")
    gsub = gen.add_subparsers(dest="target", required=True)
    g = gsub.add_parser("separation")
    g.add_argument("--eps", type=float)
    g.add_argument("--variant", type=int)
    g = gsub.add_parser("minimax")
    g.add_argument("--d", type=int)
    g.add_argument("--H", type=int)
    g.add_argument("--mu", type=float)
    g.add_argument("--signs", type=_float_list, help="H*d comma-separated +-1 values (default all +1)")
    g.add_argument("--grid", type=int, help="number of sphere actions (>= 2d)")
    g = gsub.add_parser("mab")
    g.add_argument("--eps", type=float)
    g.add_argument("--arms", type=int)
    g = gsub.add_parser("random")
    g.add_argument("--S", type=int)
    g.add_argument("--A", type=int)
    g.add_argument("--H", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--feature-mode", choices=["basis", "random_unit"])
    g.add_argument("--dim", type=int)
    g = gsub.add_parser("offline")
    g.add_argument("--instance")
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--logging", choices=["bundle", "uniform", "schedule"])
    for g in gsub.choices.values():
        g.add_argument("--config")
        g.add_argument("--out")

    e = sub.add_parser("eval", help="coverage quantities for an instance and dataset")
    e.add_argument("--config")
    e.add_argument("--instance")
    e.add_argument("--dataset")
    e.add_argument("--eps", type=float)
    e.add_argument("--beta", type=float)
    e.add_argument("--ridge", type=float)
    e.add_argument("--T-grid", type=_float_list)
    e.add_argument("--steps", type=_int_list)
    e.add_argument("--fw-iters", type=int)
    e.add_argument("--policies", type=_str_list)
    e.add_argument("--verify-beta", type=float)
    e.add_argument("--out")
    e.add_argument("--csv")

    r = sub.add_parser("run", help="run an algorithm across seeds")
    r.add_argument("--config")
    r.add_argument("--instance")
    r.add_argument("--dataset")
    r.add_argument("--algorithm", choices=["ftpedel", "pure_online", "offline_verify", "verify_policy"])
    r.add_argument("--eps", type=float)
    r.add_argument("--delta", type=float)
    r.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2 or 0:20")
    r.add_argument("--beta-scale", type=float)
    r.add_argument("--regmin", choices=["policy_ucb", "oracle"])
    r.add_argument("--candidate", help="'optimal' or a policy JSON file")
    r.add_argument("--prune", type=_bool)
    r.add_argument("--records")
    r.add_argument("--diag-dir")
    r.add_argument("--timings")

    rep = sub.add_parser("report", help="aggregate record CSVs")
    rep.add_argument("--config")
    rep.add_argument("--records", nargs="+")
    rep.add_argument("--baseline", nargs="+")
    rep.add_argument("--out")
    rep.add_argument("--plot")
    return p


def resolve_config(key: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[key])
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for '{key}': {unknown}")
        cfg.update(file_cfg)
    for name in cfg:
        val = getattr(args, name, None)
        if val is not None:
            cfg[name] = val
    return cfg


def _require(cfg, *names):
    missing = [n for n in names if cfg.get(n) in (None, "")]
    if missing:
        raise ConfigError(f"missing required setting(s): {missing}")


# ---------------------------------------------------------------------- gen


def cmd_gen(target: str, cfg: dict) -> None:
    _require(cfg, "out")
    if target == "offline":
        _require(cfg, "instance")
        bundle = InstanceBundle.load(cfg["instance"])
        if cfg["logging"] == "bundle":
            if bundle.logging_policy is None:
                raise ConfigError("instance has no logging policy; use --logging uniform or schedule")
            logging_policy = bundle.logging_policy
        elif cfg["logging"] == "uniform":
            logging_policy = uniform_policy(bundle.mdp)
        else:
            logging_policy = minimax_logging_schedule(bundle)
        data = generate_offline(bundle.mdp, logging_policy, int(cfg["episodes"]), int(cfg["seed"]))
        data.to_jsonl(cfg["out"])
        return
    if target == "separation":
        bundle = gen_separation(cfg["eps"], cfg["variant"])
    elif target == "minimax":
        d, H = int(cfg["d"]), int(cfg["H"])
        mu = cfg["mu"] if cfg["mu"] is not None else 1 / (20 * math.sqrt(d))
        signs = np.ones((H, d)) if cfg["signs"] is None else np.asarray(cfg["signs"]).reshape(H, d)
        bundle = gen_minimax(d, H, signs, mu, cfg["grid"])
    elif target == "mab":
        bundle = gen_mab_verification(cfg["eps"], int(cfg["arms"]))
    elif target == "random":
        bundle = gen_random_tabular(int(cfg["S"]), int(cfg["A"]), int(cfg["H"]), int(cfg["seed"]),
                                    cfg["feature_mode"], cfg["dim"])
    else:
        raise ConfigError(f"unknown gen target {target!r}")
    report = bundle.mdp.validate()
    if not report.ok:
        raise ConfigError("generated instance failed validation: " + "; ".join(report.issues))
    bundle.save(cfg["out"])


# --------------------------------------------------------------------- eval


def _named_policy(name, bundle):
    if name == "optimal":
        return bundle.optimal_policy
    if name == "logging":
        if bundle.logging_policy is None:
            raise ConfigError("instance has no logging policy")
        return bundle.logging_policy
    with open(name) as fh:
        return Policy.from_dict(json.load(fh))


def cmd_eval(cfg: dict) -> dict:
    _require(cfg, "instance")
    bundle = InstanceBundle.load(cfg["instance"])
    mdp = bundle.mdp
    data = OfflineDataset.from_jsonl(cfg["dataset"]) if cfg["dataset"] else OfflineDataset.empty()
    data.check_against(mdp)
    ridge = 1.0 / mdp.d if cfg["ridge"] is None else float(cfg["ridge"])
    cov = offline_covariates(data, mdp, ridge)
    pclass = enumerate_det_policies(mdp, prune=True)
    profiles = class_profiles(mdp, pclass)
    steps = cfg["steps"] or list(range(1, mdp.H + 1))
    rows = []
    report = {"instance": bundle.metadata.get("name", mdp.name), "records": len(data), "ridge": ridge,
              "eps": cfg["eps"], "beta": cfg["beta"], "concentrability": {}, "c_o2o": {}, "t_o2o": {}}
    for name in cfg["policies"]:
        pol = _named_policy(name, bundle)
        try:
            value = concentrability(exact_profile(mdp, pol), cov)
        except np.linalg.LinAlgError:
            value = math.inf
        report["concentrability"][name] = value
        rows.append(("concentrability", "", "", name, value))
    for h in steps:
        series = []
        for T in cfg["T_grid"]:
            try:
                value = c_o2o(mdp, cov, pclass, cfg["eps"], T, h, int(cfg["fw_iters"]), profiles=profiles).value
            except np.linalg.LinAlgError:
                value = math.inf
            series.append([T, value])
            rows.append(("c_o2o", h, T, "", value))
        report["c_o2o"][str(h)] = series
        T_need = t_o2o(mdp, cov, pclass, cfg["eps"], cfg["beta"], h, int(cfg["fw_iters"]), profiles=profiles,
                       min_eig_basis=mdp.reachable_basis(h))
        report["t_o2o"][str(h)] = T_need
        rows.append(("t_o2o", h, "", "", T_need))
    vbeta = cfg["verify_beta"] or default_verifiability_beta(mdp.d, mdp.H, len(data), cfg["eps"], 0.1)
    margins = check_verifiability_condition(cov, profiles, cfg["eps"], vbeta, basis=mdp.reachable_basis)
    report["verifiability"] = {"beta": vbeta, **margins.to_dict()}
    for h in range(1, mdp.H + 1):
        rows.append(("coverage_margin", h, "", "", float(margins.coverage_margin[h - 1])))
        rows.append(("eigen_margin", h, "", "", float(margins.eigen_margin[h - 1])))
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True, default=float)
    if cfg["csv"]:
        with open(cfg["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "step", "T", "policy", "value"])
            for q, h, T, pol, v in rows:
                w.writerow([q, h, T, pol, repr(float(v))])
    if not cfg["out"]:
        json.dump(report, sys.stdout, indent=1, sort_keys=True, default=float)
        sys.stdout.write("\n")
    return report


# ---------------------------------------------------------------------- run


def _run_seed(job):
    cfg, seed = job
    bundle = InstanceBundle.load(cfg["instance"])
    mdp = bundle.mdp
    data = OfflineDataset.from_jsonl(cfg["dataset"]) if cfg["dataset"] else OfflineDataset.empty()
    pclass = enumerate_det_policies(mdp, prune=bool(cfg["prune"]))
    algo = cfg["algorithm"]
    env = EpisodicEnv(mdp, seed)
    eps, delta = float(cfg["eps"]), float(cfg["delta"])
    start = time.perf_counter()
    policy, verdict, diag = None, "", []
    if algo in ("ftpedel", "pure_online"):
        res = ftpedel(env, eps, delta, pclass, data if algo == "ftpedel" else None,
                      beta_scale=cfg["beta_scale"], regmin=cfg["regmin"])
        policy, verdict, diag = res.policy, "returned", res.diagnostics
    elif algo == "offline_verify":
        policy, rep = offline_verify(data, mdp, pclass, eps, delta, beta_scale=cfg["beta_scale"])
        verdict = "returned" if policy is not None else "empty"
    elif algo == "verify_policy":
        candidate = _named_policy(cfg["candidate"], bundle)
        v = verify_policy(env, data, candidate, pclass, eps, delta, beta_scale=cfg["beta_scale"],
                          regmin=cfg["regmin"])
        verdict = v.outcome
        policy = candidate if v.outcome == "certified" else None
    else:
        raise ConfigError(f"unknown algorithm {algo!r}")
    elapsed = time.perf_counter() - start
    diag_path = ""
    if cfg["diag_dir"] and diag:
        Path(cfg["diag_dir"]).mkdir(parents=True, exist_ok=True)
        diag_path = str(Path(cfg["diag_dir"]) / f"{algo}_seed{seed}.csv")
        write_diagnostics(diag, diag_path)
    gap = "" if policy is None else bundle.v_star - policy_value(mdp, policy)
    record = {
        "seed": seed, "instance": bundle.metadata.get("name", mdp.name), "algorithm": algo,
        "eps": eps, "delta": delta, "beta_scale": cfg["beta_scale"], "online_episodes": env.episodes,
        "returned": int(policy is not None), "gap": gap,
        "success": int(policy is not None and gap <= eps + 1e-12), "verdict": verdict, "diagnostics": diag_path,
    }
    return record, elapsed


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer")


def cmd_run(cfg: dict) -> list[dict]:
    _require(cfg, "instance", "records")
    seeds = [int(s) for s in cfg["seeds"]]
    jobs = [(cfg, s) for s in seeds]
    n = _workers()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    results.sort(key=lambda r: r[0]["seed"])
    write_records([r[0] for r in results], cfg["records"])
    if cfg["timings"]:
        with open(cfg["timings"], "w") as fh:
            json.dump({str(r[0]["seed"]): r[1] for r in results}, fh, indent=1)
    return [r[0] for r in results]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: _fmt(r[k]) for k in RECORD_COLUMNS})


def read_records(paths) -> list[dict]:
    out = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(RECORD_COLUMNS) - set(reader.fieldnames):
                raise ConfigError(f"{path} does not have the record schema {RECORD_COLUMNS}")
            out.extend(reader)
    return out


# ------------------------------------------------------------------- report


def loglog_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of log y on log x and its R^2."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def cmd_report(cfg: dict) -> list[dict]:
    _require(cfg, "records", "out")
    records = read_records(cfg["records"])
    if not records:
        raise ConfigError("no records to report")
    baseline = read_records(cfg["baseline"]) if cfg["baseline"] else []
    base_idx = {}
    for r in baseline:
        base_idx.setdefault((r["instance"], float(r["eps"])), {})[int(r["seed"])] = float(r["online_episodes"])
    groups: dict = {}
    for r in records:
        groups.setdefault((r["instance"], r["algorithm"], float(r["eps"])), []).append(r)
    rows = []
    plot = {"series": []}
    for (inst, algo, eps), rs in sorted(groups.items()):
        eps_ep = np.array([float(r["online_episodes"]) for r in rs])
        row = {
            "instance": inst, "algorithm": algo, "eps": eps, "runs": len(rs),
            "success_rate": float(np.mean([int(r["success"]) for r in rs])),
            "median_episodes": float(np.median(eps_ep)),
            "returned_rate": float(np.mean([int(r["returned"]) for r in rs])),
            "certified_rate": float(np.mean([r["verdict"] == "certified" for r in rs])),
            "paired_median_ratio": "", "slope": "", "r_squared": "",
        }
        paired = base_idx.get((inst, eps), {})
        seeds = [int(r["seed"]) for r in rs if int(r["seed"]) in paired]
        if seeds:
            mine = np.median([float(r["online_episodes"]) for r in rs if int(r["seed"]) in paired])
            theirs = np.median([paired[s] for s in seeds])
            row["paired_median_ratio"] = float(mine / theirs) if theirs > 0 else math.inf
        rows.append(row)
    for (inst, algo) in sorted({(r["instance"], r["algorithm"]) for r in rows}):
        sel = [r for r in rows if r["instance"] == inst and r["algorithm"] == algo]
        xs = [r["eps"] for r in sel]
        ys = [r["median_episodes"] for r in sel]
        plot["series"].append({"instance": inst, "algorithm": algo, "eps": xs, "median_episodes": ys,
                               "success_rate": [r["success_rate"] for r in sel]})
        if len(sel) >= 2 and all(y > 0 for y in ys):
            slope, r2 = loglog_slope(xs, ys)
            for r in sel:
                r["slope"], r["r_squared"] = slope, r2
    with open(cfg["out"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in SUMMARY_COLUMNS})
    if cfg["plot"]:
        with open(cfg["plot"], "w") as fh:
            json.dump(plot, fh, indent=1, sort_keys=True)
    return rows


# --------------------------------------------------------------------- main


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen":
            cmd_gen(args.target, resolve_config(f"gen {args.target}", args))
        elif args.command == "eval":
            cmd_eval(resolve_config("eval", args))
        elif args.command == "run":
            cmd_run(resolve_config("run", args))
        else:
            cmd_report(resolve_config("report", args))
    except BudgetExceededError as exc:
        log.error("budget cap: %s", exc)
        return 3
    except UnsatisfiableCoverageError as exc:
        log.error("unsatisfiable coverage: %s", exc)
        return 4
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
