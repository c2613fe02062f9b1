"""Command line entry point: one experiment per invocation, CSV and JSON out."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from agebranch import __version__
from agebranch import semigroup as sg
from agebranch import simulate as sim
from agebranch import spine as sp
from agebranch import verify as vf
from agebranch.config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config, parse_config
from agebranch.model import SpecError


def write_csv(path: Path, header, rows, cfg: ExperimentConfig, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# agebranch {__version__} experiment={cfg.experiment} config_hash={digest} seed={cfg.seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _public(d: dict) -> dict:
    return {k: v for k, v in d.items() if not k.startswith("_")}


def _semigroup(cfg, spec, out, digest, threads):
    p = cfg.params
    n = int(p["n"])
    est = sg.lyapunov_estimate(spec, n, cfg.seed, tol=p["tol"])
    envs = est["envs"]
    ks = [k for k in p["profile_ks"] if k <= n]
    prof = sg.harmonic_profiles(spec, envs, max(ks + [0]), tol=p["tol"])
    write_csv(out / "series.csv", sg.SERIES_HEADER, sg.series_rows(est), cfg, digest)
    write_csv(out / "profiles.csv", sg.PROFILE_HEADER, sg.profile_rows(prof, ks), cfg, digest)
    res = {k: est[k] for k in ("n", "log_lambda_hat", "log_norm_hat", "discrepancy", "discrepancy_bound")}
    try:
        coupling = sg.coupling_constants(spec)
        grid = sg.sample_gap_grid(spec, envs, int(p["gap_samples"]), cfg.seed, max_age=int(p["gap_max_age"]))
        res["coupling"] = coupling.to_dict()
        res["gap_grid"] = {"tuples": len(grid["tuples"]), "violations": grid["violations"]}
        write_csv(out / "gap_grid.csv", ["k", "n", "x", "y", "lhs", "rhs"], grid["tuples"], cfg, digest)
    except SpecError as exc:
        res["coupling"] = {"error": str(exc)}
    return res, 0


def _simulate(cfg, spec, out, digest, threads):
    p = cfg.params
    ens = sim.run_ensemble(spec, cfg.z0(), int(p["n_max"]), int(p["replicates"]), cfg.seed, int(p["cap"]), threads)
    write_csv(out / "replicates.csv", sim.REPLICATE_HEADER, sim.replicate_rows(ens), cfg, digest)
    write_csv(out / "generations.csv", sim.GENERATION_HEADER, sim.generation_rows(spec, ens), cfg, digest)
    return sim.summarize(ens, p["w_floor"]).to_dict(), 0


def _spine(cfg, spec, out, digest, threads):
    p = cfg.params
    n = int(p["n"])
    runs = sp.spine_ensemble(spec, int(p["x0"]), n + 1, int(p["runs"]), cfg.seed, int(p["cap"]), threads=threads)
    rows = ([r, *row] for r, t in enumerate(runs) for row in t.rows())
    write_csv(out / "spine.csv", ["run", *sp.SPINE_HEADER], rows, cfg, digest)
    n_min = min(int(p["n_min"]), n)
    tail = [sp.growth_statistic(t, n_min, n) for t in runs]
    full = [sp.growth_statistic(t, 1, n) for t in runs]
    W = np.array([t.W[n] for t in runs])
    return {"runs": len(runs), "n": n, "n_min": n_min,
            "growth_statistic_tail_mean": float(np.mean(tail)),
            "growth_statistic_all_n_mean": float(np.mean(full)),
            "W_n_p99": float(np.percentile(W, 99)),
            "capped_fraction": float(np.mean([t.capped for t in runs]))}, 0


def _kesten_stigum(cfg, spec, out, digest, threads):
    p = cfg.params
    stats = sim.kesten_stigum_experiment(spec, int(p["replicates"]), int(p["n_max"]), cfg.seed, cfg.z0(),
                                         int(p["cap"]), threads, eps=p["eps"])
    write_csv(out / "replicates.csv", sim.REPLICATE_HEADER, sim.replicate_rows(stats.extra["_ensemble"]),
              cfg, digest)
    return _public(stats.to_dict()), 0


def _type_freq(cfg, spec, out, digest, threads):
    p = cfg.params
    f = np.zeros(max(p["test_ages"]) + 1)
    f[p["test_ages"]] = 1.0
    res = sim.type_frequency_experiment(spec, f, int(p["replicates"]), int(p["n_max"]), cfg.seed, cfg.z0(),
                                        int(p["cap"]), threads)
    rows = ([int(n), int(s), float(m)] for n, s, m in zip(res.n, res.survivors, res.median_error))
    write_csv(out / "type_freq.csv", ["n", "survivors", "median_error"], rows, cfg, digest)
    return res.to_dict(), 0


def _ext_expl(cfg, spec, out, digest, threads):
    p = cfg.params
    res = sim.extinction_explosion_experiment(spec, int(p["replicates"]), int(p["n_max"]), cfg.seed,
                                              p["w_floor"], cfg.z0(), int(p["cap"]), threads)
    write_csv(out / "replicates.csv", sim.REPLICATE_HEADER, sim.replicate_rows(res["_ensemble"]), cfg, digest)
    return _public(res), 0


def _check(cfg, spec, out, digest, threads):
    rep = vf.check_all(spec, cfg.params["eps"], cfg.seed)
    return rep, 0 if rep["pass"] else 1


def _appendix(cfg, spec, out, digest, threads):
    p = cfg.params
    g = int(p["grid"])
    res = vf.appendix_checks(np.linspace(p["a_min"], p["a_max"], g), np.linspace(p["s_min"], p["s_max"], g),
                             tuple(p["eps_grid"]), int(p["kmax"]))
    return res, 0 if res["pass"] else 1


RUNNERS = {
    "semigroup": _semigroup,
    "simulate": _simulate,
    "spine": _spine,
    "kesten-stigum": _kesten_stigum,
    "type-freq": _type_freq,
    "ext-expl": _ext_expl,
    "check": _check,
    "appendix": _appendix,
}


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1) -> tuple[dict, int]:
    """Run one experiment, write its files under ``out_dir`` and return (summary, exit code)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.hash()
    spec = cfg.load_spec() if cfg.spec_ref is not None else None
    results, code = RUNNERS[cfg.experiment](cfg, spec, out, digest, threads)
    summary = {
        "version": __version__,
        "experiment": cfg.experiment,
        "config_hash": digest,
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "results": vf._jsonable(results),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agebranch", description="Age-structured branching processes in a random environment.")
    ap.add_argument("--version", action="version", version=f"agebranch {__version__}")
    sub = ap.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for replicates")
        p.add_argument("--out", default=f"out/{name}", help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        if args.config:
            cfg = load_config(args.config, args.experiment, args.seed)
        elif args.experiment == "appendix":
            cfg = parse_config({}, "appendix", args.seed)
        else:
            raise ConfigError("--config is required for this experiment")
        summary, code = run_experiment(cfg, args.out, args.threads)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except sim.PreconditionError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 3
    print(json.dumps({"experiment": summary["experiment"], "config_hash": summary["config_hash"],
                      "out": str(args.out), "exit": code}))
    return code


if __name__ == "__main__":
    sys.exit(main())
