"""Command-line entry point: verify, pretrain, train, ablate, export.

Exit status: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import os
import re
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import check_shapes, load_params, save_params
from .harness import (METRIC_COLUMNS, ablation_suite, pretrain_intention_modules, run_seeds,
                      write_table, _fmt)
from .memory import MemoryConfig, Perception
from .rng import stream
from .verify import SUITES, run_suites

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cermic-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, config_required: bool):
        sp.add_argument("--config", type=Path, required=config_required, help="JSON experiment document")
        sp.add_argument("--out", type=Path, default=Path("cermic_out"), help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="root seed override")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (fallback: CERMIC_LAB_JOBS)")

    v = sub.add_parser("verify", help="run property suites and write one CSV per suite")
    common(v, False)
    v.add_argument("--suite", default="all", help=f"one of {', '.join(SUITES)}, all, or a comma list")
    common(sub.add_parser("pretrain", help="pretrain the perception nets and write a checkpoint"), True)
    common(sub.add_parser("train", help="train one variant over the configured seeds"), True)
    common(sub.add_parser("ablate", help="run the ablation grid and write a comparison table"), True)
    e = sub.add_parser("export", help="merge per-seed logs into long-format and summary CSVs")
    e.add_argument("run_dir", type=Path, help="directory holding metrics_seed*.csv")
    e.add_argument("--out", type=Path, default=None, help="output directory (default: RUN_DIR/export)")
    return p


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        raw = os.environ.get("CERMIC_LAB_JOBS", "1")
        try:
            jobs = int(raw)
        except ValueError:
            raise UsageError(f"CERMIC_LAB_JOBS must be an integer, got {raw!r}") from None
    if jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return jobs


def load_document(args) -> cfgmod.Document:
    doc = cfgmod.load(args.config) if args.config is not None else cfgmod.Document()
    return doc.with_seed(args.seed) if args.seed is not None else doc


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_verify(args) -> int:
    load_document(args)   # a given config must still parse
    names = [s.strip() for s in args.suite.split(",") if s.strip()]
    bad = [n for n in names if n != "all" and n not in SUITES]
    if bad or not names:
        raise UsageError(f"unknown suite {','.join(bad) or args.suite!r}; choose from {', '.join(SUITES)} or all")
    seed = 0 if args.seed is None else args.seed
    ok = True
    for res in run_suites(names, args.out, seed=seed):
        print(f"{res.line()} ({res.seconds:.2f} s)")
        ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_pretrain(args) -> int:
    doc = load_document(args)
    pc = doc.pretrain
    if pc.epochs == 0:
        warnings.warn("zero-epoch budget: writing an untrained checkpoint", RuntimeWarning, stacklevel=1)
    res = pretrain_intention_modules(doc.environment, seed=doc.training.seed, n_obs=pc.n_obs,
                                     epochs=pc.epochs, d_f=pc.d_f)
    args.out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": doc.training.seed, "n_obs": pc.n_obs, "epochs": pc.epochs, "d_f": pc.d_f,
            "heldout": {k: float(v) for k, v in res.heldout.items()}}
    save_params(res.params, args.out / "perception", meta)
    keys = sorted(res.heldout)
    write_csv(args.out / "pretrain_history.csv", ["epoch"] + keys,
              [[i + 1] + [_fmt(h[k]) for k in keys] for i, h in enumerate(res.history)])
    print("held-out losses: " + ", ".join(f"{k}={float(res.heldout[k]):.6g}" for k in keys))
    return EXIT_OK


def _load_checkpoint(run):
    if not run.perception:
        return None
    expected = Perception(MemoryConfig(n_agents=run.grid.n_agents, obs_dim=run.grid.obs_dim)).init(stream(0, "shape"))
    try:
        params, _ = load_params(run.perception)
        check_shapes(expected, params)
    except (OSError, ValueError) as e:
        raise cfgmod.ConfigError(f"cannot read checkpoint {run.perception!r}: {e}") from e
    return params


def cmd_train(args) -> int:
    doc = load_document(args)
    jobs = resolve_jobs(args.jobs)
    run = doc.training
    perception = _load_checkpoint(run)
    logs = run_seeds(replace(run, perception=None), doc.experiment.seeds, perception, jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    for seed, log in zip(doc.experiment.seeds, logs):
        log.to_csv(args.out / f"metrics_seed{seed}.csv")
        print(f"seed {seed}: first success {log.first_success()}, "
              f"final return {log.final_return(doc.experiment.window):.4g}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = load_document(args)
    jobs = resolve_jobs(args.jobs)
    run = doc.training
    perception = _load_checkpoint(run)
    rows, logs = ablation_suite(replace(run, perception=None), doc.experiment.seeds, perception_params=perception,
                                jobs=jobs, window=doc.experiment.window)
    args.out.mkdir(parents=True, exist_ok=True)
    write_table(args.out / "ablation.csv", rows)
    for name, runs in logs.items():
        d = args.out / name
        d.mkdir(exist_ok=True)
        for seed, log in zip(doc.experiment.seeds, runs):
            log.to_csv(d / f"metrics_seed{seed}.csv")
    for r in rows:
        print(f"{r.name:>16}: final return {r.final_return_mean:.4g} +- {r.final_return_std:.4g}, "
              f"first success {r.first_success_mean:.4g} +- {r.first_success_std:.4g}")
    return EXIT_OK


_SEED_FILE = re.compile(r"^metrics_seed(-?\d+)\.csv$")


def read_run_dir(run_dir: Path) -> dict:
    """Per-seed metric columns from every ``metrics_seed<N>.csv`` in ``run_dir``."""
    if not run_dir.is_dir():
        raise cfgmod.ConfigError(f"run directory {str(run_dir)!r} does not exist")
    found = {}
    for p in run_dir.iterdir():
        m = _SEED_FILE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise cfgmod.ConfigError(f"no metrics_seed*.csv logs in {str(run_dir)!r}")
    runs = {}
    for seed in sorted(found):
        with open(found[seed], newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
                raise cfgmod.ConfigError(f"{found[seed].name} does not have the metrics header")
            rows = list(reader)
        runs[seed] = {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}
    return runs


def export_bundle(run_dir: Path, out: Path, window: int = 10) -> None:
    runs = read_run_dir(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = [c for c in METRIC_COLUMNS if c not in ("seed", "episode")]
    long_rows = []
    for seed, cols in runs.items():
        for i, ep in enumerate(cols["episode"]):
            for m in metrics:
                long_rows.append([seed, int(ep), m, _fmt(cols[m][i])])
    write_csv(out / "long.csv", ["seed", "episode", "metric", "value"], long_rows)

    def stats(vals):
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
        return [len(vals), _fmt(np.mean(vals)), _fmt(med), _fmt(q25), _fmt(q75), _fmt(q75 - q25)]

    summary = []
    n_ep = max(len(c["episode"]) for c in runs.values())
    for m in metrics:
        for i in range(n_ep):
            vals = np.array([c[m][i] for c in runs.values() if i < len(c[m])])
            ep = next(int(c["episode"][i]) for c in runs.values() if i < len(c["episode"]))
            summary.append([m, ep] + stats(vals))
    write_csv(out / "summary.csv", ["metric", "episode", "n", "mean", "median", "q25", "q75", "iqr"], summary)

    per_run = []
    for seed, cols in runs.items():
        ret = cols["return"]
        hit = np.flatnonzero(ret > 0)
        first = int(cols["episode"][hit[0]]) if hit.size else len(ret) + 1
        per_run.append([seed, first, _fmt(ret[-window:].mean()), _fmt(cols["mean_r_int"].mean())])
    write_csv(out / "runs.csv", ["seed", "first_success", "final_return", "mean_r_int"], per_run)
    agg = []
    for j, name in ((1, "first_success"), (2, "final_return"), (3, "mean_r_int")):
        agg.append([name] + stats(np.array([float(r[j]) for r in per_run])))
    write_csv(out / "runs_summary.csv", ["metric", "n", "mean", "median", "q25", "q75", "iqr"], agg)


def cmd_export(args) -> int:
    out = args.out if args.out is not None else args.run_dir / "export"
    export_bundle(args.run_dir, out)
    print(f"wrote {out / 'long.csv'}, {out / 'summary.csv'}, {out / 'runs.csv'}, {out / 'runs_summary.csv'}")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "pretrain": cmd_pretrain, "train": cmd_train, "ablate": cmd_ablate,
            "export": cmd_export}


def main(argv=None) -> int:
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        code = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"cermic-lab: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as e:
        print(f"cermic-lab: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"done in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
