"""Experiment runner: run / sweep / verify / report.

Exit codes: 0 success, 1 property violation (verify), 2 usage or validation
error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .analysis import (SUITE_IDS, SUITE_TITLES, delta_m_from_losses,
                       run_property_suite)
from .config import ConfigError, echo_dict, load_config, parse_kv_text, validate_config
from .experiments import run_experiment
from .optim import NumericAbort
from .runio import (INDEX_HEADER, INDEX_SCHEMA, fmt, read_group_series,
                    read_summary, write_run)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SUITE_DEFAULT_INSTANCES = {"T1": 200, "T2": 200, "T3": 100, "T4": 50, "T5": 100, "A1": 100}

TRIAD_ABLATION_BASE = """\
# triad ablation preset: grouping method and update order on the
# two-aligned-plus-one-conflicting regression suite
benchmark.kind = regression
regression.preset = triad
model.width = 8
model.depth = 2
batch.size = 32
iters = 2000
eta = 0.05
beta = 0.01
optimizer = sgd
"""

TRIAD_ABLATION_CELLS = [
    {"method": "SINGLE"},
    {"method": "JOINT"},
    {"method": "SEPARATE"},
    {"method": "SELECTIVE", "order": "RANDOM"},
    {"method": "SELECTIVE", "order": "FORWARD"},
    {"method": "SELECTIVE", "order": "BACKWARD"},
]
TRIAD_ABLATION_SEEDS = [0, 1, 2, 3, 4]


def _fail(msg: str, code: int) -> int:
    print(f"mtopt: {msg}", file=sys.stderr)
    return code


def _apply_overrides(raw: dict[str, str], args) -> dict[str, str]:
    out = dict(raw)
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "method", None):
        out["method"] = args.method
    if getattr(args, "order", None):
        out["order"] = args.order
    return out


def cmd_run(args) -> int:
    try:
        raw = parse_kv_text(open(args.config, encoding="utf-8").read())
        raw = _apply_overrides(raw, args)
        cfg = validate_config(raw)
    except (OSError, ConfigError) as e:
        return _fail(str(e), EXIT_USAGE)
    try:
        result = run_experiment(cfg)
    except NumericAbort as e:
        return _fail(f"numeric failure: {e}", EXIT_NUMERIC)
    except ConfigError as e:
        return _fail(str(e), EXIT_USAGE)
    paths = write_run(args.out, result, echo_dict(cfg))
    if cfg.verbosity:
        losses = " ".join(f"{t}={fmt(v)}" for t, v in sorted(result.eval_losses.items()))
        print(f"run {cfg.method} seed={cfg.seed}: eval losses {losses}")
        print(f"wrote {paths['summary']}")
    return EXIT_OK


def _cell_name(overrides: dict[str, str]) -> str:
    return "_".join(f"{k.replace('.', '-')}-{v}" for k, v in sorted(overrides.items()))


def _run_cell(base_raw: dict, overrides: dict, outdir: str) -> tuple[str, str]:
    """Worker for one sweep cell; returns (cell name, status)."""
    name = _cell_name(overrides)
    raw = dict(base_raw)
    raw.update(overrides)
    try:
        cfg = validate_config(raw)
        result = run_experiment(cfg)
        write_run(os.path.join(outdir, name), result, echo_dict(cfg))
        return name, "ok"
    except NumericAbort as e:
        return name, f"numeric:{e.iteration}"
    except (ConfigError, ValueError) as e:
        return name, f"error:{e}"


def _expand_grid(raw: dict[str, str]) -> tuple[dict[str, str], list[dict[str, str]]]:
    base = {k: v for k, v in raw.items() if not k.startswith("sweep.")}
    axes = {k[len("sweep."):]: [x.strip() for x in v.split(",")]
            for k, v in raw.items() if k.startswith("sweep.")}
    if not axes:
        raise ConfigError("sweep config has no sweep.* axes")
    keys = sorted(axes)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]
    return base, cells


def cmd_sweep(args) -> int:
    try:
        if args.preset:
            if args.preset != "triad-ablation":
                raise ConfigError(f"unknown preset '{args.preset}'")
            base = parse_kv_text(TRIAD_ABLATION_BASE)
            cells = [dict(cell, seed=str(seed))
                     for seed in TRIAD_ABLATION_SEEDS for cell in TRIAD_ABLATION_CELLS]
        else:
            if not args.config:
                raise ConfigError("sweep needs --config or --preset")
            raw = parse_kv_text(open(args.config, encoding="utf-8").read())
            base, cells = _expand_grid(raw)
        if args.seed is not None:
            base["seed"] = str(args.seed)
        for cell in cells:  # validate every cell before any compute
            merged = dict(base)
            merged.update(cell)
            validate_config(merged)
    except (OSError, ConfigError) as e:
        return _fail(str(e), EXIT_USAGE)

    os.makedirs(args.out, exist_ok=True)
    pending, done = [], []
    for cell in cells:
        name = _cell_name(cell)
        if args.resume and os.path.exists(os.path.join(args.out, name, "summary.json")):
            done.append((name, "kept"))
        else:
            pending.append(cell)
    results = list(done)
    if args.workers > 1 and pending:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(_run_cell, base, cell, args.out) for cell in pending]
            results.extend(f.result() for f in futures)
    else:
        results.extend(_run_cell(base, cell, args.out) for cell in pending)

    results.sort()
    lines = [INDEX_SCHEMA, INDEX_HEADER]
    lines += [f'{name},{os.path.join(args.out, name)},{status}' for name, status in results]
    with open(os.path.join(args.out, "index.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    bad = [r for r in results if r[1].startswith(("numeric", "error"))]
    for name, status in bad:
        print(f"mtopt: cell {name}: {status}", file=sys.stderr)
    print(f"sweep: {len(results)} cells, {len(bad)} failed; index at {args.out}/index.csv")
    if any(status.startswith("numeric") for _, status in bad):
        return EXIT_NUMERIC
    return EXIT_USAGE if bad else EXIT_OK


def cmd_verify(args) -> int:
    suites = [s.strip() for s in args.suites.split(",")] if args.suites else list(SUITE_IDS)
    for s in suites:
        if s not in SUITE_IDS:
            return _fail(f"unknown suite '{s}' (have {', '.join(SUITE_IDS)})", EXIT_USAGE)
    if args.instances is not None and args.instances < 1:
        return _fail("instances must be >= 1", EXIT_USAGE)
    reports = []
    for s in suites:
        n = args.instances or SUITE_DEFAULT_INSTANCES[s]
        rep = run_property_suite(s, n, seed=args.seed, margin_scale=args.margin_scale)
        reports.append(rep)
        status = "pass" if rep.passed else f"FAIL ({rep.violations} violations)"
        print(f"{s} [{SUITE_TITLES[s]}]: {status}, {rep.instances} instances, "
              f"max residual {rep.max_residual:.3e}")
    if args.out:
        payload = {"schema": "mtopt.verify.v1",
                   "seed": args.seed,
                   "suites": {r.suite: {"instances": r.instances, "violations": r.violations,
                                        "max_residual": r.max_residual, "regime": r.regime}
                              for r in reports}}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VIOLATION


def cmd_report(args) -> int:
    for d in [args.baseline] + args.rundirs:
        if not os.path.isfile(os.path.join(d, "summary.json")):
            return _fail(f"missing run directory (no summary.json): {d}", EXIT_USAGE)
    base = read_summary(args.baseline)
    base_losses = {int(t): v for t, v in base["eval_losses"].items()}
    rows = []
    for d in args.rundirs:
        s = read_summary(d)
        losses = {int(t): v for t, v in s["eval_losses"].items()}
        dm = delta_m_from_losses(losses, base_losses)
        mean_m = None
        runs = s.get("runs", {})
        if "main" in runs:
            mean_m = runs["main"].get("mean_group_count")
        rows.append((d, s["method"], s["seed"], dm, mean_m))

    lines = ["# schema=mtopt.report.v1", "dir,method,seed,delta_m_pct,mean_group_count"]
    for d, method, seed, dm, mean_m in rows:
        lines.append(",".join([d, method, str(seed), fmt(dm),
                               "" if mean_m is None else fmt(float(mean_m))]))
    print(f"baseline: {args.baseline} ({base['method']})")
    for d, method, seed, dm, mean_m in rows:
        extra = "" if mean_m is None else f", mean groups {mean_m:.2f}"
        print(f"{method:10s} seed={seed} {d}: delta_m {dm:+.3f}%{extra}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        series = ["# schema=mtopt.groupseries.v1", "dir,iter,m"]
        freq = ["# schema=mtopt.groupfreq.v1", "dir,task_i,task_j,frequency"]
        for d in args.rundirs:
            s = read_summary(d)
            if os.path.exists(os.path.join(d, "groups.csv")):
                series.extend(f"{d},{it},{m}" for it, m in read_group_series(d))
            main = s.get("runs", {}).get("main")
            if main and main.get("grouping_frequency"):
                mat = main["grouping_frequency"]
                for i, row in enumerate(mat, start=1):
                    freq.extend(f"{d},{i},{j},{fmt(float(v))}"
                                for j, v in enumerate(row, start=1))
        with open(os.path.join(args.out, "group_series.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(series) + "\n")
        with open(os.path.join(args.out, "group_frequency.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(freq) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtopt",
                                description="multi-task optimization experiments")
    sub = p.add_subparsers(dest="cmd", required=True)

    pr = sub.add_parser("run", help="run one training configuration")
    pr.add_argument("--config", required=True, help="key=value config file")
    pr.add_argument("--out", required=True, help="run directory to write")
    pr.add_argument("--seed", type=int, help="override config seed")
    pr.add_argument("--method", help="override config method")
    pr.add_argument("--order", help="override group update order")
    pr.set_defaults(fn=cmd_run)

    ps = sub.add_parser("sweep", help="expand a grid and run every cell")
    ps.add_argument("--config", help="config with sweep.* axes")
    ps.add_argument("--preset", help="built-in sweep: triad-ablation")
    ps.add_argument("--out", required=True)
    ps.add_argument("--seed", type=int, help="override base seed")
    ps.add_argument("--resume", action="store_true", help="skip completed cells")
    ps.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    ps.set_defaults(fn=cmd_sweep)

    pv = sub.add_parser("verify", help="run the analytic property suites")
    pv.add_argument("--suites", help=f"comma list from {','.join(SUITE_IDS)} (default all)")
    pv.add_argument("--instances", type=int, help="instances per suite (default per-suite)")
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--margin-scale", type=float, default=1.0,
                    help="margin multiplier (test hook; <1 tightens)")
    pv.add_argument("--out", help="write a JSON report here")
    pv.set_defaults(fn=cmd_verify)

    pp = sub.add_parser("report", help="compare runs against a baseline run")
    pp.add_argument("rundirs", nargs="+", help="run directories to score")
    pp.add_argument("--baseline", required=True, help="baseline run directory")
    pp.add_argument("--out", help="write report CSVs here")
    pp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    return args.fn(args)


def entrypoint():
    sys.exit(main())
