"""Command-line front end: ``fedda run | deviation | check | sweep``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 failed check.
Outputs go to ``--out``, else ``$FEDDA_OUT``, else ``./fedda-out``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .config import apply_override, config_from_dict
from .engine import MetricsWriter, build_task, run_experiment, save_checkpoint
from .errors import ConfigError, FeddaError

log = logging.getLogger("fedda")

OUT_ENV = "FEDDA_OUT"
DEFAULT_OUT = "fedda-out"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _read_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", f"{path} must hold a JSON object")
    return raw


def _resolve(args, raw: dict):
    raw = copy.deepcopy(raw)
    for item in args.set or []:
        apply_override(raw, item)
    if args.seed is not None:
        raw["seed"] = args.seed
    return config_from_dict(raw)


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_into(config, out: Path) -> dict:
    """Run one experiment into ``out``; metrics are flushed row by row."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", config.to_dict())
    with MetricsWriter(out / "metrics.csv", timing=config.record_timing) as sink:
        result = run_experiment(config, on_round=sink)
    save_checkpoint(out / "checkpoint.json", result.state, config)
    last = result.metrics[-1] if result.metrics else None
    return {
        "final_loss": None if last is None else last.loss,
        "final_accuracy": None if last is None else last.accuracy,
    }


def cmd_run(args) -> int:
    config = _resolve(args, _read_raw(args.config))
    out = _out_dir(args)
    summary = _run_into(config, out)
    if args.json:
        print(json.dumps({"out": str(out), **summary}))
    else:
        print(f"wrote {out / 'metrics.csv'} ({config.rounds} rounds), final loss {summary['final_loss']}")
    return EXIT_OK


def cmd_deviation(args) -> int:
    raw = _read_raw(args.config)
    config = _resolve(args, raw)
    steps = args.steps
    task = build_task(config)
    fed, models = task.federation, task.models
    init = args.init if args.init is not None else None
    trace = analysis.deviation_experiment(fed, models, config.beta1, config.lr, steps,
                                          full_batch=not args.minibatch, init=init,
                                          batch_size=config.batch_size or 1, seed=config.seed)
    out = _out_dir(args)
    analysis.write_trace_csv(out / "trace.csv", trace)
    consts = analysis.theory_constants(models, config.beta1, config.lr)
    summary = {"lipschitz": consts.lipschitz, "lambda_plus": consts.lambda_plus,
               "scale": trace.scale, "steps": steps}
    if trace.degenerate:
        summary["status"] = "degenerate: zero deviation"
    else:
        fits = {}
        for name, series in (("local_momentum", trace.d_m_local_max), ("fedda_momentum", trace.d_m_fedda)):
            try:
                window = analysis.select_window(series, trace.scale)
                fits[name] = analysis.fit_growth(series, window).to_dict()
            except FeddaError as exc:
                fits[name] = {"error": str(exc)}
        summary["status"] = "ok"
        summary["fits"] = fits
        lw = fits["local_momentum"]
        if "t0" in lw:
            t0, t1 = max(lw["t0"], 10), lw["t1"]
            dom = bool(np.all(trace.d_m_fedda[t0:t1 + 1] <= trace.d_m_local_max[t0:t1 + 1]))
            summary["dominance"] = {"t0": t0, "t1": t1, "holds": dom}
    _write_json(out / "fit_summary.json", summary)
    print(json.dumps(summary, indent=None if args.json else 2))
    return EXIT_OK


def cmd_check(args) -> int:
    results = analysis.run_all_checks(perturb_lr=args.perturb_lr)
    ok = all(r.passed for r in results)
    if args.json:
        print(json.dumps({"passed": ok, "checks": [
            {**r.to_dict(), "deviation": float(r.deviation)} for r in results]}, indent=2))
    else:
        width = max(len(r.name) for r in results)
        print(f"{'check':<{width}}  {'max deviation':>14}  {'tolerance':>10}  result")
        for r in results:
            tol = "bitwise" if r.tolerance == 0 else f"{r.tolerance:.0e}"
            print(f"{r.name:<{width}}  {r.deviation:>14.3e}  {tol:>10}  {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def parse_grid(items) -> list[tuple[str, list]]:
    """``key=v1,v2`` or ``key=[json list]`` pairs; values parsed as JSON."""
    grid = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "grid entries look like key=v1,v2")
        key, text = item.split("=", 1)
        try:
            values = json.loads(text) if text.startswith("[") else [json.loads(v) for v in text.split(",")]
        except json.JSONDecodeError:
            values = text.split(",")
        if not isinstance(values, list) or not values:
            raise ConfigError(key, "grid needs at least one value")
        grid.append((key, values))
    if not grid:
        raise ConfigError("--grid", "empty grid")
    return grid


def _cell_name(assign) -> str:
    return "_".join(f"{k.replace('.', '-')}={json.dumps(v)}" for k, v in assign).replace("/", "-").replace('"', "")


def cmd_sweep(args) -> int:
    raw = _read_raw(args.config)
    grid = parse_grid(args.grid)
    keys = [k for k, _ in grid]
    cells = []
    for combo in itertools.product(*(v for _, v in grid)):
        assign = list(zip(keys, combo))
        cell_raw = copy.deepcopy(raw)
        for k, v in assign:
            apply_override(cell_raw, f"{k}={json.dumps(v)}")
        cells.append((assign, _resolve(args, cell_raw)))
    out = _out_dir(args)

    def job(cell):
        assign, config = cell
        name = _cell_name(assign)
        return name, assign, _run_into(config, out / "cells" / name)

    with ThreadPoolExecutor(max(1, args.jobs)) as pool:
        rows = list(pool.map(job, cells))
    rows.sort(key=lambda r: (np.inf if r[2]["final_loss"] is None else r[2]["final_loss"], r[0]))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *keys, "final_loss", "final_accuracy"])
        for name, assign, s in rows:
            w.writerow([name, *(json.dumps(v) for _, v in assign),
                        "" if s["final_loss"] is None else repr(s["final_loss"]),
                        "" if s["final_accuracy"] is None else repr(s["final_accuracy"])])
    print(f"{len(rows)} cells written under {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set data.clients=4")

    p = argparse.ArgumentParser(prog="fedda", description="Federated optimization with decoupled momentum.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run one experiment")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    d = sub.add_parser("deviation", parents=[common], help="momentum deviation trace and growth fits")
    d.add_argument("config")
    d.add_argument("--steps", type=int, default=500)
    d.add_argument("--init", type=float, nargs="+", default=None, help="shared starting point")
    d.add_argument("--minibatch", action="store_true", help="sample client batches instead of full batch")
    d.set_defaults(func=cmd_deviation)
    c = sub.add_parser("check", parents=[common], help="exact-reduction and gradient checks")
    c.add_argument("--perturb-lr", type=float, default=0.0, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)
    s = sub.add_parser("sweep", parents=[common], help="grid over config fields")
    s.add_argument("config")
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis; repeat for more axes")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FeddaError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
