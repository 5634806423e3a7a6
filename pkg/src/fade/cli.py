"""Command-line experiment runner.

Subcommands::

    fade run --config exp.json        every (method, seed) cell of the config's mode
    fade detect --config exp.json     shift signals only
    fade calibrate --config exp.json  gamma from each seed's stream prefix
    fade fed --config exp.json        federated mode
    fade validate --config exp.json   print the resolved config

Exit status is 0 on success, 1 when a run fails and 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import run_sequential
from .config import (ConfigValidationError, ExperimentConfig, ShardSpec, validate_config,
                     validate_data)
from .data_stream import generate_stream, load_csv
from .detector import calibrate_gamma
from .federated import gaussian_table, partition_clients, run_federated
from .metrics import mean_std
from .models import ModelSpec

log = logging.getLogger("fade")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SEQ_METRICS = ("final_avg_acc", "mean_current_acc", "forgetting", "fired_fraction",
               "trained_fraction", "max_kl")
SIGNAL_FIELDS = ("t", "kl", "fim_dist", "tau", "fired", "severity", "gamma_in_effect")


class CellError(RuntimeError):
    def __init__(self, method, seed, cause):
        self.method, self.seed = method, seed
        super().__init__(f"cell (method={method}, seed={seed}) failed: {cause}")


@dataclass
class CellResult:
    method: str
    seed: int
    jsonl: str
    metrics: dict
    extra: dict


def configure_logging():
    level = os.environ.get("FADE_LOG_LEVEL", "error").lower()
    mapping = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=mapping.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in mapping:
        log.error("FADE_LOG_LEVEL=%r not one of error, info, debug; using error", level)


# ---------------------------------------------------------------------------
# cells


def _seeded_stream(cfg: ExperimentConfig, seed):
    return cfg.stream.model_copy(update={"seed": seed})


def _model_for(cfg: ExperimentConfig, d_x, n_classes, seed):
    if cfg.model is not None:
        return cfg.model.model_copy(update={"init_seed": seed})
    return ModelSpec(arch="logistic", d_x=d_x, n_classes=n_classes, init_seed=seed)


def _peek_dims(spec):
    if spec.kind == "tabular_fragment":
        table = load_csv(spec.csv_path, spec.label_column, spec.has_header)
        return table.features.shape[1], table.n_classes
    return spec.d_x, spec.n_classes


def _sequential_cell(cfg: ExperimentConfig, method, seed, limit=None):
    spec = _seeded_stream(cfg, seed)
    d_x, C = _peek_dims(spec)
    stream = generate_stream(spec)
    if limit is not None:
        stream = itertools.islice(stream, limit)
    acfg = cfg.adapter.model_copy(update={"seed": seed})
    return run_sequential(stream, _model_for(cfg, d_x, C, seed), method, acfg,
                          track_regret=cfg.mode == "sequential")


def _shards_for(spec: ShardSpec, seed):
    if spec.source == "csv":
        table = load_csv(spec.csv_path, spec.label_column, spec.has_header)
    else:
        table = gaussian_table(spec.n, spec.d_x, spec.n_classes, spec.separation, seed)
    return table, partition_clients(table, spec.K, spec.skew, spec.concentration, seed)


def run_cell(cfg: ExperimentConfig, method: str, seed: int) -> CellResult:
    """Execute one (method, seed) cell and return its log text and summary metrics."""
    try:
        if cfg.mode == "federated":
            table, shards = _shards_for(cfg.shards, seed)
            fcfg = cfg.fed.model_copy(update={"method": method, "seed": seed})
            model = _model_for(cfg, table.features.shape[1], table.n_classes, seed)
            flog = run_federated(shards, model, fcfg)
            accs = [r["pooled_heldout_acc"] for r in flog.rounds]
            fired = [r["fired_fraction"] for r in flog.rounds if r["fired_fraction"] is not None]
            metrics = {"final_pooled_acc": accs[-1], "best_pooled_acc": max(accs),
                       "mean_fired_fraction": float(np.mean(fired)) if fired else float("nan")}
            return CellResult(method, seed, flog.to_jsonl(), metrics, {})
        if cfg.mode == "calibrate":
            warm = cfg.adapter.detector.warmup
            prefix = cfg.calibrate_prefix or warm + 1
            runlog = _sequential_cell(cfg, method, seed, limit=prefix)
            taus = [r["tau"] for r in runlog.records if r["tau"] is not None]
            n_cal = min(warm, len(taus))
            gamma = calibrate_gamma(taus, cfg.adapter.detector.quantile_q, n_cal)
            text = json.dumps({"seed": seed, "method": method, "gamma": gamma,
                               "prefix_batches": prefix, "tau_count": n_cal}, sort_keys=True) + "\n"
            return CellResult(method, seed, text, {"gamma": gamma}, {})
        runlog = _sequential_cell(cfg, method, seed)
        if cfg.mode == "detect_only":
            lines = [json.dumps({k: r[k] for k in SIGNAL_FIELDS}, sort_keys=True)
                     for r in runlog.records if r["tau"] is not None]
            post = [r["fired"] for r in runlog.records
                    if r["tau"] is not None and r["gamma_in_effect"] is not None]
            metrics = {"post_calibration_fired_fraction": float(np.mean(post)) if post else float("nan"),
                       "max_kl": runlog.summary["max_kl"]}
            return CellResult(method, seed, "\n".join(lines) + "\n", metrics, {})
        metrics = {k: runlog.summary[k] for k in SEQ_METRICS}
        if "regret_avg" in runlog.summary:
            metrics["regret_avg"] = runlog.summary["regret_avg"]
        return CellResult(method, seed, runlog.to_jsonl(), metrics,
                          {"param_checksum": runlog.summary["param_checksum"]})
    except Exception as exc:  # noqa: BLE001 - reported with the failing cell named
        raise CellError(method, seed, f"{type(exc).__name__}: {exc}") from exc


def _run_cell_args(args):
    cfg_json, method, seed = args
    return run_cell(ExperimentConfig.model_validate_json(cfg_json), method, seed)


# ---------------------------------------------------------------------------
# outputs


def _fmt(x):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.10g}"


def summary_csv(cfg: ExperimentConfig, results) -> str:
    """Mean and sample std of every metric, one row per method, in config order."""
    by_method = {}
    for res in results:
        by_method.setdefault(res.method, []).append(res)
    keys = []
    for res in results:
        for k in res.metrics:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["method", "n_seeds"]
    for k in keys:
        header += [f"{k}_mean", f"{k}_std"]
    w.writerow(header)
    for method in cfg.methods:
        cells = sorted(by_method.get(method, []), key=lambda r: r.seed)
        row = [method, len(cells)]
        for k in keys:
            vals = [c.metrics[k] for c in cells if k in c.metrics and np.isfinite(c.metrics[k])]
            m, s = mean_std(vals)
            row += [_fmt(m), _fmt(s)]
        w.writerow(row)
    return buf.getvalue()


def _cell_name(method, seed):
    return f"{method}_seed{seed}.jsonl"


def write_outputs(cfg: ExperimentConfig, results, started, out_dir: Path):
    runs = out_dir / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    files = []
    for res in sorted(results, key=lambda r: (cfg.methods.index(r.method), r.seed)):
        path = runs / _cell_name(res.method, res.seed)
        path.write_text(res.jsonl, encoding="utf-8")
        files.append(str(path.relative_to(out_dir)))
    (out_dir / "summary.csv").write_text(summary_csv(cfg, results), encoding="utf-8")
    manifest = {
        "tool": "fade",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "elapsed_s": round(time.time() - started, 3),
        "config": cfg.resolved(),
        "cells": [{"method": r.method, "seed": r.seed, **r.extra} for r in
                  sorted(results, key=lambda r: (cfg.methods.index(r.method), r.seed))],
        "files": files + ["summary.csv"],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    """Run every cell, then write logs, summary and manifest; returns the results."""
    started = time.time()
    cells = [(m, s) for m in cfg.methods for s in cfg.seeds]
    log.info("running %d cells in %s mode with %d job(s)", len(cells), cfg.mode, jobs)
    if jobs > 1 and len(cells) > 1:
        payload = cfg.model_dump_json(by_alias=True)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, [(payload, m, s) for m, s in cells]))
    else:
        results = []
        for m, s in cells:
            log.debug("cell method=%s seed=%d", m, s)
            results.append(run_cell(cfg, m, s))
    write_outputs(cfg, results, started, Path(cfg.output_dir))
    return results


# ---------------------------------------------------------------------------
# argument handling


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="fade", description="Fisher-guided adaptation under sequential covariate shift.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run the experiment described by the config"),
                           ("detect", "record shift signals only"),
                           ("calibrate", "emit the calibrated threshold for each seed's stream prefix"),
                           ("fed", "run the config in federated mode"),
                           ("validate", "print the resolved config and exit")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, metavar="PATH")
        if name != "validate":
            sp.add_argument("--jobs", type=int, default=1, metavar="N")
            sp.add_argument("--seed-override", type=_parse_seeds, default=None, metavar="SEEDS",
                            help="comma-separated seeds replacing the config's list")
            sp.add_argument("--output", default=None, metavar="DIR")
    return p


FORCED_MODE = {"detect": "detect_only", "calibrate": "calibrate", "fed": "federated"}


def _load(args):
    path = Path(args.config)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigValidationError([("", f"cannot read {path}: {exc.strerror}")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([("", f"{path} is not valid JSON: {exc.msg} at line {exc.lineno}")]) from None
    if args.command == "validate":
        return validate_config(path)
    if not isinstance(data, dict):
        raise ConfigValidationError([("", "config must be a JSON object")])
    if args.command in FORCED_MODE:
        data["mode"] = FORCED_MODE[args.command]
        if args.command != "fed":
            data["methods"] = ["fade"]
    if args.seed_override is not None:
        data["seeds"] = args.seed_override
    if args.output is not None:
        data["output_dir"] = args.output
    return validate_data(data)


def main(argv=None):
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigValidationError as exc:
        for ptr, msg in exc.errors:
            print(f"config error at {ptr or '/'}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(json.dumps(cfg.resolved(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.jobs < 1:
        print("config error at --jobs: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results = run_experiment(cfg, args.jobs)
    except CellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if cfg.mode == "calibrate":
        for res in sorted(results, key=lambda r: r.seed):
            print(f"seed {res.seed}: gamma = {res.metrics['gamma']:.6g}")
    else:
        print(f"wrote {len(results)} run log(s) and summary.csv to {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
