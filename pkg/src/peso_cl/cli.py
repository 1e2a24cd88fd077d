"""Command line entry point: ``peso-cl <subcommand> [--config PATH] [--seed N] [--jobs N] [--out DIR]``.

Exit codes: 0 ok, 1 config error, 2 run failure, 3 certificate failure.
``PESO_CL_LOG`` sets the log level (DEBUG, INFO, WARNING, ...).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, PesoError

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_CERT = 0, 1, 2, 3

log = logging.getLogger("peso_cl")


def _config(args):
    from .harness import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    for item in args.set or []:
        _override(cfg, item)
    return ExperimentConfig.from_dict(cfg.to_dict())    # re-validate after overrides


def _override(cfg, item):
    """Apply ``section.key=value`` with the value parsed as YAML."""
    import yaml

    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    *sections, name = key.split(".")
    obj = cfg
    for part in sections:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config section {part!r}")
        obj = getattr(obj, part)
    if not hasattr(obj, name):
        raise ConfigError(f"unknown config key {key!r}")
    value = yaml.safe_load(raw)
    current = getattr(obj, name)
    if isinstance(current, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            value = float(value)       # YAML reads 1e4 as a string
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    setattr(obj, name, tuple(value) if isinstance(value, list) else value)


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args):
    from .data import generate_drift, write_csv, write_item_clusters

    cfg = _config(args)
    spec = dataclasses.replace(cfg.data.drift, seed=cfg.seed)
    ilog = generate_drift(spec)
    out = _out(cfg)
    write_csv(ilog, out / "interactions.csv")
    write_item_clusters(ilog, out / "item_clusters.csv")
    print(f"wrote {len(ilog)} interactions to {out / 'interactions.csv'}")
    return EXIT_OK


def cmd_split(args):
    from .harness import build_data

    cfg = _config(args)
    data = build_data(cfg)
    out = _out(cfg)
    summary = []
    for b in data.blocks:
        summary.append({"stage": b.stage_index, "records": b.n_records,
                        "train_pairs": len(b.pairs), "val_pairs": len(b.val_pairs),
                        "test_pairs": len(b.test_pairs)})
    (out / "split.json").write_text(json.dumps({"split": cfg.data.split, "blocks": summary},
                                               indent=2))
    for row in summary:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def _write_report(out, reports):
    from .harness import metrics_csv

    (out / "metrics_test.csv").write_text(metrics_csv(reports, "test"))
    if any(r.val for r in reports):
        (out / "metrics_val.csv").write_text(metrics_csv(reports, "val"))
    (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))


def cmd_train(args):
    from .harness import run_pipeline

    cfg = _config(args)
    out = _out(cfg)
    cfg.save(out / "config.yaml")
    rep = run_pipeline(cfg, checkpoint_dir=out / "checkpoints")
    _write_report(out, [rep])
    for (metric, k), v in sorted(rep.averages().items()):
        print(f"{rep.method} {metric}@{k} {v:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    from .checkpoint import load_checkpoint
    from .decode_eval import evaluate_pairs
    from .harness import build_data

    cfg = _config(args)
    out = _out(cfg)
    path = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(out / "checkpoints")
    ck = load_checkpoint(path, cfg)
    data = build_data(cfg)
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage", "method", "metric", "k", "value"))
        for b in data.blocks[1:]:
            res = evaluate_pairs(ck.model, ck.stacks, b.test_pairs, data.trie, cfg.eval.ks,
                                 cfg.eval.beam_width)
            for (metric, k), v in sorted(res.items()):
                w.writerow((b.stage_index, cfg.method, metric, k, repr(v)))
                print(f"stage {b.stage_index} {metric}@{k} {v:.4f}")
    return EXIT_OK


def _latest_checkpoint(folder):
    found = sorted(Path(folder).glob("stage*.npz"), key=lambda p: int(p.stem[5:]))
    if not found:
        raise ConfigError(f"no checkpoints in {folder}; pass --checkpoint")
    return found[-1]


def cmd_sweep(args):
    from .harness import run_sweep

    cfg = _config(args)
    out = _out(cfg)
    res = run_sweep(cfg, jobs=args.jobs)
    (out / "sweep_summary.csv").write_text(res.summary_csv())
    _write_report(out, [r for r in res.reports if not r.failed])
    failed = sum(1 for r in res.reports if r.failed)
    print(f"{len(res.reports)} cells, {failed} failed; summary in {out / 'sweep_summary.csv'}")
    return EXIT_RUN if failed == len(res.reports) else EXIT_OK


def cmd_certify(args):
    from .theory import run_certificates

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    res = run_certificates()
    (out / "certificates.json").write_text(json.dumps(res, indent=2, default=float))
    for c in res["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    return EXIT_OK if res["passed"] else EXIT_CERT


def _parse_stages(text):
    lo, sep, hi = text.partition("-")
    return list(range(int(lo), int(hi) + 1)) if sep else [int(s) for s in text.split(",")]


def cmd_report(args):
    from .harness import read_metrics_csv, stage_range_average

    folder = Path(args.out or ".")
    table = read_metrics_csv(folder / "metrics_test.csv")
    stages = _parse_stages(args.stages) if args.stages else sorted({k[0] for k in table})
    avg = stage_range_average(table, stages)
    with open(folder / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "metric", "k", "stages", "value"))
        for (method, metric, k), v in avg.items():
            w.writerow((method, metric, k, "-".join(map(str, (stages[0], stages[-1]))), repr(v)))
            print(f"{method:24s} {metric}@{k:<3d} {v:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "split": cmd_split, "train": cmd_train,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "certify": cmd_certify,
            "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="peso-cl")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lam=2.0")
        if name == "evaluate":
            sp.add_argument("--checkpoint")
        if name == "report":
            sp.add_argument("--stages", help="averaging range, e.g. 2-4 or 2,3")
    return p


def main(argv=None):
    level = getattr(logging, os.environ.get("PESO_CL_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PesoError, OSError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
