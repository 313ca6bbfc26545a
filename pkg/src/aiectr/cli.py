"""Command line entry point.

    aiectr gen     --config c.json --out DIR [--seed N]
    aiectr train   --config c.json --out DIR [--seed N]
    aiectr eval    --checkpoint DIR/model --test FILE.tsv [--out FILE.json] [--manifest DIR/manifest.json]
    aiectr run     --config c.json [--force]
    aiectr compare --result [LABEL=]RUN --baseline [LABEL=]RUN [--test NAME] [--csv FILE]
    aiectr sweep   --config c.json --grid am2.w=1e-5,1e-4,1e-3 [--grid bcm.a=0.5,1] [--out FILE.json]

Usage and config errors exit with status 2, any other failure with 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, runner, synth
from .data import DataError, index_encoders, load_tsv, save_tsv, split_by_fraction
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger("aiectr")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _seed(cfg: runner.RunConfig, seed):
    return cfg.seeds[0] if seed is None else seed


def cmd_gen(args) -> int:
    cfg = runner.RunConfig.load(args.config)
    if cfg.data.source != "synth":
        raise UsageError("gen needs a config with data.source = 'synth'")
    seed = _seed(cfg, args.seed)
    splits = runner.build_splits(cfg.data, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world_cfg = synth.WorldConfig(**cfg.data.world)
    world = synth.build_world(world_cfg)
    files = {"train.tsv": splits.train, "valid.tsv": splits.valid, **{f"{k}.tsv": v for k, v in splits.tests.items()}}
    manifest = {
        "seed": seed,
        "schema": splits.train.schema.to_dict(),
        "world": world_cfg.to_dict(),
        "high_bid_ads": [int(a) for a in np.flatnonzero(world.high_bid)],
        "files": {},
    }
    for name, ds in files.items():
        save_tsv(ds, out / name, index_encoders(ds.schema))
        manifest["files"][name] = {"rows": len(ds), "sha256": _sha256(out / name)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(json.dumps({"out": str(out), "files": manifest["files"]}, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = runner.RunConfig.load(args.config)
    seed = _seed(cfg, args.seed)
    splits = runner.build_splits(cfg.data, seed)
    outcome = runner.train_one(cfg, splits, seed)
    out = Path(args.out)
    save_checkpoint(out / "model", outcome.model, outcome.store,
                    {"seed": seed, "best_epoch": outcome.best_epoch, "config_hash": cfg.config_hash()})
    (out / "train_log.json").write_text(json.dumps(outcome.history, indent=2))
    print(json.dumps({"checkpoint": str(out / "model"), "best_epoch": outcome.best_epoch,
                      "valid_auc": outcome.valid_auc}, indent=2))
    return 0


def cmd_eval(args) -> int:
    model, store, _ = load_checkpoint(args.checkpoint)
    test = load_tsv(args.test, model.schema, split_tag="test")
    segments = None
    if args.manifest:
        high = set(json.loads(Path(args.manifest).read_text())["high_bid_ads"])
        is_high = np.isin(test.column("ad"), sorted(high))
        segments = {"high_bid": is_high, "normal_bid": ~is_high}
    report = runner.evaluate_model(model, store, test, segments).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("metrics.json")
    out.write_text(text + "\n")
    return 0


def cmd_run(args) -> int:
    cfg = runner.RunConfig.load(args.config)
    result = runner.run(cfg, root=args.root, force=args.force)
    sys.stdout.write(runner.format_summary(result))
    print(f"run directory: {result.run_dir}")
    return 0


def _labelled(items) -> dict:
    out = {}
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = "model", item
        if label in out:
            raise UsageError(f"label {label!r} given twice")
        out[label] = runner.RunResult.load(path)
    return out


def cmd_compare(args) -> int:
    table = runner.compare(_labelled(args.result), _labelled(args.baseline), test=args.test)
    sys.stdout.write(runner.format_table(table))
    if args.csv:
        Path(args.csv).write_text(runner.table_csv(table))
    return 0


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        grid[key] = [json.loads(v) for v in values.split(",")]
    return grid


def cmd_sweep(args) -> int:
    cfg = runner.RunConfig.load(args.config)
    grid = _parse_grid(args.grid)
    result = runner.sweep(cfg, grid, root=args.root, force=args.force)
    summary = result.to_dict()
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for i, point in enumerate(summary["points"]):
        mark = "*" if i == result.best_index else " "
        print(f"{mark} {point['overrides']}  valid AUC {point['valid_auc']:.5f}  {point['run_dir']}")
    print(f"best by validation AUC: {summary['points'][result.best_index]['overrides']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aiectr", description="Auction-information CTR experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic train/test/unbiased_test TSVs and a manifest")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one seed and write a checkpoint and train log")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a TSV with a checkpoint and write metrics JSON")
    e.add_argument("--checkpoint", required=True, help="checkpoint prefix, e.g. out/model")
    e.add_argument("--test", required=True)
    e.add_argument("--out")
    e.add_argument("--manifest", help="gen manifest; adds high/normal bid segments")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="train and evaluate every seed of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--root", help=f"run root (default ${runner.RUN_ROOT_ENV} or ./runs)")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="RelaImpr table of result runs over baseline runs")
    c.add_argument("--result", action="append", required=True, metavar="[LABEL=]RUN")
    c.add_argument("--baseline", action="append", required=True, metavar="[LABEL=]RUN")
    c.add_argument("--test", help="test set name (default unbiased_test when present)")
    c.add_argument("--csv")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="grid search, best point by validation AUC")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    s.add_argument("--root")
    s.add_argument("--force", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, runner.ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"aiectr: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError, FloatingPointError, RuntimeError, KeyError) as exc:
        print(f"aiectr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
