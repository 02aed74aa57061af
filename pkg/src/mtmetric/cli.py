"""Command-line entry point: ``mtmetric {gen,train,eval,embed,sweep}``.

Exit codes: 0 success, 1 usage or I/O error, 2 inadmissible mining
configuration, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data_model import DatasetError, load_dataset, load_schema, prepare, split_by_individual
from .evaluation import evaluate, sweep
from .miner import InadmissibleError, admissible_pair_count
from .synthgen import GroundTruth, SynthConfig, SynthConfigError, write_synthetic
from .trainer import (CheckpointError, DivergenceError, TrainConfig, load_checkpoint,
                      save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_INADMISSIBLE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("mtmetric")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at byte offset {exc.pos}") from None


def _require(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} path does not exist: {path}")
    return Path(path)


def _load_data(args):
    data = _require(args.data, "data")
    schema_path = Path(args.schema) if args.schema else data.parent / "schema.json"
    if not schema_path.exists():
        raise UsageError(f"schema file not found: {schema_path} (use --schema)")
    return prepare(load_dataset(data, load_schema(schema_path)))


def _train_config(args) -> TrainConfig:
    raw = _read_json(_require(args.config, "config")) if args.config else {}
    raw.pop("grid", None)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def cmd_gen(args) -> int:
    raw = _read_json(_require(args.config, "config")) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    config = SynthConfig.from_dict(raw)
    out = Path(args.out or ".")
    paths = write_synthetic(config, out)
    ds = load_dataset(paths["dataset"], load_schema(paths["schema"]))
    missing = {t.name: float(np.isnan(ds.labels[:, i]).mean()) for i, t in enumerate(ds.schema)}
    print(json.dumps({"records": len(ds), "individuals": len(ds.individuals()),
                      "missing_fraction": missing}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    ds = _load_data(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(ds, config, checkpoint_dir=out,
                       log=lambda entry: print(json.dumps(entry), flush=True))
    except InadmissibleError as exc:
        train_ds, _ = split_by_individual(ds, config.train_fraction, config.seed)
        pairs = admissible_pair_count(train_ds, config.miner.n)
        print(f"error: {exc}; admissible pairs in training split at n={config.miner.n}: {pairs}",
              file=sys.stderr)
        return EXIT_INADMISSIBLE
    except DivergenceError as exc:
        kept = out / "checkpoint.json"
        note = f"; last good checkpoint: {kept}" if kept.exists() else ""
        print(f"error: {exc}{note}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(result, out / "checkpoint.json")
    (out / "history.json").write_text(json.dumps(
        {"entries": result.history.entries, "wall_times": result.history.wall_times}) + "\n")
    return EXIT_OK


def _checkpoint_for(args, ds):
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if ckpt.schema_hash != ds.schema_hash:
        raise UsageError(f"schema mismatch: checkpoint {ckpt.schema_hash} "
                         f"vs dataset {ds.schema_hash}")
    if ckpt.params.d != ds.d:
        raise UsageError(f"feature dimension mismatch: checkpoint d={ckpt.params.d}, "
                         f"dataset d={ds.d}")
    return ckpt


def cmd_eval(args) -> int:
    ds = _load_data(args)
    ckpt = _checkpoint_for(args, ds)
    if args.split == "test":
        keep = set(ckpt.test_individuals)
        idx = np.flatnonzero([i in keep for i in ds.individual_ids.tolist()])
        if len(idx):
            ds = ds.subset(idx)
    truth = None
    if args.truth:
        truth = GroundTruth.from_json(_require(args.truth, "truth").read_text()).align(ds)
    report = evaluate(ckpt, ds, truth=truth)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_embed(args) -> int:
    ds = _load_data(args)
    ckpt = _checkpoint_for(args, ds)
    E = ckpt.params.transform(ds.features)
    lines = [json.dumps({"individual_id": str(i), "timestamp": int(t), "embedding": e.tolist()})
             for i, t, e in zip(ds.individual_ids, ds.timestamps, E)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = _read_json(_require(args.config, "config")) if args.config else {}
    grid = raw.get("grid", {})
    config = _train_config(args)
    ds = _load_data(args)
    out = Path(args.out or ".")
    result = sweep(ds, config,
                   n_values=grid.get("n", (2, 3, 4, 5, 6, 7)),
                   alpha_values=grid.get("alpha", (35, 40, 45, 50, 55, 60)),
                   table2_n=grid.get("table2_n", 5),
                   mse_weight=grid.get("mse_weight"),
                   jobs=args.jobs, out_dir=out / "cells")
    files = result.write(out)
    for name, path in files.items():
        log.info("wrote %s: %s", name, path)
    sys.stdout.write(result.table1_csv())
    sys.stdout.write(result.table2_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtmetric", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--data", help="dataset CSV")
    common.add_argument("--schema", help="schema JSON (default: schema.json next to --data)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train a metric")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--truth", help="synthgen ground_truth.json")
    p = sub.add_parser("embed", parents=[common], help="embed every record")
    p.add_argument("--checkpoint", required=True)
    sub.add_parser("sweep", parents=[common], help="n / alpha sensitivity tables")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "embed": cmd_embed,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DatasetError, CheckpointError, SynthConfigError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
