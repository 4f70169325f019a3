"""Command-line entry point.

Configuration is a flat `key = value` file; resolution order is
defaults < config file < command-line flags, unknown keys are errors, and
the fully resolved configuration is echoed into every output artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import evalkit, export
from .data import (DataFormatError, SyntheticConfig, leave_one_out_split, load_catalog,
                   load_interactions, load_split, save_catalog, save_interactions,
                   save_split, synth_generate)
from .model import TrainConfig, Trainer, CheckpointError, load_checkpoint, save_checkpoint

TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"tree_layers"} | {"tree"}
SYNTH_KEYS = {f.name for f in fields(SyntheticConfig)}
SPLIT_KEYS = {"target_domain", "cold_fraction"}
KNOWN_KEYS = TRAIN_KEYS | SYNTH_KEYS | SPLIT_KEYS


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad flags, not argparse's default 2
        raise CliError(message)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "tree":
        return tuple(int(x) for x in raw.split("-"))
    if key == "branches":
        return tuple(b.strip() for b in raw.split(",") if b.strip())
    if key == "position_embeddings":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise CliError(f"bad boolean for {key}: {raw!r}")
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    raise CliError(f"bad value for {key}: {raw!r}")


def read_config_file(path: str) -> dict:
    settings = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in KNOWN_KEYS:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            settings[key] = _parse_value(key, value)
    return settings


def resolve_settings(args, extra_overrides: dict | None = None) -> dict:
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key, value in (extra_overrides or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def build_train_config(settings: dict) -> TrainConfig:
    field_names = {f.name for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in settings.items():
        if key == "tree":
            kwargs["tree_layers"] = value
        elif key in field_names:
            kwargs[key] = value
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def build_synth_config(settings: dict) -> SyntheticConfig:
    kwargs = {k: v for k, v in settings.items() if k in SYNTH_KEYS}
    cfg = SyntheticConfig(**kwargs)
    cfg.validate()
    return cfg


def echo_dict(settings: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(settings.items())}


def cmd_synth(args) -> int:
    settings = resolve_settings(args, {"seed": args.seed})
    cfg = build_synth_config(settings)
    catalog, log = synth_generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_catalog(catalog, os.path.join(args.out, "catalog.tsv"))
    save_interactions(log, os.path.join(args.out, "interactions.tsv"))
    with open(os.path.join(args.out, "synth_config.json"), "w", encoding="utf-8") as fh:
        json.dump(echo_dict(cfg.__dict__), fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {len(catalog.items)} items, {len(log.events)} events to {args.out}",
          file=sys.stderr)
    return 0


def cmd_split(args) -> int:
    catalog = load_catalog(args.catalog)
    log = load_interactions(args.interactions, catalog)
    split = leave_one_out_split(log, catalog, args.target_domain,
                               cold_user_fraction=args.cold_fraction, seed=args.seed)
    echo = {"target_domain": args.target_domain, "cold_fraction": args.cold_fraction,
            "seed": args.seed}
    save_split(split, args.out, config_echo=echo)
    save_catalog(catalog, os.path.join(args.out, "catalog.tsv"))
    print(f"wrote {len(split.test_cases)} test cases "
          f"({sum(c.cold for c in split.test_cases)} cold) to {args.out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    settings = resolve_settings(args, {"seed": args.seed, "epochs": args.epochs})
    cfg = build_train_config(settings)
    catalog = load_catalog(os.path.join(args.data, "catalog.tsv"))
    train_path = os.path.join(args.data, "train_interactions.tsv")
    if not os.path.exists(train_path):
        train_path = os.path.join(args.data, "interactions.tsv")
    log = load_interactions(train_path, catalog)
    trainer = Trainer(catalog, cfg)
    results = trainer.run(log, steps=args.steps)
    save_checkpoint(args.checkpoint, trainer, meta={"settings": echo_dict(settings)})
    last = results[-1]
    print(f"trained {len(results)} steps; final loss {last.loss:.6f} "
          f"(contrastive {last.contrastive:.6f}, ortho {last.ortho:.6f})", file=sys.stderr)
    return 0


def _load_for_eval(args):
    catalog = load_catalog(os.path.join(args.split, "catalog.tsv"))
    split = load_split(args.split, catalog)
    return catalog, split


def cmd_eval(args) -> int:
    catalog, split = _load_for_eval(args)
    trainer = load_checkpoint(args.checkpoint, catalog)
    ks = tuple(int(k) for k in args.k.split(","))
    report = evalkit.evaluate(trainer.params, split, catalog, trainer.cfg, ks=ks)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(report.to_table(), file=sys.stderr, end="")
    return 0


def cmd_baseline(args) -> int:
    catalog, split = _load_for_eval(args)
    report = evalkit.baseline_scores(args.kind, split, catalog, split.train_events,
                                    seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    print(report.to_table(), file=sys.stderr, end="")
    return 0


def cmd_export(args) -> int:
    catalog = load_catalog(os.path.join(args.split, "catalog.tsv")) if args.split \
        else load_catalog(args.catalog)
    trainer = load_checkpoint(args.checkpoint, catalog)
    if args.what == "tags":
        export.export_tag_embeddings(trainer.params, catalog, args.out)
    elif args.what == "leaves":
        export.export_leaf_embeddings(trainer.params, trainer.cfg, args.out)
    else:
        if not args.split:
            raise CliError(f"--split is required for --what {args.what}")
        split = load_split(args.split, catalog)
        if args.what == "users":
            export.export_user_embeddings(trainer.params, split, catalog, trainer.cfg, args.out)
        else:
            export.export_leaf_assignments(trainer.params, split, catalog, trainer.cfg, args.out)
    return 0


def cmd_report(args) -> int:
    with open(args.infile, "r", encoding="utf-8") as fh:
        report = evalkit.EvalReport.from_json(fh.read())
    print(report.to_table() if args.format == "table" else report.to_csv(), end="")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="couplekit", description="tag-based cross-domain cold-start retrieval")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic two-domain corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("split", help="leave-one-out split with cold users")
    s.add_argument("--catalog", required=True)
    s.add_argument("--interactions", required=True)
    s.add_argument("--target-domain", type=int, default=1)
    s.add_argument("--cold-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--k", default="5,10")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("baseline", help="random or popularity reference evaluation")
    s.add_argument("--kind", choices=("random", "popularity"), required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("export-embeddings", help="dump embeddings or leaf assignments as TSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--what", choices=("tags", "leaves", "users", "assignments"), required=True)
    s.add_argument("--split")
    s.add_argument("--catalog")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("report", help="render a report JSON as a table or CSV")
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--format", choices=("table", "csv"), default="table")
    s.set_defaults(fn=cmd_report)
    return p


def main_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(main_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
