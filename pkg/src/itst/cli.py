"""Command-line surface: gen-data, train, eval, ablate, search.

Every command is deterministic given its flags: rerunning with the same
seeds and ``ITST_THREADS=1`` reproduces output files byte for byte. Bulk
arrays travel in the binary tensor format, metadata in JSON, tables in
CSV. Wall-clock timings go to stdout only, never into artifacts, so they
cannot break reproducibility.

Exit codes: 0 success, 1 I/O or environment failure, 2 usage/validation
error (bad flags, malformed config, incompatible shapes).

``train`` ends its stdout with a machine-readable ``CC=<value>`` line so
scripts can scrape the headline metric without parsing JSON; ``eval``
does the same after an ``accuracy=`` line. Config files are JSON with
optional ``model`` and ``train`` sections whose keys mirror the
``ModelConfig`` and ``TrainHyper`` field names exactly.

``ITST_THREADS`` caps worker threads for the multi-run commands
(ablate, search); the default of 1 keeps runs bitwise reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from .errors import UsageError
from .model import PATHS, ModelConfig, init_model
from .synth import CLASS_NAMES, GenConfig, generate_dataset
from .tensorfile import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .training import (
    Classifier,
    TrainHyper,
    ablate,
    ablation_csv,
    confusion_csv,
    evaluate,
    random_search,
    train,
)

__all__ = ["main"]


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, doc: dict) -> None:
    _write_text(path, json.dumps(doc, indent=2) + "\n")


def _workers() -> int:
    raw = os.environ.get("ITST_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"ITST_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"ITST_THREADS must be >= 1, got {value}")
    return value


def _from_doc(cls, doc: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"unknown {section} config keys: {', '.join(unknown)}")
    if "enabled_paths" in doc:
        doc = dict(doc, enabled_paths=tuple(doc["enabled_paths"]))
    return cls(**doc)


def _build_config(path: str | None) -> tuple[ModelConfig, TrainHyper]:
    if path is None:
        return ModelConfig(), TrainHyper()
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = sorted(set(doc) - {"model", "train"})
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(unknown)}")
    config = _from_doc(ModelConfig, doc.get("model", {}), "model")
    hyper = _from_doc(TrainHyper, doc.get("train", {}), "train")
    return config, hyper


def _parse_paths(raw: str) -> tuple[str, ...]:
    tokens = [t.strip() for t in raw.split(",") if t.strip()]
    for token in tokens:
        if token not in PATHS:
            raise UsageError(f"unknown path {token!r}, expected subset of {PATHS}")
    paths = tuple(p for p in PATHS if p in tokens)
    if not paths:
        raise UsageError("--paths needs at least one of " + ",".join(PATHS))
    return paths


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = GenConfig(seed=args.seed, scale=args.scale)
    train_set, test_set = generate_dataset(config)
    save_dataset(args.out, train_set, test_set, config)
    n_train = config.count_for(config.train_per_class)
    n_test = config.count_for(config.test_per_class)
    for index, name in enumerate(CLASS_NAMES):
        print(f"class {index:2d} {name:<24s} train {n_train:5d} test {n_test:5d}")
    print(f"wrote {args.out}: {len(train_set)} train / {len(test_set)} test windows")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    train_set, test_set, _ = load_dataset(args.data)
    config, hyper = _build_config(args.config)
    if args.paths is not None:
        config = replace(config, enabled_paths=_parse_paths(args.paths))
    if args.seed is not None:
        hyper = replace(hyper, seed=args.seed)

    started = time.perf_counter()
    model = init_model(config, seed=hyper.seed)
    report, classifier = train(model, train_set, test_set, hyper)

    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"), report.to_json_dict())
    _write_text(os.path.join(args.out, "confusion.csv"),
                confusion_csv(np.array(report.confusion), CLASS_NAMES))
    save_checkpoint(os.path.join(args.out, "checkpoint.itst"),
                    classifier.model, classifier.scaler, step=report.steps)
    print(f"wall_time_s={time.perf_counter() - started:.2f}")
    print(f"CC={report.test_cc:.6f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _, test_set, _ = load_dataset(args.data)
    model, scaler, _ = load_checkpoint(args.checkpoint)
    cc, accuracy, confusion = evaluate(Classifier(model, scaler), test_set)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "confusion.csv"),
                confusion_csv(confusion, CLASS_NAMES))
    print(f"accuracy={accuracy:.6f}")
    print(f"CC={cc:.6f}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    train_set, test_set, _ = load_dataset(args.data)
    config, hyper = _build_config(args.config)
    if args.seed is not None:
        hyper = replace(hyper, seed=args.seed)
    rows = ablate(config, hyper, train_set, test_set, workers=_workers())
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "ablation.csv"), ablation_csv(rows))
    for row in rows:
        print(f"{row.label:5s} CC={row.test_cc:.6f} accuracy={row.test_accuracy:.6f}")
    return 0


def _trials_csv(result) -> str:
    lines = ["index,d_model,heads,encoder_layers,decoder_layers,d_ffn,"
             "dropout,warmup_steps,test_cc"]
    for t in result.trials:
        c = t.config
        lines.append(f"{t.index},{c.d_model},{c.heads},{c.encoder_layers},"
                     f"{c.decoder_layers},{c.d_ffn},{c.dropout:.6f},"
                     f"{t.hyper.warmup_steps},{t.test_cc!r}")
    return "\n".join(lines) + "\n"


def cmd_search(args: argparse.Namespace) -> int:
    train_set, test_set, _ = load_dataset(args.data)
    config, hyper = _build_config(args.config)
    result = random_search(config, hyper, train_set, test_set,
                           budget=args.budget, seed=args.seed, workers=_workers())
    doc = result.to_json_dict()
    os.makedirs(args.out, exist_ok=True)
    best_doc = {"schema_version": doc["schema_version"], "budget": doc["budget"],
                **doc["best"]}
    _write_json(os.path.join(args.out, "best_config.json"), best_doc)
    _write_text(os.path.join(args.out, "trials.csv"), _trials_csv(result))
    for trial in result.trials:
        print(f"trial {trial.index:3d} CC={trial.test_cc:.6f}")
    print(f"best trial {result.best.index} CC={result.best.test_cc:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itst", description="Triple-path transformer fault-diagnosis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a windowed dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0,
                   help="fraction of the full per-class window counts")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write its artifacts")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the training seed from --config")
    p.add_argument("--paths", default=None,
                   help="comma-separated encoder paths, e.g. time,frequency")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train all seven encoder-path subsets")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("search", help="seeded random hyperparameter search")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
