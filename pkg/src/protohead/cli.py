"""Command-line entry point wiring all modules together.

Config precedence (lowest to highest): built-in defaults, the ``PROTO_SEED``
environment variable (seed only), the JSON config file, then ``--set
KEY=VALUE`` flag overrides.  Every run writes a provenance bundle (resolved
config, seed, artifact version) into its output directory before any long
computation starts, and no output file contains timestamps, so identical
invocations on identical inputs produce identical output trees byte for byte.

Exit codes: 0 success, 1 runtime failure (bad files, divergence, I/O),
2 usage/config error, 3 scientific-verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

import protohead
from protohead import explain as explain_mod
from protohead import proto_head, trainer
from protohead.config import TrainConfig
from protohead.embedding_io import (
    EmbeddingDataset,
    SplitSpec,
    SyntheticConfig,
    manifest_path,
    polarity_signs,
    read_pemb,
    split,
    write_synthetic,
)
from protohead.errors import ConfigError, ProtoheadError, VerificationError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VERIFICATION = 3


def _parse_override(raw: str) -> tuple[str, object]:
    if "=" not in raw:
        raise ConfigError(f"override {raw!r} is not KEY=VALUE")
    key, text = raw.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text  # bare strings like head=ga
    return key.strip(), value


def load_config(path: str | None, overrides: list[str], cls=TrainConfig):
    """Defaults <- PROTO_SEED <- config file <- flag overrides."""
    data: dict = {}
    env_seed = os.environ.get("PROTO_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"PROTO_SEED must be an integer, got {env_seed!r}") from exc
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                content = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if content.strip():
            try:
                file_data = json.loads(content)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
            if not isinstance(file_data, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
            data.update(file_data)
    for raw in overrides:
        key, value = _parse_override(raw)
        data[key] = value
    return cls.from_dict(data)


def _write_json(path: Path, document: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2)
        fh.write("\n")


def _write_provenance(out_dir: Path, command: str, config) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "provenance.json", {
        "artifact": "protohead",
        "version": protohead.__version__,
        "command": command,
        "seed": config.seed,
        "config": config.to_dict(),
    })


def _resolve_data_path(raw: str) -> Path:
    path = Path(raw)
    if path.is_dir():
        candidates = sorted(path.glob("*.pemb"))
        if len(candidates) != 1:
            raise ConfigError(
                f"{path} holds {len(candidates)} .pemb files; pass the file explicitly")
        return candidates[0]
    return path


def _load_polarity_axis(data_path: Path) -> np.ndarray | None:
    manifest = manifest_path(data_path)
    if not manifest.exists():
        return None
    with open(manifest, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    axis = doc.get("polarity_axis")
    return None if axis is None else np.asarray(axis, dtype=np.float64)


def _split_for(config: TrainConfig, dataset: EmbeddingDataset):
    spec = SplitSpec(train_fraction=config.train_fraction, val_fraction=config.val_fraction,
                     test_fraction=config.test_fraction, seed=config.resolved_split_seed())
    return split(dataset, spec)


def _cmd_gen_synth(args) -> int:
    config = load_config(args.config, args.set or [], cls=SyntheticConfig)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "provenance.json", {
        "artifact": "protohead",
        "version": protohead.__version__,
        "command": "gen-synth",
        "seed": config.seed,
        "config": config.to_dict(),
    })
    pemb = out_dir / f"{args.name}.pemb"
    write_synthetic(config, pemb)
    print(pemb)
    return EXIT_OK


def _cmd_train(args) -> int:
    config = load_config(args.config, args.set or [])
    out_dir = Path(args.out)
    _write_provenance(out_dir, "train", config)
    data_path = _resolve_data_path(args.data)
    dataset = read_pemb(data_path)
    train_ds, val_ds, test_ds = _split_for(config, dataset)
    hints = None
    if config.two_view:
        axis = _load_polarity_axis(data_path)
        if axis is not None:
            hints = polarity_signs(train_ds, axis)
    model, report = trainer.train(config, train_ds, val_ds, test_ds, polarity_hints=hints)
    proto_head.save_checkpoint(model, out_dir / "checkpoint.json", config)
    _write_json(out_dir / "report.json", report.to_json_dict())
    print(f"best epoch {report.best_epoch}: val accuracy {report.best_val_accuracy:.4f}, "
          f"test accuracy {report.final_test_accuracy:.4f} "
          f"({report.wall_clock_seconds:.1f}s)", file=sys.stderr)
    print(out_dir / "checkpoint.json")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, _ = proto_head.load_checkpoint(args.checkpoint)
    dataset = read_pemb(_resolve_data_path(args.data), num_classes=model.num_classes)
    result = trainer.evaluate(model, dataset)
    print(json.dumps({
        "accuracy": result.accuracy,
        "mean_loss": result.mean_loss,
        "confusion": result.confusion.tolist(),
    }, indent=2))
    return EXIT_OK


def _cmd_project(args) -> int:
    model, config_echo = proto_head.load_checkpoint(args.checkpoint)
    data_path = _resolve_data_path(args.data)
    dataset = read_pemb(data_path, num_classes=model.num_classes)
    hints = None
    if model.sentiment_prototypes is not None:
        axis = _load_polarity_axis(data_path)
        if axis is not None and dataset.num_views == 2:
            hints = polarity_signs(dataset, axis)
    trainer.project_prototypes(model, dataset, polarity_hints=hints)
    config = TrainConfig.from_dict(config_echo) if config_echo else None
    proto_head.save_checkpoint(model, args.out, config)
    print(args.out)
    return EXIT_OK


def _cmd_explain(args) -> int:
    model, _ = proto_head.load_checkpoint(args.checkpoint)
    dataset = read_pemb(_resolve_data_path(args.data), num_classes=model.num_classes)
    position = dataset.position_of(args.id)
    if position < 0:
        raise ConfigError(f"record id {args.id} not found in {args.data}")
    explanation = explain_mod.explain_instance(
        model, dataset.record(position), top_k=args.top_k, dataset=dataset)
    print(json.dumps(explanation.to_dict(), indent=2))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = trainer.gradcheck(head=args.head, two_view=args.two_view, seed=args.seed)
    for name, err in report.block_errors.items():
        status = "ok" if err <= report.tolerance else "FAIL"
        print(f"{name}: max relative error {err:.3e} (tolerance {report.tolerance:g}) {status}")
    if not report.passed:
        failing = [n for n, e in report.block_errors.items() if e > report.tolerance]
        raise VerificationError(f"gradient check failed for blocks: {', '.join(failing)}")
    return EXIT_OK


def _cmd_export_viz(args) -> int:
    model, _ = proto_head.load_checkpoint(args.checkpoint)
    dataset = read_pemb(_resolve_data_path(args.data), num_classes=model.num_classes)
    explain_mod.export_viz(model, dataset, sample_size=args.sample, path=args.out)
    print(args.out)
    return EXIT_OK


def _cmd_inspect(args) -> int:
    model, config_echo = proto_head.load_checkpoint(args.checkpoint)
    print(f"head: {model.kind}")
    print(f"dim: {model.dim}  classes: {model.num_classes}  "
          f"prototypes: {model.num_prototypes}")
    if model.kind == "ga":
        print(f"heads: {model.num_heads}  attention_dim: {model.attention_dim}  "
              f"neighbors: {model.neighbor_count}  features: {model.feature_count}")
    print(f"seed: {model.seed}")
    for name, value in model.trainable_params().items():
        print(f"param {name}: shape {list(value.shape)}")
    print("prototype exemplars:")
    for k, exemplar in enumerate(model.prototypes.exemplar_ids):
        print(f"  prototype {k}: exemplar {exemplar}")
    if model.sentiment_prototypes is not None:
        print("sentiment prototypes:")
        for k in range(model.sentiment_prototypes.count):
            tag = model.sentiment_prototypes.polarity[k]
            exemplar = model.sentiment_prototypes.exemplar_ids[k]
            print(f"  sentiment {k} ({tag}): exemplar {exemplar}")
    if config_echo:
        print(f"config echo: {json.dumps(config_echo)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protohead",
        description="Interpretable prototype classification heads over embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic embedding dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train", help="train a prototype head")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", required=True, help=".pemb file or directory holding one")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("project", help="project prototypes onto training exemplars")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("explain", help="explain one record's prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--head", choices=("ga", "cosine"), default="ga")
    p.add_argument("--two-view", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-viz", help="export 2-D PCA of data and prototypes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_viz)

    p = sub.add_parser("inspect", help="print checkpoint shapes and exemplar table")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (ProtoheadError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
