"""Command-line surface: train, eval, inspect, synth, ingest-check.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric
failure (non-finite training loss).
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import figures
from .backbone import BackboneConfig, FEATURE_MAGIC, load_features
from .config import RunConfig, parse_run_config
from .data import (
    DatasetManifest,
    LoadedDataset,
    decode_ppm,
    image_to_input,
    ingest_cub,
    load_feature_dataset,
    load_image_dataset,
    load_manifest,
    save_manifest,
    synth_dataset,
)
from .epa import epa_branch_responses
from .errors import ConfigError, DataError, NanLossError, SaspError
from .model import SaspConfig, SaspModel, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad
from .train import derived_rng, evaluate, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems via exit code 1."""

    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# config resolution

def _merge(name: str, configured, derived):
    if configured is not None and configured != derived:
        raise ConfigError(
            f"config sets {name}={configured} but the data provides {derived}"
        )
    return derived


def _resolve_train_setup(cfg: RunConfig) -> tuple[LoadedDataset, SaspConfig, BackboneConfig | None]:
    """Load the data source and fill in data-derived architecture fields."""
    if cfg.features is not None:
        manifest = load_manifest(cfg.manifest)
        data = load_feature_dataset(cfg.features, manifest)
        channels = _merge("channels", cfg.channels, data.train_x.shape[1])
        feature_h = _merge("feature_h", cfg.feature_h, data.train_x.shape[2])
        feature_w = _merge("feature_w", cfg.feature_w, data.train_x.shape[3])
        classes = _merge("classes", cfg.classes, data.num_classes)
        backbone_cfg = None
    else:
        manifest = ingest_cub(cfg.dataset_root)
        classes = _merge("classes", cfg.classes, manifest.num_classes)
        channels = cfg.channels if cfg.channels is not None else SaspConfig.channels
        feature_h = cfg.feature_h if cfg.feature_h is not None else SaspConfig.feature_h
        feature_w = cfg.feature_w if cfg.feature_w is not None else SaspConfig.feature_w
        backbone_cfg = BackboneConfig(
            mode="tiny-cnn", out_channels=channels, out_h=feature_h, out_w=feature_w,
            input_h=cfg.input_h, input_w=cfg.input_w, stage_widths=cfg.stage_widths,
        )
        data = load_image_dataset(cfg.dataset_root, manifest, cfg.input_h, cfg.input_w,
                                  cfg.norm_mean, cfg.norm_std)
    sasp_cfg = SaspConfig(
        channels=channels, feature_h=feature_h, feature_w=feature_w, classes=classes,
        epa_reduction=cfg.epa_reduction, csw_reduction=cfg.csw_reduction,
        head_hidden1=cfg.head_hidden1, head_hidden2=cfg.head_hidden2, dropout=cfg.dropout,
    )
    return data, sasp_cfg, backbone_cfg


def _check_model_matches(model: SaspModel, data: LoadedDataset) -> None:
    if model.cfg.classes != data.num_classes:
        raise DataError(
            f"checkpoint has {model.cfg.classes} classes but the dataset has {data.num_classes}"
        )
    if data.kind == "features":
        expected = (model.cfg.channels, model.cfg.feature_h, model.cfg.feature_w)
        if tuple(data.train_x.shape[1:]) != expected and len(data.train_x):
            raise DataError(
                f"checkpoint expects features {expected} but the file holds "
                f"{tuple(data.train_x.shape[1:])}"
            )
        if model.backbone is not None:
            raise DataError("checkpoint expects image input, not precomputed features")
    elif model.backbone is None:
        raise DataError("checkpoint expects precomputed features, not images")


# ---------------------------------------------------------------------------
# subcommands

def _write_train_outputs(out_dir: Path, model: SaspModel, log) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "model.ckpt", model)
    log.to_csv(out_dir / "trainlog.csv")
    if log.steps:
        figures.save_loss_curve(log, out_dir / "loss_curve.png")


def _cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    if cfg.out_dir is None:
        raise ConfigError("train needs out_dir= in the config")
    data, sasp_cfg, backbone_cfg = _resolve_train_setup(cfg)
    model = SaspModel(sasp_cfg, backbone_cfg, rng=derived_rng(cfg.seed, 0))
    out_dir = Path(cfg.out_dir)
    try:
        log = train(model, data, cfg.train_config())
    except NanLossError as e:
        _write_train_outputs(out_dir, model, e.log)
        print(f"error: {e}; wrote the last finite state to {out_dir / 'model.ckpt'}",
              file=sys.stderr)
        return 3
    _write_train_outputs(out_dir, model, log)
    last = log.steps[-1]
    print(f"steps {len(log.steps)} final_loss {last.loss:.6f} "
          f"train_accuracy {last.train_acc:.6f}"
          + (f" eval_accuracy {last.eval_acc:.6f}" if last.eval_acc is not None else ""))
    print(f"outputs written to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = parse_run_config(args.config)
    model = load_checkpoint(args.checkpoint)
    if cfg.features is not None:
        data = load_feature_dataset(cfg.features, load_manifest(cfg.manifest))
    else:
        manifest = ingest_cub(cfg.dataset_root)
        if model.backbone is None:
            raise DataError("checkpoint expects precomputed features, not images")
        bc = model.backbone.cfg
        data = load_image_dataset(cfg.dataset_root, manifest, bc.input_h, bc.input_w,
                                  cfg.norm_mean, cfg.norm_std)
    _check_model_matches(model, data)
    if not len(data.test_x):
        raise DataError("dataset has no test split to evaluate")
    acc = evaluate(model, data.test_x, data.test_y, cfg.batch_size)
    print(f"eval_accuracy {acc:.6f} over {len(data.test_x)} samples")
    return 0


def _load_inspect_samples(model: SaspModel, source: Path,
                          sample_id: str | None) -> tuple[np.ndarray, list[str]]:
    """Return model-ready inputs (images or features) plus their sample ids."""
    with open(source, "rb") as f:
        head = f.read(len(FEATURE_MAGIC))
    if head == FEATURE_MAGIC:
        if model.backbone is not None:
            raise DataError("checkpoint expects image input, not a feature file")
        fs = load_features(source)
        expected = (model.cfg.channels, model.cfg.feature_h, model.cfg.feature_w)
        if (fs.channels, fs.height, fs.width) != expected:
            raise DataError(
                f"feature file holds {(fs.channels, fs.height, fs.width)} "
                f"but the checkpoint expects {expected}"
            )
        records = fs.records
        if sample_id is not None:
            records = [r for r in records if r.sample_id == sample_id]
            if not records:
                raise DataError(f"sample id {sample_id!r} not found in {source}")
        if not records:
            raise DataError(f"feature file {source} holds no records")
        return np.stack([r.features for r in records]), [r.sample_id for r in records]
    if model.backbone is None:
        raise DataError("checkpoint expects a feature file, not an image")
    bc = model.backbone.cfg
    img = decode_ppm(source)
    arr = image_to_input(img, bc.input_h, bc.input_w, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    return arr[None], [source.stem]


def _cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    inputs, ids = _load_inspect_samples(model, Path(args.data), args.sample_id)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    alpha_path = out_dir / "alpha.csv"
    with open(alpha_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "channel", "alpha"])
        for start in range(0, len(inputs), 64):
            gates = model.gates(Tensor(inputs[start:start + 64]))
            for row, ident in zip(gates, ids[start:start + 64]):
                for channel, value in enumerate(row):
                    writer.writerow([ident, channel, repr(float(value))])

    # branch responses for the first selected sample
    first = Tensor(inputs[:1])
    with no_grad():
        feat = model.features(first)
    responses = epa_branch_responses(feat, model.epa)
    branch_path = out_dir / "branch_responses.csv"
    with open(branch_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["branch", "channel", "y", "x", "value"])
        for name, tensor in responses.items():
            grid = tensor.data[0]
            for channel in range(grid.shape[0]):
                for y in range(grid.shape[1]):
                    for x in range(grid.shape[2]):
                        writer.writerow([name, channel, y, x, repr(float(grid[channel, y, x]))])

    first_gates = model.gates(first)[0]
    figures.save_gate_profile(first_gates, ids[0], out_dir / "alpha.png")
    figures.save_branch_grid({k: v.data[0] for k, v in responses.items()},
                             ids[0], out_dir / "branch_responses.png")
    print(f"wrote {alpha_path}, {branch_path} and figures for sample {ids[0]!r}")
    return 0


def _cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    features_path = out_dir / "features.sasp"
    manifest = synth_dataset(args.classes, args.per_class, args.channels,
                             args.height, args.width, args.seed, features_path)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, manifest)
    n_train = len(manifest.split_records("train"))
    n_test = len(manifest.split_records("test"))
    print(f"classes {manifest.num_classes} train {n_train} test {n_test}")
    print(f"wrote {features_path} and {manifest_path}")
    return 0


def _cmd_ingest_check(args) -> int:
    manifest = ingest_cub(args.root)
    n_train = len(manifest.split_records("train"))
    n_test = len(manifest.split_records("test"))
    print(f"classes {manifest.num_classes} train {n_train} test {n_test}")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="sasp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("config")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="report test accuracy of a checkpoint")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("inspect", help="export branch responses and channel gates")
    p.add_argument("checkpoint")
    p.add_argument("data", help="feature file or PPM image")
    p.add_argument("--sample-id", default=None)
    p.add_argument("--out", default=".")
    p.set_defaults(handler=_cmd_inspect)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=5)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--height", type=int, default=7)
    p.add_argument("--width", type=int, default=7)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("ingest-check", help="validate a CUB-style dataset directory")
    p.add_argument("root")
    p.set_defaults(handler=_cmd_ingest_check)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.handler(args)
    except (SaspError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
