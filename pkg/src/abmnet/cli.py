"""Command-line entry points: train, eval, align, dataset-info.

A run is described by a JSON config file with sections ``dataset``, ``split``,
``encoder``, ``head``, ``alignment``, ``train`` plus the top-level keys
``method``, ``aligner``, ``layer_mask`` and ``out_dir``. Every section is
optional; missing values fall back to the defaults below. Command-line flags
override config values, and ``train`` echoes the merged result to
``OUT_DIR/config.json`` so the exact run can be repeated from that file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .alignment import ALIGNERS, PixelSample, cost_matrix, match_probabilities
from .checkpoint import CheckpointError, load_checkpoint
from .encoder import ConfigError, Encoder, EncoderConfig, build_encoder, encode_fields
from .episodes import Dataset, DatasetError, augment_rotations, load_dataset, split_classes
from .heads import LossConfig, OpenSetHead
from .trainer import TrainConfig, evaluate, make_predictor, train


class UsageError(ValueError):
    """A config file or flag combination the CLI cannot act on (exit 2)."""


METHODS = ("abm", "abm+selfreg", "baseline")

_DATASET_DEFAULTS = {
    "format": "synthetic",
    "path": None,
    "labels_path": None,
    "synthetic": None,
    "augment_rotations": False,
}
_HEAD_DEFAULTS = {"self_weight": 1.0, "tau_init": 0.0, "scale_init": 10.0}
_ALIGNMENT_DEFAULTS = {"fraction_test": 0.10, "fraction_ref": 0.20, "aggregation": "mean"}
_TRAIN_DEFAULTS = {
    "way": 5,
    "shot": 1,
    "queries": 1,
    "open_set": False,
    "episodes_per_epoch": 1000,
    "epochs": 200,
    "batch_size": 32,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "lr_decay": 1e-6,
    "val_episodes": 500,
    "test_episodes": 1000,
    "seed": 0,
}
_SPLIT_KEYS = {"seed", "fractions", "train", "val", "test"}
_ENCODER_KEYS = {
    "height",
    "width",
    "channels",
    "block_channels",
    "pool_after",
    "shared_weights",
    "active_blocks",
    "normalize_per_block",
}
_TOP_KEYS = {
    "dataset",
    "split",
    "encoder",
    "head",
    "alignment",
    "train",
    "method",
    "aligner",
    "layer_mask",
    "out_dir",
}


def _reject_unknown(group: dict, allowed: set, prefix: str) -> None:
    unknown = sorted(set(group) - allowed)
    if unknown:
        paths = ", ".join(repr(prefix + key) for key in unknown)
        raise UsageError(f"unknown config key(s): {paths}")


def _merge_section(group, defaults: dict, name: str) -> dict:
    if group is None:
        return dict(defaults)
    if not isinstance(group, dict):
        raise UsageError(f"config section {name!r} must be a JSON object")
    _reject_unknown(group, set(defaults), name + ".")
    merged = dict(defaults)
    merged.update(group)
    return merged


def _split_section(group) -> dict | None:
    if group is None:
        return None
    if not isinstance(group, dict):
        raise UsageError("config section 'split' must be a JSON object")
    _reject_unknown(group, _SPLIT_KEYS, "split.")
    merged = {"seed": 0, "fractions": None, "train": None, "val": None, "test": None}
    merged.update(group)
    return merged


def _encoder_section(group) -> dict:
    if group is None:
        return {}
    if not isinstance(group, dict):
        raise UsageError("config section 'encoder' must be a JSON object")
    _reject_unknown(group, _ENCODER_KEYS, "encoder.")
    return dict(group)


def _check_mask(mask) -> list | None:
    if mask is None:
        return None
    if not isinstance(mask, (list, tuple)) or not mask or not all(
        isinstance(b, int) and not isinstance(b, bool) for b in mask
    ):
        raise UsageError(f"layer_mask must be a non-empty list of block ids, got {mask!r}")
    return list(mask)


def load_run_config(path: str | None) -> dict:
    """Read a run config file (or start from defaults) and validate its keys."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise UsageError(f"config root in {path} must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "")
    cfg = {
        "dataset": _merge_section(raw.get("dataset"), _DATASET_DEFAULTS, "dataset"),
        "split": _split_section(raw.get("split")),
        "encoder": _encoder_section(raw.get("encoder")),
        "head": _merge_section(raw.get("head"), _HEAD_DEFAULTS, "head"),
        "alignment": _merge_section(raw.get("alignment"), _ALIGNMENT_DEFAULTS, "alignment"),
        "train": _merge_section(raw.get("train"), _TRAIN_DEFAULTS, "train"),
        "method": raw.get("method", "abm+selfreg"),
        "aligner": raw.get("aligner", "greedy"),
        "layer_mask": _check_mask(raw.get("layer_mask")),
        "out_dir": raw.get("out_dir"),
    }
    if cfg["method"] not in METHODS:
        raise UsageError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    if cfg["aligner"] not in ALIGNERS:
        raise UsageError(f"aligner must be one of {sorted(ALIGNERS)}, got {cfg['aligner']!r}")
    return cfg


def _apply_overrides(cfg: dict, pairs: list) -> None:
    """Write flag values over config values; None means 'flag not given'."""
    for path, value in pairs:
        if value is None:
            continue
        *parents, leaf = path.split(".")
        group = cfg
        for part in parents:
            group = group[part]
        group[leaf] = value


def build_dataset(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    dataset = load_dataset(
        d["format"], path=d["path"], labels_path=d["labels_path"], synthetic=d["synthetic"]
    )
    if d["augment_rotations"]:
        dataset = augment_rotations(dataset)
    return dataset


def build_splits(cfg: dict) -> tuple[Dataset, Dataset, Dataset]:
    dataset = build_dataset(cfg)
    split = cfg["split"]
    if split is None:
        return dataset, dataset, dataset
    rng = np.random.default_rng(split["seed"])
    fractions = split["fractions"]
    if fractions is not None:
        if len(fractions) != 3:
            raise UsageError(f"split.fractions needs three values, got {fractions!r}")
        return split_classes(dataset, rng, fractions=tuple(fractions))
    return split_classes(
        dataset, rng, train=split["train"], val=split["val"], test=split["test"]
    )


def build_loss_config(cfg: dict) -> LossConfig:
    align = cfg["alignment"]
    method = cfg["method"]
    try:
        return LossConfig(
            fraction_test=align["fraction_test"],
            fraction_ref=align["fraction_ref"],
            aggregation=align["aggregation"],
            method=cfg["aligner"],
            self_weight=float(cfg["head"]["self_weight"]) if method == "abm+selfreg" else 0.0,
            head_kind="embedding" if method == "baseline" else "alignment",
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"alignment: {exc}") from exc


def build_model(cfg: dict, dataset: Dataset, dtype=np.float32) -> tuple[Encoder, OpenSetHead]:
    merged = dict(cfg["encoder"])
    merged.setdefault("height", dataset.height)
    merged.setdefault("width", dataset.width)
    merged.setdefault("channels", dataset.channels)
    if cfg["layer_mask"] is not None:
        merged["active_blocks"] = cfg["layer_mask"]
    try:
        enc_cfg = EncoderConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"encoder: {exc}") from exc
    if (enc_cfg.height, enc_cfg.width, enc_cfg.channels) != (
        dataset.height,
        dataset.width,
        dataset.channels,
    ):
        raise UsageError(
            f"encoder takes {enc_cfg.height}x{enc_cfg.width}x{enc_cfg.channels} images but "
            f"dataset {dataset.name!r} has {dataset.height}x{dataset.width}x{dataset.channels}"
        )
    encoder = build_encoder(enc_cfg, np.random.default_rng([int(cfg["train"]["seed"]), 1]), dtype)
    try:
        head = OpenSetHead.create(cfg["head"]["tau_init"], cfg["head"]["scale_init"], dtype)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"head: {exc}") from exc
    return encoder, head


def _build_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"], loss=build_loss_config(cfg))
    except UsageError:
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train: {exc}") from exc


def _masked_encoder(encoder: Encoder, mask: list | None) -> Encoder:
    if mask is None:
        return encoder
    try:
        config = encoder.config.with_mask(tuple(mask))
    except ConfigError as exc:
        raise UsageError(f"layer mask: {exc}") from exc
    return replace(encoder, config=config)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, _dataset_overrides(args) + [
        ("train.seed", args.seed),
        ("train.epochs", args.epochs),
        ("train.episodes_per_epoch", args.episodes_per_epoch),
        ("train.batch_size", args.batch_size),
        ("train.lr", args.lr),
        ("train.way", args.way),
        ("train.shot", args.shot),
        ("train.queries", args.queries),
        ("train.open_set", args.open_set),
        ("train.val_episodes", args.val_episodes),
        ("head.self_weight", args.self_weight),
        ("method", args.method),
        ("aligner", args.aligner),
        ("layer_mask", _parse_mask_flag(args.layer_mask)),
        ("out_dir", args.out),
    ])
    out_dir = cfg["out_dir"]
    if not out_dir:
        raise UsageError("training needs an output directory (--out or config out_dir)")

    train_set, val_set, _ = build_splits(cfg)
    encoder, head = build_model(cfg, train_set)
    train_cfg = _build_train_config(cfg)

    os.makedirs(out_dir, exist_ok=True)
    config_path = os.path.join(out_dir, "config.json")
    with open(config_path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    open(log_path, "w").close()  # the trainer appends; start each run clean

    def show(record):
        print(json.dumps(record, sort_keys=True), flush=True)

    result = train(
        train_set, val_set, train_cfg,
        encoder=encoder, head=head, out_dir=out_dir,
        log_fn=show if args.progress else None,
    )
    print(json.dumps({
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "checkpoint": result.best_path,
        "config": config_path,
        "log": log_path,
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, _dataset_overrides(args) + [
        ("train.way", args.way),
        ("train.shot", args.shot),
        ("train.queries", args.queries),
        ("train.open_set", args.open_set),
        ("train.test_episodes", args.episodes),
        ("train.seed", args.seed),
        ("alignment.fraction_test", args.fraction_test),
        ("alignment.fraction_ref", args.fraction_ref),
        ("method", args.method),
        ("aligner", args.aligner),
        ("layer_mask", _parse_mask_flag(args.layer_mask)),
    ])
    if args.threads is not None and args.threads < 1:
        raise UsageError(f"--threads must be positive, got {args.threads}")
    snapshot = load_checkpoint(args.checkpoint)
    encoder = _masked_encoder(snapshot.encoder, cfg["layer_mask"])

    parts = dict(zip(("train", "val", "test"), build_splits(cfg)))
    dataset = parts[args.split]
    tc = cfg["train"]
    result = evaluate(
        dataset,
        make_predictor(encoder, snapshot.head, build_loss_config(cfg)),
        way=tc["way"],
        shot=tc["shot"],
        queries=tc["queries"],
        open_set=tc["open_set"],
        episodes=tc["test_episodes"],
        rng=np.random.default_rng(tc["seed"]),
        threads=args.threads,
    )
    print(json.dumps({
        "accuracy": result.accuracy,
        "f1": result.f1,
        "precision": result.precision,
        "recall": result.recall,
        "ci95": result.ci95,
    }, sort_keys=True))
    return 0


def _load_image_for(path: str, config: EncoderConfig) -> np.ndarray:
    """Read one image file as (C, H, W) floats in [0, 1], checked against the model."""
    from PIL import Image, UnidentifiedImageError

    if config.channels not in (1, 3):
        raise UsageError(f"cannot load images for a {config.channels}-channel model")
    try:
        with Image.open(path) as im:
            im = im.convert("L" if config.channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[:2] != (config.height, config.width):
        raise UsageError(
            f"image {path} is {arr.shape[1]}x{arr.shape[0]} (WxH) but the model "
            f"takes {config.width}x{config.height}"
        )
    return arr.transpose(2, 0, 1)


def _write_pgm(path: str, values: np.ndarray, height: int, width: int) -> None:
    grid = np.asarray(values, dtype=np.float64).reshape(height, width)
    peak = grid.max()
    if peak <= 0:
        scaled = np.zeros((height, width), dtype=np.uint8)
    else:
        scaled = np.rint(grid / peak * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (width, height))
        fh.write(scaled.tobytes())


def cmd_align(args) -> int:
    snapshot = load_checkpoint(args.checkpoint)
    encoder = _masked_encoder(snapshot.encoder, _parse_mask_flag(args.layer_mask))
    config = encoder.config
    image_t = _load_image_for(args.test, config)
    image_r = _load_image_for(args.ref, config)

    pixels = config.height * config.width
    if not 1 <= args.points <= pixels:
        raise UsageError(f"--points must be in 1..{pixels}, got {args.points}")
    if args.aligner not in ALIGNERS:
        raise UsageError(f"aligner must be one of {sorted(ALIGNERS)}, got {args.aligner!r}")

    rng = np.random.default_rng(args.seed)
    test_idx = np.sort(rng.choice(pixels, size=args.points, replace=False)).astype(np.intp)
    sample_t = PixelSample(config.height, config.width, test_idx, args.points / pixels)
    sample_r = PixelSample(
        config.height, config.width, np.arange(pixels, dtype=np.intp), 1.0
    )

    mode = "eval" if encoder.eval_ready() else "train"
    batch = np.stack([image_t, image_r])
    if config.shared_weights:
        field_t, field_r = encode_fields(batch, encoder, mode, role="test")
    else:
        field_t = encode_fields(batch, encoder, mode, role="test")[0]
        field_r = encode_fields(batch, encoder, mode, role="ref")[1]

    matrix = cost_matrix(field_t, field_r, sample_t, sample_r)
    result = ALIGNERS[args.aligner](matrix, "mean")
    costs = matrix.costs.data

    prefix_dir = os.path.dirname(args.out)
    if prefix_dir:
        os.makedirs(prefix_dir, exist_ok=True)
    matches = []
    for i, idx in enumerate(test_idx):
        probs = match_probabilities(costs[i])
        pgm_path = f"{args.out}.point{i:03d}.pgm"
        _write_pgm(pgm_path, probs, config.height, config.width)
        best = int(np.argmax(probs))
        assigned = int(result.columns[i])
        matches.append({
            "test_index": int(idx),
            "test_pixel": [int(idx) // config.width, int(idx) % config.width],
            "argmax_ref_index": best,
            "argmax_ref_pixel": [best // config.width, best % config.width],
            "assigned_ref_index": assigned,
            "assigned_cost": float(result.row_costs[i]),
            "map": os.path.basename(pgm_path),
            "probabilities": probs.tolist(),
        })
    sidecar = {
        "test_image": args.test,
        "ref_image": args.ref,
        "height": config.height,
        "width": config.width,
        "points": args.points,
        "aligner": args.aligner,
        "zeta": result.zeta,
        "matches": matches,
    }
    sidecar_path = f"{args.out}.json"
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({
        "maps": args.points, "sidecar": sidecar_path, "zeta": result.zeta,
    }, sort_keys=True))
    return 0


def cmd_dataset_info(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, _dataset_overrides(args))
    dataset = build_dataset(cfg)
    print(json.dumps({
        "name": dataset.name,
        "classes": dataset.num_classes,
        "height": dataset.height,
        "width": dataset.width,
        "channels": dataset.channels,
        "images": int(sum(len(rec.images) for rec in dataset.classes)),
        "images_per_class": {rec.name: len(rec.images) for rec in dataset.classes},
    }, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parsing


def _parse_mask_flag(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        mask = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"layer mask must be comma-separated block ids, got {text!r}") from None
    if not mask:
        raise UsageError(f"layer mask must name at least one block, got {text!r}")
    return mask


def _parse_json_flag(flag: str, text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag} must be a JSON object: {exc}") from None
    if not isinstance(value, dict):
        raise UsageError(f"{flag} must be a JSON object, got {text!r}")
    return value


def _add_dataset_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset-format", choices=("synthetic", "idx", "image-dirs"),
                        default=None, help="dataset loader (overrides config)")
    parser.add_argument("--dataset-path", default=None,
                        help="images file (idx) or class-directory root (image-dirs)")
    parser.add_argument("--labels-path", default=None, help="labels file for the idx format")
    parser.add_argument("--synthetic", default=None, metavar="JSON",
                        help="synthetic generator options as a JSON object")
    parser.add_argument("--augment-rotations", action="store_true", default=None,
                        help="expand every class into four 90-degree rotations")


def _dataset_overrides(args) -> list:
    pairs = [
        ("dataset.format", args.dataset_format),
        ("dataset.path", args.dataset_path),
        ("dataset.labels_path", args.labels_path),
        ("dataset.augment_rotations", args.augment_rotations),
    ]
    if args.synthetic is not None:
        pairs.append(("dataset.synthetic", _parse_json_flag("--synthetic", args.synthetic)))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abmnet",
        description="Few-shot image matching by pixel alignment: train, evaluate, "
        "and inspect alignment models.",
        epilog="Flags override the corresponding config-file values; 'train' writes "
        "the merged config to OUT_DIR/config.json so a run can be repeated exactly.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and save the best checkpoint")
    p_train.add_argument("--config", default=None, help="run config JSON file")
    p_train.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--episodes-per-epoch", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--way", type=int, default=None)
    p_train.add_argument("--shot", type=int, default=None)
    p_train.add_argument("--queries", type=int, default=None)
    p_train.add_argument("--open-set", action="store_true", default=None,
                         help="train with one held-out class per episode")
    p_train.add_argument("--val-episodes", type=int, default=None)
    p_train.add_argument("--self-weight", type=float, default=None,
                         help="self-matching term weight (abm+selfreg only)")
    p_train.add_argument("--method", choices=METHODS, default=None)
    p_train.add_argument("--aligner", choices=sorted(ALIGNERS), default=None)
    p_train.add_argument("--layer-mask", default=None, metavar="IDS",
                         help="comma-separated encoder block ids to keep, e.g. 3,4")
    p_train.add_argument("--progress", action="store_true",
                         help="print one JSON line per epoch")
    _add_dataset_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on sampled episodes")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", default=None, help="run config JSON file")
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test",
                        help="which class split to evaluate (default test)")
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument("--way", type=int, default=None)
    p_eval.add_argument("--shot", type=int, default=None)
    p_eval.add_argument("--queries", type=int, default=None)
    p_eval.add_argument("--open-set", action="store_true", default=None,
                        help="hold one class out per episode; adds rejection to the scores")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--method", choices=METHODS, default=None)
    p_eval.add_argument("--aligner", choices=sorted(ALIGNERS), default=None)
    p_eval.add_argument("--fraction-test", type=float, default=None)
    p_eval.add_argument("--fraction-ref", type=float, default=None)
    p_eval.add_argument("--layer-mask", default=None, metavar="IDS")
    p_eval.add_argument("--threads", type=int, default=None,
                        help="evaluation worker threads (default: ABM_THREADS or 1)")
    _add_dataset_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_align = sub.add_parser("align", help="visualize pixel matches between two images")
    p_align.add_argument("--checkpoint", required=True)
    p_align.add_argument("--test", required=True, help="image whose pixels are matched")
    p_align.add_argument("--ref", required=True, help="image matched against")
    p_align.add_argument("--points", type=int, default=5,
                         help="how many test pixels to sample (default 5)")
    p_align.add_argument("--out", required=True,
                         help="output prefix for the PGM maps and JSON sidecar")
    p_align.add_argument("--aligner", choices=sorted(ALIGNERS), default="greedy")
    p_align.add_argument("--layer-mask", default=None, metavar="IDS",
                         help="comma-separated encoder block ids to keep")
    p_align.add_argument("--seed", type=int, default=0)
    p_align.set_defaults(func=cmd_align)

    p_info = sub.add_parser("dataset-info", help="print a dataset summary as JSON")
    p_info.add_argument("--config", default=None, help="run config JSON file")
    _add_dataset_flags(p_info)
    p_info.set_defaults(func=cmd_dataset_info)

    return parser


def main(argv=None) -> int:
    """Parse arguments and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError,
            FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure, not misuse
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
