"""Command-line interface: train, eval, infer, ablate, inspect.

Exit codes: 0 on success, 2 for dataset problems (missing directories,
unmatched or undecodable files), 1 for any other validated failure
(configuration, checkpoint, schedule, topology).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import RunConfig, load_config
from .data import (
    DatasetManifest,
    export_manifest,
    load_dataset,
    load_gt_mask,
    prepare_sample,
)
from .errors import ConfigError, DataError, InputError, PgarError
from .metrics import EvalResult, aggregate, format_report_table, result_to_dict
from .network import (
    PgarNet,
    count_parameters,
    final_saliency,
    init_model,
    load_checkpoint,
    model_from_checkpoint,
)
from .training import run_training


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgar",
        description="Progressively guided alternate refinement for RGB-D saliency",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a config")
    train.add_argument("--config", help="TOML run configuration")
    train.add_argument("--data", help="dataset root (overrides config/env)")
    train.add_argument("--out", default="run", help="output directory")
    train.add_argument("--resume", help="checkpoint to resume from")
    train.add_argument("--epochs", type=int, help="override train.epochs")

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--config", help="optional config to cross-check")
    evaluate.add_argument("--data", help="dataset root (overrides config/env)")
    evaluate.add_argument("--out", default=".", help="report directory")
    evaluate.add_argument("--save-maps", dest="save_maps", help="directory for saliency maps")
    evaluate.add_argument("--emeasure-mode", choices=("adaptive", "max"))
    evaluate.add_argument("--dataset-name", default="dataset")

    infer = sub.add_parser("infer", help="run one RGB(-D) pair through a checkpoint")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--rgb", required=True)
    infer.add_argument("--depth")
    infer.add_argument("--out", required=True, help="output saliency map path")

    ablate = sub.add_parser("ablate", help="compare design variants")
    ablate.add_argument(
        "--axis",
        required=True,
        choices=("guidance_style", "msr_iterations", "msr_mode", "variant", "depth_taps"),
    )
    ablate.add_argument("--values", help="comma list or a..b range; default: full sweep")
    ablate.add_argument("--config", help="base TOML run configuration")
    ablate.add_argument("--data", help="dataset root for desk-scale train+eval rows")
    ablate.add_argument("--epochs", type=int, default=1, help="epochs per variant run")
    ablate.add_argument("--out", help="optional file for the comparison table")

    inspect = sub.add_parser("inspect", help="print the parameter-count report")
    group = inspect.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--checkpoint")
    inspect.add_argument(
        "--depth-backbone",
        choices=("conv4", "full", "vgg16"),
        help="override the depth stream ('full' reuses the RGB extractor topology)",
    )
    return parser


def _run_config(path: Optional[str]) -> RunConfig:
    if path:
        return load_config(path)
    config = RunConfig()
    config.validate()
    return config


def _resolve_data_root(config: RunConfig, cli_root: Optional[str]) -> str:
    root = cli_root or config.data.resolved_root()
    if not root:
        raise DataError(
            "no dataset root: pass --data, set PGAR_DATA_ROOT, or set data.root"
        )
    return root


def _prepare_all(manifest: DatasetManifest, config: RunConfig):
    return [
        prepare_sample(entry, config.model.input_size, config.data.depth_norm)
        for entry in manifest.entries
    ]


def _clamp_lr_drop(config: RunConfig) -> None:
    # An epochs override can undershoot the configured drop epoch; treat
    # that as "never drop" rather than rejecting the run.
    if config.train.lr_drop_epoch >= config.train.epochs:
        config.train.lr_drop_epoch = 0
        config.train.lr_drop_factor = 1.0


def _cmd_train(args) -> int:
    config = _run_config(args.config)
    if args.epochs is not None:
        config.train.epochs = args.epochs
        _clamp_lr_drop(config)
        config.validate()
    root = _resolve_data_root(config, args.data)
    manifest = load_dataset(root, split="train")
    samples = _prepare_all(manifest, config)
    start_epoch = 0
    optimizer = None
    if args.resume:
        payload = load_checkpoint(args.resume)
        model, config, start_epoch = model_from_checkpoint(payload)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.train.lr)
        if payload.get("optimizer_state") is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
    else:
        model = init_model(config)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    export_manifest(manifest, os.path.join(args.out, "manifest.tsv"))
    result = run_training(
        model,
        samples,
        config,
        out_dir=args.out,
        optimizer=optimizer,
        start_epoch=start_epoch,
    )
    last = result.reports[-1] if result.reports else None
    if last is not None:
        print(f"trained {len(result.reports)} steps; final total loss {last.total_value:.6f}")
    for path in result.checkpoints:
        print(f"checkpoint: {path}")
    return 0


def _saliency_for_entry(model: PgarNet, sample, native_size: tuple[int, int]) -> np.ndarray:
    rgb = torch.from_numpy(sample.rgb[None])
    depth = (
        torch.from_numpy(sample.depth[None])
        if model.config.variant != "rgb_only"
        else None
    )
    with torch.no_grad():
        preds = model(rgb, depth)
        saliency = final_saliency(preds)
        if saliency.shape[-2:] != native_size:
            saliency = F.interpolate(
                saliency, size=native_size, mode="bilinear", align_corners=False
            )
    return saliency[0, 0].numpy()


def _check_config_match(ckpt_config: RunConfig, other: RunConfig) -> None:
    ours = dataclasses.asdict(ckpt_config.model)
    theirs = dataclasses.asdict(other.model)
    diverging = sorted(key for key in ours if ours[key] != theirs[key])
    if diverging:
        raise ConfigError(
            "checkpoint/config mismatch on model key(s): " + ", ".join(diverging)
        )


def _save_map(path: str, saliency: np.ndarray) -> None:
    # 8-bit grayscale, value = round(255 * sigmoid logit).
    data = np.clip(np.round(saliency * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def _cmd_eval(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    model, config, _ = model_from_checkpoint(payload)
    model.eval()
    if args.config:
        _check_config_match(config, load_config(args.config))
    if args.emeasure_mode:
        config.eval.emeasure_mode = args.emeasure_mode
    root = _resolve_data_root(config, args.data)
    manifest = load_dataset(root, split="eval")
    if args.save_maps:
        os.makedirs(args.save_maps, exist_ok=True)
    pairs = []
    for entry in manifest.entries:
        sample = prepare_sample(entry, config.model.input_size, config.data.depth_norm)
        gt = load_gt_mask(entry.gt_path)
        saliency = _saliency_for_entry(model, sample, gt.shape)
        pairs.append((np.clip(saliency, 0.0, 1.0).astype(np.float64), gt))
        if args.save_maps:
            _save_map(os.path.join(args.save_maps, entry.id + ".png"), pairs[-1][0])
    result = aggregate(pairs, emeasure_mode=config.eval.emeasure_mode)
    os.makedirs(args.out, exist_ok=True)
    report = {args.dataset_name: result_to_dict(result)}
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    table = format_report_table({args.dataset_name: result})
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def _load_rgb_depth(args, config: RunConfig):
    from .data import load_depth_array

    size = (config.model.input_size, config.model.input_size)
    try:
        rgb_img = Image.open(args.rgb)
        rgb_img.load()
    except OSError as exc:
        raise DataError(f"cannot decode image {args.rgb}: {exc}") from None
    native = (rgb_img.height, rgb_img.width)
    rgb = (
        np.asarray(rgb_img.convert("RGB").resize(size, Image.Resampling.BILINEAR), np.float32)
        .transpose(2, 0, 1)
        / 255.0
    )
    depth = None
    if config.model.variant != "rgb_only":
        if not args.depth:
            raise InputError("this checkpoint is RGB-D: --depth is required")
        depth = load_depth_array(args.depth, size, config.data.depth_norm)[None]
    return rgb, depth, native


def _cmd_infer(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    model, config, _ = model_from_checkpoint(payload)
    model.eval()
    rgb, depth, native = _load_rgb_depth(args, config)
    with torch.no_grad():
        preds = model(
            torch.from_numpy(rgb[None]),
            torch.from_numpy(depth[None]) if depth is not None else None,
        )
        saliency = final_saliency(preds)
        saliency = F.interpolate(saliency, size=native, mode="bilinear", align_corners=False)
    _save_map(args.out, saliency[0, 0].numpy())
    print(f"wrote {args.out}")
    return 0


_AXIS_DEFAULTS = {
    "guidance_style": "1..8",
    "msr_iterations": "1..7",
    "msr_mode": "recurrent,stacked",
    "variant": "full,rgb_only,concat_fusion",
    "depth_taps": "3,2,1,4",
}


def _parse_values(axis: str, spec: Optional[str]) -> list:
    text = spec or _AXIS_DEFAULTS[axis]
    values: list = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            low, high = part.split("..", 1)
            values.extend(range(int(low), int(high) + 1))
        elif axis in ("guidance_style", "msr_iterations", "depth_taps"):
            values.append(int(part))
        else:
            values.append(part)
    return values


def _variant_config(base: RunConfig, axis: str, value) -> RunConfig:
    from .config import config_from_dict

    tree = base.to_dict()
    if axis == "variant":
        tree["model"]["variant"] = value
        if value != "full":
            tree["model"]["depth_taps"] = 3
    else:
        tree["model"][axis] = value
    return config_from_dict(tree)


def _cmd_ablate(args) -> int:
    base = _run_config(args.config)
    values = _parse_values(args.axis, args.values)
    samples = None
    root = args.data or base.data.resolved_root()
    if root:
        manifest = load_dataset(root, split="ablate")
        samples = _prepare_all(manifest, base)
    header = (
        f"{args.axis:<16} {'params':>12} {'MB':>8} "
        f"{'E':>7} {'S':>7} {'F':>7} {'M':>7}"
    )
    print(header)
    lines = [header]
    for value in values:
        config = _variant_config(base, args.axis, value)
        config.train.epochs = args.epochs
        _clamp_lr_drop(config)
        config.validate()
        model = init_model(config)
        counts = count_parameters(model)
        row = f"{value!s:<16} {counts['total']:>12d} {counts['megabytes']:>8.2f} "
        if samples is not None:
            run_training(model, samples, config)
            model.eval()
            pairs = []
            for sample in samples:
                native = sample.gt.shape[-2:]
                saliency = _saliency_for_entry(model, sample, native)
                pairs.append(
                    (np.clip(saliency, 0.0, 1.0).astype(np.float64), sample.gt[0])
                )
            result = aggregate(pairs, emeasure_mode=base.eval.emeasure_mode)
            row += (
                f"{result.e_measure:>7.4f} {result.s_measure:>7.4f} "
                f"{result.max_f:>7.4f} {result.mae:>7.4f}"
            )
        else:
            row += f"{'-':>7} {'-':>7} {'-':>7} {'-':>7}"
        lines.append(row)
        print(row)
    table = "\n".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    return 0


def _cmd_inspect(args) -> int:
    if args.checkpoint:
        payload = load_checkpoint(args.checkpoint)
        model, config, _ = model_from_checkpoint(payload)
    else:
        config = _run_config(args.config)
        if args.depth_backbone:
            config.model.depth_backbone = (
                "vgg16" if args.depth_backbone == "full" else args.depth_backbone
            )
            config.validate()
        model = PgarNet(config.model)
    counts = count_parameters(model)
    print(f"{'group':<20} {'parameters':>12}")
    for name in sorted(counts["groups"]):
        print(f"{name:<20} {counts['groups'][name]:>12d}")
    print(f"{'total':<20} {counts['total']:>12d}")
    print(f"fp32 size: {counts['megabytes']:.2f} MB")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
    "inspect": _cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PgarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
