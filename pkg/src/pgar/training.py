"""Deep-supervised training loop with the reference optimizer schedule.

Every logit map (initial plus one per stage) is upsampled to ground-truth
resolution and penalized with mean binary cross-entropy in logit form;
the total is their weighted sum (unit weights by default). Shuffling and
augmentation draw from generators keyed purely by (seed, epoch), so runs
are bitwise reproducible and resumable at epoch boundaries.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import RunConfig, TrainConfig
from .data import Sample, augment, augmentation_rng, shuffled_order
from .errors import InputError, TrainingError
from .network import PgarNet, PredictionSet, save_checkpoint


@dataclass
class LossReport:
    """Losses of one step: per-output values, their weighted total, context."""

    per_output: dict[str, float]
    total: Tensor
    step: int = -1
    epoch: int = -1
    lr: float = float("nan")

    @property
    def total_value(self) -> float:
        return float(self.total.detach())


class TensorBatch(NamedTuple):
    rgb: Tensor
    depth: Tensor
    gt: Tensor
    ids: tuple[str, ...]


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for an epoch: base rate, scaled down from the drop epoch."""
    if epoch >= config.lr_drop_epoch:
        return config.lr * config.lr_drop_factor
    return config.lr


def deep_supervision_loss(
    preds: PredictionSet, gt: Tensor, weights: Optional[Sequence[float]] = None
) -> LossReport:
    """Weighted sum of per-output mean BCE (logit form) at gt resolution.

    Args:
        preds: all logit maps of a forward pass.
        gt: (batch, 1, h, w) strictly binary ground truth.
        weights: one weight per output in refinement order (initial,
            deepest stage, ..., stage 1); defaults to all ones.

    Returns:
        A LossReport whose total is differentiable.

    Raises:
        InputError: when gt is not binary or weights are missized.
    """
    if not bool(((gt == 0) | (gt == 1)).all()):
        raise InputError("ground truth must be strictly binary")
    outputs = preds.in_refinement_order()
    if weights is None or len(weights) == 0:
        weights = [1.0] * len(outputs)
    if len(weights) != len(outputs):
        raise InputError(
            f"expected {len(outputs)} loss weights (one per output), got {len(weights)}"
        )
    target_size = gt.shape[-2:]
    per_output: dict[str, float] = {}
    total: Optional[Tensor] = None
    for (name, logits), weight in zip(outputs, weights):
        if logits.shape[-2:] != target_size:
            logits = F.interpolate(
                logits, size=target_size, mode="bilinear", align_corners=False
            )
        loss = F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))
        per_output[name] = float(loss.detach())
        term = weight * loss
        total = term if total is None else total + term
    return LossReport(per_output=per_output, total=total)


def collate(samples: Sequence[Sample], dtype: torch.dtype = torch.float32) -> TensorBatch:
    """Stack prepared samples into batch tensors."""
    rgb = torch.from_numpy(np.stack([s.rgb for s in samples])).to(dtype)
    depth = torch.from_numpy(np.stack([s.depth for s in samples])).to(dtype)
    gt = torch.from_numpy(np.stack([s.gt for s in samples])).to(dtype)
    return TensorBatch(rgb, depth, gt, tuple(s.id for s in samples))


def train_step(
    model: PgarNet,
    batch: TensorBatch,
    optimizer: torch.optim.Optimizer,
    weights: Optional[Sequence[float]] = None,
) -> LossReport:
    """One forward/backward/update cycle.

    Raises:
        TrainingError: when any per-output loss is non-finite, naming the
            offending output head; no update is applied in that case.
    """
    depth = batch.depth if model.config.variant != "rgb_only" else None
    preds = model(batch.rgb, depth)
    report = deep_supervision_loss(preds, batch.gt, weights)
    bad = [name for name, value in report.per_output.items() if not math.isfinite(value)]
    if bad:
        raise TrainingError(
            f"non-finite loss at output head(s): {', '.join(bad)} (ids {batch.ids})"
        )
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    optimizer.step()
    return report


@dataclass
class TrainResult:
    reports: list[LossReport] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def run_training(
    model: PgarNet,
    samples: Sequence[Sample],
    config: RunConfig,
    out_dir: Optional[str] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    start_epoch: int = 0,
    on_report: Optional[Callable[[LossReport], None]] = None,
) -> TrainResult:
    """Train over in-memory samples for config.train.epochs epochs.

    Batch order is a pure function of (manifest order, seed, epoch);
    augmentation, when enabled, draws from a per-epoch stream in batch
    order. The last short batch is kept. Checkpoints (including optimizer
    state) are written to out_dir every checkpoint_every epochs and at the
    end, named by completed-epoch count, so training can resume from any
    of them with bitwise-identical continuation.

    Args:
        model: the network to train, already initialized or restored.
        samples: prepared samples; order defines the shuffling domain.
        config: full run configuration.
        out_dir: checkpoint/log directory; nothing is written when None.
        optimizer: restored optimizer when resuming; a fresh one otherwise.
        start_epoch: completed epochs so far (from a checkpoint).
        on_report: callback invoked after every step.

    Returns:
        TrainResult with every step's LossReport and checkpoint paths.
    """
    if not samples:
        raise InputError("cannot train on an empty sample list")
    cfg = config.train
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if cfg.freeze_backbone:
        for param in model.backbone.parameters():
            param.requires_grad_(False)
    weights = cfg.loss_weights or None
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
    result = TrainResult()
    model.train()
    batch_count = math.ceil(len(samples) / cfg.batch_size)
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = shuffled_order(len(samples), cfg.seed, epoch)
        aug_rng = augmentation_rng(cfg.seed, epoch)
        for batch_index in range(batch_count):
            picked = order[batch_index * cfg.batch_size : (batch_index + 1) * cfg.batch_size]
            chosen = [samples[i] for i in picked]
            if cfg.augment:
                chosen = [augment(s, aug_rng) for s in chosen]
            report = train_step(model, collate(chosen), optimizer, weights)
            report.step = epoch * batch_count + batch_index
            report.epoch = epoch
            report.lr = lr
            result.reports.append(report)
            if log_path is not None:
                _append_log(log_path, report)
            if on_report is not None:
                on_report(report)
        completed = epoch + 1
        if out_dir is not None and (
            completed % cfg.checkpoint_every == 0 or completed == cfg.epochs
        ):
            path = os.path.join(out_dir, f"epoch_{completed:04d}.pt")
            save_checkpoint(path, model, config, completed, optimizer)
            result.checkpoints.append(path)
    return result


def _append_log(path: str, report: LossReport) -> None:
    record = {
        "step": report.step,
        "epoch": report.epoch,
        "lr": report.lr,
        "losses": report.per_output,
        "total": report.total_value,
    }
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
