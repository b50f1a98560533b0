"""Full network assembly: stage plan, forward pass, parameter accounting.

Refinement runs from the deepest stage to the shallowest; the only value
crossing a stage boundary is the single-channel prediction map, bilinearly
upsampled whenever the next stage sits at a finer scale. Stage indices are
numbered shallow (1, full resolution) to deep, so execution order is
K..1 and the final output is stage 1's prediction.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig, RunConfig, config_from_dict
from .errors import CheckpointError, InputError, TopologyError
from .multiscale import MultiScaleResidual, StackedMultiScaleResidual
from .refine import RefineStage, build_schedule
from .streams import (
    DEPTH_CHANNELS,
    DEPTH_SCALES,
    POOLED_SCALE,
    STAGE_CHANNELS,
    TAP_SCALES,
    ChannelReducer,
    DepthStream,
    Vgg16Features,
    load_backbone_weights,
)

CHECKPOINT_VERSION = 1

# Stages whose incoming guidance arrives from a coarser scale in the
# canonical 8-stage plan and is therefore bilinearly upsampled.
UPSAMPLED_STAGES = frozenset({1, 2, 4, 6, 8})

# Depth-stream scales consumed per configured tap count, deepest first.
_DEPTH_TAP_SCALES = {
    1: (Fraction(1, 16),),
    2: (Fraction(1, 8), Fraction(1, 16)),
    3: (Fraction(1, 4), Fraction(1, 8), Fraction(1, 16)),
    4: (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16)),
}

_FUSED_SCALES = (Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))


@dataclass(frozen=True)
class StageSpec:
    """One refinement stage of the assembled plan."""

    index: int
    source: str  # "rgb" | "depth" | "fused"
    scale: Fraction
    channels: int
    upsample_guidance: bool


def build_stage_plan(config: ModelConfig) -> tuple[StageSpec, ...]:
    """Derive the ordered stage table for a model configuration.

    Stages are ordered shallow to deep; at a shared scale the RGB stage
    precedes the depth stage so refinement (which runs deep to shallow)
    consumes the depth feature first. The upsample flag on each stage
    records whether its guidance arrives from a coarser scale (the deepest
    stage always upsamples from the 1/32-scale initial prediction).
    """
    config.validate()
    rows: list[tuple[Fraction, str, int]] = [
        (scale, "rgb", channels) for scale, channels in zip(TAP_SCALES, STAGE_CHANNELS)
    ]
    if config.variant == "full":
        for scale in _DEPTH_TAP_SCALES[config.depth_taps]:
            rows.append((scale, "depth", DEPTH_CHANNELS))
    elif config.variant == "concat_fusion":
        rows = [
            (scale, "fused" if scale in _FUSED_SCALES else source, channels)
            for scale, source, channels in rows
        ]
    # Shallow to deep; RGB before depth at a shared scale.
    rows.sort(key=lambda row: (-row[0], row[1] != "rgb"))
    specs = []
    for i, (scale, source, channels) in enumerate(rows):
        next_scale = rows[i + 1][0] if i + 1 < len(rows) else POOLED_SCALE
        specs.append(
            StageSpec(
                index=i + 1,
                source=source,
                scale=scale,
                channels=channels,
                upsample_guidance=scale != next_scale,
            )
        )
    return tuple(specs)


def resolve_guidance_input(prediction: Tensor, feature: Tensor, stage_index: int) -> Tensor:
    """Match the incoming prediction to a stage's feature size.

    For stages 1, 2, 4, 6, 8 of the canonical plan the prediction arrives
    from a coarser scale and is bilinearly upsampled to the feature's
    spatial size; for stages 3, 5, 7 it passes through unchanged.

    Raises:
        TopologyError: if a passthrough stage receives a prediction whose
            spatial size disagrees with the feature's.
    """
    if stage_index in UPSAMPLED_STAGES:
        return F.interpolate(
            prediction, size=feature.shape[-2:], mode="bilinear", align_corners=False
        )
    if prediction.shape[-2:] != feature.shape[-2:]:
        raise TopologyError(
            f"stage {stage_index} expects guidance at its own scale, got "
            f"{tuple(prediction.shape[-2:])} vs feature {tuple(feature.shape[-2:])}"
        )
    return prediction


@dataclass
class PredictionSet:
    """All logit maps of one forward pass.

    Attributes:
        initial: 1-channel logits at 1/32 scale from the coarse predictor.
        refined: stage index -> 1-channel logits at that stage's scale;
            stage 1 is at full input resolution.
    """

    initial: Tensor
    refined: dict[int, Tensor]

    @property
    def final(self) -> Tensor:
        return self.refined[1]

    def in_refinement_order(self) -> list[tuple[str, Tensor]]:
        """(name, logits) pairs ordered initial, deepest stage, ..., stage 1."""
        pairs = [("initial", self.initial)]
        for index in sorted(self.refined, reverse=True):
            pairs.append((f"stage{index}", self.refined[index]))
        return pairs


class PgarNet(nn.Module):
    """Progressively guided alternate refinement network.

    Built from a ModelConfig; the constructor assembles the RGB extractor
    and reducers, the depth stream (per variant), the coarse initial
    predictor, and one RefineStage per plan row.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.plan = build_stage_plan(config)
        channel_scale = 1.0 if config.backbone == "vgg16" else 0.125
        self.backbone = Vgg16Features(channel_scale)
        self.reducers = nn.ModuleList(
            ChannelReducer(raw, target)
            for raw, target in zip(self.backbone.tap_channels, STAGE_CHANNELS)
        )
        if config.variant != "rgb_only":
            if config.depth_backbone == "conv4":
                self.depth_stream = DepthStream()
            else:
                self.depth_backbone = Vgg16Features(channel_scale)
                # Taps 3..5 (scales 1/4, 1/8, 1/16) stand in for the light
                # stream's side outputs, each projected to the depth width.
                self.depth_reducers = nn.ModuleList(
                    ChannelReducer(raw, DEPTH_CHANNELS)
                    for raw in self.backbone.tap_channels[2:]
                )
        if config.variant == "concat_fusion":
            self.fusers = nn.ModuleList(
                nn.Conv2d(STAGE_CHANNELS[i] + DEPTH_CHANNELS, STAGE_CHANNELS[i], 1)
                for i in range(2, 5)
            )
        if config.msr_mode == "stacked":
            self.initial_predictor: nn.Module = StackedMultiScaleResidual(
                self.backbone.pooled_channels, config.msr_inner_width
            )
        else:
            self.initial_predictor = MultiScaleResidual(
                self.backbone.pooled_channels,
                config.msr_inner_width,
                iterations=config.msr_iterations,
            )
        schedule = build_schedule(
            config.guidance_style, [spec.channels for spec in self.plan]
        )
        self.stages = nn.ModuleList(
            RefineStage(spec.channels, row[: config.gr_blocks_per_stage])
            for spec, row in zip(self.plan, schedule.rows)
        )

    def _validate_inputs(self, rgb: Tensor, depth: Optional[Tensor]) -> None:
        if rgb.dim() != 4 or rgb.shape[1] != 3:
            raise InputError(f"rgb must be (batch, 3, h, w), got {tuple(rgb.shape)}")
        needs_depth = self.config.variant != "rgb_only"
        if needs_depth:
            if depth is None:
                raise InputError("this configuration requires a depth input")
            if depth.shape[0] != rgb.shape[0] or depth.shape[-2:] != rgb.shape[-2:]:
                raise InputError(
                    f"depth shape {tuple(depth.shape)} must match rgb batch and "
                    f"spatial size {tuple(rgb.shape)}"
                )

    def _depth_features(self, depth: Tensor) -> dict[Fraction, Tensor]:
        if depth.shape[1] != 1:
            raise InputError(f"depth must have 1 channel, got {depth.shape[1]}")
        if self.config.depth_backbone == "conv4":
            feats = self.depth_stream(depth)
            return dict(zip(DEPTH_SCALES, feats))
        if bool((depth < 0).any()) or bool((depth > 1).any()):
            raise InputError("depth values must lie in [0, 1]")
        taps, _ = self.depth_backbone(depth.expand(-1, 3, -1, -1))
        reduced = [red(tap) for red, tap in zip(self.depth_reducers, taps[2:])]
        return dict(zip(TAP_SCALES[2:], reduced))

    def forward(self, rgb: Tensor, depth: Optional[Tensor] = None) -> PredictionSet:
        """Run the full pass and return every logit map.

        Args:
            rgb: (batch, 3, h, w) in [0, 1], h and w divisible by 32.
            depth: (batch, 1, h, w) in [0, 1]; omitted for the RGB-only
                variant.

        Returns:
            A PredictionSet with the initial map and one map per stage.
        """
        self._validate_inputs(rgb, depth)
        taps, pooled = self.backbone(rgb)
        reduced = {
            scale: reducer(tap)
            for scale, reducer, tap in zip(TAP_SCALES, self.reducers, taps)
        }
        features: dict[int, Tensor] = {}
        depth_feats: dict[Fraction, Tensor] = {}
        if self.config.variant != "rgb_only":
            depth_feats = self._depth_features(depth)
        fused_iter = iter(getattr(self, "fusers", ()))
        for spec in self.plan:
            if spec.source == "rgb":
                features[spec.index] = reduced[spec.scale]
            elif spec.source == "depth":
                features[spec.index] = depth_feats[spec.scale]
            else:
                fuser = next(fused_iter)
                features[spec.index] = fuser(
                    torch.cat([reduced[spec.scale], depth_feats[spec.scale]], dim=1)
                )
        prediction = self.initial_predictor(pooled)
        preds = PredictionSet(initial=prediction, refined={})
        for spec in reversed(self.plan):
            feature = features[spec.index]
            if spec.upsample_guidance:
                prediction = F.interpolate(
                    prediction,
                    size=feature.shape[-2:],
                    mode="bilinear",
                    align_corners=False,
                )
            elif prediction.shape[-2:] != feature.shape[-2:]:
                raise TopologyError(
                    f"stage {spec.index} guidance size {tuple(prediction.shape[-2:])} "
                    f"does not match its feature size {tuple(feature.shape[-2:])}"
                )
            prediction = self.stages[spec.index - 1](feature, prediction)
            preds.refined[spec.index] = prediction
        return preds


def final_saliency(preds: PredictionSet) -> Tensor:
    """Elementwise logistic of the full-resolution logits, in (0, 1)."""
    return torch.sigmoid(preds.final)


_GROUP_LABELS = {
    "backbone": "backbone",
    "reducers": "reducers",
    "depth_stream": "depth_stream",
    "depth_backbone": "depth_stream",
    "depth_reducers": "depth_stream",
    "fusers": "fusion",
    "initial_predictor": "initial_predictor",
    "stages": "stages",
}


def count_parameters(model: nn.Module) -> dict:
    """Exact per-group and total trainable-scalar counts.

    Returns:
        {"groups": {label: count}, "total": int, "megabytes": float} with
        megabytes = total * 4 bytes / 1e6 (fp32, decimal megabytes).
    """
    groups: dict[str, int] = {}
    total = 0
    for name, param in model.named_parameters():
        label = _GROUP_LABELS.get(name.split(".")[0], name.split(".")[0])
        groups[label] = groups.get(label, 0) + param.numel()
        total += param.numel()
    return {"groups": groups, "total": total, "megabytes": total * 4 / 1e6}


def apply_default_init(model: nn.Module, seed: int) -> None:
    """Seeded default initialization: fan-in uniform weights, zero biases.

    Walks modules in registration order with one generator, so identical
    seeds give bitwise-identical parameters.
    """
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.uniform_(-bound, bound, generator=generator)
                if module.bias is not None:
                    module.bias.zero_()


def init_model(config: RunConfig) -> PgarNet:
    """Build and initialize a network from a run configuration.

    The RGB extractor is loaded from config.train.backbone_weights when
    set; everything else follows the seeded default scheme.
    """
    config.validate()
    model = PgarNet(config.model)
    apply_default_init(model, config.train.seed)
    if config.train.backbone_weights:
        load_backbone_weights(model.backbone, config.train.backbone_weights)
    return model


def save_checkpoint(
    path: str,
    model: PgarNet,
    config: RunConfig,
    epoch: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    """Write a versioned checkpoint with a plain-primitive config snapshot."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "epoch": epoch,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> dict:
    """Read and validate a checkpoint payload.

    Raises:
        CheckpointError: if the file is unreadable, the version is
            unsupported, or required keys are absent.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict):
        raise CheckpointError(f"checkpoint {path} is not a payload dict")
    missing = [
        key
        for key in ("format_version", "config", "epoch", "model_state")
        if key not in payload
    ]
    if missing:
        raise CheckpointError(f"checkpoint {path} missing keys: {', '.join(missing)}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format_version {payload['format_version']}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return payload


def model_from_checkpoint(payload: dict) -> tuple[PgarNet, RunConfig, int]:
    """Rebuild the model a checkpoint describes and load its parameters.

    Returns:
        (model, config, epoch) where epoch counts completed epochs.

    Raises:
        CheckpointError: listing every missing, unexpected, or wrongly
            shaped state entry.
    """
    config = config_from_dict(payload["config"])
    model = PgarNet(config.model)
    state = payload["model_state"]
    expected = model.state_dict()
    problems = []
    for key in sorted(set(expected) - set(state)):
        problems.append(f"missing key {key}")
    for key in sorted(set(state) - set(expected)):
        problems.append(f"unexpected key {key}")
    for key in sorted(set(expected) & set(state)):
        if tuple(expected[key].shape) != tuple(state[key].shape):
            problems.append(
                f"shape mismatch for {key}: checkpoint {tuple(state[key].shape)}, "
                f"model {tuple(expected[key].shape)}"
            )
    if problems:
        raise CheckpointError("checkpoint state invalid: " + "; ".join(problems))
    model.load_state_dict(state)
    return model, config, int(payload["epoch"])
