"""Guided residual refinement: split-and-concatenate, GR blocks, and schedules.

A guided residual block interleaves the current prediction map into a
feature's channel groups, learns a feature residual from the mix, then
learns a prediction residual from the refined feature. Stacking blocks
with shrinking group width strengthens the guidance progressively; the
eight guidance styles parameterize that per-block group width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, InputError, ScheduleError

BLOCKS_PER_STAGE = 3

# Per-block group widths keyed by style; a callable of the stage channel
# count C covers the "same as the stage width" entries.
_STYLE_RULES = {
    1: lambda c: (c, c, c),
    2: lambda c: (8, 8, 8),
    3: lambda c: (4, 4, 4),
    4: lambda c: (1, 1, 1),
    5: lambda c: (c, 8, 4),
    6: lambda c: (c, 8, 1),
    7: lambda c: (c, 4, 1),
    8: lambda c: (8, 4, 1),
}


def split_and_concatenate(feature: Tensor, prediction: Tensor, group_width: int) -> Tensor:
    """Interleave a 1-channel prediction into a feature's channel groups.

    The feature's C channels are split into g = C / group_width contiguous
    groups and the prediction is appended after each, giving the layout
    [F_1, S, F_2, S, ..., F_g, S] with C + g output channels. The output
    is a copy; inputs are not modified.

    Args:
        feature: (batch, C, h, w) tensor.
        prediction: (batch, 1, h, w) tensor, spatially identical.
        group_width: channels per group; must divide C.

    Returns:
        (batch, C + C/group_width, h, w) tensor.

    Raises:
        ScheduleError: if group_width does not divide the channel count.
        InputError: on spatial or channel-count mismatches.
    """
    if feature.dim() != 4 or prediction.dim() != 4:
        raise InputError("feature and prediction must be 4-D tensors")
    if prediction.shape[1] != 1:
        raise InputError(f"prediction must have 1 channel, got {prediction.shape[1]}")
    if feature.shape[-2:] != prediction.shape[-2:] or feature.shape[0] != prediction.shape[0]:
        raise InputError(
            f"feature {tuple(feature.shape)} and prediction {tuple(prediction.shape)} "
            "must match in batch and spatial size"
        )
    channels = feature.shape[1]
    if group_width < 1 or channels % group_width != 0:
        raise ScheduleError(
            f"group width {group_width} must divide the channel count {channels}"
        )
    pieces = []
    for start in range(0, channels, group_width):
        pieces.append(feature[:, start : start + group_width])
        pieces.append(prediction)
    return torch.cat(pieces, dim=1)


class GuidedResidualBlock(nn.Module):
    """One refinement block: a feature residual then a prediction residual.

    The feature path applies a full (non-grouped) 3x3 convolution over the
    interleaved channels, adds it to the incoming feature, and activates;
    the prediction path adds a signed 3x3 residual with no activation so
    it can erase false positives.
    """

    def __init__(self, channels: int, group_width: int):
        super().__init__()
        if group_width < 1 or channels % group_width != 0:
            raise ScheduleError(
                f"group width {group_width} must divide the channel count {channels}"
            )
        self.group_width = group_width
        groups = channels // group_width
        self.refine_feature = nn.Conv2d(channels + groups, channels, 3, padding=1)
        self.refine_prediction = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, feature: Tensor, prediction: Tensor) -> tuple[Tensor, Tensor]:
        """Return (refined feature, refined prediction logits)."""
        mixed = split_and_concatenate(feature, prediction, self.group_width)
        refined = F.relu(feature + self.refine_feature(mixed))
        return refined, prediction + self.refine_prediction(refined)


class RefineStage(nn.Module):
    """A chain of guided residual blocks sharing one side feature.

    The blocks thread (feature, prediction) left to right; only the last
    block's prediction leaves the stage. The last refined feature is an
    internal intermediate (it still feeds that block's prediction path).
    """

    def __init__(self, channels: int, group_widths: Sequence[int]):
        super().__init__()
        if not group_widths:
            raise ScheduleError("a refinement stage needs at least one block")
        self.channels = channels
        self.blocks = nn.ModuleList(
            GuidedResidualBlock(channels, width) for width in group_widths
        )

    def forward(self, feature: Tensor, prediction: Tensor) -> Tensor:
        if feature.shape[1] != self.channels:
            raise InputError(
                f"stage expects {self.channels} feature channels, got {feature.shape[1]}"
            )
        for block in self.blocks:
            feature, prediction = block(feature, prediction)
        return prediction


@dataclass(frozen=True)
class GuidanceSchedule:
    """Per-stage, per-block group widths for one guidance style."""

    style_id: int
    rows: tuple[tuple[int, ...], ...]


def build_schedule(style_id: int, stage_channels: Sequence[int]) -> GuidanceSchedule:
    """Expand a guidance style into per-stage block group widths.

    Args:
        style_id: style number, 1 through 8.
        stage_channels: channel count of each refinement stage in order.

    Returns:
        A GuidanceSchedule with one row of BLOCKS_PER_STAGE widths per stage.

    Raises:
        ConfigError: for an unknown style.
        ScheduleError: if a style's fixed width does not divide a stage's
            channel count.
    """
    rule = _STYLE_RULES.get(style_id)
    if rule is None:
        raise ConfigError(f"unknown guidance style {style_id}; expected 1..8")
    rows = []
    for channels in stage_channels:
        row = rule(channels)
        for width in row:
            if channels % width != 0:
                raise ScheduleError(
                    f"style {style_id} width {width} does not divide stage "
                    f"channel count {channels}"
                )
        rows.append(row)
    return GuidanceSchedule(style_id, tuple(rows))
