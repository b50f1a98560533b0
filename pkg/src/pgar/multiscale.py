"""Coarse initial prediction from the pooled top feature.

Three parallel residual bottleneck branches, identical except for the
dilation rate of their middle 3x3 convolution, are each applied
recurrently (weights shared within a branch, never across branches). The
branch outputs are summed, activated, and projected by a 3x3 head to a
single-channel logit map at 1/32 scale.
"""

from __future__ import annotations

import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError

DEFAULT_DILATIONS = (1, 2, 3)
STACK_DEPTH = 7


def _validate(dilations, iterations: int, inner_width: int) -> tuple[int, ...]:
    dilations = tuple(int(d) for d in dilations)
    if not dilations or any(d < 1 for d in dilations):
        raise ConfigError(f"dilations must be positive integers, got {dilations}")
    if any(d2 <= d1 for d1, d2 in zip(dilations, dilations[1:])):
        raise ConfigError(f"dilations must be strictly increasing, got {dilations}")
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    if inner_width < 1:
        raise ConfigError(f"inner_width must be >= 1, got {inner_width}")
    return dilations


class DilatedBottleneck(nn.Module):
    """Residual bottleneck: 1x1 reduce, dilated 3x3, 1x1 expand, skip, ReLU.

    Padding equals the dilation so spatial size is preserved. ReLU follows
    the first two convolutions; the expansion is linear into the residual
    addition, with a final ReLU after it.
    """

    def __init__(self, channels: int, inner_width: int, dilation: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, inner_width, 1)
        self.dilated = nn.Conv2d(
            inner_width, inner_width, 3, padding=dilation, dilation=dilation
        )
        self.expand = nn.Conv2d(inner_width, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.reduce(x))
        y = F.relu(self.dilated(y))
        return F.relu(x + self.expand(y))


class MultiScaleResidual(nn.Module):
    """Recurrent multi-branch initial predictor.

    Args:
        in_channels: channels of the pooled top feature (512 full width).
        inner_width: bottleneck width of every branch.
        dilations: one dilation rate per branch, strictly increasing.
        iterations: recurrent applications per branch; parameter count is
            independent of this value because weights are shared.
    """

    def __init__(
        self,
        in_channels: int,
        inner_width: int = 64,
        dilations=DEFAULT_DILATIONS,
        iterations: int = 5,
    ):
        super().__init__()
        dilations = _validate(dilations, iterations, inner_width)
        self.iterations = iterations
        self.branches = nn.ModuleList(
            DilatedBottleneck(in_channels, inner_width, d) for d in dilations
        )
        self.head = nn.Conv2d(in_channels, 1, 3, padding=1)

    def forward(self, pooled: Tensor) -> Tensor:
        """Return single-channel logits at the pooled feature's scale."""
        summed = None
        for branch in self.branches:
            x = pooled
            for _ in range(self.iterations):
                x = branch(x)
            summed = x if summed is None else summed + x
        return self.head(F.relu(summed))


class StackedMultiScaleResidual(nn.Module):
    """Ablation variant: 7 stacked applications with unshared weights.

    Matches the recurrent module's output contract; with every stacked
    parameter set equal to the recurrent weights it reproduces the
    recurrent module run for 7 iterations.
    """

    def __init__(
        self,
        in_channels: int,
        inner_width: int = 64,
        dilations=DEFAULT_DILATIONS,
        stack_depth: int = STACK_DEPTH,
    ):
        super().__init__()
        dilations = _validate(dilations, 1, inner_width)
        if stack_depth != STACK_DEPTH:
            raise ConfigError(
                f"stacked variant requires exactly {STACK_DEPTH} parameter sets "
                f"per branch, got {stack_depth}"
            )
        self.branches = nn.ModuleList(
            nn.ModuleList(
                DilatedBottleneck(in_channels, inner_width, d)
                for _ in range(stack_depth)
            )
            for d in dilations
        )
        self.head = nn.Conv2d(in_channels, 1, 3, padding=1)

    def forward(self, pooled: Tensor) -> Tensor:
        summed = None
        for stack in self.branches:
            x = pooled
            for block in stack:
                x = block(x)
            summed = x if summed is None else summed + x
        return self.head(F.relu(summed))
