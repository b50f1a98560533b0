"""Feature extraction: RGB backbone taps, channel reducers, and the depth stream.

The RGB stream is a 13-convolution VGG16-style extractor tapped at five
depths; each tap is projected by a 1x1 convolution to the stage channel
widths (16, 32, 64, 64, 64). The depth stream is four cascaded stride-2
3x3 convolutions whose last three outputs serve as depth side features.
Both streams consume inputs in [0, 1]; the extractor applies no input
standardization, so an all-zero image with zero biases yields zero taps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import AssemblyError, CheckpointError, InputError

# (name, output width) for the 13 convolutions; pooling follows each block.
_VGG_PLAN = (
    (("conv1_1", 64), ("conv1_2", 64)),
    (("conv2_1", 128), ("conv2_2", 128)),
    (("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256)),
    (("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512)),
    (("conv5_1", 512), ("conv5_2", 512), ("conv5_3", 512)),
)

TAP_NAMES = ("conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3")
TAP_SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))
POOLED_SCALE = Fraction(1, 32)
STAGE_CHANNELS = (16, 32, 64, 64, 64)
DEPTH_SCALES = (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))
DEPTH_CHANNELS = 64


def scaled_width(base: int, channel_scale: float) -> int:
    """Scale a backbone layer width, rounded to the nearest multiple of 8.

    Rounding keeps scaled widths divisible by every group width that the
    guidance schedules use, so tiny variants stay structurally valid.
    """
    return max(8, 8 * round(base * channel_scale / 8))


def _check_spatial(x: Tensor, what: str) -> None:
    if x.dim() != 4:
        raise InputError(f"{what} must be a 4-D (batch, channels, h, w) tensor, got {x.dim()}-D")
    h, w = x.shape[-2:]
    if h % 32 != 0 or w % 32 != 0:
        raise InputError(f"{what} spatial size {h}x{w} must be divisible by 32")


@dataclass(frozen=True)
class FeatureMap:
    """An activation tensor annotated with its scale relative to the input."""

    data: Tensor
    scale: Fraction
    source: str = "rgb"

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])


@dataclass(frozen=True)
class StageFeature:
    stage: int
    source: str
    feature: FeatureMap


@dataclass(frozen=True)
class SideFeatureSet:
    """Ordered per-stage side features, shallow (stage 1) to deep."""

    entries: tuple[StageFeature, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> StageFeature:
        return self.entries[i]


class Vgg16Features(nn.Module):
    """13-convolution feature extractor with five side taps plus a pooled top.

    Args:
        channel_scale: width multiplier; 1.0 for the full extractor, 0.125
            for the tiny test variant. Widths are rounded to multiples of 8.
        in_channels: input channel count (3 for RGB).
    """

    def __init__(self, channel_scale: float = 1.0, in_channels: int = 3):
        super().__init__()
        self.channel_scale = float(channel_scale)
        self.in_channels = in_channels
        self.pool = nn.MaxPool2d(2, 2)
        widths = []
        prev = in_channels
        for block in _VGG_PLAN:
            for name, base in block:
                width = scaled_width(base, channel_scale)
                setattr(self, name, nn.Conv2d(prev, width, 3, padding=1))
                prev = width
            widths.append(prev)
        self.tap_channels = tuple(widths)
        self.pooled_channels = prev

    def forward(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        """Run the extractor.

        Args:
            image: (batch, in_channels, h, w) with h, w divisible by 32.

        Returns:
            (taps, pooled): the five post-activation tap tensors at scales
            1, 1/2, 1/4, 1/8, 1/16, and the pooled top at scale 1/32.
        """
        _check_spatial(image, "image")
        if image.shape[1] != self.in_channels:
            raise InputError(
                f"image must have {self.in_channels} channels, got {image.shape[1]}"
            )
        taps = []
        x = image
        for block in _VGG_PLAN:
            for name, _ in block:
                x = F.relu(getattr(self, name)(x))
            taps.append(x)
            x = self.pool(x)
        return taps, x


class ChannelReducer(nn.Module):
    """1x1 linear projection of a tap to its stage channel width (no activation)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels > in_channels:
            warnings.warn(
                f"channel reducer expands {in_channels} -> {out_channels}; "
                "reduction is the intended direction",
                UserWarning,
                stacklevel=2,
            )
        self.proj = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, tap: Tensor) -> Tensor:
        return self.proj(tap)


class DepthStream(nn.Module):
    """Four cascaded stride-2 3x3 convolutions over a 1-channel depth map.

    All four layers output 64 channels with ReLU and biases, no
    normalization; the internal scales are 1/2, 1/4, 1/8, 1/16.
    """

    def __init__(self, channels: int = DEPTH_CHANNELS):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(1, channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, depth: Tensor) -> list[Tensor]:
        """Return all four internal features, shallow to deep."""
        _check_spatial(depth, "depth")
        if depth.shape[1] != 1:
            raise InputError(f"depth must have 1 channel, got {depth.shape[1]}")
        if not bool(torch.isfinite(depth).all()):
            raise InputError("depth contains non-finite values")
        if bool((depth < 0).any()) or bool((depth > 1).any()):
            raise InputError(
                f"depth values must lie in [0, 1], got range "
                f"[{float(depth.min()):.4g}, {float(depth.max()):.4g}]"
            )
        feats = []
        x = depth
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4):
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def extract_rgb_features(
    image: Tensor, backbone: Vgg16Features
) -> tuple[list[FeatureMap], FeatureMap]:
    """Tap the RGB extractor and annotate scales.

    Args:
        image: (batch, 3, h, w) in [0, 1], h and w divisible by 32.
        backbone: the extractor to run.

    Returns:
        (taps, pooled): five FeatureMaps at scales 1..1/16 plus the pooled
        1/32-scale FeatureMap that seeds the initial prediction.
    """
    taps, pooled = backbone(image)
    maps = [FeatureMap(t, s, "rgb") for t, s in zip(taps, TAP_SCALES)]
    return maps, FeatureMap(pooled, POOLED_SCALE, "rgb")


def reduce_channels(tap: FeatureMap, reducer: ChannelReducer) -> FeatureMap:
    """Project a tap to its stage width, preserving scale and source."""
    return FeatureMap(reducer(tap.data), tap.scale, tap.source)


def extract_depth_features(depth: Tensor, stream: DepthStream) -> list[FeatureMap]:
    """Run the depth stream and return its last three side features.

    Args:
        depth: (batch, 1, h, w) in [0, 1], h and w divisible by 32.
        stream: the depth stream to run.

    Returns:
        FeatureMaps at scales 1/4, 1/8, 1/16, each 64 channels.
    """
    feats = stream(depth)
    return [FeatureMap(t, s, "depth") for t, s in zip(feats[1:], DEPTH_SCALES[1:])]


# Stage layout of the full model: (stage, source, tap index within its stream).
FULL_STAGE_LAYOUT = (
    (1, "rgb", 0),
    (2, "rgb", 1),
    (3, "rgb", 2),
    (4, "depth", 0),
    (5, "rgb", 3),
    (6, "depth", 1),
    (7, "rgb", 4),
    (8, "depth", 2),
)


def assemble_side_features(
    rgb_taps: Sequence[FeatureMap],
    depth_feats: Optional[Sequence[FeatureMap]],
) -> SideFeatureSet:
    """Interleave reduced RGB taps and depth features into the stage order.

    Args:
        rgb_taps: the five reduced RGB taps, shallow to deep.
        depth_feats: the three depth side features, or None for the
            RGB-only variant (stages renumbered contiguously).

    Returns:
        A SideFeatureSet whose entries satisfy the stage source/channel/
        scale table.

    Raises:
        AssemblyError: on channel or scale mismatches, or when a depth
            feature's scale disagrees with its paired RGB neighbor.
    """
    if len(rgb_taps) != 5:
        raise AssemblyError(f"expected 5 reduced RGB taps, got {len(rgb_taps)}")
    for tap, channels, scale in zip(rgb_taps, STAGE_CHANNELS, TAP_SCALES):
        if tap.channels != channels:
            raise AssemblyError(
                f"RGB tap at scale {tap.scale} has {tap.channels} channels, expected {channels}"
            )
        if tap.scale != scale:
            raise AssemblyError(f"RGB tap scale {tap.scale} does not match expected {scale}")

    if depth_feats is None:
        entries = tuple(
            StageFeature(i + 1, "rgb", tap) for i, tap in enumerate(rgb_taps)
        )
        return SideFeatureSet(entries)

    if len(depth_feats) != 3:
        raise AssemblyError(f"expected 3 depth features, got {len(depth_feats)}")
    entries = []
    for stage, source, idx in FULL_STAGE_LAYOUT:
        fmap = rgb_taps[idx] if source == "rgb" else depth_feats[idx]
        if source == "depth":
            paired = rgb_taps[idx + 2]  # RGB neighbor at the same scale
            if fmap.scale != paired.scale:
                raise AssemblyError(
                    f"depth feature scale {fmap.scale} does not match its RGB "
                    f"neighbor's scale {paired.scale} at stage {stage}"
                )
            if fmap.channels != DEPTH_CHANNELS:
                raise AssemblyError(
                    f"depth feature at stage {stage} has {fmap.channels} channels, "
                    f"expected {DEPTH_CHANNELS}"
                )
            if fmap.spatial != paired.spatial:
                raise AssemblyError(
                    f"depth feature spatial size {fmap.spatial} does not match its "
                    f"RGB neighbor's {paired.spatial} at stage {stage}"
                )
        entries.append(StageFeature(stage, source, fmap))
    return SideFeatureSet(tuple(entries))


_ARCHIVE_PREFIX = "backbone."


def save_backbone_weights(backbone: Vgg16Features, path: str) -> None:
    """Write the extractor's parameters as a flat named-tensor .npz archive.

    Keys follow the canonical layer names, e.g. ``backbone.conv1_1.weight``.
    """
    arrays = {
        _ARCHIVE_PREFIX + name: tensor.detach().cpu().numpy()
        for name, tensor in backbone.state_dict().items()
    }
    np.savez(path, **arrays)


def load_backbone_weights(backbone: Vgg16Features, path: str) -> None:
    """Load extractor parameters from a .npz archive, validating shape-for-shape.

    Raises:
        CheckpointError: listing every missing, unexpected, or wrongly
            shaped key; the model is left unmodified on failure.
    """
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read backbone weights {path}: {exc}") from None
    state = backbone.state_dict()
    expected = {_ARCHIVE_PREFIX + name: tensor for name, tensor in state.items()}
    problems = []
    for key in sorted(set(expected) - set(archive.files)):
        problems.append(f"missing key {key}")
    for key in sorted(set(archive.files) - set(expected)):
        problems.append(f"unexpected key {key}")
    for key in sorted(set(expected) & set(archive.files)):
        want = tuple(expected[key].shape)
        got = tuple(archive[key].shape)
        if want != got:
            problems.append(f"shape mismatch for {key}: archive {got}, model {want}")
    if problems:
        raise CheckpointError(
            f"backbone weights {path} invalid: " + "; ".join(problems)
        )
    with torch.no_grad():
        for name, tensor in state.items():
            tensor.copy_(torch.from_numpy(np.asarray(archive[_ARCHIVE_PREFIX + name])))
