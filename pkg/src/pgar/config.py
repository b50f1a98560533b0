"""Run configuration: dataclasses, TOML loading, and validation.

A RunConfig is a plain tree of dataclasses so it can be snapshotted into
checkpoints as primitives and rebuilt without importing anything beyond
this module. Loading is strict: unknown keys raise ConfigError instead of
being silently ignored.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

DATA_ROOT_ENV = "PGAR_DATA_ROOT"

BACKBONES = ("vgg16", "tiny")
DEPTH_BACKBONES = ("conv4", "vgg16")
VARIANTS = ("full", "rgb_only", "concat_fusion")
MSR_MODES = ("recurrent", "stacked")
DEPTH_NORMS = ("bitdepth", "minmax")
EMEASURE_MODES = ("adaptive", "max")


@dataclass
class ModelConfig:
    """Architecture knobs for building a network.

    Attributes:
        backbone: RGB feature extractor preset. "vgg16" is the full-width
            extractor; "tiny" scales raw tap widths by 1/8 for fast tests.
        depth_backbone: "conv4" is the lightweight four-layer depth stream;
            "vgg16" reuses a full VGG16 on replicated depth input.
        variant: "full" (alternate RGB/depth refinement), "rgb_only"
            (depth stages removed), or "concat_fusion" (depth folded into
            RGB features by 1x1 convs instead of dedicated stages).
        guidance_style: split-group rule set, 1 through 8.
        msr_iterations: recurrent applications of each multiscale branch.
        msr_inner_width: bottleneck width inside multiscale branches.
        msr_mode: "recurrent" shares branch weights across iterations;
            "stacked" gives each of 7 stacked applications its own weights.
        gr_blocks_per_stage: chained guided-residual blocks per stage, 1..3.
        depth_taps: how many depth-stream scales feed refinement stages.
        input_size: square training/eval resolution in pixels.
    """

    backbone: str = "vgg16"
    depth_backbone: str = "conv4"
    variant: str = "full"
    guidance_style: int = 6
    msr_iterations: int = 5
    msr_inner_width: int = 64
    msr_mode: str = "recurrent"
    gr_blocks_per_stage: int = 3
    depth_taps: int = 3
    input_size: int = 352

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.depth_backbone not in DEPTH_BACKBONES:
            raise ConfigError(
                f"unknown depth_backbone {self.depth_backbone!r}; expected one of {DEPTH_BACKBONES}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 1 <= self.guidance_style <= 8:
            raise ConfigError(f"guidance_style must be in 1..8, got {self.guidance_style}")
        if self.msr_iterations < 1:
            raise ConfigError(f"msr_iterations must be >= 1, got {self.msr_iterations}")
        if self.msr_inner_width < 1:
            raise ConfigError(f"msr_inner_width must be >= 1, got {self.msr_inner_width}")
        if self.msr_mode not in MSR_MODES:
            raise ConfigError(f"unknown msr_mode {self.msr_mode!r}; expected one of {MSR_MODES}")
        if not 1 <= self.gr_blocks_per_stage <= 3:
            raise ConfigError(
                f"gr_blocks_per_stage must be in 1..3, got {self.gr_blocks_per_stage}"
            )
        if not 1 <= self.depth_taps <= 4:
            raise ConfigError(f"depth_taps must be in 1..4, got {self.depth_taps}")
        if self.input_size < 32 or self.input_size % 32 != 0:
            raise ConfigError(
                f"input_size must be a positive multiple of 32, got {self.input_size}"
            )
        if self.variant != "full" and self.depth_taps != 3:
            raise ConfigError("depth_taps is only configurable for the full variant")
        if self.depth_backbone == "vgg16" and self.depth_taps != 3:
            raise ConfigError("depth_backbone 'vgg16' supports only depth_taps=3")


@dataclass
class TrainConfig:
    """Optimization recipe.

    Defaults follow the reference recipe: Adam at 1e-4 with the rate cut
    by 10x from lr_drop_epoch onward, batches of 10, 30 epochs.
    """

    lr: float = 1e-4
    lr_drop_epoch: int = 25
    lr_drop_factor: float = 0.1
    batch_size: int = 10
    epochs: int = 30
    seed: int = 0
    augment: bool = True
    freeze_backbone: bool = False
    loss_weights: list[float] = field(default_factory=list)
    checkpoint_every: int = 1
    checkpoint_dir: str = "checkpoints"
    backbone_weights: str = ""

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_drop_factor <= 1:
            raise ConfigError(f"lr_drop_factor must be in (0, 1], got {self.lr_drop_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.lr_drop_epoch < self.epochs:
            raise ConfigError(
                f"lr_drop_epoch must be in [0, epochs), got {self.lr_drop_epoch} with "
                f"epochs={self.epochs}"
            )
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be non-negative")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class DataConfig:
    """Dataset location and preprocessing choices."""

    root: str = ""
    depth_norm: str = "bitdepth"

    def validate(self) -> None:
        if self.depth_norm not in DEPTH_NORMS:
            raise ConfigError(
                f"unknown depth_norm {self.depth_norm!r}; expected one of {DEPTH_NORMS}"
            )

    def resolved_root(self) -> str:
        """Dataset root with the environment override applied.

        Returns:
            The PGAR_DATA_ROOT environment variable if set and non-empty,
            otherwise the configured root.
        """
        env = os.environ.get(DATA_ROOT_ENV, "")
        return env if env else self.root


@dataclass
class EvalConfig:
    """Evaluation options."""

    emeasure_mode: str = "adaptive"
    save_maps: str = ""

    def validate(self) -> None:
        if self.emeasure_mode not in EMEASURE_MODES:
            raise ConfigError(
                f"unknown emeasure_mode {self.emeasure_mode!r}; expected one of {EMEASURE_MODES}"
            )


@dataclass
class RunConfig:
    """Top-level configuration tree for a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()

    def to_dict(self) -> dict[str, Any]:
        """Snapshot as plain nested dicts of primitives."""
        return dataclasses.asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _build_section(cls: type, table: dict[str, Any], section: str) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        want = str(fields[key].type)
        if want == "list[float]":
            if not isinstance(value, list) or any(
                isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
            ):
                raise ConfigError(f"[{section}] {key} must be a list of numbers")
            kwargs[key] = [float(v) for v in value]
            continue
        # TOML ints are acceptable where floats are declared.
        if want == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        expected = {"int": int, "float": float, "str": str, "bool": bool}.get(want)
        if expected is not None and not isinstance(value, expected):
            raise ConfigError(
                f"[{section}] {key} must be {want}, got {type(value).__name__}"
            )
        if expected in (int, float) and isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be {want}, got bool")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(tree: dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from a nested dict.

    Args:
        tree: mapping of section name to a table of scalar options, as
            parsed from TOML or recovered from a checkpoint snapshot.

    Returns:
        A validated RunConfig.

    Raises:
        ConfigError: on unknown sections or keys, wrong value types, or
            values that fail validation.
    """
    unknown = sorted(set(tree) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        table = tree.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(cls, table, name)
    cfg = RunConfig(**sections)
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    """Load and validate a RunConfig from a TOML file.

    Args:
        path: filesystem path of the TOML document.

    Returns:
        A validated RunConfig.

    Raises:
        ConfigError: if the file is missing, not valid TOML, or fails
            config_from_dict validation.
    """
    try:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return config_from_dict(tree)
