"""Dataset ingestion, normalization, and augmentation.

Expected layout: ``<root>/RGB/*.jpg|png``, ``<root>/depth/*.png|bmp``,
``<root>/GT/*.png``, with the three files of a sample sharing a basename.
Depth maps are stored as 8- or 16-bit grayscale and normalized into [0, 1]
by their container bit depth (or per-image min-max behind a config flag);
ground truth is binarized at 0.5.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import DataError, InputError

RGB_DIR = "RGB"
DEPTH_DIR = "depth"
GT_DIR = "GT"
RGB_EXTENSIONS = (".jpg", ".png")
DEPTH_EXTENSIONS = (".png", ".bmp")
GT_EXTENSIONS = (".png",)

# Container maximum by PIL mode; 32-bit "I" images in practice carry
# 16-bit depth sensor data.
_DEPTH_MODE_MAX = {"L": 255.0, "P": 255.0, "I": 65535.0, "I;16": 65535.0, "I;16B": 65535.0}


class DatasetEntry(NamedTuple):
    id: str
    rgb_path: str
    depth_path: str
    gt_path: str


@dataclass(frozen=True)
class DatasetManifest:
    """Sorted listing of matched (rgb, depth, gt) triples under one root."""

    root: str
    entries: tuple[DatasetEntry, ...]
    split: str = ""

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Sample:
    """One prepared sample; arrays are channel-first float32.

    rgb is 3xHxW in [0, 1], depth 1xHxW in [0, 1], gt 1xHxW strictly
    binary {0, 1}.
    """

    rgb: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    id: str


def _index_dir(path: str, extensions: tuple[str, ...]) -> dict[str, str]:
    files = {}
    for name in sorted(os.listdir(path)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in extensions:
            files[stem] = os.path.join(path, name)
    return files


def load_dataset(root: str, split: str = "") -> DatasetManifest:
    """Scan a dataset root and match triples by basename.

    Args:
        root: directory holding the RGB, depth, and GT subdirectories.
        split: optional tag recorded on the manifest.

    Returns:
        A manifest sorted by sample id.

    Raises:
        DataError: if a subdirectory is missing, no triple matches, or any
            basename lacks one of its three files (all unmatched ids are
            listed).
    """
    for sub in (RGB_DIR, DEPTH_DIR, GT_DIR):
        path = os.path.join(root, sub)
        if not os.path.isdir(path):
            raise DataError(f"missing dataset directory: {path}")
    rgb = _index_dir(os.path.join(root, RGB_DIR), RGB_EXTENSIONS)
    depth = _index_dir(os.path.join(root, DEPTH_DIR), DEPTH_EXTENSIONS)
    gt = _index_dir(os.path.join(root, GT_DIR), GT_EXTENSIONS)
    all_ids = sorted(set(rgb) | set(depth) | set(gt))
    unmatched = [
        sample_id
        for sample_id in all_ids
        if sample_id not in rgb or sample_id not in depth or sample_id not in gt
    ]
    if unmatched:
        raise DataError(
            f"unmatched sample id(s) under {root}: {', '.join(unmatched)}"
        )
    if not all_ids:
        raise DataError(f"no samples found under {root}")
    entries = tuple(
        DatasetEntry(sample_id, rgb[sample_id], depth[sample_id], gt[sample_id])
        for sample_id in all_ids
    )
    return DatasetManifest(root=root, entries=entries, split=split)


def export_manifest(manifest: DatasetManifest, path: str) -> None:
    """Write the manifest as tab-separated (id, rgb, depth, gt) lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in manifest.entries:
            fh.write("\t".join(entry) + "\n")


def _open_image(path: str) -> Image.Image:
    try:
        image = Image.open(path)
        image.load()
        return image
    except (OSError, SyntaxError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None


def load_depth_array(path: str, size: tuple[int, int] | None, depth_norm: str) -> np.ndarray:
    """Load a depth map into a [0, 1] float32 HxW array.

    Args:
        path: image path (8- or 16-bit grayscale).
        size: optional (width, height) to resize to, bilinear.
        depth_norm: "bitdepth" divides by the container maximum;
            "minmax" stretches each image to span [0, 1].
    """
    image = _open_image(path)
    max_value = _DEPTH_MODE_MAX.get(image.mode)
    if max_value is None:
        image = image.convert("L")
        max_value = 255.0
    image = image.convert("F")
    if size is not None:
        image = image.resize(size, Image.Resampling.BILINEAR)
    arr = np.asarray(image, dtype=np.float32)
    if depth_norm == "minmax":
        low, high = float(arr.min()), float(arr.max())
        arr = (arr - low) / (high - low) if high > low else np.zeros_like(arr)
    else:
        arr = arr / max_value
    return np.clip(arr, 0.0, 1.0)


def prepare_sample(
    entry: DatasetEntry, target_size: int = 352, depth_norm: str = "bitdepth"
) -> Sample:
    """Load and normalize one triple.

    RGB and depth are resized bilinearly, ground truth with nearest
    neighbor to preserve binarity; RGB is scaled to [0, 1] (the extractor
    consumes that range directly), depth normalized per depth_norm, and
    ground truth thresholded at 0.5.

    Raises:
        DataError: if any of the three files cannot be decoded.
    """
    size = (target_size, target_size)
    rgb_img = _open_image(entry.rgb_path).convert("RGB")
    rgb_img = rgb_img.resize(size, Image.Resampling.BILINEAR)
    rgb = np.asarray(rgb_img, dtype=np.float32).transpose(2, 0, 1) / 255.0

    depth = load_depth_array(entry.depth_path, size, depth_norm)[None]

    gt_img = _open_image(entry.gt_path).convert("L")
    gt_img = gt_img.resize(size, Image.Resampling.NEAREST)
    gt = (np.asarray(gt_img, dtype=np.float32) > 127.5).astype(np.float32)[None]

    return Sample(rgb=rgb, depth=depth, gt=gt, id=entry.id)


def load_gt_mask(path: str) -> np.ndarray:
    """Load a ground-truth mask at native resolution as binary HxW float32."""
    gt_img = _open_image(path).convert("L")
    return (np.asarray(gt_img, dtype=np.float32) > 127.5).astype(np.float32)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip then one of four right-angle rotations.

    The identical geometric transform is applied to rgb, depth, and gt,
    so their alignment and the gt's binarity are preserved. Draws exactly
    two values from rng (flip uniform, rotation choice), making the result
    a pure function of the generator state.
    """
    flip = bool(rng.random() < 0.5)
    quarter_turns = int(rng.integers(0, 4))

    def transform(arr: np.ndarray) -> np.ndarray:
        if flip:
            arr = np.flip(arr, axis=2)
        if quarter_turns:
            arr = np.rot90(arr, quarter_turns, axes=(1, 2))
        return np.ascontiguousarray(arr)

    return Sample(
        rgb=transform(sample.rgb),
        depth=transform(sample.depth),
        gt=transform(sample.gt),
        id=sample.id,
    )


def shuffled_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch sample order keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def augmentation_rng(seed: int, epoch: int) -> np.random.Generator:
    """Deterministic per-epoch augmentation stream keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 1])


def validate_sample(sample: Sample) -> None:
    """Check the documented Sample invariants, raising InputError on violation."""
    if sample.rgb.shape[0] != 3 or sample.depth.shape[0] != 1 or sample.gt.shape[0] != 1:
        raise InputError(f"sample {sample.id} has wrong channel counts")
    spatial = sample.rgb.shape[1:]
    if sample.depth.shape[1:] != spatial or sample.gt.shape[1:] != spatial:
        raise InputError(f"sample {sample.id} arrays disagree in spatial size")
    for name, arr in (("rgb", sample.rgb), ("depth", sample.depth)):
        if arr.min() < 0 or arr.max() > 1:
            raise InputError(f"sample {sample.id} {name} values outside [0, 1]")
    if not np.isin(sample.gt, (0.0, 1.0)).all():
        raise InputError(f"sample {sample.id} gt is not binary")
