import numpy as np
import pytest
import torch
from PIL import Image

from pgar import RunConfig, Sample
from pgar.config import ModelConfig, TrainConfig


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        backbone="tiny",
        msr_iterations=2,
        msr_inner_width=16,
        input_size=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_run_config(**train_overrides) -> RunConfig:
    train = dict(
        lr=1e-3,
        lr_drop_epoch=0,
        lr_drop_factor=1.0,
        batch_size=5,
        epochs=2,
        seed=0,
        augment=False,
    )
    train.update(train_overrides)
    cfg = RunConfig(model=tiny_model_config(), train=TrainConfig(**train))
    cfg.validate()
    return cfg


def make_blob_sample(rng: np.random.Generator, size: int = 64, index: int = 0) -> Sample:
    """Synthetic RGB-D sample: a bright ellipse on a dark background."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    cy = rng.uniform(0.3, 0.7) * size
    cx = rng.uniform(0.3, 0.7) * size
    ry = rng.uniform(0.15, 0.3) * size
    rx = rng.uniform(0.15, 0.3) * size
    mask = (((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0).astype(np.float32)
    noise = rng.uniform(0, 0.2, (3, size, size)).astype(np.float32)
    rgb = np.clip(mask[None] * 0.7 + noise, 0.0, 1.0)
    depth = np.clip(mask[None] * 0.6 + rng.uniform(0, 0.3, (1, size, size)), 0.0, 1.0)
    return Sample(
        rgb=rgb.astype(np.float32),
        depth=depth.astype(np.float32),
        gt=mask[None].astype(np.float32),
        id=f"blob{index}",
    )


def make_blob_samples(count: int, size: int = 64, seed: int = 7) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [make_blob_sample(rng, size, i) for i in range(count)]


def write_dataset(root, count: int = 3, size: int = 48, seed: int = 3,
                  depth_bits: int = 8) -> list[str]:
    """Write a matched RGB/depth/GT triple layout; returns sample ids."""
    rng = np.random.default_rng(seed)
    (root / "RGB").mkdir(parents=True)
    (root / "depth").mkdir()
    (root / "GT").mkdir()
    ids = []
    for i in range(count):
        sample_id = f"img{i:03d}"
        rgb = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        Image.fromarray(rgb).save(root / "RGB" / f"{sample_id}.jpg")
        if depth_bits == 16:
            depth = rng.integers(0, 65536, (size, size), dtype=np.uint16)
            depth.flat[0] = 65535
            Image.fromarray(depth).save(root / "depth" / f"{sample_id}.png")
        else:
            depth = rng.integers(0, 256, (size, size), dtype=np.uint8)
            Image.fromarray(depth, mode="L").save(root / "depth" / f"{sample_id}.png")
        gt = (rng.random((size, size)) < 0.3).astype(np.uint8) * 255
        gt[size // 2, size // 2] = 255  # at least one positive pixel
        Image.fromarray(gt, mode="L").save(root / "GT" / f"{sample_id}.png")
        ids.append(sample_id)
    return ids


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps small-tensor tests fast and reductions reproducible.
    torch.set_num_threads(1)
    yield


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and report.when == "call":
        number, description = marker.args
        verdict = "PASS" if report.passed else "FAIL"
        item.config._acceptance_lines[number] = (
            f"criterion {number:>2}: {verdict} - {description}"
        )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
