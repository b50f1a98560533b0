import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import make_blob_samples, tiny_run_config
from pgar.config import TrainConfig
from pgar.errors import InputError, TrainingError
from pgar.network import (
    PgarNet,
    PredictionSet,
    init_model,
    load_checkpoint,
    model_from_checkpoint,
)
from pgar.training import (
    collate,
    deep_supervision_loss,
    lr_schedule,
    run_training,
    train_step,
)


def naive_mean_bce(logits: torch.Tensor, gt: torch.Tensor) -> float:
    """Per-pixel float64 reference for mean binary cross-entropy on logits."""
    total = 0.0
    x = logits.detach().double().reshape(-1)
    y = gt.detach().double().reshape(-1)
    for xi, yi in zip(x.tolist(), y.tolist()):
        p = 1.0 / (1.0 + math.exp(-xi))
        total += -(yi * math.log(p) + (1.0 - yi) * math.log(1.0 - p))
    return total / x.numel()


class TestLrSchedule:
    def test_base_rate_then_scaled(self):
        cfg = TrainConfig(lr=1e-4, lr_drop_epoch=25, lr_drop_factor=0.1, epochs=30)
        assert lr_schedule(0, cfg) == 1e-4
        assert lr_schedule(24, cfg) == 1e-4
        assert lr_schedule(25, cfg) == pytest.approx(1e-5)
        assert lr_schedule(29, cfg) == pytest.approx(1e-5)

    def test_drop_at_zero_with_unit_factor_is_constant(self):
        cfg = TrainConfig(lr=1e-3, lr_drop_epoch=0, lr_drop_factor=1.0, epochs=5)
        assert [lr_schedule(e, cfg) for e in range(5)] == [1e-3] * 5


class TestDeepSupervisionLoss:
    def _preds_at_gt_size(
        self, seed: int = 0, dtype: torch.dtype = torch.float32
    ) -> tuple[PredictionSet, torch.Tensor]:
        g = torch.Generator().manual_seed(seed)
        preds = PredictionSet(
            initial=torch.randn(2, 1, 6, 6, generator=g, dtype=dtype),
            refined={
                1: torch.randn(2, 1, 6, 6, generator=g, dtype=dtype),
                2: torch.randn(2, 1, 6, 6, generator=g, dtype=dtype),
            },
        )
        gt = (torch.rand(2, 1, 6, 6, generator=g) < 0.5).to(dtype)
        return preds, gt

    def test_matches_naive_per_pixel_sum(self):
        # Double precision so the comparison isolates the loss definition
        # rather than float32 accumulation order.
        preds, gt = self._preds_at_gt_size(dtype=torch.float64)
        report = deep_supervision_loss(preds, gt)
        want = sum(
            naive_mean_bce(logits, gt) for _, logits in preds.in_refinement_order()
        )
        assert report.total_value == pytest.approx(want, rel=1e-10)
        for name, logits in preds.in_refinement_order():
            assert report.per_output[name] == pytest.approx(
                naive_mean_bce(logits, gt), rel=1e-10
            )

    def test_gradient_matches_closed_form(self):
        # d(mean BCE)/d(logit) = (sigmoid(x) - y) / N when sizes already agree.
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(1, 1, 5, 5, generator=g, requires_grad=True)
        gt = (torch.rand(1, 1, 5, 5, generator=g) < 0.5).float()
        preds = PredictionSet(initial=logits, refined={1: logits.detach().clone()})
        report = deep_supervision_loss(preds, gt)
        report.total.backward()
        want = (torch.sigmoid(logits.detach()) - gt) / logits.numel()
        assert torch.allclose(logits.grad, want, atol=1e-7)

    def test_coarse_outputs_resized_to_gt_resolution(self):
        g = torch.Generator().manual_seed(1)
        coarse = torch.randn(1, 1, 2, 2, generator=g)
        fine = torch.randn(1, 1, 8, 8, generator=g)
        gt = (torch.rand(1, 1, 8, 8, generator=g) < 0.5).float()
        preds = PredictionSet(initial=coarse, refined={1: fine})
        report = deep_supervision_loss(preds, gt)
        resized = F.interpolate(coarse, size=(8, 8), mode="bilinear", align_corners=False)
        assert report.per_output["initial"] == pytest.approx(
            naive_mean_bce(resized, gt), rel=1e-6
        )

    def test_unit_weights_sum_per_output_terms(self):
        preds, gt = self._preds_at_gt_size(seed=2)
        report = deep_supervision_loss(preds, gt)
        assert report.total_value == pytest.approx(sum(report.per_output.values()), rel=1e-6)

    def test_custom_weights_scale_terms(self):
        preds, gt = self._preds_at_gt_size(seed=4)
        weights = [0.5, 2.0, 0.25]
        report = deep_supervision_loss(preds, gt, weights)
        names = [name for name, _ in preds.in_refinement_order()]
        want = sum(w * report.per_output[n] for w, n in zip(weights, names))
        assert report.total_value == pytest.approx(want, rel=1e-6)

    def test_wrong_weight_count_rejected(self):
        preds, gt = self._preds_at_gt_size()
        with pytest.raises(InputError, match="3 loss weights"):
            deep_supervision_loss(preds, gt, [1.0, 1.0])

    def test_non_binary_gt_rejected(self):
        preds, gt = self._preds_at_gt_size()
        with pytest.raises(InputError, match="binary"):
            deep_supervision_loss(preds, gt * 0.5)


class TestCollate:
    def test_stacks_in_order_with_ids(self):
        samples = make_blob_samples(3, size=32)
        batch = collate(samples)
        assert batch.rgb.shape == (3, 3, 32, 32)
        assert batch.depth.shape == (3, 1, 32, 32)
        assert batch.gt.shape == (3, 1, 32, 32)
        assert batch.rgb.dtype == torch.float32
        assert batch.ids == ("blob0", "blob1", "blob2")
        np.testing.assert_array_equal(batch.rgb[1].numpy(), samples[1].rgb)


class TestTrainStep:
    def test_loss_decreases_on_repeated_batch(self):
        cfg = tiny_run_config()
        model = init_model(cfg)
        batch = collate(make_blob_samples(4, size=64))
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        first = train_step(model, batch, optimizer).total_value
        for _ in range(14):
            last = train_step(model, batch, optimizer).total_value
        assert last < first

    def test_non_finite_loss_names_heads_and_skips_update(self):
        cfg = tiny_run_config()
        model = init_model(cfg)
        with torch.no_grad():
            model.backbone.conv1_1.weight.fill_(float("nan"))
        snapshot = {k: v.clone() for k, v in model.state_dict().items()}
        batch = collate(make_blob_samples(2, size=64))
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        with pytest.raises(TrainingError) as info:
            train_step(model, batch, optimizer)
        message = str(info.value)
        assert "initial" in message and "stage1" in message
        for key, value in model.state_dict().items():
            # equal_nan: the poisoned extractor weights stay NaN, untouched.
            assert torch.allclose(value, snapshot[key], rtol=0, atol=0, equal_nan=True), key


class TestRunTraining:
    def _config(self, **overrides):
        defaults = dict(batch_size=2, epochs=2, seed=11, augment=True)
        defaults.update(overrides)
        return tiny_run_config(**defaults)

    def test_identical_runs_are_bitwise_identical(self):
        samples = make_blob_samples(5, size=64)
        losses = []
        finals = []
        for _ in range(2):
            cfg = self._config()
            model = init_model(cfg)
            result = run_training(model, samples, cfg)
            losses.append([r.total_value for r in result.reports])
            finals.append({k: v.clone() for k, v in model.state_dict().items()})
        assert losses[0] == losses[1]
        for key in finals[0]:
            assert torch.equal(finals[0][key], finals[1][key]), key

    def test_step_numbering_and_short_batch(self):
        samples = make_blob_samples(5, size=64)
        cfg = self._config()
        model = init_model(cfg)
        result = run_training(model, samples, cfg)
        # ceil(5 / 2) = 3 batches per epoch, the trailing singleton kept.
        assert [r.step for r in result.reports] == list(range(6))
        assert [r.epoch for r in result.reports] == [0, 0, 0, 1, 1, 1]
        assert all(r.lr == cfg.train.lr for r in result.reports)

    def test_resume_from_checkpoint_is_bitwise(self, tmp_path):
        samples = make_blob_samples(5, size=64)
        cfg = self._config()

        straight = init_model(cfg)
        run_training(straight, samples, cfg)

        resumed_dir = str(tmp_path / "run")
        resumed = init_model(cfg)
        one_epoch = self._config(epochs=1)
        run_training(resumed, samples, one_epoch, out_dir=resumed_dir)
        payload = load_checkpoint(f"{resumed_dir}/epoch_0001.pt")
        restored, restored_cfg, done = model_from_checkpoint(payload)
        assert done == 1
        optimizer = torch.optim.Adam(restored.parameters(), lr=cfg.train.lr)
        optimizer.load_state_dict(payload["optimizer_state"])
        run_training(restored, samples, cfg, optimizer=optimizer, start_epoch=done)

        for key, value in straight.state_dict().items():
            assert torch.equal(value, restored.state_dict()[key]), key

    def test_checkpoints_and_log_written(self, tmp_path):
        samples = make_blob_samples(4, size=64)
        cfg = self._config()
        model = init_model(cfg)
        out = str(tmp_path / "run")
        result = run_training(model, samples, cfg, out_dir=out)
        assert result.checkpoints == [f"{out}/epoch_0001.pt", f"{out}/epoch_0002.pt"]
        lines = open(f"{out}/train_log.jsonl").read().splitlines()
        assert len(lines) == len(result.reports)
        record = json.loads(lines[0])
        assert list(record) == sorted(record)
        assert record["step"] == 0 and "initial" in record["losses"]

    def test_freeze_backbone_keeps_extractor_fixed(self):
        samples = make_blob_samples(2, size=64)
        cfg = self._config(epochs=1, freeze_backbone=True)
        model = init_model(cfg)
        before_backbone = {
            k: v.clone() for k, v in model.backbone.state_dict().items()
        }
        before_stage = model.stages[0].blocks[0].refine_prediction.weight.clone()
        run_training(model, samples, cfg)
        for key, value in model.backbone.state_dict().items():
            assert torch.equal(value, before_backbone[key]), key
        assert not torch.equal(
            model.stages[0].blocks[0].refine_prediction.weight, before_stage
        )

    def test_empty_sample_list_rejected(self):
        cfg = self._config()
        model = init_model(cfg)
        with pytest.raises(InputError, match="empty"):
            run_training(model, [], cfg)
