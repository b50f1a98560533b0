"""Saliency evaluation measures with dataset-level aggregation.

All measures take a prediction in [0, 1] and a binary ground truth of the
same spatial size, as float64 numpy arrays. The structure and enhanced-
alignment measures follow their canonical published definitions; the
enhanced score averages over all pixels so a perfect prediction scores
exactly 1 and every score stays inside [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

EPS = float(np.finfo(np.float64).eps)
THRESHOLD_COUNT = 256
DEFAULT_BETA2 = 0.3

SCALE_DISCLAIMER = (
    "Desk-scale evaluation: published full-scale benchmark scores for this "
    "architecture require training on complete RGB-D corpora with GPU "
    "hardware and are not reproduced or targeted by this run."
)


def _validate_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.size == 0:
        raise InputError("empty prediction")
    if pred.min() < 0 or pred.max() > 1:
        raise InputError("prediction values must lie in [0, 1]")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise InputError("ground truth must be strictly binary")
    return pred, gt


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error over all pixels."""
    pred, gt = _validate_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def precision_recall_curve(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision/recall at the 256 thresholds t = k/255, k = 0..255.

    The prediction is binarized as pred >= t; precision with an empty
    predicted-positive set is defined as 1.

    Returns:
        (precision, recall) arrays of length 256.

    Raises:
        InputError: when the ground truth has no positive pixel (such
            samples are excluded from curve aggregation).
    """
    pred, gt = _validate_pair(pred, gt)
    positives = gt > 0.5
    positive_count = int(positives.sum())
    if positive_count == 0:
        raise InputError("ground truth has no positive pixel")
    pred_flat = pred.ravel()
    gt_flat = positives.ravel()
    precision = np.empty(THRESHOLD_COUNT)
    recall = np.empty(THRESHOLD_COUNT)
    for k in range(THRESHOLD_COUNT):
        selected = pred_flat >= (k / 255)
        predicted_positive = int(np.count_nonzero(selected))
        true_positive = int(np.count_nonzero(selected & gt_flat))
        precision[k] = true_positive / predicted_positive if predicted_positive else 1.0
        recall[k] = true_positive / positive_count
    return precision, recall


def f_beta_curve(
    precision: np.ndarray, recall: np.ndarray, beta2: float = DEFAULT_BETA2
) -> np.ndarray:
    """Per-threshold F score, with the 0/0 case defined as 0."""
    numerator = (1 + beta2) * precision * recall
    denominator = beta2 * precision + recall
    return np.divide(
        numerator,
        denominator,
        out=np.zeros_like(numerator),
        where=denominator > 0,
    )


def max_f_measure(pred: np.ndarray, gt: np.ndarray, beta2: float = DEFAULT_BETA2) -> float:
    """Maximum F score over the 256 binarization thresholds."""
    precision, recall = precision_recall_curve(pred, gt)
    return float(f_beta_curve(precision, recall, beta2).max())


def _object_score(values: np.ndarray) -> float:
    # Similarity of the masked prediction to an ideal constant-1 region;
    # dispersion uses the sample standard deviation (ddof=1).
    if values.size == 0:
        return 0.0
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred[gt > 0.5]
    bg = 1.0 - pred[gt <= 0.5]
    mu = float(gt.mean())
    return mu * _object_score(fg) + (1.0 - mu) * _object_score(bg)


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    # 1-indexed centroid, rounded half away from zero, clamped so every
    # quadrant is non-empty.
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        x = int(np.floor(cols / 2 + 0.5))
        y = int(np.floor(rows / 2 + 0.5))
    else:
        col_index = np.arange(1, cols + 1, dtype=np.float64)
        row_index = np.arange(1, rows + 1, dtype=np.float64)
        x = int(np.floor(float(gt.sum(axis=0) @ col_index) / total + 0.5))
        y = int(np.floor(float(gt.sum(axis=1) @ row_index) / total + 0.5))
    x = min(max(x, 1), cols - 1)
    y = min(max(y, 1), rows - 1)
    return x, y


def _region_ssim(pred_q: np.ndarray, gt_q: np.ndarray) -> float:
    n = pred_q.size
    x = float(pred_q.mean())
    y = float(gt_q.mean())
    sigma_x = float(((pred_q - x) ** 2).sum()) / (n - 1 + EPS)
    sigma_y = float(((gt_q - y) ** 2).sum()) / (n - 1 + EPS)
    sigma_xy = float(((pred_q - x) * (gt_q - y)).sum()) / (n - 1 + EPS)
    alpha = 4.0 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0.0:
        return alpha / (beta + EPS)
    if beta == 0.0:
        return 1.0
    return 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    x, y = _centroid(gt)
    rows, cols = gt.shape
    area = rows * cols
    quads = ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, cols)),
             (slice(y, rows), slice(0, x)), (slice(y, rows), slice(x, cols)))
    score = 0.0
    for row_slice, col_slice in quads:
        gt_q = gt[row_slice, col_slice]
        weight = gt_q.size / area
        score += weight * _region_ssim(pred[row_slice, col_slice], gt_q)
    return score


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: object-aware and region-aware similarity.

    S = alpha * S_object + (1 - alpha) * S_region, with the degenerate
    all-background / all-foreground ground truths scored by the mean
    prediction; the result is clamped to [0, 1].
    """
    pred, gt = _validate_pair(pred, gt)
    gt_mean = float(gt.mean())
    if gt_mean == 0.0:
        score = 1.0 - float(pred.mean())
    elif gt_mean == 1.0:
        score = float(pred.mean())
    else:
        score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


def _enhanced_matrix(pred_bin: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if gt.sum() == 0:
        return 1.0 - pred_bin
    if gt.sum() == gt.size:
        return pred_bin.copy()
    bias_gt = gt - gt.mean()
    bias_pred = pred_bin - pred_bin.mean()
    alignment = (
        2.0 * bias_gt * bias_pred / (bias_gt * bias_gt + bias_pred * bias_pred + EPS)
    )
    return (alignment + 1.0) ** 2 / 4.0


def e_measure(pred: np.ndarray, gt: np.ndarray, mode: str = "adaptive") -> float:
    """Enhanced-alignment measure of a binarized prediction.

    The "adaptive" mode binarizes at twice the prediction's mean (capped
    at 1); "max" takes the maximum over the 256 uniform thresholds. The
    score is the mean over pixels of the enhanced alignment, so it lies
    in [0, 1] and a perfect prediction scores 1.
    """
    pred, gt = _validate_pair(pred, gt)
    if mode == "adaptive":
        threshold = min(2.0 * float(pred.mean()), 1.0)
        return float(_enhanced_matrix((pred >= threshold).astype(np.float64), gt).mean())
    if mode == "max":
        best = 0.0
        for k in range(THRESHOLD_COUNT):
            binary = (pred >= k / 255).astype(np.float64)
            best = max(best, float(_enhanced_matrix(binary, gt).mean()))
        return best
    raise InputError(f"unknown e_measure mode {mode!r}; expected 'adaptive' or 'max'")


@dataclass(frozen=True)
class EvalResult:
    """Dataset-level scores plus the averaged precision-recall curve."""

    mae: float
    max_f: float
    s_measure: float
    e_measure: float
    precision: np.ndarray
    recall: np.ndarray
    n_samples: int
    n_excluded: int


def aggregate(pairs, emeasure_mode: str = "adaptive", beta2: float = DEFAULT_BETA2) -> EvalResult:
    """Aggregate per-sample measures over a dataset.

    MAE, structure, and enhanced scores are averaged over every sample;
    the precision-recall curve is averaged per threshold over samples with
    at least one positive ground-truth pixel (others are excluded and
    counted), and the maximum F is taken on the averaged curve.

    Args:
        pairs: iterable of (pred, gt) arrays.
        emeasure_mode: "adaptive" or "max".
        beta2: F-measure precision emphasis.

    Raises:
        InputError: when no sample is included in the curve aggregation.
    """
    maes, s_scores, e_scores = [], [], []
    precisions, recalls = [], []
    excluded = 0
    for pred, gt in pairs:
        maes.append(mae(pred, gt))
        s_scores.append(s_measure(pred, gt))
        e_scores.append(e_measure(pred, gt, emeasure_mode))
        if np.asarray(gt).sum() == 0:
            excluded += 1
            continue
        precision, recall = precision_recall_curve(pred, gt)
        precisions.append(precision)
        recalls.append(recall)
    if not precisions:
        raise InputError(
            "no sample with a positive ground-truth pixel; cannot aggregate curves"
        )
    mean_precision = np.mean(np.stack(precisions), axis=0)
    mean_recall = np.mean(np.stack(recalls), axis=0)
    return EvalResult(
        mae=float(np.mean(maes)),
        max_f=float(f_beta_curve(mean_precision, mean_recall, beta2).max()),
        s_measure=float(np.mean(s_scores)),
        e_measure=float(np.mean(e_scores)),
        precision=mean_precision,
        recall=mean_recall,
        n_samples=len(maes),
        n_excluded=excluded,
    )


def result_to_dict(result: EvalResult) -> dict:
    """JSON-serializable view of an EvalResult, including the PR curve."""
    return {
        "mae": result.mae,
        "max_f": result.max_f,
        "s_measure": result.s_measure,
        "e_measure": result.e_measure,
        "n_samples": result.n_samples,
        "n_excluded": result.n_excluded,
        "pr_curve": [
            [float(p), float(r)] for p, r in zip(result.precision, result.recall)
        ],
        "disclaimer": SCALE_DISCLAIMER,
    }


def format_report_table(results: dict[str, EvalResult]) -> str:
    """Plain-text score table, one row per dataset: E, S, F, M columns."""
    lines = [f"{'dataset':<20} {'E':>7} {'S':>7} {'F':>7} {'M':>7}"]
    for name, result in results.items():
        lines.append(
            f"{name:<20} {result.e_measure:>7.4f} {result.s_measure:>7.4f} "
            f"{result.max_f:>7.4f} {result.mae:>7.4f}"
        )
    lines.append("")
    lines.append(SCALE_DISCLAIMER)
    return "\n".join(lines)
