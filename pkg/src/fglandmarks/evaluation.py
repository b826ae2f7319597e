"""Landmark evaluation: regression to annotations, metrics, containment.

Learned landmarks are scored by fitting an intercept-free linear map from
the fitted Gaussian means to annotated keypoints on a training split and
measuring errors on a held-out split. Coordinates can be expressed with the
origin at the image center or the top-left corner; the same convention is
applied at fit and predict time, and reports carry both when asked.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .geometry import softmax_normalize
from .networks import LandmarkModel

ORIGIN_CENTER = "image-center"
ORIGIN_TOP_LEFT = "top-left"

NORMALIZER_WIDTH = "width"
NORMALIZER_HEIGHT = "height"
NORMALIZER_DIAGONAL = "diagonal"


@dataclass(frozen=True)
class CoordinateConvention:
    """Pixel-coordinate origin used for regression features and targets."""

    origin: str = ORIGIN_TOP_LEFT
    height: int = 128
    width: int = 128

    def __post_init__(self) -> None:
        if self.origin not in (ORIGIN_CENTER, ORIGIN_TOP_LEFT):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.height < 2 or self.width < 2:
            raise ValueError("image dimensions must be at least 2")

    def _center(self) -> np.ndarray:
        if self.origin == ORIGIN_TOP_LEFT:
            return np.zeros(2)
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Top-left pixel coordinates (..., 2) -> convention coordinates."""
        return np.asarray(points, dtype=np.float64) - self._center()

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) + self._center()


def flatten_points(points: np.ndarray) -> np.ndarray:
    """(M, N, 2) -> (M, 2N) with x, y interleaved per point."""
    points = np.asarray(points, dtype=np.float64)
    return points.reshape(points.shape[0], -1)


def unflatten_points(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    return flat.reshape(flat.shape[0], -1, 2)


@dataclass(frozen=True)
class RegressionModel:
    """Intercept-free linear map from 2K landmark to 2N keypoint coords."""

    weight: np.ndarray  # (2K, 2N)
    convention: CoordinateConvention

    def predict(self, landmarks: np.ndarray) -> np.ndarray:
        """(M, K, 2) landmark pixels -> (M, N, 2) keypoint pixels."""
        feats = flatten_points(self.convention.apply(np.asarray(landmarks)))
        out = feats @ self.weight
        return self.convention.invert(unflatten_points(out))


def fit_regressor(
    landmarks: np.ndarray, keypoints: np.ndarray, convention: CoordinateConvention
) -> RegressionModel:
    """Least squares without intercept, in convention coordinates.

    ``landmarks`` is (M, K, 2) and ``keypoints`` (M, N, 2), both top-left
    pixels. A rank-deficient design matrix falls back to the minimum-norm
    pseudo-inverse solution with a warning.
    """
    design = flatten_points(convention.apply(np.asarray(landmarks)))
    target = flatten_points(convention.apply(np.asarray(keypoints)))
    if design.shape[0] != target.shape[0]:
        raise ValueError("landmarks and keypoints must cover the same samples")
    weight, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        warnings.warn(
            f"rank-deficient regression design ({rank} < {design.shape[1]}); "
            "using the pseudo-inverse solution",
            RuntimeWarning,
            stacklevel=2,
        )
    return RegressionModel(weight=weight, convention=convention)


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def _euclidean(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)  # (M, N)


def eval_human36m_error(
    pred: np.ndarray,
    gt: np.ndarray,
    image_size,
    normalizer: str = NORMALIZER_WIDTH,
    as_percent: bool = False,
) -> float:
    """Mean Euclidean error divided by an image dimension.

    ``image_size`` is (height, width) or an int for square frames. The
    normalizer choice (width, height, diagonal) and the x100 percent flag
    are explicit because the convention is ambiguous in the wild.
    """
    if isinstance(image_size, int):
        h = w = image_size
    else:
        h, w = image_size
    if normalizer == NORMALIZER_WIDTH:
        denom = float(w)
    elif normalizer == NORMALIZER_HEIGHT:
        denom = float(h)
    elif normalizer == NORMALIZER_DIAGONAL:
        denom = float(np.hypot(h, w))
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    value = float(_euclidean(pred, gt).mean() / denom)
    return value * 100.0 if as_percent else value


def eval_bbc_accuracy(pred: np.ndarray, gt: np.ndarray, radius: float = 6.0) -> float:
    """Percentage of keypoints within ``radius`` pixels of the annotation."""
    dist = _euclidean(pred, gt)
    return float((dist <= radius).mean() * 100.0)


def eval_mafl_error(
    pred: np.ndarray,
    gt: np.ndarray,
    eye_indices: tuple = (0, 1),
    as_percent: bool = False,
) -> float:
    """Mean error scaled by each face's inter-ocular distance."""
    left, right = eye_indices
    dist = _euclidean(pred, gt)  # (M, N)
    gt = np.asarray(gt, dtype=np.float64)
    inter_ocular = np.linalg.norm(gt[:, left] - gt[:, right], axis=-1)  # (M,)
    if (inter_ocular == 0).any():
        raise ValueError("zero inter-ocular distance in ground truth")
    value = float((dist / inter_ocular[:, None]).mean())
    return value * 100.0 if as_percent else value


# ---------------------------------------------------------------------------
# containment analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContainmentReport:
    """Per-landmark activation mass inside the foreground, ascending."""

    percentages: tuple
    variant: str
    num_parts: int
    skipped_empty: int = 0

    def __post_init__(self) -> None:
        values = tuple(float(p) for p in self.percentages)
        if any(p < 0 or p > 100 for p in values):
            raise ValueError("containment percentages must lie in [0, 100]")
        if list(values) != sorted(values):
            raise ValueError("containment percentages must be sorted ascending")
        object.__setattr__(self, "percentages", values)

    def to_json(self) -> str:
        return json.dumps(
            {
                "variant": self.variant,
                "num_parts": self.num_parts,
                "skipped_empty": self.skipped_empty,
                "percentages": list(self.percentages),
            }
        )


def containment_percentages(pose_maps: torch.Tensor, mask_weights: torch.Tensor) -> torch.Tensor:
    """Activation mass under the mask, per part, x100.

    ``pose_maps`` is a normalized (K, h, w) stack; ``mask_weights`` an
    (h, w) field of per-cell foreground fractions in [0, 1].
    """
    if pose_maps.shape[-2:] != mask_weights.shape:
        raise ValueError("mask weights must match the activation resolution")
    return (pose_maps * mask_weights).sum(dim=(-2, -1)) * 100.0


def containment_analysis(
    model: LandmarkModel, records, variant: str = ""
) -> ContainmentReport:
    """Average per-landmark containment over records carrying masks.

    Masks are area-averaged down to the activation resolution. Frames whose
    mask is empty are skipped and counted in the report.
    """
    model.eval()
    totals = torch.zeros(model.config.num_parts, dtype=torch.float64)
    used = 0
    skipped = 0
    for record in records:
        if record.mask is None:
            continue
        if record.mask.sum() == 0:
            skipped += 1
            continue
        with torch.no_grad():
            pose = softmax_normalize(model.pose_encode(record.image.unsqueeze(0)))
            weights = F.avg_pool2d(record.mask.unsqueeze(0), 2)[0, 0]
            totals += containment_percentages(pose.values[0], weights).double()
        used += 1
    if used == 0:
        raise ValueError("no records with non-empty masks to analyze")
    mean = (totals / used).clamp(0.0, 100.0)
    return ContainmentReport(
        percentages=tuple(sorted(float(v) for v in mean)),
        variant=variant,
        num_parts=model.config.num_parts,
        skipped_empty=skipped,
    )


# ---------------------------------------------------------------------------
# landmark extraction and the K sweep
# ---------------------------------------------------------------------------

def landmark_locations(model: LandmarkModel, records, batch_size: int = 16) -> np.ndarray:
    """Fitted means for each record, as (M, K, 2) top-left pixel coords."""
    model.eval()
    side = model.config.image_size
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start: start + batch_size]
        images = torch.stack([r.image for r in chunk])
        with torch.no_grad():
            pose = softmax_normalize(model.pose_encode(images))
            mu = model.fit_parts(pose).means  # (B, K, 2) in [-1, 1]
        out.append(((mu + 1.0) * 0.5 * (side - 1)).numpy())
    return np.concatenate(out, axis=0)


def keypoint_matrix(records) -> np.ndarray:
    kps = [r.keypoints for r in records]
    if any(k is None for k in kps):
        raise ValueError("every record needs keypoints for regression evaluation")
    return np.stack(kps).astype(np.float64)


def regression_errors(
    model: LandmarkModel,
    fit_records,
    eval_records,
    convention: CoordinateConvention | None = None,
) -> np.ndarray:
    """Per-point pixel errors (M, N) of the landmark regression on eval data."""
    convention = convention or CoordinateConvention(
        height=model.config.image_size, width=model.config.image_size
    )
    regressor = fit_regressor(
        landmark_locations(model, fit_records), keypoint_matrix(fit_records), convention
    )
    pred = regressor.predict(landmark_locations(model, eval_records))
    return _euclidean(pred, keypoint_matrix(eval_records))


def landmark_count_sweep(
    base_config,
    k_values,
    train_fn,
    metric_fn,
    variants=("factorized",),
    seeds=(0,),
) -> list[dict]:
    """Train one model per (K, variant, seed) and tabulate a metric.

    ``train_fn(config) -> model`` owns the training loop; ``metric_fn(model)
    -> per-sample metric array``. Rows carry the mean and the standard error
    across that run's evaluation samples.
    """
    from dataclasses import replace

    rows = []
    for k in k_values:
        for variant in variants:
            for seed in seeds:
                config = replace(base_config, num_parts=k, variant=variant, seed=seed)
                model = train_fn(config)
                values = np.asarray(metric_fn(model), dtype=np.float64)
                stderr = (
                    float(values.std(ddof=1) / np.sqrt(len(values)))
                    if len(values) > 1
                    else 0.0
                )
                rows.append(
                    {
                        "K": k,
                        "variant": variant,
                        "seed": seed,
                        "metric": float(values.mean()),
                        "stderr": stderr,
                    }
                )
    return rows


def write_sweep_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["K", "variant", "seed", "metric", "stderr"])
        writer.writeheader()
        writer.writerows(rows)
