# src/msdpn/metrics.py
"""
Depth evaluation: RMSE, mean absolute relative error and the delta
accuracies, computed over pixels with ground truth (gt > 0).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import ShapeError
from . import autodiff as ad
from .encoding import DepthImage
from .data_utils import select_existing_columns
from .datagen import SceneSample
from .nn import MSDPN, msdpn_forward
from .system_utils import ordered_map
from .train import prepare_example

logger = logging.getLogger(__name__)

DELTA_BASE = 1.25
REPORT_COLUMNS = ["image_id", "rmse_mm", "rel", "delta1", "delta2", "delta3", "n_valid"]
SUMMARY_ID = "ALL"


def _valid_pairs(pred, gt, require: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred.data if isinstance(pred, DepthImage) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, DepthImage) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        if pred.size != gt.size:
            raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape.")
        pred = pred.reshape(gt.shape)
    valid = gt > 0
    if require and not np.any(valid):
        raise ValueError("Ground truth has no valid pixel.")
    return pred[valid], gt[valid]


def _rmse(p: np.ndarray, g: np.ndarray) -> float:
    return float(np.sqrt(np.mean((p - g) ** 2)))


def _rel(p: np.ndarray, g: np.ndarray) -> float:
    return float(np.mean(np.abs(p - g) / g))


def _delta(p: np.ndarray, g: np.ndarray, n: int) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, np.maximum(p / g, g / p), np.inf)
    return float(100.0 * np.count_nonzero(ratio < DELTA_BASE ** n) / g.size)


def rmse(pred, gt) -> float:
    """
    Root mean squared error in metres over gt > 0.

    Args:
        pred (array-like): Predicted depth, metres.
        gt (array-like): Ground-truth depth of the same shape; 0 marks missing.

    Returns:
        float: The RMSE over valid pixels.

    Raises:
        ShapeError: If pred and gt differ in size.
        ValueError: If no pixel has gt > 0.
    """
    return _rmse(*_valid_pairs(pred, gt))


def rel(pred, gt) -> float:
    """
    Mean absolute relative error |pred - gt| / gt over gt > 0.

    Returns:
        float: Unitless relative error.
    """
    return _rel(*_valid_pairs(pred, gt))


def delta(pred, gt, n: int) -> float:
    """
    Percentage of valid pixels with max(pred/gt, gt/pred) < 1.25**n.
    A non-positive prediction fails every threshold.
    """
    if n not in (1, 2, 3):
        raise ValueError(f"delta threshold exponent must be 1, 2 or 3, got {n}.")
    return _delta(*_valid_pairs(pred, gt), n)


@dataclass(frozen=True)
class EvalReport:
    rmse_m: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    n_valid_pixels: int
    n_images: int

    def __post_init__(self):
        if not (0 <= self.delta1 <= self.delta2 <= self.delta3 <= 100):
            raise ValueError(f"delta accuracies out of order: {self.delta1}, {self.delta2}, {self.delta3}.")
        if self.rmse_m < 0 or self.rel < 0:
            raise ValueError("rmse and rel must be non-negative.")

    @property
    def rmse_mm(self) -> float:
        return 1000.0 * self.rmse_m

    def as_row(self, image_id: str = SUMMARY_ID) -> dict:
        return {"image_id": image_id, "rmse_mm": self.rmse_mm, "rel": self.rel, "delta1": self.delta1,
                "delta2": self.delta2, "delta3": self.delta3, "n_valid": self.n_valid_pixels}


def _summarize(p: np.ndarray, g: np.ndarray, n_images: int) -> EvalReport:
    return EvalReport(rmse_m=_rmse(p, g), rel=_rel(p, g), delta1=_delta(p, g, 1), delta2=_delta(p, g, 2),
                      delta3=_delta(p, g, 3), n_valid_pixels=int(g.size), n_images=n_images)


def pooled_report(preds: Sequence, gts: Sequence, image_ids: Optional[Sequence[str]] = None
                  ) -> Tuple[EvalReport, pd.DataFrame]:
    """
    Pixel-pooled metrics over all images, plus one row per image in the CSV
    report layout. Images without valid pixels get NaN metrics and n_valid 0.

    Raises:
        ValueError: If no image holds a valid pixel, or the sequences differ in length.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth images.")
    if len(gts) == 0:
        raise ValueError("Cannot evaluate an empty dataset.")
    ids = [f"{i:06d}" for i in range(len(gts))] if image_ids is None else [str(i) for i in image_ids]
    rows, pooled_p, pooled_g = [], [], []
    for image_id, pred, gt in zip(ids, preds, gts):
        p, g = _valid_pairs(pred, gt, require=False)
        if g.size == 0:
            rows.append({"image_id": image_id, "rmse_mm": np.nan, "rel": np.nan, "delta1": np.nan,
                         "delta2": np.nan, "delta3": np.nan, "n_valid": 0})
            continue
        rows.append(_summarize(p, g, 1).as_row(image_id))
        pooled_p.append(p)
        pooled_g.append(g)
    if not pooled_g:
        raise ValueError("No image in the dataset holds a valid ground-truth pixel.")
    report = _summarize(np.concatenate(pooled_p), np.concatenate(pooled_g), len(gts))
    return report, pd.DataFrame(rows, columns=REPORT_COLUMNS)


def report_frame(report: EvalReport, per_image: pd.DataFrame) -> pd.DataFrame:
    """Per-image rows followed by the pooled 'ALL' row."""
    summary = pd.DataFrame([report.as_row(SUMMARY_ID)], columns=REPORT_COLUMNS)
    if per_image.empty:
        return summary
    return pd.concat([select_existing_columns(per_image, REPORT_COLUMNS), summary], ignore_index=True)


def predict_depths(model: MSDPN, examples: Sequence, workers: Optional[int] = None,
                   logger_instance: Optional[logging.Logger] = None) -> List[np.ndarray]:
    """H×W float32 predictions, one forward per example, in eval mode without a graph."""
    log = logger_instance if logger_instance is not None else logger
    model.eval()

    def _predict(example) -> np.ndarray:
        with ad.no_grad():
            result = msdpn_forward(model, example.input, example.ref_d)
        return result.depth.data[0, 0].astype(np.float32)

    return ordered_map(_predict, examples, workers=workers, logger_instance=log)


def evaluate(model: MSDPN, dataset: Sequence, workers: Optional[int] = None,
             logger_instance: Optional[logging.Logger] = None) -> Tuple[EvalReport, pd.DataFrame]:
    """
    Evaluates `model` on prepared examples (or SceneSamples, encoded for the
    model's input mode).

    Returns:
        (pooled EvalReport, per-image DataFrame)

    Raises:
        ValueError: On an empty dataset or one without any valid pixel.
    """
    log = logger_instance if logger_instance is not None else logger
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate an empty dataset.")
    examples = [prepare_example(item, model.config.input_mode) if isinstance(item, SceneSample) else item
                for item in dataset]
    preds = predict_depths(model, examples, workers=workers, logger_instance=log)
    report, frame = pooled_report(preds, [e.gt for e in examples], [e.sample_id or f"{i:06d}"
                                                                   for i, e in enumerate(examples)])
    log.info(f"Evaluated {report.n_images} images ({report.n_valid_pixels} px): rmse={report.rmse_mm:.1f} mm "
             f"rel={report.rel:.4f} d1={report.delta1:.2f}%")
    return report, frame
