"""Confusion matrices, Dice, exact distance transform and the pixel distance error."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from openpyxl import Workbook
from scipy import ndimage

from parcellation.fileio import heatmap, write_json, write_ppm
from parcellation.tensor import IGNORE_LABEL

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """counts[t, p] = pixels with groundtruth t predicted as p."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def misclassified(self) -> int:
        return self.total - int(np.trace(self.counts))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError("confusion matrices have different class counts")
        return ConfusionMatrix(self.counts + other.counts)


def _valid_mask(gt: np.ndarray, ignore: Optional[np.ndarray]) -> np.ndarray:
    valid = gt != IGNORE_LABEL
    if ignore is not None:
        ignore = np.asarray(ignore, dtype=bool)
        if ignore.shape != gt.shape:
            raise ValueError(f"ignore mask shape {ignore.shape} does not match {gt.shape}")
        valid &= ~ignore
    return valid


def confusion_matrix(
    pred: np.ndarray,
    gt: np.ndarray,
    ignore: Optional[np.ndarray] = None,
    num_classes: Optional[int] = None,
) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match groundtruth {gt.shape}")
    valid = _valid_mask(gt, ignore)
    t, p = gt[valid], pred[valid]
    if num_classes is None:
        num_classes = int(max(t.max(initial=-1), p.max(initial=-1))) + 1
    if t.size and (t.max() >= num_classes or p.max() >= num_classes or min(t.min(), p.min()) < 0):
        raise ValueError(f"labels outside [0, {num_classes})")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64))


def dice(cm: ConfusionMatrix) -> Tuple[np.ndarray, float]:
    """Per-class Dice (NaN for classes absent from both images) and their mean."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), np.nan)
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest true pixel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance transform of an empty mask is undefined")
    return ndimage.distance_transform_edt(~mask)


def pixel_distance_error(
    pred: np.ndarray,
    gt: np.ndarray,
    ignore: Optional[np.ndarray] = None,
) -> Tuple[float, float, int, int]:
    """(eps_tau, eps, A, N) for one label image pair.

    Each misclassified pixel costs the squared distance to the nearest
    non-ignored groundtruth pixel of its predicted class; classes missing from
    the groundtruth cost the squared image diagonal.
    """
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match groundtruth {gt.shape}")
    valid = _valid_mask(gt, ignore)
    evaluated = int(valid.sum())
    if evaluated == 0:
        raise ValueError("no evaluated pixels: every pixel is ignored")
    wrong = valid & (pred != gt)
    cap = math.hypot(*gt.shape)
    eps_tau = 0.0
    for cls in np.unique(pred[wrong]):
        where = wrong & (pred == cls)
        truth = valid & (gt == cls)
        if truth.any():
            eps_tau += float((distance_transform(truth)[where] ** 2).sum())
        else:
            eps_tau += cap ** 2 * int(where.sum())
    return eps_tau, epsilon_from(eps_tau, evaluated), evaluated, int(wrong.sum())


def epsilon_from(eps_tau: float, evaluated: int) -> float:
    return 100.0 * math.sqrt(eps_tau) / evaluated


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    epsilon_tau: float
    evaluated: int
    class_names: List[str] = field(default_factory=list)
    sections: int = 1

    @property
    def per_class_dice(self) -> np.ndarray:
        return dice(self.confusion)[0]

    @property
    def mean_dice(self) -> float:
        return dice(self.confusion)[1]

    @property
    def epsilon(self) -> float:
        return epsilon_from(self.epsilon_tau, self.evaluated) if self.evaluated else float("nan")

    @property
    def misclassified(self) -> int:
        return self.confusion.misclassified

    def class_dice(self, classes: Iterable[int]) -> float:
        values = [self.per_class_dice[c] for c in classes]
        values = [v for v in values if not np.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    @classmethod
    def combine(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        if not reports:
            raise ValueError("nothing to combine")
        confusion = reports[0].confusion
        for report in reports[1:]:
            confusion = confusion + report.confusion
        return cls(
            confusion=confusion,
            epsilon_tau=sum(r.epsilon_tau for r in reports),
            evaluated=sum(r.evaluated for r in reports),
            class_names=reports[0].class_names,
            sections=sum(r.sections for r in reports),
        )

    def to_json(self) -> dict:
        def clean(value: float):
            return None if np.isnan(value) else round(float(value), 6)

        return {
            "mean_dice": clean(self.mean_dice),
            "per_class_dice": [clean(v) for v in self.per_class_dice],
            "epsilon_tau": self.epsilon_tau,
            "epsilon": clean(self.epsilon),
            "evaluated_pixels": self.evaluated,
            "misclassified": self.misclassified,
            "sections": self.sections,
            "class_names": self.class_names,
            "confusion": self.confusion.counts.tolist(),
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_json(directory / "report.json", self.to_json())
        write_ppm(directory / "confusion.ppm", confusion_image(self.confusion))
        self.to_workbook(directory / "report.xlsx")

    def to_workbook(self, path) -> None:
        wb = Workbook()
        ws = wb.active
        ws.title = "Dice"
        ws.append(["Class", "Name", "Dice", "Groundtruth pixels", "Predicted pixels"])
        counts = self.confusion.counts
        for idx, value in enumerate(self.per_class_dice):
            name = self.class_names[idx] if idx < len(self.class_names) else str(idx)
            ws.append([
                idx,
                name,
                None if np.isnan(value) else float(value),
                int(counts[idx].sum()),
                int(counts[:, idx].sum()),
            ])
        ws.append([])
        ws.append(["Mean Dice", None, None if np.isnan(self.mean_dice) else self.mean_dice])
        ws.append(["Epsilon", None, self.epsilon])
        ws.append(["Evaluated pixels", None, self.evaluated])
        ws.append(["Misclassified", None, self.misclassified])

        cm = wb.create_sheet("Confusion")
        cm.append(["gt \\ pred"] + list(range(self.confusion.num_classes)))
        for idx, row in enumerate(counts):
            cm.append([idx] + [int(v) for v in row])
        wb.save(path)


def confusion_image(cm: ConfusionMatrix, cell: int = 16) -> np.ndarray:
    """Row-normalised confusion matrix as an RGB raster, ``cell`` pixels per entry."""
    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        normalised = np.where(rows > 0, counts / np.where(rows > 0, rows, 1), np.nan)
    rgb = heatmap(normalised, 0.0, 1.0)
    return np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)


def evaluate_labels(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    ignore: Optional[np.ndarray] = None,
    class_names: Sequence[str] = (),
) -> EvalReport:
    cm = confusion_matrix(pred, gt, ignore, num_classes)
    if cm.total == 0:
        raise ValueError("no evaluated pixels: every pixel is ignored")
    eps_tau, _, evaluated, _ = pixel_distance_error(pred, gt, ignore)
    return EvalReport(confusion=cm, epsilon_tau=eps_tau, evaluated=evaluated, class_names=list(class_names))
