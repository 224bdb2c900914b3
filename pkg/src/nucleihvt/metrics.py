"""Hard-mask IoU / Dice, class-wise reports and error maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Error-map colors by predicted class; correct pixels are white.
PALETTE = np.array(
    [
        (0, 0, 0),  # background
        (220, 20, 60),  # epithelial / nucleus
        (0, 160, 0),  # lymphocyte
        (30, 80, 255),  # macrophage
        (255, 165, 0),  # neutrophil
        (148, 0, 211),
        (0, 206, 209),
        (128, 128, 0),
    ],
    dtype=np.uint8,
)
WHITE = np.array((255, 255, 255), dtype=np.uint8)


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {truth.shape}")


def iou(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    """|T ∩ P| / |T ∪ P| for class ``k``; 1.0 when the class is absent from both."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_pair(pred, truth)
    p, t = pred == k, truth == k
    union = np.count_nonzero(p | t)
    return 1.0 if union == 0 else np.count_nonzero(p & t) / union


def dice(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    """2|T ∩ P| / (|T| + |P|) for class ``k``; 1.0 when the class is absent from both."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_pair(pred, truth)
    p, t = pred == k, truth == k
    total = np.count_nonzero(p) + np.count_nonzero(t)
    return 1.0 if total == 0 else 2 * np.count_nonzero(p & t) / total


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Pixel counts with rows indexed by true class and columns by predicted class."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_pair(pred, truth)
    for name, m in (("prediction", pred), ("ground truth", truth)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} contains labels outside [0, {num_classes})")
    flat = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    iou: np.ndarray
    dice: np.ndarray
    present: np.ndarray

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "MetricsReport":
        confusion = np.asarray(confusion, dtype=np.int64)
        inter = np.diag(confusion)
        truth = confusion.sum(axis=1)
        pred = confusion.sum(axis=0)
        union = truth + pred - inter
        present = union > 0
        safe = np.where(present, union, 1)
        iou_ = np.where(present, inter / safe, 1.0)
        dice_ = np.where(present, 2 * inter / np.where(present, truth + pred, 1), 1.0)
        return cls(confusion, iou_, dice_, present)

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def _mean(self, values: np.ndarray, start: int = 0) -> float:
        mask = self.present.copy()
        mask[:start] = False
        return float(values[mask].mean()) if mask.any() else 1.0

    @property
    def miou(self) -> float:
        return self._mean(self.iou)

    @property
    def mdice(self) -> float:
        return self._mean(self.dice)

    @property
    def miou_fg(self) -> float:
        return self._mean(self.iou, start=1)

    @property
    def mdice_fg(self) -> float:
        return self._mean(self.dice, start=1)

    def as_dict(self) -> dict[str, float]:
        out = {}
        for k in range(self.num_classes):
            out[f"iou.{k}"] = float(self.iou[k])
            out[f"dice.{k}"] = float(self.dice[k])
        out.update(
            {"iou.mean": self.miou, "dice.mean": self.mdice, "iou.mean_fg": self.miou_fg, "dice.mean_fg": self.mdice_fg}
        )
        return out

    def to_keyvalue(self) -> str:
        """One ``metric.class=value`` line per entry, four decimals."""
        lines = [f"{key}={value:.4f}" for key, value in self.as_dict().items()]
        for t in range(self.num_classes):
            for p in range(self.num_classes):
                lines.append(f"confusion.{t}_{p}={int(self.confusion[t, p])}")
        return "\n".join(lines) + "\n"

    def to_text(self, class_names=None) -> str:
        names = list(class_names or [str(k) for k in range(self.num_classes)])
        width = max(8, *(len(n) for n in names))
        lines = [f"{'class':<{width}}  {'IoU':>7}  {'Dice':>7}  {'pixels':>9}"]
        for k, name in enumerate(names):
            mark = "" if self.present[k] else "  (absent)"
            lines.append(f"{name:<{width}}  {self.iou[k]:7.4f}  {self.dice[k]:7.4f}  {self.confusion[k].sum():9d}{mark}")
        lines.append(f"{'mean':<{width}}  {self.miou:7.4f}  {self.mdice:7.4f}")
        lines.append(f"{'mean(fg)':<{width}}  {self.miou_fg:7.4f}  {self.mdice_fg:7.4f}")
        return "\n".join(lines) + "\n"


def classwise_report(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> MetricsReport:
    return MetricsReport.from_confusion(confusion_matrix(pred, truth, num_classes))


def render_error_map(pred: np.ndarray, truth: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """H x W x 3 uint8 image: white where correct, palette[pred] where wrong."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_pair(pred, truth)
    palette = np.asarray(palette, dtype=np.uint8)
    if pred.size and pred.max() >= len(palette):
        raise ValueError(f"palette has {len(palette)} colors but prediction uses class {pred.max()}")
    out = palette[pred]
    out[pred == truth] = WHITE
    return out
