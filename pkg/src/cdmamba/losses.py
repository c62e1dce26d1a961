"""Segmentation objective (BCE + weighted Dice) and binary confusion metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, as_tensor, mul, record_op


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0        # Dice weight
    epsilon: float = 1.0      # Dice smoother
    bce_clamp: float = 1e-7   # probabilities are clipped to [clamp, 1 - clamp]

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.bce_clamp < 0.5:
            raise ValueError(f"bce_clamp must lie in (0, 0.5), got {self.bce_clamp}")


def _target(y: Tensor, t) -> np.ndarray:
    t = np.asarray(getattr(t, "data", t), dtype=y.dtype)
    if t.shape != y.shape:
        raise ValueError(f"prediction {y.shape} and target {t.shape} differ in shape")
    return t


def _binary_target(y: Tensor, t) -> np.ndarray:
    t = _target(y, t)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("BCE target must be binary (0 or 1)")
    return t


def bce_loss(y: Tensor, t, clamp: float = 1e-7) -> Tensor:
    """Mean of ``-(t log y + (1 - t) log(1 - y))`` with ``y`` clipped away from 0 and 1."""
    t = _binary_target(y, t)
    yd = y.data
    yc = np.clip(yd, clamp, 1.0 - clamp)
    n = yd.size
    val = -np.mean(t * np.log(yc) + (1.0 - t) * np.log1p(-yc))
    inside = (yd >= clamp) & (yd <= 1.0 - clamp)

    def vjp(g):
        # the clip has zero derivative outside the admissible band
        dy = np.where(inside, (yc - t) / (yc * (1.0 - yc)), 0.0) / n
        return (g * dy,)

    return record_op("bce_loss", np.asarray(val, dtype=y.dtype), (y,), vjp)


def dice_loss(y: Tensor, t, epsilon: float = 1.0) -> Tensor:
    """``1 - (2 sum(y t) + eps) / (sum y + sum t + eps)``.

    A ``[b, H, W]`` batch is scored per sample and averaged; any other rank is
    treated as a single sample.
    """
    t = _target(y, t)
    yd = y.data
    if yd.ndim == 3:
        axes, count = (1, 2), yd.shape[0]
    else:
        axes, count = None, 1
    inter = np.sum(yd * t, axis=axes, keepdims=axes is not None)
    denom = np.sum(yd, axis=axes, keepdims=axes is not None) + np.sum(t, axis=axes, keepdims=axes is not None) + epsilon
    num = 2.0 * inter + epsilon
    val = np.mean(1.0 - num / denom)

    def vjp(g):
        dy = -(2.0 * t * denom - num) / (denom * denom) / count
        return (g * dy,)

    return record_op("dice_loss", np.asarray(val, dtype=y.dtype), (y,), vjp)


def overall_loss(y: Tensor, t, config: LossConfig = LossConfig()) -> Tensor:
    bce = bce_loss(y, t, config.bce_clamp)
    if config.gamma == 0:
        return bce
    return add(bce, mul(dice_loss(y, t, config.epsilon), as_tensor(config.gamma, like=y)))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        # an empty denominator means the class is absent from both prediction and truth
        return 1.0 if den == 0 else num / den

    def iou_cloud(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp + self.fn)

    def iou_background(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp + self.fn)

    def miou(self) -> float:
        return 0.5 * (self.iou_cloud() + self.iou_background())

    def f1(self) -> float:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("accuracy of an empty confusion table")
        return (self.tp + self.tn) / self.total

    def as_dict(self) -> dict[str, float]:
        return {"miou": self.miou(), "f1": self.f1(), "acc": self.accuracy()}


def binarize(y, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(getattr(y, "data", y)) > threshold


def confusion(y, t, threshold: float = 0.5) -> ConfusionCounts:
    """Pixel counts with ``y > threshold`` as the cloud prediction."""
    pred = binarize(y, threshold)
    truth = np.asarray(getattr(t, "data", t)) > 0.5
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics(y, t, threshold: float = 0.5) -> dict[str, float]:
    return confusion(y, t, threshold).as_dict()


def format_report(values: dict[str, float], prefix: str = "") -> str:
    """``miou=... f1=... acc=...`` line (17 significant digits)."""
    body = " ".join(f"{k}={values[k]:.17g}" for k in ("miou", "f1", "acc"))
    return f"{prefix}{body}" if prefix else body


def parse_report(line: str) -> dict[str, float]:
    out = {}
    for tok in line.split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            if k in ("miou", "f1", "acc"):
                out[k] = float(v)
    return out
