"""Cross-entropy + soft Dice training loss and overlap metrics.

Probability volumes are ``[K,H,W,D]``; label volumes are integer ``[H,W,D]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, LabelError, ShapeError

CE_EPS = 1e-12
DICE_EPS = 1e-7


def _check_pair(probs, labels):
    if probs.ndim != labels.ndim + 1 or probs.shape[1:] != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    k = probs.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    return (np.arange(k).reshape((k,) + (1,) * labels.ndim) == labels[None]).astype(tc.DTYPE)


def cross_entropy(probs: np.ndarray, labels: np.ndarray, eps: float = CE_EPS) -> float:
    """Mean over voxels of ``-log p[true class]``, with ``p`` clamped to ``[eps, 1]``."""
    _check_pair(probs, labels)
    p_true = np.take_along_axis(probs, labels[None].astype(np.intp), axis=0)[0]
    return float(-np.mean(np.log(np.clip(p_true, eps, 1.0))))


def _dice_terms(probs, labels, binary):
    if binary:
        p = (1.0 - probs[0])[None]
        y = (labels != 0).astype(tc.DTYPE)[None]
    else:
        p = probs
        y = one_hot(labels, probs.shape[0])
    axes = tuple(range(1, p.ndim))
    inter = (y * p).sum(axis=axes)
    ysum = y.sum(axis=axes)
    psum = p.sum(axis=axes)
    return p, y, inter, ysum, psum


def dice_loss(probs: np.ndarray, labels: np.ndarray, eps: float = DICE_EPS, binary: bool = False) -> float:
    """``1 - mean_c 2*sum(Y_c P_c) / (sum Y_c + sum P_c + eps)`` over classes present in truth.

    With ``binary`` the classes collapse to foreground (any nonzero label)
    versus background and only the foreground overlap is scored.
    """
    _check_pair(probs, labels)
    _, _, inter, ysum, psum = _dice_terms(probs, labels, binary)
    present = ysum > 0
    if not present.any():
        return 0.0
    dice = 2.0 * inter[present] / (ysum[present] + psum[present] + eps)
    return float(1.0 - dice.mean())


def combined_loss(probs, labels, lam: float, binary_dice: bool = False) -> Tuple[float, Tuple[float, float]]:
    """``L = L_CE + lam * L_Dice``; returns ``(L, (L_CE, L_Dice))``."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    ce = cross_entropy(probs, labels)
    dl = dice_loss(probs, labels, binary=binary_dice)
    return ce + lam * dl, (ce, dl)


def combined_loss_from_logits(logits: np.ndarray, labels: np.ndarray, lam: float,
                              binary_dice: bool = False):
    """Loss of ``softmax(logits)`` over the class axis and its gradient w.r.t. ``logits``.

    Returns ``(L, L_CE, L_Dice, dlogits)``.
    """
    probs = tc.softmax(logits, axis=0)
    loss, (ce, dl) = combined_loss(probs, labels, lam, binary_dice)
    n = labels.size

    dprobs = np.zeros_like(probs)
    lab = labels[None].astype(np.intp)
    p_true = np.take_along_axis(probs, lab, axis=0)
    g_true = np.where(p_true > CE_EPS, -1.0 / (n * p_true), 0.0)
    np.put_along_axis(dprobs, lab, g_true, axis=0)

    if lam:
        p, y, inter, ysum, psum = _dice_terms(probs, labels, binary_dice)
        present = ysum > 0
        if present.any():
            denom = ysum + psum + DICE_EPS
            coef = np.where(present, -2.0 / present.sum() / denom**2, 0.0)
            shape = (-1,) + (1,) * labels.ndim
            dp = coef.reshape(shape) * (y * denom.reshape(shape) - inter.reshape(shape))
            if binary_dice:
                dprobs[0] -= lam * dp[0]
            else:
                dprobs += lam * dp

    return loss, ce, dl, tc.softmax_backward(dprobs, probs, axis=0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    confusion: np.ndarray  # [K, K], rows = truth, cols = prediction
    per_class_iou: List[float]
    per_class_dice: List[float]
    per_class_recall: List[float]
    present: List[bool]
    included: List[bool]
    mIoU: float
    mDice: float
    mAcc: float

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"mIoU  {self.mIoU:.6f}")
        lines.append(f"mDice {self.mDice:.6f}")
        lines.append(f"mAcc  {self.mAcc:.6f}")
        lines.append("class  present  IoU       Dice      recall")
        for c in range(self.num_classes):
            lines.append(
                f"{c:<6d} {'yes' if self.present[c] else 'no':<8s} "
                f"{self.per_class_iou[c]:<9.6f} {self.per_class_dice[c]:<9.6f} {self.per_class_recall[c]:.6f}"
            )
        lines.append("confusion (rows truth, cols prediction):")
        for row in self.confusion:
            lines.append("  " + " ".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def _ratio(num, den):
    return num / den if den else float("nan")


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray, k: int,
                         include_background: bool = True) -> MetricsReport:
    """Confusion-matrix overlap metrics, averaged over classes present in ``truth``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelError(f"{name} labels must lie in [0, {k})")
    flat = truth.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
    confusion = np.bincount(flat, minlength=k * k).reshape(k, k)

    iou, dice, recall, present = [], [], [], []
    for c in range(k):
        tp = int(confusion[c, c])
        fn = int(confusion[c].sum()) - tp
        fp = int(confusion[:, c].sum()) - tp
        iou.append(_ratio(tp, tp + fp + fn))
        dice.append(_ratio(2 * tp, 2 * tp + fp + fn))
        recall.append(_ratio(tp, tp + fn))
        present.append(tp + fn > 0)
    included = [p and (include_background or c != 0) for c, p in enumerate(present)]

    def mean(vals):
        chosen = [v for v, inc in zip(vals, included) if inc]
        return sum(chosen) / len(chosen) if chosen else float("nan")

    return MetricsReport(confusion, iou, dice, recall, present, included,
                         mean(iou), mean(dice), mean(recall))
