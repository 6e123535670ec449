"""Image-quality metrics, recognition accuracy, a k-NN probe, a softmax-regression
probe and the convergence-epoch rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, make_rng
from .nn import resize2d

LUMA = np.array([0.299, 0.587, 0.114])
FEATURE_SIDE = 16


def mse(a, b) -> float:
    """Mean squared difference over every pixel and channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, max_i: float = 1.0) -> float:
    if not max_i > 0:
        raise ValueError("max_i must be positive")
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(max_i**2 / err))


def psnr(a, b, max_i: float = 1.0) -> float:
    """``10 log10(max_i^2 / mse)``; identical images give ``inf``."""
    return psnr_from_mse(mse(a, b), max_i)


def accuracy(tp: int = 0, tn: int = 0, fp: int = 0, fn: int = 0) -> float:
    counts = (tp, tn, fp, fn)
    if any(c < 0 for c in counts):
        raise ValueError("confusion counts must be non-negative")
    total = sum(counts)
    if total == 0:
        raise ValueError("accuracy of an empty confusion table is undefined")
    return (tp + tn) / total


def confusion_matrix(true, pred, n_classes: int | None = None) -> np.ndarray:
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if true.shape != pred.shape:
        raise ShapeError("label vectors differ in length")
    n = n_classes if n_classes is not None else int(max(true.max(initial=-1), pred.max(initial=-1)) + 1)
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def multiclass_accuracy(cm: np.ndarray) -> float:
    """Overall accuracy (trace / total) of a confusion matrix."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion table is undefined")
    return float(np.trace(cm) / total)


def image_features(images, side: int = FEATURE_SIDE) -> np.ndarray:
    """Luma, downsampled to ``side x side`` and flattened: (N, C, H, W) -> (N, side^2)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    gray = np.einsum("c,nchw->nhw", LUMA, images) if images.shape[1] == 3 else images.mean(axis=1)
    return resize2d(gray, side, side).reshape(len(images), -1)


def knn_predict(train_x, train_y, test_x, k: int = 5) -> np.ndarray:
    """k-NN on feature vectors.

    Neighbours are ordered by (distance, label).  The most frequent label
    wins; ties go to the label with the smaller summed neighbour distance,
    then to the smaller label.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=int)
    test_x = np.asarray(test_x, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(train_x) == 0:
        raise ValueError("k-NN needs a non-empty training set")
    k = min(k, len(train_x))
    d2 = (test_x**2).sum(1)[:, None] + (train_x**2).sum(1)[None, :] - 2.0 * test_x @ train_x.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    out = np.empty(len(test_x), dtype=int)
    for i, row in enumerate(dist):
        nn = np.lexsort((train_y, row))[:k]
        labels, counts = np.unique(train_y[nn], return_counts=True)
        best = labels[counts == counts.max()]
        if best.size > 1:
            sums = np.array([row[nn][train_y[nn] == lab].sum() for lab in best])
            best = best[sums == sums.min()]
        out[i] = best.min()
    return out


def knn_classify(train_images, train_labels, test_images, k: int = 5) -> np.ndarray:
    """k-NN over 16x16 grayscale flattenings of (N, C, H, W) images."""
    return knn_predict(image_features(train_images), train_labels, image_features(test_images), k)


def convergence_epochs(curve, band: float = 0.01) -> int:
    """First epoch (1-based) from which every later value stays within ``band`` of the final one."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        raise ValueError("empty metric curve")
    outside = np.flatnonzero(np.abs(curve - curve[-1]) > band + 1e-12)
    return int(outside[-1] + 2) if outside.size else 1


def softmax_probe(
    train_x,
    train_y,
    val_x,
    val_y,
    n_classes: int,
    epochs: int = 100,
    lr: float = 0.5,
    batch_size: int = 16,
    seed: int = 0,
) -> list[float]:
    """Multinomial logistic regression trained by mini-batch SGD on standardised
    features; returns validation accuracy after every epoch."""
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=int)
    val_y = np.asarray(val_y, dtype=int)
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-8
    xt, xv = (train_x - mu) / sd, (val_x - mu) / sd
    w = np.zeros((xt.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[train_y]
    rng = make_rng(seed, 11)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(xt))
        for s in range(0, len(xt), batch_size):
            idx = order[s : s + batch_size]
            logits = xt[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            w -= lr * xt[idx].T @ g
            b -= lr * g.sum(axis=0)
        curve.append(float(np.mean(np.argmax(xv @ w + b, axis=1) == val_y)))
    return curve


@dataclass
class MetricReport:
    psnr_db: float
    mse: float
    per_state_accuracy: dict = field(default_factory=dict)
    convergence_epochs: int | None = None

    def to_dict(self) -> dict:
        return {
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "mse": self.mse,
            "per_state_accuracy": self.per_state_accuracy,
            "convergence_epochs": self.convergence_epochs,
        }


def per_class_accuracy(true, pred, names=None) -> dict:
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    out = {}
    for lab in np.unique(true):
        key = names[lab] if names is not None else int(lab)
        out[key] = float(np.mean(pred[true == lab] == lab))
    return out
