"""Metrics and frozen-feature probes.

Segmentation quality is scored from a confusion matrix (overall accuracy and
mean IoU over classes that actually occur); representation quality via a
cosine k-NN vote or a single linear layer trained on frozen features; and
feature attribution via per-dimension R^2 against a one-hot factor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .optim import AdamWState, adamw_init, adamw_step, cosine_lr, zero_grads
from .rng import stream
from .tensor import Tensor

from .dataio import UNLABELED


def confusion_matrix(predictions: np.ndarray, truth: np.ndarray,
                     n_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predictions.shape != truth.shape:
        raise ValidationError("prediction/truth length mismatch")
    keep = truth != UNLABELED
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truth[keep].astype(int), predictions[keep].astype(int)), 1)
    return conf


def overall_accuracy(conf: np.ndarray) -> float:
    total = conf.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    return float(np.trace(conf) / total)


def miou(conf: np.ndarray) -> tuple[dict[int, float], float]:
    """Per-class IoU and their mean; classes absent from both prediction and
    truth are excluded from the mean."""
    if conf.sum() == 0:
        raise ValidationError("empty confusion matrix")
    per_class: dict[int, float] = {}
    for k in range(conf.shape[0]):
        tp = conf[k, k]
        fn = conf[k].sum() - tp
        fp = conf[:, k].sum() - tp
        if tp + fp + fn == 0:
            continue
        per_class[k] = float(tp / (tp + fp + fn))
    return per_class, float(np.mean(list(per_class.values())))


def knn_probe(train_feats: np.ndarray, train_labels: np.ndarray,
              eval_feats: np.ndarray, eval_labels: np.ndarray,
              k: int = 20) -> float:
    """Cosine-distance k-NN majority vote; ties go to the nearest neighbor."""
    train_feats = np.asarray(train_feats, dtype=np.float64)
    eval_feats = np.asarray(eval_feats, dtype=np.float64)
    if train_feats.shape[1] != eval_feats.shape[1]:
        raise ValidationError("feature dimensions differ between splits")
    if k > train_feats.shape[0]:
        raise ValidationError(f"k={k} exceeds {train_feats.shape[0]} train samples")
    tn = train_feats / np.maximum(np.linalg.norm(train_feats, axis=1, keepdims=True), 1e-12)
    en = eval_feats / np.maximum(np.linalg.norm(eval_feats, axis=1, keepdims=True), 1e-12)
    sims = en @ tn.T
    correct = 0
    train_labels = np.asarray(train_labels)
    for i in range(en.shape[0]):
        order = np.argsort(-sims[i], kind="stable")[:k]
        votes = train_labels[order]
        counts = np.bincount(votes)
        winners = np.flatnonzero(counts == counts.max())
        if winners.size == 1:
            pred = winners[0]
        else:
            pred = next(v for v in votes if v in winners)  # nearest tied class
        correct += int(pred == eval_labels[i])
    return correct / en.shape[0]


def linear_probe(train_feats: np.ndarray, train_labels: np.ndarray,
                 eval_feats: np.ndarray, eval_labels: np.ndarray,
                 epochs: int = 50, lr: float = 1e-3, seed: int = 0) -> float:
    """Train one linear layer on frozen features (Adam, cosine schedule) and
    report overall accuracy on the eval split."""
    train_labels = np.asarray(train_labels)
    classes = int(train_labels.max()) + 1
    if classes < 2:
        raise ValidationError("linear probe needs at least two classes")
    d = train_feats.shape[1]
    rng = stream(seed, "linear-probe")
    w = Tensor(rng.normal(0.0, 0.01, size=(d, classes)), requires_grad=True)
    b = Tensor(np.zeros(classes), requires_grad=True)
    params = {"w": w, "b": b}
    opt: AdamWState = adamw_init(params)
    x = Tensor(np.asarray(train_feats, dtype=np.float64))
    for epoch in range(epochs):
        zero_grads(params)
        loss = T.cross_entropy(T.linear(x, w, b), train_labels)
        T.backward(loss)
        adamw_step(params, None, opt, cosine_lr(epoch, epochs, lr, lr * 1e-2),
                   weight_decay=0.0)
    logits = np.asarray(eval_feats) @ w.data + b.data
    conf = confusion_matrix(logits.argmax(axis=1), eval_labels, classes)
    return overall_accuracy(conf)


def variance_decomposition(feats: np.ndarray, factor_labels: np.ndarray) -> float:
    """Mean R^2 over feature dimensions of an OLS fit on the one-hot factor.

    One-hot OLS reduces to group means, so each dimension's R^2 is the
    between-group share of its variance. Constant dimensions count as 0.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(factor_labels)
    levels = np.unique(labels)
    if levels.size < 2:
        raise ValidationError("variance decomposition needs >= 2 factor levels")
    grand = feats.mean(axis=0)
    ss_tot = ((feats - grand) ** 2).sum(axis=0)
    ss_res = np.zeros_like(ss_tot)
    for lv in levels:
        group = feats[labels == lv]
        ss_res += ((group - group.mean(axis=0)) ** 2).sum(axis=0)
    r2 = np.zeros(feats.shape[1])
    nonconst = ss_tot > 0
    r2[nonconst] = 1.0 - ss_res[nonconst] / ss_tot[nonconst]
    return float(r2.mean())


def patch_majority_labels(labels: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch majority pixel label; UNLABELED when no class exceeds 50%."""
    h, w = labels.shape
    gh, gw = h // patch, w // patch
    out = np.full(gh * gw, UNLABELED, dtype=np.int64)
    cells = labels[:gh * patch, :gw * patch].reshape(gh, patch, gw, patch)
    cells = cells.transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)
    for i in range(gh * gw):
        vals, counts = np.unique(cells[i], return_counts=True)
        j = counts.argmax()
        if counts[j] * 2 > patch * patch:
            out[i] = vals[j]
    return out
