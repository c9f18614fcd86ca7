"""Volume-level evaluation metrics, rank statistics, and uncertainty analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class UncertaintyStats:
    correct_quartiles: tuple[float, float, float] | None
    incorrect_quartiles: tuple[float, float, float] | None
    pearson_r: float | None  # binned error-rate vs uncertainty correlation


@dataclass
class MetricsReport:
    dsc: dict[int, float] = field(default_factory=dict)   # per class id
    ravd: dict[int, float | None] = field(default_factory=dict)
    auc: float | None = None
    uncertainty: UncertaintyStats | None = None


def dsc_3d(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Dice similarity over the whole volume; 1.0 when both sets are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def ravd(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float | None:
    """Relative absolute volume difference in percent; None if gt is empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    np_, ng = int((pred == class_id).sum()), int((gt == class_id).sum())
    if ng == 0:
        return None
    return 100.0 * abs(np_ - ng) / ng


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def patient_auc(scores, labels) -> float:
    """Rank-based AUC (ties count one half). Both classes must be present."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores/labels length mismatch")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative patients")
    ranks = _midranks(scores)
    r_pos = ranks[labels == 1].sum()
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mann_whitney_u(a, b) -> tuple[float, float]:
    """Two-sided rank-sum test via the normal approximation.

    Returns (U, p) where U = min(U_a, U_b), midranks handle ties, the
    variance is tie-corrected, and a 0.5 continuity correction is applied.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u2 = n1 * n2 - u1
    u = min(u1, u2)
    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float((counts ** 3 - counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return u, 1.0  # every observation tied
    mu = n1 * n2 / 2.0
    z = (u - mu + 0.5) / math.sqrt(var)  # u <= mu by construction
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))  # 2 * Phi(z) for z <= 0
    return u, p


def quartiles(values: np.ndarray) -> tuple[float, float, float]:
    """Q1/Q2/Q3 with linear interpolation between order statistics."""
    q = np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75],
                    method="linear")
    return float(q[0]), float(q[1]), float(q[2])


def pearson_r(x: np.ndarray, y: np.ndarray) -> float | None:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = x - x.mean(), y - y.mean()
    den = math.sqrt(float((xm * xm).sum()) * float((ym * ym).sum()))
    if den == 0:
        return None
    return float((xm * ym).sum() / den)


def mc_uncertainty(model, volume: np.ndarray, labels: np.ndarray,
                   samples: int, rng: np.random.Generator):
    """Per-pixel std over MC forwards of the true-class probability, plus the
    eval-mode correctness mask."""
    if samples < 2:
        raise ValueError("need at least 2 Monte-Carlo samples")
    x = Tensor(volume)
    logits, _ = model.forward(x, mode="eval")
    probs_eval = _softmax_np(logits.data)
    pred = probs_eval.argmax(axis=1)
    correct = pred == labels
    l, h, w = labels.shape
    ll, hh, ww = np.meshgrid(np.arange(l), np.arange(h), np.arange(w),
                             indexing="ij")
    draws = np.empty((samples, l, h, w))
    for s in range(samples):
        lg, _ = model.forward(x, mode="train", rng=rng)
        p = _softmax_np(lg.data)
        draws[s] = p[ll, labels, hh, ww]
    return draws.std(axis=0), correct


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def uncertainty_error_report(model, dataset, samples: int = 20,
                             bins: int = 20,
                             rng: np.random.Generator | None = None) -> UncertaintyStats:
    """Quartiles of MC uncertainty for correct/incorrect pixels and the
    correlation between bin-mean uncertainty and bin error rate over
    equal-population bins."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    unc_all, corr_all = [], []
    for v in dataset:
        unc, correct = mc_uncertainty(model, v.data, v.labels, samples, rng)
        unc_all.append(unc.reshape(-1))
        corr_all.append(correct.reshape(-1))
    unc = np.concatenate(unc_all)
    correct = np.concatenate(corr_all)
    cq = quartiles(unc[correct]) if correct.any() else None
    iq = quartiles(unc[~correct]) if (~correct).any() else None
    r = None
    if (~correct).any() and correct.any():
        order = np.argsort(unc, kind="stable")
        edges = np.linspace(0, len(order), bins + 1).astype(int)
        bx, by = [], []
        for i in range(bins):
            sel = order[edges[i]:edges[i + 1]]
            if len(sel) == 0:
                continue
            bx.append(unc[sel].mean())
            by.append(1.0 - correct[sel].mean())
        r = pearson_r(np.array(bx), np.array(by))
    return UncertaintyStats(correct_quartiles=cq, incorrect_quartiles=iq,
                            pearson_r=r)


def evaluate_volumes(model, dataset, foreground_classes=None) -> MetricsReport:
    """Eval-mode segmentation metrics over a dataset of labeled volumes."""
    if not dataset:
        raise ValueError("empty dataset")
    k = model.cfg.num_classes
    classes = foreground_classes if foreground_classes is not None else range(1, k)
    per_class_dsc = {c: [] for c in classes}
    per_class_ravd = {c: [] for c in classes}
    for v in dataset:
        logits, _ = model.forward(Tensor(v.data), mode="eval")
        pred = logits.data.argmax(axis=1)
        for c in classes:
            per_class_dsc[c].append(dsc_3d(pred, v.labels, c))
            rv = ravd(pred, v.labels, c)
            if rv is not None:
                per_class_ravd[c].append(rv)
    report = MetricsReport()
    for c in classes:
        report.dsc[c] = float(np.mean(per_class_dsc[c]))
        report.ravd[c] = (float(np.mean(per_class_ravd[c]))
                          if per_class_ravd[c] else None)
    return report
