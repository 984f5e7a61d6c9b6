"""Trial scoring, EER / minDCF and a linear age probe."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .syndata import Trial


@dataclass(frozen=True)
class DetMetrics:
    eer: float  # percent
    eer_threshold: float
    min_dcf: float
    dcf_threshold: float
    n_target: int
    n_nontarget: int


def score_trials(embeddings: Mapping[str, np.ndarray], trials: Sequence[Trial]) -> np.ndarray:
    """Cosine similarity of each (enroll, test) pair."""
    missing = sorted({u for t in trials for u in (t.enroll_utt, t.test_utt)} - set(embeddings))
    if missing:
        raise KeyError(f"{len(missing)} trial ids have no embedding: {missing[:5]}")
    a = np.stack([embeddings[t.enroll_utt] for t in trials]).astype(np.float64)
    b = np.stack([embeddings[t.test_utt] for t in trials]).astype(np.float64)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise ValueError("zero-norm embedding in trial list")
    return np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)


def _labels(labels) -> np.ndarray:
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("need at least one target and one nontarget trial")
    return labels


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, p_miss, p_fa) for 'accept iff score >= threshold'.

    Thresholds are +inf (reject all) followed by the distinct scores in
    descending order, so tied scores are accepted together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _labels(labels)
    order = np.lexsort((~labels, -scores))  # score descending, targets first on ties
    s, lab = scores[order], labels[order]
    n_tar, n_non = lab.sum(), (~lab).sum()
    tar_acc = np.cumsum(lab)
    non_acc = np.cumsum(~lab)
    last_of_tie = np.r_[s[1:] != s[:-1], True]
    thresholds = np.r_[np.inf, s[last_of_tie]]
    p_miss = np.r_[1.0, 1.0 - tar_acc[last_of_tie] / n_tar]
    p_fa = np.r_[0.0, non_acc[last_of_tie] / n_non]
    return thresholds, p_miss, p_fa


def eer_from_points(thresholds, p_miss, p_fa) -> tuple[float, float]:
    """Interpolated crossing of the miss and false-alarm curves (as a fraction)."""
    diff = p_miss - p_fa  # starts at 1, ends <= 0, non-increasing
    k = int(np.flatnonzero(diff <= 0)[0])
    if k == 0 or diff[k] == 0:
        return float(p_fa[k]), float(thresholds[k])
    d0, d1 = diff[k - 1], diff[k]
    w = d0 / (d0 - d1)
    rate = p_fa[k - 1] + w * (p_fa[k] - p_fa[k - 1])
    t0, t1 = thresholds[k - 1], thresholds[k]
    thr = t1 if not np.isfinite(t0) else t0 + w * (t1 - t0)
    return float(rate), float(thr)


def eer(scores, labels, greater_is_target: bool = True) -> tuple[float, float]:
    """Equal error rate in percent and the (interpolated) threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    if not greater_is_target:
        rate, thr = eer(-scores, labels)
        return rate, -thr
    rate, thr = eer_from_points(*operating_points(scores, labels))
    return 100.0 * rate, thr


def eer_exact(scores, labels) -> float:
    """Percent error at the observed threshold where miss and false alarm are closest."""
    _, p_miss, p_fa = operating_points(scores, labels)
    k = int(np.argmin(np.abs(p_miss - p_fa)))
    return 100.0 * float(max(p_miss[k], p_fa[k]))


def min_dcf(scores, labels, p_target: float = 0.01, c_fa: float = 1.0,
            c_miss: float = 1.0) -> tuple[float, float]:
    """Normalised minimum detection cost and its threshold."""
    thresholds, p_miss, p_fa = operating_points(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    k = int(np.argmin(cost))
    return float(cost[k] / norm), float(thresholds[k])


def det_metrics(scores, labels, p_target: float = 0.01, c_fa: float = 1.0,
                c_miss: float = 1.0) -> DetMetrics:
    labels = _labels(labels)
    e, et = eer(scores, labels)
    d, dt = min_dcf(scores, labels, p_target, c_fa, c_miss)
    return DetMetrics(e, et, d, dt, int(labels.sum()), int((~labels).sum()))


def format_report(rows: Mapping[str, DetMetrics]) -> str:
    lines = ["trial_set\teer_pct\tmin_dcf\tn_target\tn_nontarget"]
    for name, m in rows.items():
        lines.append(f"{name}\t{m.eer:.4f}\t{m.min_dcf:.4f}\t{m.n_target}\t{m.n_nontarget}")
    return "\n".join(lines) + "\n"


def _in_fit_half(utt: str) -> bool:
    return hashlib.sha256(utt.encode()).digest()[0] % 2 == 0


def age_probe(embeddings: Mapping[str, np.ndarray], groups: Mapping[str, int],
              steps: int = 1000, lr: float | None = None) -> float:
    """Holdout accuracy (percent) of a softmax-regression age-group probe.

    Utterances are split into fit/holdout halves by a hash of their id;
    features are standardised with fit-half statistics.  Full-batch gradient
    descent; the default step is 1/L with L the largest eigenvalue of the
    fit-half Gram matrix (bias column included), which bounds the curvature.
    """
    ids = sorted(embeddings)
    labels = np.array([groups[u] for u in ids])
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("age probe needs at least two groups")
    x = np.stack([embeddings[u] for u in ids]).astype(np.float64)
    fit = np.array([_in_fit_half(u) for u in ids])
    if fit.all() or not fit.any():
        raise ValueError("age probe split left one half empty")
    y = np.searchsorted(classes, labels)
    mu, sd = x[fit].mean(0), x[fit].std(0) + 1e-8
    z = (x - mu) / sd
    zf, yf = z[fit], y[fit]
    if lr is None:
        aug = np.hstack([zf, np.ones((len(zf), 1))])
        lr = 1.0 / np.linalg.eigvalsh(aug.T @ aug / len(zf))[-1]
    onehot = np.eye(len(classes))[yf]
    w = np.zeros((z.shape[1], len(classes)))
    b = np.zeros(len(classes))
    for _ in range(steps):
        logits = zf @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(zf)
        w -= lr * zf.T @ g
        b -= lr * g.sum(axis=0)
    pred = np.argmax(z[~fit] @ w + b, axis=1)
    return 100.0 * float(np.mean(pred == y[~fit]))
