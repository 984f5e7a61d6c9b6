"""Variational Gaussian conditional q(x_age | x_id) and the CLUB-style MI terms.

The conditional is a diagonal Gaussian whose mean and log-variance are two
small MLPs of ``x_id``.  The log-variance branch ends in ``tanh`` so the
log-variance stays inside (-1, 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = math.log(2.0 * math.pi)
DENSITY_CLIP = 30.0


@dataclass(frozen=True)
class NegativePairing:
    indices: np.ndarray

    def validate(self, n: int) -> None:
        k = self.indices
        if k.shape != (n,) or k.min() < 0 or k.max() >= n or np.any(k == np.arange(n)):
            raise ValueError("invalid negative pairing")


def init_estimator(dim: int, rng: np.random.Generator, hidden: int | None = None,
                   dtype=np.float64) -> dict[str, np.ndarray]:
    hidden = 2 * dim if hidden is None else hidden
    p = {}
    for branch in ("mu", "lv"):
        p[f"mi.{branch}.0.w"] = rng.standard_normal((dim, hidden)) * np.sqrt(2.0 / dim)
        p[f"mi.{branch}.0.b"] = np.zeros(hidden)
        p[f"mi.{branch}.1.w"] = rng.standard_normal((hidden, dim)) * np.sqrt(1.0 / hidden)
        p[f"mi.{branch}.1.b"] = np.zeros(dim)
    # start near unit variance so early log-densities are moderate
    p["mi.lv.1.w"] *= 0.1
    return {k: v.astype(dtype) for k, v in p.items()}


def conditional_params(x_id, q: Mapping) -> tuple[Tensor, Tensor]:
    """Mean and log-variance of q(. | x_id) for a batch of conditioning rows."""
    x = dc.constant(x_id)
    c = dc.constant

    def branch(name):
        h = dc.relu(x @ c(q[f"mi.{name}.0.w"]) + c(q[f"mi.{name}.0.b"]))
        return h @ c(q[f"mi.{name}.1.w"]) + c(q[f"mi.{name}.1.b"])

    return branch("mu"), dc.tanh(branch("lv"))


def gaussian_log_density(x_age, mu, logvar) -> Tensor:
    """Row-wise diagonal Gaussian log-density, shape (N,)."""
    x = dc.constant(x_age)
    diff = x - mu
    per_dim = diff * diff * dc.exp(-logvar) + logvar + LOG_2PI
    return dc.sum(per_dim, axis=-1) * -0.5


def cond_log_density(x_id, x_age, q: Mapping) -> Tensor:
    """log q(x_age | x_id); accepts single vectors or (N, d) batches."""
    x_id, x_age = dc.constant(x_id), dc.constant(x_age)
    single = x_id.ndim == 1
    if single:
        x_id, x_age = dc.reshape(x_id, (1, -1)), dc.reshape(x_age, (1, -1))
    mu, lv = conditional_params(x_id, q)
    out = gaussian_log_density(x_age, mu, lv)
    return dc.reshape(out, ()) if single else out


def sample_negatives(n: int, rng: np.random.Generator) -> NegativePairing:
    """One negative per row, uniform over the other rows of the batch."""
    if n < 2:
        raise ValueError("negative sampling needs a batch of at least 2")
    k = rng.integers(0, n - 1, size=n)
    k = k + (k >= np.arange(n))
    return NegativePairing(k.astype(np.int64))


def contrastive_gap(pos: Tensor, neg: Tensor, weights=None) -> Tensor:
    """mean_i [pos_i - w_i * neg_i]; shared by the log- and probability-ratio losses."""
    if weights is not None:
        neg = neg * dc.constant(np.asarray(weights, dtype=neg.dtype))
    return dc.mean(pos - neg)


def _pair_log_densities(x_id, x_age, pairing: NegativePairing, q: Mapping):
    x_id, x_age = dc.constant(x_id), dc.constant(x_age)
    pairing.validate(x_id.shape[0])
    mu, lv = conditional_params(x_id, q)
    pos = gaussian_log_density(x_age, mu, lv)
    neg = gaussian_log_density(dc.take_rows(x_age, pairing.indices), mu, lv)
    return pos, neg


def mim_loss(x_id, x_age, pairing: NegativePairing, q: Mapping) -> Tensor:
    """Sampled log-ratio bound: mean of log q(pos) - log q(neg)."""
    pos, neg = _pair_log_densities(x_id, x_age, pairing, q)
    return contrastive_gap(pos, neg)


def aa_weight(age_i, age_k, lambda0: float = math.e):
    """log(|age gap in years| + lambda0); non-negative for lambda0 >= 1."""
    if lambda0 < 1:
        raise ValueError("lambda0 must be >= 1")
    gap = np.abs(np.asarray(age_i, dtype=np.float64) - np.asarray(age_k, dtype=np.float64))
    if np.any(np.asarray(age_i) < 0) or np.any(np.asarray(age_k) < 0):
        raise ValueError("ages must be non-negative")
    return np.log(gap + lambda0)


def clipped_density(log_q: Tensor, dim_scale: float = 1.0) -> Tensor:
    """exp(clip(log_q / dim_scale, -30, 30))."""
    if dim_scale != 1.0:
        log_q = log_q * (1.0 / dim_scale)
    return dc.exp(dc.clamp(log_q, -DENSITY_CLIP, DENSITY_CLIP))


def probability_ratio_loss(pos_log_q: Tensor, neg_log_q: Tensor, weights=None,
                           dim_scale: float = 1.0) -> Tensor:
    return contrastive_gap(clipped_density(pos_log_q, dim_scale),
                           clipped_density(neg_log_q, dim_scale), weights)


def aa_mim_loss(x_id, x_age, ages, pairing: NegativePairing, q: Mapping,
                lambda0: float = math.e, aging_aware: bool = True,
                per_dim: bool = True) -> Tensor:
    """Aging-aware probability-ratio loss.

    mean_i [q(pos_i) - lambda_i q(neg_i)] with lambda_i = log(|gap_i| + lambda0).
    ``aging_aware=False`` fixes every lambda_i to 1.  With ``per_dim`` the
    log-density is divided by the embedding size before exponentiating (a
    per-dimension geometric-mean density); without it, raw densities are used.
    """
    pos, neg = _pair_log_densities(x_id, x_age, pairing, q)
    ages = np.asarray(ages, dtype=np.float64)
    if aging_aware:
        weights = aa_weight(ages, ages[pairing.indices], lambda0)
    else:
        weights = np.ones(len(ages))
    scale = float(dc.constant(x_age).shape[-1]) if per_dim else 1.0
    return probability_ratio_loss(pos, neg, weights, scale)


def estimator_nll(x_id, x_age, q: Mapping) -> Tensor:
    """Negative mean log-likelihood of the positive pairs (the estimator's objective)."""
    return -dc.mean(cond_log_density(x_id, x_age, q))


def log_density_matrix(x_id: np.ndarray, x_age: np.ndarray, q: Mapping) -> np.ndarray:
    """M[i, j] = log q(x_age_j | x_id_i); O(N^2 d) memory, for small N."""
    mu, lv = (t.data for t in conditional_params(np.asarray(x_id, np.float64), q))
    diff = x_age[None, :, :] - mu[:, None, :]
    return -0.5 * (diff ** 2 * np.exp(-lv)[:, None, :] + lv[:, None, :] + LOG_2PI).sum(-1)


def club_from_matrix(log_q: np.ndarray) -> float:
    log_q = np.asarray(log_q, dtype=np.float64)
    return float(np.mean(np.diag(log_q)) - np.mean(log_q))


def estimate_mi(x_id, x_age, q: Mapping) -> float:
    """CLUB estimate with every (i, j) pair in the marginal term.

    The all-pairs mean is expanded in closed form, so cost is O(N d).
    """
    x_id = np.asarray(x_id, dtype=np.float64)
    y = np.asarray(x_age, dtype=np.float64)
    if len(y) < 2:
        raise ValueError("estimate_mi needs at least two pairs")
    q64 = {k: np.asarray(v, dtype=np.float64) for k, v in q.items()}
    mu, lv = (t.data for t in conditional_params(x_id, q64))
    prec = np.exp(-lv)
    positive = -0.5 * ((y - mu) ** 2 * prec).sum(axis=1)
    y_mean, y_sq = y.mean(axis=0), (y * y).mean(axis=0)
    # mean over j of (y_j - mu_i)^2 = E[y^2] - 2 mu_i E[y] + mu_i^2
    spread = y_sq[None, :] - 2 * mu * y_mean[None, :] + mu * mu
    marginal = -0.5 * (spread * prec).sum(axis=1)
    return float(positive.mean() - marginal.mean())
