"""Finite-difference checks for every loss and pooling graph in the package."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import backbone, miest, objectives
from . import diffcore as dc
from .diffcore import gradcheck

# A graph factory draws one random point: (loss function, parameters, names to check).
GraphFactory = Callable[[np.random.Generator], tuple[Callable, dict[str, np.ndarray], list[str] | None]]

TOLERANCE = 1e-4
N, D, S, C, T, H = 4, 6, 5, 3, 5, 4


def _arcface(rng):
    head = objectives.ArcFaceHead(48.0, 0.2)
    labels = rng.integers(0, S, size=N)
    params = {"x": rng.standard_normal((N, D)), "w": rng.standard_normal((S, D))}
    return (lambda p: objectives.arcface_loss(p["x"], labels, p["w"], head)), params, None


def _age(rng):
    groups = rng.integers(0, objectives.NUM_AGE_GROUPS, size=N)
    params = {"x": rng.standard_normal((N, D)),
              "w": rng.standard_normal((D, objectives.NUM_AGE_GROUPS)),
              "b": rng.standard_normal(objectives.NUM_AGE_GROUPS)}
    return (lambda p: objectives.age_softmax_loss(p["x"], groups, p["w"], p["b"])), params, None


def _estimator(rng):
    return {k: v * 0.5 for k, v in miest.init_estimator(D, rng).items()}


def _mim(rng):
    q = _estimator(rng)
    pairing = miest.sample_negatives(N, rng)
    params = {"x_id": rng.standard_normal((N, D)), "x_age": rng.standard_normal((N, D))}
    return (lambda p: miest.mim_loss(p["x_id"], p["x_age"], pairing, q)), params, None


def _aa_mim(rng):
    q = _estimator(rng)
    pairing = miest.sample_negatives(N, rng)
    ages = rng.uniform(15, 80, size=N)
    params = {"x_id": rng.standard_normal((N, D)), "x_age": rng.standard_normal((N, D))}
    return (lambda p: miest.aa_mim_loss(p["x_id"], p["x_age"], ages, pairing, q)), params, None


def _nll(rng):
    q = _estimator(rng)
    x_id, x_age = rng.standard_normal((N, D)), rng.standard_normal((N, D))
    return (lambda p: miest.estimator_nll(x_id, x_age, p)), q, None


def _pool_params(rng):
    return {"pool.w": rng.standard_normal((2 * C, D)), "pool.b": rng.standard_normal(D),
            "asp.attn.w": rng.standard_normal((C, H)), "asp.attn.b": rng.standard_normal(H),
            "asp.attn.v": rng.standard_normal((H, 1)), "asp.w": rng.standard_normal((2 * C, D)),
            "asp.b": rng.standard_normal(D)}


def _stats_pool(rng):
    params = {"fmap": rng.standard_normal((2, T, C))}
    params.update({k: v for k, v in _pool_params(rng).items() if k.startswith("pool.")})
    head = rng.standard_normal(D)
    return (lambda p: _weighted_sum(backbone.stats_pool(p["fmap"], p), head)), params, None


def _attentive_pool(rng):
    params = {"fmap": rng.standard_normal((2, T, C))}
    params.update({k: v for k, v in _pool_params(rng).items() if k.startswith("asp.")})
    head = rng.standard_normal(D)
    return (lambda p: _weighted_sum(backbone.attentive_stats_pool(p["fmap"], p), head)), params, None


def _weighted_sum(x, head):
    # random projection to a scalar so every output coordinate is exercised
    return dc.sum(x @ head.reshape(-1, 1))


REGISTRY: dict[str, GraphFactory] = {
    "L_id": _arcface,
    "L_age": _age,
    "L_MIM": _mim,
    "L_AA-MIM": _aa_mim,
    "estimator_nll": _nll,
    "stats_pool": _stats_pool,
    "attentive_stats_pool": _attentive_pool,
}


@dataclass(frozen=True)
class CheckRow:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def run_gradchecks(registry: Mapping[str, GraphFactory] = REGISTRY, points: int = 10,
                   eps: float = 1e-6, seed: int = 0) -> list[CheckRow]:
    rows = []
    for name, factory in registry.items():
        rng = np.random.default_rng(seed)
        start, worst = time.perf_counter(), 0.0
        for _ in range(points):
            fn, params, wrt = factory(rng)
            worst = max(worst, gradcheck(fn, params, eps, wrt))
        rows.append(CheckRow(name, worst, time.perf_counter() - start))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    lines = ["graph\tmax_rel_error\tstatus"]
    lines += [f"{r.name}\t{r.max_rel_error:.3e}\t{'ok' if r.passed else 'FAIL'}" for r in rows]
    return "\n".join(lines) + "\n"
