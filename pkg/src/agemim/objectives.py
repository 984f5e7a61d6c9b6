"""Identity (additive angular margin) and age-group classification losses."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc

# Upper edges of the age bins 0-20, 21-30, ..., 71-80; the last bin is open.
AGE_GROUP_EDGES: tuple[float, ...] = (20, 30, 40, 50, 60, 70)
AGE_GROUP_NAMES: tuple[str, ...] = ("0-20", "21-30", "31-40", "41-50", "51-60", "61-70", "71-80")
NUM_AGE_GROUPS = len(AGE_GROUP_NAMES)


def age_group(age_years: float, edges: Sequence[float] = AGE_GROUP_EDGES) -> int:
    """Index of the age bin; upper edges are inclusive, ages past 80 stay in the last bin."""
    if age_years < 0:
        raise ValueError(f"negative age: {age_years}")
    return bisect.bisect_left(list(edges), age_years)


def age_groups(ages: Sequence[float]) -> np.ndarray:
    return np.array([age_group(a) for a in ages], dtype=np.int64)


@dataclass(frozen=True)
class ArcFaceHead:
    scale: float = 48.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")


def init_heads(embed_dim: int, num_speakers: int, num_groups: int,
               rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    return {
        "arc.w": (rng.standard_normal((num_speakers, embed_dim)) / np.sqrt(embed_dim)).astype(dtype),
        "age.w": (rng.standard_normal((embed_dim, num_groups)) * np.sqrt(1.0 / embed_dim)).astype(dtype),
        "age.b": np.zeros(num_groups, dtype=dtype),
    }


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise dc.ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def arcface_logits(x_id, labels, class_weights, head: ArcFaceHead) -> dc.Tensor:
    """Scaled cosine logits with the angular margin added on the true class."""
    x, w = dc.constant(x_id), dc.constant(class_weights)
    n, num_classes = x.shape[0], w.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    labels = _check_labels(labels, n, num_classes)
    if np.any(np.linalg.norm(x.data, axis=1) < 1e-12):
        raise ValueError("zero-norm embedding")
    cos = dc.clamp(dc.l2_normalize(x) @ dc.transpose(dc.l2_normalize(w)), -1.0, 1.0)
    onehot = np.zeros((n, num_classes), dtype=x.dtype)
    onehot[np.arange(n), labels] = 1.0
    cos_y = dc.take_along(cos, labels)
    # a tiny floor keeps d/dx sqrt finite at cos = +-1
    sin_y = dc.sqrt(dc.clamp(1.0 - cos_y * cos_y, 1e-12, 1.0))
    target = cos_y * math.cos(head.margin) - sin_y * math.sin(head.margin)
    spread = dc.reshape(target, (n, 1)) @ np.ones((1, num_classes), dtype=x.dtype)
    mixed = cos * (1.0 - onehot) + spread * onehot
    return mixed * head.scale


def arcface_loss(x_id, labels, class_weights, head: ArcFaceHead = ArcFaceHead()) -> dc.Tensor:
    logits = arcface_logits(x_id, labels, class_weights, head)
    labels = np.asarray(labels, dtype=np.int64)
    return -dc.mean(dc.take_along(dc.log_softmax(logits), labels))


def age_softmax_loss(x_age, groups, weight, bias) -> dc.Tensor:
    x = dc.constant(x_age)
    w, b = dc.constant(weight), dc.constant(bias)
    groups = _check_labels(groups, x.shape[0], w.shape[1])
    logits = x @ w + b
    return -dc.mean(dc.take_along(dc.log_softmax(logits), groups))
