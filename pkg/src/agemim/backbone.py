"""Frame encoder, the two pooling branches and the additive age/identity split."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

VAR_FLOOR = 1e-8
ATTN_CLIP = 30.0


@dataclass
class FeatureSequence:
    """A c x t block of frame features for one utterance."""

    frames: np.ndarray
    utterance_id: str
    speaker_id: int
    age_years: float

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] < 2:
            raise ValueError(f"{self.utterance_id}: frames must be c x t with t >= 2")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utterance_id}: non-finite frame values")
        if self.age_years < 0:
            raise ValueError(f"{self.utterance_id}: negative age")


@dataclass
class EmbeddingTriple:
    x_init: np.ndarray
    x_age: np.ndarray
    x_id: np.ndarray


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 24
    encoder_widths: tuple[int, ...] = (64, 64)
    embed_dim: int = 256
    attn_hidden: int = 64

    @property
    def map_channels(self) -> int:
        return self.encoder_widths[-1] if self.encoder_widths else self.in_channels


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator,
                  dtype=np.float64) -> dict[str, np.ndarray]:
    """He-initialised weights, zero biases."""
    p: dict[str, np.ndarray] = {}
    fan_in = cfg.in_channels
    for i, width in enumerate(cfg.encoder_widths):
        p[f"enc.{i}.w"] = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        p[f"enc.{i}.b"] = np.zeros(width)
        fan_in = width
    c, d, h = cfg.map_channels, cfg.embed_dim, cfg.attn_hidden
    p["pool.w"] = rng.standard_normal((2 * c, d)) * np.sqrt(1.0 / (2 * c))
    p["pool.b"] = np.zeros(d)
    p["asp.attn.w"] = rng.standard_normal((c, h)) * np.sqrt(1.0 / c)
    p["asp.attn.b"] = np.zeros(h)
    p["asp.attn.v"] = rng.standard_normal((h, 1)) * np.sqrt(1.0 / h)
    p["asp.w"] = rng.standard_normal((2 * c, d)) * np.sqrt(1.0 / (2 * c))
    p["asp.b"] = np.zeros(d)
    return {k: v.astype(dtype) for k, v in p.items()}


def _t(x) -> Tensor:
    return dc.constant(x)


def _num_layers(params: Mapping) -> int:
    n = 0
    while f"enc.{n}.w" in params:
        n += 1
    return n


def encode_rows(rows, params: Mapping) -> Tensor:
    """Apply the shared per-frame MLP to an (M, c) matrix of frames."""
    h = _t(rows)
    for i in range(_num_layers(params)):
        w, b = _t(params[f"enc.{i}.w"]), _t(params[f"enc.{i}.b"])
        if h.shape[-1] != w.shape[0]:
            raise dc.ShapeError(f"encoder layer {i}: input width {h.shape[-1]} != {w.shape[0]}")
        h = dc.relu(h @ w + b)
    return h


def encode(frames: np.ndarray, params: Mapping) -> np.ndarray:
    """Feature map (c' x t) for a single c x t frame block."""
    return encode_rows(np.ascontiguousarray(frames.T), params).data.T


def _as_batch_map(fmap) -> Tensor:
    fmap = _t(fmap)
    if fmap.ndim == 2:
        fmap = dc.reshape(fmap, (1,) + fmap.shape)
    if fmap.shape[1] < 2:
        raise ValueError("pooling needs at least two frames")
    return fmap


def pooled_stats(fmap) -> Tensor:
    """Mean and standard deviation over time of an (N, t, c) map -> (N, 2c)."""
    fmap = _as_batch_map(fmap)
    mu = dc.mean(fmap, axis=1)
    var = dc.mean(fmap * fmap, axis=1) - mu * mu
    return dc.concat([mu, dc.sqrt(dc.clamp(var, VAR_FLOOR))], axis=-1)


def attention_weights(fmap, params: Mapping) -> Tensor:
    fmap = _as_batch_map(fmap)
    n, t, c = fmap.shape
    flat = dc.reshape(fmap, (n * t, c))
    hidden = dc.tanh(flat @ _t(params["asp.attn.w"]) + _t(params["asp.attn.b"]))
    logits = dc.reshape(hidden @ _t(params["asp.attn.v"]), (n, t))
    return dc.softmax(dc.clamp(logits, -ATTN_CLIP, ATTN_CLIP), axis=-1)


def weighted_stats(fmap, alpha) -> Tensor:
    """Attention-weighted mean and standard deviation -> (N, 2c)."""
    fmap, alpha = _as_batch_map(fmap), _t(alpha)
    n, t, c = fmap.shape
    a3 = dc.reshape(alpha, (n, 1, t))
    mu = dc.reshape(a3 @ fmap, (n, c))
    second = dc.reshape(a3 @ (fmap * fmap), (n, c))
    return dc.concat([mu, dc.sqrt(dc.clamp(second - mu * mu, VAR_FLOOR))], axis=-1)


def attentive_stats(fmap, params: Mapping) -> Tensor:
    return weighted_stats(fmap, attention_weights(fmap, params))


def stats_pool(fmap, params: Mapping) -> Tensor:
    """x_init: global statistics pooling followed by a linear projection."""
    return pooled_stats(fmap) @ _t(params["pool.w"]) + _t(params["pool.b"])


def attentive_stats_pool(fmap, params: Mapping) -> Tensor:
    """x_age: attentive statistics pooling followed by a linear projection."""
    return attentive_stats(fmap, params) @ _t(params["asp.w"]) + _t(params["asp.b"])


def disentangle(x_init, x_age) -> Tensor:
    x_init, x_age = _t(x_init), _t(x_age)
    if x_init.shape != x_age.shape:
        raise dc.ShapeError(f"x_init {x_init.shape} and x_age {x_age.shape} differ")
    return x_init - x_age


def stack_frames(batch: Sequence[FeatureSequence] | np.ndarray, dtype=None) -> np.ndarray:
    """(N, c, t) array from a list of sequences (or pass an array through)."""
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        if not batch:
            raise ValueError("empty batch")
        shapes = {s.frames.shape for s in batch}
        if len(shapes) != 1:
            raise ValueError(f"mixed frame shapes in batch: {sorted(shapes)}")
        arr = np.stack([s.frames for s in batch])
    return arr.astype(dtype) if dtype is not None else arr


def forward_batch(frames, params: Mapping) -> tuple[Tensor, Tensor, Tensor]:
    """(x_init, x_age, x_id) for an (N, c, t) batch; differentiable in params."""
    frames = stack_frames(frames)
    if frames.ndim != 3:
        raise dc.ShapeError("frames batch must be (N, c, t)")
    n, c, t = frames.shape
    if t < 2:
        raise ValueError("pooling needs at least two frames")
    rows = np.ascontiguousarray(frames.transpose(0, 2, 1)).reshape(n * t, c)
    h = encode_rows(rows, params)
    fmap = dc.reshape(h, (n, t, h.shape[-1]))
    x_init = stats_pool(fmap, params)
    x_age = attentive_stats_pool(fmap, params)
    return x_init, x_age, disentangle(x_init, x_age)


def embed(frames, params: Mapping, batch_size: int = 256) -> EmbeddingTriple:
    """Numeric (no-gradient) embeddings at 64-bit precision, in input order."""
    frames = stack_frames(frames)
    p64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    parts = []
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size].astype(np.float64)
        parts.append([t.data for t in forward_batch(chunk, p64)])
    return EmbeddingTriple(*(np.concatenate([p[i] for p in parts]) for i in range(3)))
