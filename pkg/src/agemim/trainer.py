"""Alternating optimisation of the backbone (phi) and the MI estimator (theta).

Each batch runs one SGD step on phi with the estimator frozen, then
``theta_steps`` Adam steps on theta with the backbone frozen.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, FeatureSequence, embed, forward_batch, init_backbone, stack_frames
from .miest import aa_mim_loss, estimate_mi, estimator_nll, init_estimator, sample_negatives
from .objectives import (NUM_AGE_GROUPS, ArcFaceHead, age_groups, age_softmax_loss,
                         arcface_loss, init_heads)
from .optim import SGD, Adam
from .syndata import Dataset

log = logging.getLogger(__name__)

MODES = ("full", "no_aa", "no_mim")
CHECKPOINT_MAGIC = b"AGEMIMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    lambda_age: float = 0.1
    lambda_mi: float = 1e-4
    lambda0: float = math.e
    per_dim_density: bool = True
    batch_size: int = 64
    epochs: int = 30
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 6
    lr_decay: float = 0.9
    lr_floor: float = 5e-5
    est_lr: float = 1e-5
    est_weight_decay: float = 1e-4
    est_beta1: float = 0.9
    est_beta2: float = 0.999
    est_eps: float = 1e-8
    theta_steps: int = 1
    arc_scale: float = 48.0
    arc_margin: float = 0.2
    embed_dim: int = 256
    encoder_widths: tuple[int, ...] = (64, 64)
    attn_hidden: int = 64
    heldout_size: int = 256
    precision: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_age < 0 or self.lambda_mi < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda0 < 1:
            raise ValueError("lambda0 must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_floor < self.lr0:
            raise ValueError("lr_floor must be below lr0")
        if self.theta_steps < 1:
            raise ValueError("theta_steps must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def backbone_config(self, in_channels: int) -> BackboneConfig:
        return BackboneConfig(in_channels, tuple(self.encoder_widths), self.embed_dim, self.attn_hidden)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Batch:
    frames: np.ndarray  # N x c x t
    speakers: np.ndarray  # class index per row
    groups: np.ndarray
    ages: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TrainState:
    cfg: TrainConfig
    in_channels: int
    speaker_ids: list[int]
    phi: dict[str, np.ndarray]
    theta: dict[str, np.ndarray]
    sgd: SGD
    adam: Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    l_id: float
    l_age: float
    l_mim: float | None
    mi_estimate: float | None
    lr_phi: float
    lr_theta: float | None

    def line(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.10g}"
        return "\t".join([str(self.epoch), fmt(self.l_id), fmt(self.l_age), fmt(self.l_mim),
                          fmt(self.mi_estimate), fmt(self.lr_phi), fmt(self.lr_theta)])


class TrainingDiverged(FloatingPointError):
    pass


def lr_schedule(step: int, epoch: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Backbone learning rate: per-step linear warmup, then per-epoch exponential decay."""
    warm_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warm_steps:
        start = cfg.lr0 / 100
        return start + (cfg.lr0 - start) * step / warm_steps
    lr = cfg.lr0 * cfg.lr_decay ** max(epoch - cfg.warmup_epochs, 0)
    return max(lr, cfg.lr_floor)


def make_batch(seqs: Sequence[FeatureSequence], speaker_index: Mapping[int, int], dtype) -> Batch:
    ages = np.array([s.age_years for s in seqs], dtype=np.float64)
    return Batch(stack_frames(seqs, dtype), np.array([speaker_index[s.speaker_id] for s in seqs]),
                 age_groups(ages), ages)


def init_state(dataset: Dataset, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    train = dataset.split(evaluation=False)
    if not train:
        raise ValueError("dataset has no training utterances")
    rng = np.random.default_rng(cfg.seed)
    in_channels = train[0].frames.shape[0]
    speakers = sorted({s.speaker_id for s in train})
    bcfg = cfg.backbone_config(in_channels)
    phi = init_backbone(bcfg, rng, cfg.dtype)
    phi.update(init_heads(cfg.embed_dim, len(speakers), NUM_AGE_GROUPS, rng, cfg.dtype))
    theta = init_estimator(cfg.embed_dim, rng, dtype=cfg.dtype)
    return TrainState(cfg, in_channels, speakers, phi, theta,
                      SGD(cfg.momentum, cfg.weight_decay),
                      Adam(cfg.est_beta1, cfg.est_beta2, cfg.est_eps, cfg.est_weight_decay), rng)


def total_loss(batch: Batch, phi: Mapping, theta: Mapping, cfg: TrainConfig,
               pairing=None) -> tuple[dc.Tensor, dict[str, dc.Tensor]]:
    """Overall backbone loss and its terms; the MI term is absent in ``no_mim`` mode."""
    if cfg.mode not in MODES:
        raise ValueError(f"invalid mode {cfg.mode!r}")
    if len(batch) < 2:
        raise ValueError("batch needs at least two items")
    head = ArcFaceHead(cfg.arc_scale, cfg.arc_margin)
    _, x_age, x_id = forward_batch(batch.frames, phi)
    terms = {
        "id": arcface_loss(x_id, batch.speakers, phi["arc.w"], head),
        "age": age_softmax_loss(x_age, batch.groups, phi["age.w"], phi["age.b"]),
    }
    total = terms["id"] + terms["age"] * cfg.lambda_age
    if cfg.mode != "no_mim":
        if pairing is None:
            raise ValueError("MI modes need a negative pairing")
        terms["mim"] = aa_mim_loss(x_id, x_age, batch.ages, pairing, theta, cfg.lambda0,
                                   aging_aware=cfg.mode == "full", per_dim=cfg.per_dim_density)
        total = total + terms["mim"] * cfg.lambda_mi
    return total, terms


def phi_gradients(batch: Batch, state: TrainState, pairing=None):
    """Loss terms and gradients w.r.t. phi; theta enters only as constants."""
    leaves = {k: dc.Tensor(v, requires_grad=True) for k, v in state.phi.items()}
    total, terms = total_loss(batch, leaves, state.theta, state.cfg, pairing)
    dc.backward(total)
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}
    return total.item(), {k: v.item() for k, v in terms.items()}, grads


def phi_step(batch: Batch, state: TrainState, lr: float) -> dict[str, float]:
    pairing = sample_negatives(len(batch), state.rng) if state.cfg.mode != "no_mim" else None
    try:
        total, terms, grads = phi_gradients(batch, state, pairing)
    except dc.NonFiniteError as err:
        raise TrainingDiverged(f"phi step {state.step}: {err}") from err
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(f"phi step {state.step}: non-finite gradient (loss {total})")
    state.sgd.step(state.phi, grads, lr)
    return terms


def theta_step(batch: Batch, state: TrainState) -> float:
    """One Adam step on the estimator's negative log-likelihood; phi is read only."""
    _, x_age, x_id = forward_batch(batch.frames, state.phi)
    x_id, x_age = x_id.data, x_age.data
    leaves = {k: dc.Tensor(v, requires_grad=True) for k, v in state.theta.items()}
    try:
        nll = estimator_nll(x_id, x_age, leaves)
    except dc.NonFiniteError as err:
        raise TrainingDiverged(f"theta step {state.step}: {err}") from err
    dc.backward(nll)
    grads = {k: t.grad for k, t in leaves.items()}
    state.adam.step(state.theta, grads, state.cfg.est_lr)
    return nll.item()


def heldout_sequences(dataset: Dataset, n: int) -> list[FeatureSequence]:
    pool = dataset.split(evaluation=True) or dataset.split(evaluation=False)
    return sorted(pool, key=lambda s: s.utterance_id)[:n]


def train(dataset: Dataset, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None,
          state: TrainState | None = None) -> tuple[TrainState, list[EpochMetrics]]:
    """Run the alternating loop for ``cfg.epochs`` epochs (or until the lr floor).

    With ``out_dir`` the metrics log is appended after every epoch and a
    checkpoint is written at the end of each epoch.
    """
    state = state or init_state(dataset, cfg)
    train_seqs = sorted(dataset.split(evaluation=False), key=lambda s: s.utterance_id)
    index = {spk: i for i, spk in enumerate(state.speaker_ids)}
    n = cfg.batch_size
    per_epoch = len(train_seqs) // n
    if per_epoch == 0:
        raise ValueError(f"fewer training utterances ({len(train_seqs)}) than one batch ({n})")
    held = heldout_sequences(dataset, cfg.heldout_size)
    held_frames = stack_frames(held)
    use_mi = cfg.mode != "no_mim"

    log_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.tsv"
        if state.epoch == 0:
            log_path.write_text(f"# seed={cfg.seed} mode={cfg.mode} config={cfg.digest()}\n")

    history = []
    while state.epoch < cfg.epochs:
        if (state.epoch >= cfg.warmup_epochs
                and cfg.lr0 * cfg.lr_decay ** (state.epoch - cfg.warmup_epochs) <= cfg.lr_floor):
            log.info("backbone lr reached the floor; stopping at epoch %d", state.epoch)
            break
        order = state.rng.permutation(len(train_seqs))
        sums = {"id": 0.0, "age": 0.0, "mim": 0.0}
        lr = cfg.lr0
        for b in range(per_epoch):
            batch = make_batch([train_seqs[i] for i in order[b * n:(b + 1) * n]], index, cfg.dtype)
            lr = lr_schedule(state.step, state.epoch, cfg, per_epoch)
            try:
                terms = phi_step(batch, state, lr)
                if use_mi:
                    for _ in range(cfg.theta_steps):
                        theta_step(batch, state)
            except dc.NonFiniteError as err:
                raise TrainingDiverged(f"step {state.step}: {err}") from err
            for k, v in terms.items():
                sums[k] += v
            state.step += 1
        state.epoch += 1
        mi = None
        if use_mi:
            try:
                emb = embed(held_frames, state.phi)
                mi = estimate_mi(emb.x_id, emb.x_age, state.theta)
            except dc.NonFiniteError as err:
                raise TrainingDiverged(f"epoch {state.epoch}: {err}") from err
            if not math.isfinite(mi):
                raise TrainingDiverged(f"epoch {state.epoch}: non-finite MI estimate")
        metrics = EpochMetrics(state.epoch, sums["id"] / per_epoch, sums["age"] / per_epoch,
                               sums["mim"] / per_epoch if use_mi else None, mi, lr,
                               cfg.est_lr if use_mi else None)
        history.append(metrics)
        log.info("epoch %s", metrics.line())
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(metrics.line() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            save_checkpoint(state, Path(out_dir) / "checkpoint.bin")
        if on_epoch is not None:
            on_epoch(metrics)
    return state, history


# -------------------------------------------------------------- checkpoints

def _tensor_table(state: TrainState) -> dict[str, np.ndarray]:
    table = {f"phi/{k}": v for k, v in state.phi.items()}
    table.update({f"theta/{k}": v for k, v in state.theta.items()})
    table.update({f"opt.sgd/{k}": v for k, v in state.sgd.state.items()})
    table.update({f"opt.adam/{k}": v for k, v in state.adam.state.items()})
    return dict(sorted(table.items()))


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = _tensor_table(state)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        dtype = np.dtype(arr.dtype).newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config_digest": state.cfg.digest(),
        "config": dataclasses.asdict(state.cfg),
        "in_channels": state.in_channels,
        "speaker_ids": state.speaker_ids,
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + len(head).to_bytes(8, "little") + head + b"".join(blobs)


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    """Atomic write: a crash never leaves a truncated checkpoint behind."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)


def config_from_dict(d: Mapping) -> TrainConfig:
    d = dict(d)
    d["encoder_widths"] = tuple(d["encoder_widths"])
    return TrainConfig(**d)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    n = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + n])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    base = 16 + n
    groups: dict[str, dict[str, np.ndarray]] = {"phi": {}, "theta": {}, "opt.sgd": {}, "opt.adam": {}}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        prefix, name = e["name"].split("/", 1)
        groups[prefix][name] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    cfg = config_from_dict(header["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    sgd = SGD(cfg.momentum, cfg.weight_decay)
    sgd.state = groups["opt.sgd"]
    adam = Adam(cfg.est_beta1, cfg.est_beta2, cfg.est_eps, cfg.est_weight_decay)
    adam.state = groups["opt.adam"]
    return TrainState(cfg, header["in_channels"], list(header["speaker_ids"]), groups["phi"],
                      groups["theta"], sgd, adam, rng, header["epoch"], header["step"])


# ---------------------------------------------------------------- MI probe

def fit_estimator(x_id: np.ndarray, x_age: np.ndarray, steps: int = 2000, lr: float = 1e-3,
                  batch_size: int = 512, seed: int = 0, weight_decay: float = 0.0,
                  hidden: int | None = None) -> dict[str, np.ndarray]:
    """Train a fresh Gaussian conditional q(x_age | x_id) by maximum likelihood."""
    rng = np.random.default_rng(seed)
    x_id = np.asarray(x_id, dtype=np.float64)
    x_age = np.asarray(x_age, dtype=np.float64)
    theta = init_estimator(x_id.shape[1], rng, hidden=hidden)
    opt = Adam(weight_decay=weight_decay)
    n = len(x_id)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False) if n > batch_size else np.arange(n)
        leaves = {k: dc.Tensor(v, requires_grad=True) for k, v in theta.items()}
        loss = estimator_nll(x_id[idx], x_age[idx], leaves)
        dc.backward(loss)
        opt.step(theta, {k: t.grad for k, t in leaves.items()}, lr)
    return theta


def probe_mi(phi: Mapping, dataset: Dataset, steps: int = 300, lr: float = 3e-3,
             seed: int = 0) -> float:
    """CLUB estimate on evaluation speakers with an estimator fitted on training speakers.

    A fresh estimator makes checkpoints from different modes comparable,
    including ``no_mim`` runs that never trained one.
    """
    fit = embed(stack_frames(dataset.split(evaluation=False)), phi)
    held = embed(stack_frames(dataset.split(evaluation=True)), phi)
    theta = fit_estimator(fit.x_id, fit.x_age, steps=steps, lr=lr, batch_size=256, seed=seed)
    return estimate_mi(held.x_id, held.x_age, theta)
