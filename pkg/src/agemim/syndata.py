"""Synthetic speakers whose frame features drift with age, plus the Gaussian MI benchmark.

On-disk layout of a dataset directory::

    manifest.tsv          utterance_id, speaker_id, age_years, group_id, relative_path
    frames/<utt>.bin      uint32 c, uint32 t, then c*t float32 (little-endian, row-major)
    trials/<name>.txt     "enroll test 1|0" per line
"""
from __future__ import annotations

import hashlib
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import FeatureSequence

NUM_GROUPS = 4
GAP_TIERS = (5, 10, 15, 20)


@dataclass(frozen=True)
class GenConfig:
    num_speakers: int = 200
    utterances_per_speaker: int = 10
    identity_dim: int = 16
    channels: int = 24
    frames: int = 50
    aging_strength: float = 0.6
    noise_std: float = 0.5
    age_range: tuple[float, float] = (15.0, 80.0)
    eval_speakers: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be >= 2")
        if self.utterances_per_speaker < 2:
            raise ValueError("utterances_per_speaker must be >= 2")
        lo, hi = self.age_range
        if not 0 <= lo < hi:
            raise ValueError("age_range must satisfy 0 <= lo < hi")
        if self.aging_strength < 0:
            raise ValueError("aging_strength must be >= 0")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be > 0")
        if self.frames < 2 or self.channels < 1 or self.identity_dim < 1:
            raise ValueError("frames >= 2, channels >= 1, identity_dim >= 1 required")
        if not 0 <= self.eval_speakers < self.num_speakers - 1:
            raise ValueError("eval_speakers must leave at least two training speakers")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: int
    age_years: float
    group_id: int
    relative_path: str


@dataclass
class Dataset:
    sequences: list[FeatureSequence]
    manifest: list[ManifestEntry]
    eval_speakers: frozenset[int] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.sequences)

    def split(self, evaluation: bool) -> list[FeatureSequence]:
        return [s for s in self.sequences if (s.speaker_id in self.eval_speakers) == evaluation]

    def by_id(self) -> dict[str, FeatureSequence]:
        return {s.utterance_id: s for s in self.sequences}


@dataclass(frozen=True)
class LatentModel:
    """Fixed mixing parameters shared by all speakers of one dataset."""

    projection: np.ndarray  # c x k
    age_direction: np.ndarray  # c
    age_mid: float
    age_span: float


def speaker_group(speaker_id: int) -> int:
    digest = hashlib.sha256(f"speaker-{speaker_id}".encode()).digest()
    return digest[0] % NUM_GROUPS


def expected_frame(model: LatentModel, identity: np.ndarray, drift: np.ndarray,
                   age: float, gamma: float) -> np.ndarray:
    """Noise-free frame vector for a speaker at a given age."""
    rel = (age - model.age_mid) / model.age_span
    psi = (age - model.age_mid) / (model.age_span / 2)
    return model.projection @ (identity + gamma * rel * drift) + gamma * psi * model.age_direction


def latent_model(cfg: GenConfig, rng: np.random.Generator) -> LatentModel:
    lo, hi = cfg.age_range
    proj = rng.standard_normal((cfg.channels, cfg.identity_dim)) / math.sqrt(cfg.identity_dim)
    age_dir = rng.standard_normal(cfg.channels)
    return LatentModel(proj, age_dir, (lo + hi) / 2, hi - lo)


def generate(cfg: GenConfig = GenConfig()) -> Dataset:
    """Draw a dataset; a pure function of ``cfg``.

    The last ``cfg.eval_speakers`` speaker ids are reserved for evaluation trials.
    """
    cfg.validate()
    root = np.random.default_rng(cfg.seed)
    model = latent_model(cfg, root)
    speaker_seeds = root.integers(0, 2**63 - 1, size=cfg.num_speakers)
    lo, hi = cfg.age_range
    sequences, manifest = [], []
    for spk in range(cfg.num_speakers):
        rng = np.random.default_rng(speaker_seeds[spk])
        identity = rng.standard_normal(cfg.identity_dim)
        drift = rng.standard_normal(cfg.identity_dim)
        drift /= np.linalg.norm(drift)
        group = speaker_group(spk)
        for u in range(cfg.utterances_per_speaker):
            age = float(np.round(rng.uniform(lo, hi), 2))
            mean = expected_frame(model, identity, drift, age, cfg.aging_strength)
            noise = rng.standard_normal((cfg.channels, cfg.frames)) * cfg.noise_std
            frames = (mean[:, None] + noise).astype(np.float32)
            utt = f"spk{spk:04d}-utt{u:03d}"
            sequences.append(FeatureSequence(frames, utt, spk, age))
            manifest.append(ManifestEntry(utt, spk, age, group, f"frames/{utt}.bin"))
    held = frozenset(range(cfg.num_speakers - cfg.eval_speakers, cfg.num_speakers))
    return Dataset(sequences, manifest, held)


# ------------------------------------------------------------------ file IO

def write_frames(path: Path, frames: np.ndarray) -> None:
    c, t = frames.shape
    with open(path, "wb") as fh:
        fh.write(np.array([c, t], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_frames(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    c, t = np.frombuffer(raw[:8], dtype="<u4")
    data = np.frombuffer(raw[8:], dtype="<f4")
    if data.size != int(c) * int(t):
        raise ValueError(f"{path}: expected {c}x{t} values, found {data.size}")
    return data.reshape(int(c), int(t)).astype(np.float32)


def write_manifest(path: Path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.utterance_id}\t{e.speaker_id}\t{e.age_years!r}\t{e.group_id}\t{e.relative_path}\n")


def read_manifest(path: Path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            utt, spk, age, group, rel = parts
            entries.append(ManifestEntry(utt, int(spk), float(age), int(group), rel))
    return entries


def write_dataset(ds: Dataset, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for seq, entry in zip(ds.sequences, ds.manifest):
        write_frames(out / entry.relative_path, seq.frames)
    write_manifest(out / "manifest.tsv", ds.manifest)
    (out / "eval_speakers.txt").write_text(
        "".join(f"{s}\n" for s in sorted(ds.eval_speakers)), encoding="utf-8")


def load_dataset(data_dir: str | os.PathLike) -> Dataset:
    root = Path(data_dir)
    manifest = read_manifest(root / "manifest.tsv")
    seqs = [FeatureSequence(read_frames(root / e.relative_path), e.utterance_id,
                            e.speaker_id, e.age_years) for e in manifest]
    held_path = root / "eval_speakers.txt"
    held = frozenset(int(x) for x in held_path.read_text().split()) if held_path.exists() else frozenset()
    return Dataset(seqs, manifest, held)


# ------------------------------------------------------------------- trials

@dataclass(frozen=True)
class Trial:
    enroll_utt: str
    test_utt: str
    target: bool
    age_gap_years: float = 0.0


class NoPositivesError(ValueError):
    pass


def build_trials(manifest: Sequence[ManifestEntry], min_gap: float = 0.0,
                 match_group: bool = False, seed: int = 0) -> list[Trial]:
    """Cross-age trial list with as many nontarget as target trials.

    Targets are every same-speaker pair at least ``min_gap`` years apart.
    Nontargets are drawn without replacement from different-speaker pairs,
    restricted to speakers of the same group when ``match_group`` is set.
    """
    if len({e.speaker_id for e in manifest}) < 2:
        raise ValueError("trial construction needs at least two speakers")
    entries = sorted(manifest, key=lambda e: e.utterance_id)
    positives, negatives = [], []
    for a, b in itertools.combinations(entries, 2):
        gap = abs(a.age_years - b.age_years)
        if a.speaker_id == b.speaker_id:
            if gap >= min_gap:
                positives.append(Trial(a.utterance_id, b.utterance_id, True, gap))
        elif not match_group or a.group_id == b.group_id:
            negatives.append(Trial(a.utterance_id, b.utterance_id, False, gap))
    if not positives:
        raise NoPositivesError(f"no positives: no same-speaker pair is >= {min_gap} years apart")
    if not negatives:
        raise ValueError("no nontarget pairs available")
    rng = np.random.default_rng(seed)
    take = min(len(negatives), len(positives))
    chosen = np.sort(rng.choice(len(negatives), size=take, replace=False))
    return positives + [negatives[i] for i in chosen]


def trial_sets(manifest: Sequence[ManifestEntry], seed: int = 0,
               tiers: Sequence[int] = GAP_TIERS) -> dict[str, list[Trial]]:
    """Only-CA style (any negatives) and Vox-CA style (group-matched negatives) tiers."""
    out = {}
    for gap in tiers:
        out[f"only-ca{gap}"] = build_trials(manifest, gap, False, seed)
        out[f"vox-ca{gap}"] = build_trials(manifest, gap, True, seed)
    return out


def write_trials(path: str | os.PathLike, trials: Iterable[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enroll_utt} {t.test_utt} {int(t.target)}\n")


def read_trials(path: str | os.PathLike) -> list[Trial]:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'enroll test 0|1'")
            trials.append(Trial(parts[0], parts[1], parts[2] == "1"))
    return trials


# ------------------------------------------------------- Gaussian benchmark

@dataclass(frozen=True)
class GaussianPairSpec:
    correlations: tuple[float, ...]

    def __post_init__(self):
        if not self.correlations:
            raise ValueError("need at least one dimension")
        if any(not -1 < r < 1 for r in self.correlations):
            raise ValueError("correlations must lie strictly inside (-1, 1)")

    @property
    def dim(self) -> int:
        return len(self.correlations)


def gaussian_pairs(spec: GaussianPairSpec, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """n samples of (x, y), unit-variance per dimension with corr(x_j, y_j) = rho_j."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    rho = np.asarray(spec.correlations)
    x = rng.standard_normal((n, spec.dim))
    e = rng.standard_normal((n, spec.dim))
    y = rho * x + np.sqrt(1 - rho ** 2) * e
    return x, y


def true_mi(spec: GaussianPairSpec) -> float:
    rho = np.asarray(spec.correlations, dtype=np.float64)
    return float(np.sum(-0.5 * np.log1p(-rho ** 2)))
