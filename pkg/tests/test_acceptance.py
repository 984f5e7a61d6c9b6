"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed in the pytest
terminal summary (and directly when this file is run as a script).  The
ablation criteria share one set of training runs: three seeds for each of
the ``full``, ``no_aa`` and ``no_mim`` modes on the default synthetic data,
using the desk preset in ``configs/desk.conf``.
"""
import math
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from agemim import checks, cli, evalkit, syndata, trainer
from agemim.backbone import embed
from agemim.config import load_config
from agemim.miest import aa_mim_loss, init_estimator, sample_negatives
from agemim.objectives import ArcFaceHead, age_group, arcface_loss

PRESET = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"
SEEDS = (0, 1, 2)
MODES = ("full", "no_aa", "no_mim")

VERDICTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)
    assert passed, line


# ------------------------------------------------------------ shared runs

def _mean_tier_eer(phi, ds):
    held = ds.split(evaluation=True)
    emb = embed(held, phi)
    table = dict(zip((s.utterance_id for s in held), emb.x_id))
    manifest = [e for e in ds.manifest if e.speaker_id in ds.eval_speakers]
    eers = [evalkit.eer(evalkit.score_trials(table, trials), [t.target for t in trials])[0]
            for trials in syndata.trial_sets(manifest).values()]
    return float(np.mean(eers))


def _age_probes(phi, ds):
    emb = embed(ds.sequences, phi)
    ids = [s.utterance_id for s in ds.sequences]
    groups = {s.utterance_id: age_group(s.age_years) for s in ds.sequences}
    return (evalkit.age_probe(dict(zip(ids, emb.x_id)), groups),
            evalkit.age_probe(dict(zip(ids, emb.x_init)), groups))


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    """Train every (mode, seed) pair once; returns per-run measurements."""
    base = load_config(PRESET)
    out = tmp_path_factory.mktemp("ablation")
    runs = {}
    start = time.perf_counter()
    for seed in SEEDS:
        ds = syndata.generate(replace(base.gen, seed=seed))
        init_phi = trainer.init_state(ds, replace(base.train, seed=seed)).phi
        mi_init = trainer.probe_mi(init_phi, ds, seed=seed)
        for mode in MODES:
            cfg = replace(base.train, seed=seed, mode=mode)
            state, _ = trainer.train(ds, cfg, out / f"{mode}-{seed}")
            probe_id, probe_init = _age_probes(state.phi, ds) if mode == "full" else (None, None)
            runs[mode, seed] = {
                "eer": _mean_tier_eer(state.phi, ds),
                "mi": trainer.probe_mi(state.phi, ds, seed=seed),
                "mi_init": mi_init,
                "probe_id": probe_id,
                "probe_init": probe_init,
                "checkpoint": out / f"{mode}-{seed}" / "checkpoint.bin",
            }
    runs["seconds"] = time.perf_counter() - start
    runs["dataset0"] = syndata.generate(replace(base.gen, seed=0))
    return runs


def _median(runs, mode, key):
    return statistics.median(runs[mode, s][key] for s in SEEDS)


# ------------------------------------------------------------- criteria

def test_criterion_1_gradients():
    start = time.perf_counter()
    rows = checks.run_gradchecks(points=10)
    seconds = time.perf_counter() - start
    worst = max(r.max_rel_error for r in rows)
    failed = [r.name for r in rows if not r.passed]
    record(1, not failed and seconds < 60,
           f"max rel error {worst:.2e} over {len(rows)} graphs (limit 1e-4), {seconds:.1f}s; failing: {failed or 'none'}")


def test_criterion_2_gaussian_oracle():
    opts = load_config(PRESET).eval
    start = time.perf_counter()
    est, truth = cli.gaussian_mi_report([0.8] * 4, 50_000, opts.mi_fit_steps, opts.mi_fit_lr, seed=0)
    zero, _ = cli.gaussian_mi_report([0.0] * 4, 50_000, opts.mi_fit_steps, opts.mi_fit_lr, seed=0)
    seconds = time.perf_counter() - start
    ok = abs(est - truth) <= 0.15 and abs(zero) <= 0.05 and seconds < 180
    record(2, ok, f"rho=0.8: estimate {est:.4f} vs truth {truth:.4f} (|gap| {abs(est - truth):.4f}, limit 0.15); "
                  f"rho=0: estimate {zero:.4f} (limit 0.05); {seconds:.1f}s")


def _scan(scores, labels):
    # independent exhaustive scan: every distinct score (and +inf) as a threshold
    tar, non = scores[labels], scores[~labels]
    points = [(float(np.mean(tar < t)), float(np.mean(non >= t)))
              for t in np.r_[np.inf, np.unique(scores)[::-1]]]
    k = next(i for i, (m, f) in enumerate(points) if m <= f)
    if k == 0 or points[k][0] == points[k][1]:
        rate = points[k][1]
    else:
        (m0, f0), (m1, f1) = points[k - 1], points[k]
        rate = f0 + (m0 - f0) / ((m0 - f0) - (m1 - f1)) * (f1 - f0)
    dcf = min(0.01 * m + 0.99 * f for m, f in points) / 0.01
    return 100 * rate, dcf


def test_criterion_3_metric_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(123)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 1001))
        labels = rng.random(n) < 0.5
        labels[:2] = [True, False]
        scores = rng.standard_normal(n) + labels
        if i % 4 == 0:
            scores = np.round(scores, 1)
        e, d = _scan(scores, labels)
        m = evalkit.det_metrics(scores, labels)
        worst = max(worst, abs(m.eer - e), abs(m.min_dcf - d))
    example = np.array([0.9, 0.6, 0.4, 0.5, 0.2, 0.1]), np.array([1, 1, 1, 0, 0, 0], bool)
    e_ex, d_ex = evalkit.eer(*example)[0], evalkit.min_dcf(*example)[0]
    seconds = time.perf_counter() - start
    ok = worst <= 1e-12 and round(e_ex, 4) == 33.3333 and round(d_ex, 4) == 0.3333 and seconds < 30
    record(3, ok, f"max deviation from scan {worst:.1e} over 100 sets; worked example EER {e_ex:.4f}% "
                  f"minDCF {d_ex:.4f}; {seconds:.1f}s")


def test_criterion_4_additive_split(ablation, tmp_path):
    ds = ablation["dataset0"]
    subset = syndata.Dataset(ds.sequences[:1000], ds.manifest[:1000], ds.eval_speakers)
    syndata.write_dataset(subset, tmp_path / "data")
    ckpt = str(ablation["full", 0]["checkpoint"])
    parts = {}
    for which in ("init", "age", "id"):
        out = tmp_path / f"{which}.csv"
        assert cli.main(["export-embeddings", ckpt, "--data", str(tmp_path / "data"),
                         "--which", which, "--out", str(out)]) == 0
        parts[which] = np.array([[float(v) for v in line.split(",")[3:]]
                                 for line in out.read_text().splitlines()])
    err = float(np.abs(parts["age"] + parts["id"] - parts["init"]).max())
    record(4, len(parts["init"]) == 1000 and err <= 1e-6,
           f"max |x_age + x_id - x_init| = {err:.2e} over {len(parts['init'])} exported utterances (limit 1e-6)")


def test_criterion_5_ablation_ordering(ablation):
    med = {m: _median(ablation, m, "eer") for m in MODES}
    wins = sum(ablation["full", s]["eer"] <= ablation["no_aa", s]["eer"] for s in SEEDS)
    per_seed = "; ".join(f"seed {s}: " + " ".join(f"{m} {ablation[m, s]['eer']:.3f}" for m in MODES)
                         for s in SEEDS)
    ok = med["no_mim"] - med["full"] >= 0.5 and wins >= 2 and ablation["seconds"] < 1800
    record(5, ok, f"median EER full {med['full']:.3f} / no_aa {med['no_aa']:.3f} / no_mim {med['no_mim']:.3f}; "
                  f"full <= no_aa in {wins}/3 seeds; runs took {ablation['seconds']:.0f}s ({per_seed})")


def test_criterion_6_age_probe(ablation):
    pid, pinit = _median(ablation, "full", "probe_id"), _median(ablation, "full", "probe_init")
    record(6, pid < pinit, f"median age-probe accuracy x_id {pid:.1f}% vs x_init {pinit:.1f}% (full mode)")


def test_criterion_7_mi_reduction(ablation):
    final, init = _median(ablation, "full", "mi"), _median(ablation, "full", "mi_init")
    baseline = _median(ablation, "no_mim", "mi")
    record(7, final < init and final < baseline,
           f"median held-out MI: full final {final:.2f}, initialisation {init:.2f}, no_mim final {baseline:.2f}")


def test_criterion_8_determinism(tmp_path):
    base = load_config(PRESET)
    ds = syndata.generate(base.gen)
    cfg = replace(base.train, epochs=2)
    for name in ("a", "b"):
        trainer.train(ds, cfg, tmp_path / name)
    same_log = (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
    first = (tmp_path / "a" / "checkpoint.bin").read_bytes()
    trainer.save_checkpoint(trainer.load_checkpoint(tmp_path / "a" / "checkpoint.bin"), tmp_path / "again.bin")
    same_ckpt = (tmp_path / "again.bin").read_bytes() == first
    record(8, same_log and same_ckpt, f"metrics logs identical: {same_log}; checkpoint save-load-save identical: "
                                      f"{same_ckpt} ({len(first)} bytes)")


def test_criterion_9_reductions():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((16, 8)), rng.standard_normal((6, 8))
    labels = rng.integers(0, 6, 16)
    cos = (x / np.linalg.norm(x, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
    ce = float(np.mean(np.log(np.exp(cos).sum(1)) - cos[np.arange(16), labels]))
    arc_err = abs(arcface_loss(x, labels, w, ArcFaceHead(1.0, 0.0)).item() - ce)

    q = init_estimator(8, rng)
    x_id, x_age = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
    pairing = sample_negatives(16, rng)
    ages = np.full(16, 37.5)
    aa_err = abs(aa_mim_loss(x_id, x_age, ages, pairing, q, math.e).item()
                 - aa_mim_loss(x_id, x_age, ages, pairing, q, math.e, aging_aware=False).item())

    from agemim import backbone
    params = backbone.init_backbone(backbone.BackboneConfig(4, (6,), 8, 5), rng)
    params["asp.attn.v"] = np.zeros_like(params["asp.attn.v"])
    fmap = rng.standard_normal((3, 9, 6))
    pool_err = float(np.abs(backbone.attentive_stats(fmap, params).data - backbone.pooled_stats(fmap).data).max())
    ok = arc_err <= 1e-9 and aa_err <= 1e-12 and pool_err <= 1e-12
    record(9, ok, f"ArcFace(m=0,s=1) vs cosine softmax {arc_err:.1e} (1e-9); zero-gap AA vs unweighted "
                  f"{aa_err:.1e} (1e-12); uniform attention vs plain pooling {pool_err:.1e} (1e-12)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
