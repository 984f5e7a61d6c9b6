"""Command-line entry point: ``agemim <verb> [options]``.

Exit codes: 0 success, 1 failed checks, 2 usage or configuration error,
3 numerical failure during training.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import checks, evalkit, syndata, trainer
from .backbone import embed
from .config import ConfigError, RunConfig, emit_config, load_config
from .miest import estimate_mi

DATA_ENV = "AGEMIM_DATA"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("agemim")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    path = getattr(args, "data", None) or cfg.data_dir or os.environ.get(DATA_ENV)
    if not path:
        raise UsageError(f"no data directory (use --data, data_dir, or ${DATA_ENV})")
    path = Path(path)
    if not (path / "manifest.tsv").exists():
        raise UsageError(f"{path}: no manifest.tsv")
    return path


def _out_dir(args, cfg: RunConfig) -> Path:
    path = args.out or cfg.out_dir
    if not path:
        raise UsageError("no output location (use --out or out_dir)")
    return Path(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ds = syndata.generate(cfg.gen)
    held = [e for e in ds.manifest if e.speaker_id in ds.eval_speakers]
    sets = {}
    for gap in syndata.GAP_TIERS:
        for name, match in ((f"only-ca{gap}", False), (f"vox-ca{gap}", True)):
            try:
                sets[name] = syndata.build_trials(held, gap, match, cfg.seed)
            except syndata.NoPositivesError as err:
                print(f"error: trial tier {name}: {err}", file=sys.stderr)
                return EXIT_USAGE
    syndata.write_dataset(ds, out)
    (out / "trials").mkdir(exist_ok=True)
    for name, trials in sets.items():
        syndata.write_trials(out / "trials" / f"{name}.txt", trials)
    (out / "config.txt").write_text(emit_config(cfg), encoding="utf-8")
    print(f"# seed={cfg.seed}")
    print(f"speakers\t{cfg.gen.num_speakers}\t(eval {len(ds.eval_speakers)})")
    print(f"utterances\t{len(ds)}")
    for name, trials in sets.items():
        n_t = sum(t.target for t in trials)
        print(f"{name}\ttarget {n_t}\tnontarget {len(trials) - n_t}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.mode:
        from dataclasses import replace
        cfg = replace(cfg, train=replace(cfg.train, mode=args.mode))
        cfg.train.validate()
    data = _data_dir(args, cfg)
    out = _out_dir(args, cfg)
    ds = syndata.load_dataset(data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_config(cfg), encoding="utf-8")
    try:
        state, history = trainer.train(ds, cfg.train, out)
    except trainer.TrainingDiverged as err:
        print(f"error: training diverged: {err}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    if not history:
        trainer.save_checkpoint(state, out / "checkpoint.bin")
    print(f"# seed={cfg.seed} mode={cfg.train.mode}")
    print(f"epochs\t{state.epoch}\tsteps\t{state.step}")
    print(f"checkpoint\t{out / 'checkpoint.bin'}")
    return EXIT_OK


def _embeddings(ckpt: Path, ds: syndata.Dataset):
    state = trainer.load_checkpoint(ckpt)
    emb = embed(ds.sequences, state.phi)
    return state, emb


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = _data_dir(args, cfg)
    ds = syndata.load_dataset(data)
    trial_files = args.trials or sorted((data / "trials").glob("*.txt"))
    if not trial_files:
        raise UsageError("no trial files given and none found under <data>/trials")
    trial_sets = {Path(p).stem: syndata.read_trials(p) for p in trial_files}
    known = {s.utterance_id for s in ds.sequences}
    missing = sorted({u for ts in trial_sets.values() for t in ts
                      for u in (t.enroll_utt, t.test_utt)} - known)
    if missing:
        print("error: trial ids absent from data: " + " ".join(missing), file=sys.stderr)
        return EXIT_USAGE
    _, emb = _embeddings(Path(args.checkpoint), ds)
    table = dict(zip((s.utterance_id for s in ds.sequences), emb.x_id))
    rows = {}
    for name, trials in trial_sets.items():
        scores = evalkit.score_trials(table, trials)
        rows[name] = evalkit.det_metrics(scores, [t.target for t in trials],
                                         cfg.eval.p_target, cfg.eval.c_fa, cfg.eval.c_miss)
    report = evalkit.format_report(rows)
    sys.stdout.write(report)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    return EXIT_OK


def gaussian_mi_report(rhos: list[float], samples: int, steps: int, lr: float,
                       seed: int) -> tuple[float, float]:
    """(estimate, truth) for a freshly trained estimator on correlated Gaussians."""
    spec = syndata.GaussianPairSpec(tuple(rhos))
    x, y = syndata.gaussian_pairs(spec, samples, seed)
    x_test, y_test = syndata.gaussian_pairs(spec, min(samples, 8192), seed + 1)
    theta = trainer.fit_estimator(x, y, steps=steps, lr=lr, seed=seed)
    return estimate_mi(x_test, y_test, theta), syndata.true_mi(spec)


def cmd_estimate_mi(args) -> int:
    cfg = _config(args)
    if args.gaussian is not None:
        if any(abs(r) >= 1 for r in args.gaussian):
            raise UsageError("every correlation must satisfy |rho| < 1")
        est, truth = gaussian_mi_report(args.gaussian, args.samples or cfg.eval.mi_samples,
                                        cfg.eval.mi_fit_steps, cfg.eval.mi_fit_lr, cfg.seed)
        print(f"# seed={cfg.seed}")
        print("estimate\ttruth\tgap")
        print(f"{est:.6f}\t{truth:.6f}\t{est - truth:.6f}")
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError("give --gaussian RHO... or a checkpoint")
    ds = syndata.load_dataset(_data_dir(args, cfg))
    state = trainer.load_checkpoint(args.checkpoint)
    est = trainer.probe_mi(state.phi, ds, steps=cfg.eval.probe_steps, lr=cfg.eval.probe_lr,
                           seed=cfg.seed)
    print(f"# seed={cfg.seed} mode={state.cfg.mode}")
    print(f"estimate\t{est:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = checks.run_gradchecks(points=args.points)
    sys.stdout.write(checks.format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


def cmd_export_embeddings(args) -> int:
    cfg = _config(args)
    ds = syndata.load_dataset(_data_dir(args, cfg))
    out = _out_dir(args, cfg)
    _, emb = _embeddings(Path(args.checkpoint), ds)
    vectors = {"init": emb.x_init, "age": emb.x_age, "id": emb.x_id}[args.which]
    with open(out, "w", encoding="utf-8") as fh:
        for seq, vec in zip(ds.sequences, vectors):
            values = ",".join(repr(float(v)) for v in vec)
            fh.write(f"{seq.utterance_id},{seq.speaker_id},{seq.age_years!r},{values}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="agemim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset and trial lists")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="alternating backbone/estimator training")
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    p.add_argument("--mode", choices=trainer.MODES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="EER/minDCF of a checkpoint on trial lists")
    p.add_argument("checkpoint")
    p.add_argument("trials", nargs="*")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estimate-mi", parents=[common], help="CLUB estimate on a checkpoint or Gaussians")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--data")
    p.add_argument("--gaussian", type=float, nargs="+", metavar="RHO")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_estimate_mi)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss graph")
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", parents=[common], help="dump one embedding per utterance")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--which", choices=("init", "age", "id"), default="id")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FileNotFoundError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
