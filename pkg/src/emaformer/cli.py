"""Command-line entry point: synth, train, eval, infer, bench, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradsuite
from .datakit import (
    DataError,
    Sentence,
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    read_frames,
    read_int_line,
    read_manifest,
    write_frames,
    write_int_line,
)
from .evalkit import collect_durations, duration_significance, write_duration_csv, write_metrics_csv
from .models import N_ACOUSTIC, PTAModel, ModelConfig, load_model
from .nncore import CheckpointError
from .transformer import PE_MODES, ConfigError
from .trainkit import (
    SETUPS,
    ExperimentError,
    ExperimentPlan,
    TrainConfig,
    evaluate_model,
    predict,
    read_config,
    run_experiment,
    write_config,
)

log = logging.getLogger("emaformer")

EXPECTED_ERRORS = (DataError, ConfigError, ExperimentError, CheckpointError, ValueError,
                   OSError, KeyError)


class CliError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser, manifest: bool = True, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="flat key=value file of training/model settings")
    if manifest:
        p.add_argument("--manifest", help="corpus manifest (manifest.tsv)")
    p.add_argument("--seed", type=int, default=0, help="the single source of randomness (default 0)")
    p.add_argument("--out", required=True, help="output directory (or file for bench)")


def _subject_list(text: str | None) -> list[str] | None:
    if not text:
        return None
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emaformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    _common(p, manifest=False, config=False)
    p.add_argument("--subjects", type=int, default=4, help="number of subjects (default 4)")
    p.add_argument("--sentences", type=int, default=200, help="sentences per subject (default 200)")
    p.add_argument("--vocab-size", type=int, default=20, help="phoneme inventory size (default 20)")
    p.add_argument("--noise-std", type=float, default=0.05, help="acoustic noise std (default 0.05)")
    p.add_argument("--subject-scale", type=float, default=0.1,
                   help="strength of the per-subject articulator map (default 0.1)")

    p = sub.add_parser("train", help="train and test models for one experiment setup")
    _common(p)
    p.add_argument("--task", required=True, choices=("aai", "pta"), help="aai or pta")
    p.add_argument("--setup", default="E1", choices=SETUPS,
                   help="E1 per-subject, E2 pooled, E3 fine-tune a pooled checkpoint (default E1)")
    p.add_argument("--pe-mode", choices=PE_MODES, help="positional encoding (default per task)")
    p.add_argument("--source", help="pooled checkpoint to fine-tune (E3 only)")
    p.add_argument("--subjects", help="comma-separated subject ids (default all)")

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="default test")
    p.add_argument("--subjects", help="comma-separated subject ids (default all)")

    p = sub.add_parser("infer", help="predict a trajectory for one input file")
    _common(p, manifest=False, config=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--input", required=True,
                   help="phoneme-id file (pta) or acoustic CSV with 13 columns (aai)")

    p = sub.add_parser("bench", help="time one FFT layer against sequence length")
    _common(p, manifest=False, config=False)
    p.add_argument("--n", default="128,256,512,1024,2048", help="comma-separated lengths")
    p.add_argument("--d", default="32,64", help="comma-separated model widths")
    p.add_argument("--reps", type=int, default=10, help="timed repetitions, >= 10")
    p.add_argument("--warmup", type=int, default=3, help="discarded warm-up runs, >= 3")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="first seed of the sweep (default 0)")
    p.add_argument("--seeds", type=int, default=20, help="seeds per case (default 20)")
    p.add_argument("--tol", type=float, default=gradsuite.TOL, help="relative tolerance")
    p.add_argument("--cases", help="comma-separated subset of cases (default all)")
    p.add_argument("--out", help="optional CSV report path")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _manifest(args):
    if not args.manifest:
        raise CliError("--manifest is required")
    return read_manifest(args.manifest)


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed, n_subjects=args.subjects,
                         sentences_per_subject=args.sentences, vocab_size=args.vocab_size,
                         noise_std=args.noise_std, subject_scale=args.subject_scale)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.records)} sentences to {Path(args.out) / 'manifest.tsv'} "
          f"(ols_cc={manifest.header['ols_cc']})")
    return 0


def cmd_train(args) -> int:
    manifest = _manifest(args)
    train_kw, model_kw = read_config(args.config) if args.config else ({}, {})
    train_kw["seed"] = args.seed
    if args.pe_mode:
        model_kw["pe_mode"] = args.pe_mode
    model_kw.setdefault("vocab_size", int(manifest.header.get("vocab_size", 39)))
    train_cfg = TrainConfig(**train_kw)
    model_cfg = ModelConfig(task=args.task, **model_kw)
    plan = ExperimentPlan(args.setup, _subject_list(args.subjects), args.source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.cfg", train_cfg, model_cfg)
    result = run_experiment(plan, train_cfg, model_cfg, manifest, out)
    for s, r in result.subjects.items():
        line = f"{s} cc={r.outcome.mean_cc:.4f} best_epoch={r.fit.best_epoch}"
        if r.outcome.durations:
            line += f" dur_mae={r.outcome.duration_mae:.3f}"
        print(line)
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    manifest = _manifest(args)
    model, _ = load_model(args.checkpoint)
    sentences = load_corpus(manifest, args.split, _subject_list(args.subjects))
    if not sentences:
        raise CliError(f"no {args.split} sentences selected")
    outcome = evaluate_model(model, sentences)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", outcome.reports)
    if outcome.durations:
        gt, pred = collect_durations(outcome.durations)
        write_duration_csv(out / "durations.csv", gt, pred, duration_significance(gt, pred))
    print(f"cc={outcome.mean_cc:.4f} over {len(sentences)} sentences")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_model(args.checkpoint)
    if isinstance(model, PTAModel):
        ids = read_int_line(args.input, "phoneme ids")
        if ids.min() < 1 or ids.max() > model.cfg.vocab_size:
            raise CliError(f"{args.input}: phoneme ids must lie in [1, {model.cfg.vocab_size}]")
        traj, durs = model.infer(ids[None, :])[0]
    else:
        acoustic = read_frames(args.input, N_ACOUSTIC)
        sent = Sentence("input", "", "", np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros((len(acoustic), 12)), acoustic)
        traj, _ = predict(model, [sent])[0]
        durs = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frames(out / "trajectory.csv", traj)
    if durs is not None:
        write_int_line(out / "durations.txt", durs)
    print(f"wrote {len(traj)} frames to {out / 'trajectory.csv'}")
    return 0


def _int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"{flag} expects comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise CliError(f"{flag} needs positive integers")
    return values


def cmd_bench(args) -> int:
    ns, ds = _int_list(args.n, "--n"), _int_list(args.d, "--d")
    report = bench.run_bench(ns, ds, args.reps, args.warmup, args.seed)
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "bench.csv"
    bench.write_bench_csv(out, report)
    for d, slope in report.slopes.items():
        print(f"d={d} slope={slope:.3f} superlinear={report.superlinear(d)}")
    return 0


def cmd_gradcheck(args) -> int:
    names = _subject_list(args.cases)
    unknown = set(names or []) - set(gradsuite.CASES)
    if unknown:
        raise CliError(f"unknown gradcheck cases: {sorted(unknown)}")
    results = gradsuite.run_suite(args.seeds, args.seed, args.tol, names)
    failed = 0
    for r in results:
        status = "PASS" if r.report.passed else "FAIL"
        failed += not r.report.passed
        print(f"{status} {r.name} max_rel_error={r.report.max_rel_error:.3e} seeds={r.seeds}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("case,passed,max_rel_error,seeds\n")
            for r in results:
                fh.write(f"{r.name},{int(r.report.passed)},{r.report.max_rel_error:.6e},{r.seeds}\n")
    if failed:
        print(f"error: {failed} gradient case(s) failed", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except (CliError, *EXPECTED_ERRORS) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
