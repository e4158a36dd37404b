"""Acceptance gate: criteria 2-12, each at its fixed tolerance and budget.

Every test records a one-line verdict that is printed in the terminal summary.
Criterion 1 (the original corpus results) cannot be reproduced and has no test.
The training criteria use configs/desk.cfg; the budgets below are frozen.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from emaformer import bench, cli, gradsuite
from emaformer import nncore as nn
from emaformer.datakit import SyntheticSpec, generate_synthetic, load_corpus
from emaformer.models import ModelConfig, build_model, length_regulator
from emaformer.trainkit import (
    ExperimentPlan,
    TrainConfig,
    _mean_duration,
    overfit,
    read_config,
    run_experiment,
)
from emaformer.transformer import (
    relative_attention,
    relative_index,
    scaled_dot_attention,
    sinusoidal_pe,
)

from emaformer.evalkit import dtw
from test_evalkit import brute_force_dtw

DESK_CFG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"

# frozen budgets and tolerances
GRAD_TOL, GRAD_SEEDS, GRAD_BUDGET_S = 1e-4, 20, 120.0
DTW_PAIRS, DTW_BUDGET_S = 200, 10.0
LR_CASES, LR_BUDGET_S = 1000, 5.0
PE_TOL = 1e-6
REL_CASES = 50
AAI_CC_MARGIN, AAI_BUDGET_S = 0.05, 15 * 60.0
# Thresholds fixed before the gate from a pilot on seed 0, where PTA reached
# CC 0.976 and a duration MAE of 13.0% of the mean duration.
PTA_MIN_CC, PTA_MAX_REL_MAE, PTA_BUDGET_S = 0.7, 0.20, 20 * 60.0
TREND_E2_EPOCHS, TREND_E3_EPOCHS, TREND_SENTENCES, E3_SLACK = 10, 5, 100, 0.02
OVERFIT_TARGET, OVERFIT_EPOCHS = 1e-2, 500
BENCH_NS, BENCH_D = [256, 512, 1024, 2048], 32


def desk_configs(task, **train_overrides):
    train_kw, model_kw = read_config(DESK_CFG)
    train_kw.update(train_overrides)
    return TrainConfig(**train_kw), model_kw


@pytest.fixture(scope="module")
def one_subject(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_one")
    return generate_synthetic(SyntheticSpec(seed=0, n_subjects=1, sentences_per_subject=200), out)


@pytest.fixture(scope="module")
def four_subjects(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc_four")
    return generate_synthetic(SyntheticSpec(seed=0, n_subjects=4,
                                            sentences_per_subject=TREND_SENTENCES), out)


class TestAcceptance:
    def test_c02_gradient_suite(self, acceptance):
        t0 = time.perf_counter()
        results = gradsuite.run_suite(GRAD_SEEDS, 0, GRAD_TOL)
        elapsed = time.perf_counter() - t0
        failed = [r.name for r in results if not r.report.passed]
        worst = max(results, key=lambda r: r.report.max_rel_error)
        ok = not failed and elapsed < GRAD_BUDGET_S
        acceptance.record(2, ok, f"gradient suite: {len(results)} cases x {GRAD_SEEDS} seeds, "
                                 f"worst {worst.report.max_rel_error:.2e} ({worst.name}), "
                                 f"failed={failed or 'none'}, {elapsed:.1f}s < {GRAD_BUDGET_S:.0f}s")
        assert not failed
        assert elapsed < GRAD_BUDGET_S

    def test_c03_dtw_brute_force(self, acceptance):
        rng = np.random.default_rng(3)
        t0 = time.perf_counter()
        mismatches = 0
        for _ in range(DTW_PAIRS):
            n, m = rng.integers(1, 6, size=2)
            p, g = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
            mismatches += dtw(p, g).total_cost != brute_force_dtw(p, g)
        elapsed = time.perf_counter() - t0
        ok = mismatches == 0 and elapsed < DTW_BUDGET_S
        acceptance.record(3, ok, f"DTW exact vs exhaustive paths: {DTW_PAIRS} pairs, "
                                 f"{mismatches} mismatches, {elapsed:.2f}s < {DTW_BUDGET_S:.0f}s")
        assert mismatches == 0 and elapsed < DTW_BUDGET_S

    def test_c04_length_regulator(self, acceptance):
        rng = np.random.default_rng(4)
        t0 = time.perf_counter()
        bad = 0
        with nn.float64_mode():
            H = np.arange(1.0, 5.0)[:, None] * np.ones((1, 2))
            worked = length_regulator(nn.Tensor(H), [2, 2, 3, 1]).data[:, 0].tolist()
            bad += worked != [1, 1, 2, 2, 3, 3, 3, 4]
            for _ in range(LR_CASES):
                m, d = int(rng.integers(1, 12)), int(rng.integers(1, 6))
                D = rng.integers(0, 6, size=m)
                if D.sum() == 0:
                    D[rng.integers(m)] = 1
                H = rng.standard_normal((m, d))
                out = length_regulator(nn.Tensor(H), D).data
                expected = np.repeat(H, D, axis=0)
                bad += out.shape[0] != D.sum() or not np.array_equal(out, expected)
        elapsed = time.perf_counter() - t0
        ok = bad == 0 and elapsed < LR_BUDGET_S
        acceptance.record(4, ok, f"length regulator: worked example + {LR_CASES} random cases, "
                                 f"{bad} failures, {elapsed:.2f}s < {LR_BUDGET_S:.0f}s")
        assert bad == 0 and elapsed < LR_BUDGET_S

    def test_c05_positional_encoding(self, acceptance):
        rng = np.random.default_rng(5)
        zero_ok = all(np.array_equal(sinusoidal_pe(4, d)[0], np.r_[np.zeros(d // 2), np.ones(d // 2)])
                      for d in (2, 8, 64, 128))
        d = 128
        pe = sinusoidal_pe(400, d)
        worst = 0.0
        for _ in range(2000):
            pos, j = int(rng.integers(400)), int(rng.integers(d))
            i = 2 * (j % (d // 2))
            angle = pos / 10000 ** (i / d)
            ref = math.sin(angle) if j < d // 2 else math.cos(angle)
            worst = max(worst, abs(float(pe[pos, j]) - ref))
        prefix_ok = True
        for _ in range(50):
            n1 = int(rng.integers(1, 200))
            n2 = int(rng.integers(n1 + 1, 401))
            prefix_ok &= np.array_equal(sinusoidal_pe(n1, 64), sinusoidal_pe(n2, 64)[:n1])
        ok = zero_ok and worst < PE_TOL and prefix_ok
        acceptance.record(5, ok, f"sinusoidal PE: PE(0) exact={zero_ok}, max closed-form error "
                                 f"{worst:.1e} < {PE_TOL:.0e}, prefix extension={prefix_ok}")
        assert zero_ok and prefix_ok and worst < PE_TOL

    def test_c06_relative_attention(self, acceptance):
        rng = np.random.default_rng(6)
        identical = 0
        for _ in range(REL_CASES):
            B, h, n, dh = (int(v) for v in rng.integers(1, 5, size=4))
            k = int(rng.integers(1, 12))
            q, kk, v = (nn.Tensor(rng.standard_normal((B, h, n, dh)).astype(np.float32)) for _ in range(3))
            mask = (rng.random((B, n)) > 0.3).astype(np.float32)
            mask[:, 0] = 1
            rel, _ = relative_attention(q, kk, v, nn.Tensor(np.zeros((2 * k + 1, dh), np.float32)), k, mask)
            ab, _ = scaled_dot_attention(q, kk, v, mask)
            identical += np.array_equal(rel.data, ab.data)
        K = 10
        idx = relative_index(16, K)  # offsets j - i cover [-15, 15]
        offsets_ok = all(idx[i, j] == max(-K, min(K, j - i)) + K
                         for i in range(16) for j in range(16))
        covered = sorted({j - i for i in range(16) for j in range(16)})
        offsets_ok &= covered == list(range(-15, 16))
        ok = identical == REL_CASES and offsets_ok
        acceptance.record(6, ok, f"relative attention: zero table bitwise equal in "
                                 f"{identical}/{REL_CASES} cases, clip(j-i,10) indexing for "
                                 f"offsets [-15,15] ok={offsets_ok}")
        assert identical == REL_CASES and offsets_ok

    def test_c07_aai_e1(self, acceptance, one_subject, tmp_path):
        train_cfg, model_kw = desk_configs("aai")
        t0 = time.perf_counter()
        res = run_experiment(ExperimentPlan("E1"), train_cfg, ModelConfig(task="aai", **model_kw),
                             one_subject, tmp_path)
        elapsed = time.perf_counter() - t0
        cc = res.subjects["S01"].outcome.mean_cc
        floor = float(one_subject.header["ols_cc"]) - AAI_CC_MARGIN
        ok = cc >= floor and elapsed <= AAI_BUDGET_S
        acceptance.record(7, ok, f"AAI E1: held-out CC {cc:.4f} >= OLS {floor + AAI_CC_MARGIN:.4f} - "
                                 f"{AAI_CC_MARGIN} = {floor:.4f}, {elapsed:.0f}s <= {AAI_BUDGET_S:.0f}s")
        assert cc >= floor and elapsed <= AAI_BUDGET_S

    def test_c08_pta_e1(self, acceptance, one_subject, tmp_path):
        train_cfg, model_kw = desk_configs("pta")
        t0 = time.perf_counter()
        res = run_experiment(ExperimentPlan("E1"), train_cfg,
                             ModelConfig(task="pta", vocab_size=int(one_subject.header["vocab_size"]),
                                         **model_kw), one_subject, tmp_path)
        elapsed = time.perf_counter() - t0
        outcome = res.subjects["S01"].outcome
        mean_dur = float(np.concatenate([g for _, g, _ in outcome.durations]).mean())
        rel_mae = outcome.duration_mae / mean_dur
        ok = outcome.mean_cc >= PTA_MIN_CC and rel_mae <= PTA_MAX_REL_MAE and elapsed <= PTA_BUDGET_S
        acceptance.record(8, ok, f"PTA E1: post-DTW CC {outcome.mean_cc:.4f} >= {PTA_MIN_CC}, duration "
                                 f"MAE {outcome.duration_mae:.3f}/{mean_dur:.2f} = {rel_mae:.1%} <= "
                                 f"{PTA_MAX_REL_MAE:.0%}, {elapsed:.0f}s <= {PTA_BUDGET_S:.0f}s")
        assert outcome.mean_cc >= PTA_MIN_CC
        assert rel_mae <= PTA_MAX_REL_MAE
        assert elapsed <= PTA_BUDGET_S

    def test_c09_trends(self, acceptance, four_subjects, tmp_path):
        vocab = int(four_subjects.header["vocab_size"])
        e2, e3 = {}, {}
        for task in ("aai", "pta"):
            train_cfg, model_kw = desk_configs(task, max_epochs=TREND_E2_EPOCHS)
            model_cfg = ModelConfig(task=task, vocab_size=vocab, **model_kw)
            res2 = run_experiment(ExperimentPlan("E2"), train_cfg, model_cfg, four_subjects,
                                  tmp_path / f"{task}_e2")
            e2[task] = {s: r.outcome.mean_cc for s, r in res2.subjects.items()}
            tune_cfg, _ = desk_configs(task, max_epochs=TREND_E3_EPOCHS)
            res3 = run_experiment(ExperimentPlan("E3", None, str(tmp_path / f"{task}_e2" / "pooled.ckpt")),
                                  tune_cfg, model_cfg, four_subjects, tmp_path / f"{task}_e3")
            e3[task] = {s: r.outcome.mean_cc for s, r in res3.subjects.items()}
        aai_mean, pta_mean = np.mean(list(e2["aai"].values())), np.mean(list(e2["pta"].values()))
        trend_a = aai_mean > pta_mean
        drops = {f"{t}:{s}": e3[t][s] - e2[t][s] for t in e2 for s in e2[t]}
        trend_b = all(d >= -E3_SLACK for d in drops.values())
        worst = min(drops, key=drops.get)
        acceptance.record(9, trend_a and trend_b,
                          f"trends: (a) AAI E2 CC {aai_mean:.4f} > PTA E2 CC {pta_mean:.4f} = {trend_a}; "
                          f"(b) E3 >= E2 - {E3_SLACK} per subject = {trend_b} "
                          f"(worst {worst} {drops[worst]:+.4f})")
        assert trend_a, (aai_mean, pta_mean)
        assert trend_b, drops

    def test_c10_overfit_probe(self, acceptance, one_subject):
        sents = load_corpus(one_subject, "train")[:2]
        _, model_kw = desk_configs("aai")
        model_kw["keep_prob"] = 1.0  # deterministic forward pass for the memorization probe
        reached = {}
        for task in ("aai", "pta"):
            model = build_model(ModelConfig(task=task, vocab_size=int(one_subject.header["vocab_size"]),
                                            **model_kw), 0)
            if task == "pta":
                model.duration.proj.bias.data[:] = _mean_duration(sents)
            losses = overfit(model, sents, TrainConfig(lr=1e-3, dur_weight=0.1),
                             OVERFIT_EPOCHS, OVERFIT_TARGET)
            reached[task] = (len(losses), losses[-1])
        ok = all(loss < OVERFIT_TARGET for _, loss in reached.values())
        acceptance.record(10, ok, "overfit probe on 2 sentences: " + ", ".join(
            f"{t} loss {loss:.4f} after {n} epochs" for t, (n, loss) in reached.items())
            + f" (target < {OVERFIT_TARGET}, max {OVERFIT_EPOCHS})")
        assert ok, reached

    def test_c11_determinism(self, acceptance, tmp_path):
        corpus = tmp_path / "corpus"
        generate_synthetic(SyntheticSpec(seed=9, n_subjects=1, sentences_per_subject=30), corpus)
        cfg = tmp_path / "small.cfg"
        cfg.write_text("max_epochs=3\nlr=1e-3\ndur_weight=0.1\nd_model=16\ndur_channels=16\npe_dim=8\n")
        same = {}
        for task in ("aai", "pta"):
            outputs = []
            for run in ("a", "b"):
                out = tmp_path / f"{task}_{run}"
                code = cli.main(["train", "--task", task, "--config", str(cfg), "--manifest",
                                 str(corpus / "manifest.tsv"), "--seed", "7", "--out", str(out)])
                assert code == 0
                outputs.append((out / "metrics.csv").read_bytes())
            same[task] = outputs[0] == outputs[1]
        ok = all(same.values())
        acceptance.record(11, ok, f"determinism: metrics.csv byte-identical across two seeded "
                                  f"train runs: {same}")
        assert ok

    def test_c12_bench(self, acceptance, tmp_path):
        report = bench.run_bench(BENCH_NS, [BENCH_D], reps=10, warmup=3)
        bench.write_bench_csv(tmp_path / "bench.csv", report)
        ratio = report.top_ratio[BENCH_D]
        acceptance.record(12, None, f"bench (informative): d={BENCH_D} t(2048)/t(1024) = {ratio:.2f} "
                                    f"({'>=' if ratio >= 2 else '<'} 2), log-log slope "
                                    f"{report.slopes[BENCH_D]:.2f}")
        assert list(report.top_ratio) == [BENCH_D]
