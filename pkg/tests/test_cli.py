"""Tests for the command-line entry point."""

import csv

import numpy as np
import pytest
from scipy import stats

from emaformer import cli, gradsuite
from emaformer import nncore as nn
from emaformer.datakit import load_corpus, manifest_digest, read_manifest
from emaformer.evalkit import collect_durations
from emaformer.models import load_model
from emaformer.nncore import functional as F
from emaformer.nncore.tensor import make_result
from emaformer.trainkit import evaluate_model

TINY_CFG = """max_epochs=1
lr=1e-3
d_model=8
dur_channels=8
pe_dim=4
conv_hidden=8
enc_layers=1
dec_layers=1
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert cli.main(["synth", "--out", str(out), "--seed", "4", "--subjects", "2",
                     "--sentences", "10", "--vocab-size", "6"]) == 0
    return out / "manifest.tsv"


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


class TestParser:
    def test_unknown_flag_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--out", "x", "--bogus"])
        assert exc.value.code != 0

    def test_help_documents_every_flag(self):
        parser = cli.build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        assert set(sub.choices) == {"synth", "train", "eval", "infer", "bench", "gradcheck"}
        for name, p in sub.choices.items():
            text = p.format_help()
            for action in p._actions:
                for opt in action.option_strings:
                    assert opt in text, (name, opt)
                assert action.help, (name, action.dest)

    def test_common_flags(self):
        sub = next(a for a in cli.build_parser()._actions if a.dest == "command")
        opts = {o for a in sub.choices["train"]._actions for o in a.option_strings}
        assert {"--config", "--manifest", "--seed", "--out"} <= opts


class TestSynth:
    def test_writes_manifest_deterministically(self, capsys, tmp_path):
        for d in ("a", "b"):
            code, out, _ = run(capsys, "synth", "--out", tmp_path / d, "--subjects", "1", "--sentences", "5")
            assert code == 0 and "ols_cc" in out
        assert manifest_digest(tmp_path / "a" / "manifest.tsv") == manifest_digest(tmp_path / "b" / "manifest.tsv")

    def test_invalid_spec(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--out", tmp_path, "--sentences", "1")
        assert code != 0 and err.startswith("error:") and err.count("\n") == 1


class TestTrain:
    @pytest.mark.parametrize("mode", ["none", "additive", "concatenative", "relative"])
    def test_all_encodings_for_aai(self, capsys, tmp_path, corpus, tiny_cfg, mode):
        code, out, err = run(capsys, "train", "--task", "aai", "--pe-mode", mode, "--config", tiny_cfg,
                             "--manifest", corpus, "--subjects", "S01", "--out", tmp_path)
        assert code == 0, err
        assert (tmp_path / "S01.ckpt").exists() and (tmp_path / "metrics.csv").exists()
        assert "S01 cc=" in out

    def test_pta_relative_accepted(self, capsys, tmp_path, corpus, tiny_cfg):
        code, out, err = run(capsys, "train", "--task", "pta", "--pe-mode", "relative", "--config",
                             tiny_cfg, "--manifest", corpus, "--subjects", "S02", "--out", tmp_path)
        assert code == 0, err
        assert "dur_mae=" in out

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--task", "aai", "--manifest", tmp_path / "none.tsv",
                           "--out", tmp_path)
        assert code != 0 and "manifest not found" in err

    def test_bad_config(self, capsys, tmp_path, corpus):
        (tmp_path / "bad.cfg").write_text("d_model=6\nn_heads=4\npe_mode=none\n")
        code, _, err = run(capsys, "train", "--task", "aai", "--manifest", corpus,
                           "--config", tmp_path / "bad.cfg", "--out", tmp_path)
        assert code != 0 and "divisible" in err

    def test_e3_without_source(self, capsys, tmp_path, corpus):
        code, _, err = run(capsys, "train", "--task", "aai", "--setup", "E3", "--manifest", corpus,
                           "--out", tmp_path)
        assert code != 0 and "E3" in err


@pytest.fixture(scope="module")
def pta_run(tmp_path_factory, corpus, tiny_cfg):
    out = tmp_path_factory.mktemp("pta_run")
    assert cli.main(["train", "--task", "pta", "--config", str(tiny_cfg), "--manifest", str(corpus),
                     "--setup", "E2", "--out", str(out)]) == 0
    return out


class TestEvalInfer:
    def test_eval_pta_writes_tables(self, capsys, tmp_path, corpus, pta_run):
        code, out, err = run(capsys, "eval", "--checkpoint", pta_run / "pooled.ckpt", "--manifest", corpus,
                             "--split", "train", "--out", tmp_path)
        assert code == 0, err
        rows = list(csv.reader(open(tmp_path / "metrics.csv")))
        assert all(len(r) == 6 for r in rows)
        table = list(csv.DictReader(open(tmp_path / "durations.csv")))
        assert table

    def test_duration_table_matches_statistics_oracle(self, corpus, pta_run, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(pta_run / "pooled.ckpt"), "--manifest", str(corpus),
                         "--split", "train", "--out", str(tmp_path)]) == 0
        model, _ = load_model(pta_run / "pooled.ckpt")
        outcome = evaluate_model(model, load_corpus(read_manifest(corpus), "train"))
        gt, pred = collect_durations(outcome.durations)
        row = next(r for r in csv.DictReader(open(tmp_path / "durations.csv"))
                   if np.var(pred[int(r["phoneme"])]) > 0)
        ph = int(row["phoneme"])
        ref = stats.ttest_ind(gt[ph], pred[ph], equal_var=False)
        assert abs(float(row["p_value"]) - ref.pvalue) < 1e-3

    def test_infer_pta(self, capsys, tmp_path, pta_run):
        (tmp_path / "in.phn").write_text("1 3 2 5\n")
        code, _, err = run(capsys, "infer", "--checkpoint", pta_run / "pooled.ckpt", "--input",
                           tmp_path / "in.phn", "--out", tmp_path / "o")
        assert code == 0, err
        durs = [int(v) for v in (tmp_path / "o" / "durations.txt").read_text().split()]
        traj = np.loadtxt(tmp_path / "o" / "trajectory.csv", delimiter=",", ndmin=2)
        assert len(durs) == 4 and min(durs) >= 1 and traj.shape == (sum(durs), 12)

    def test_infer_pta_rejects_bad_ids(self, capsys, tmp_path, pta_run):
        (tmp_path / "in.phn").write_text("1 99\n")
        code, _, err = run(capsys, "infer", "--checkpoint", pta_run / "pooled.ckpt", "--input",
                           tmp_path / "in.phn", "--out", tmp_path / "o")
        assert code != 0 and "phoneme ids" in err

    def test_infer_aai(self, capsys, tmp_path, corpus, tiny_cfg):
        assert cli.main(["train", "--task", "aai", "--config", str(tiny_cfg), "--manifest", str(corpus),
                         "--subjects", "S01", "--out", str(tmp_path / "m")]) == 0
        np.savetxt(tmp_path / "in.csv", np.random.default_rng(0).standard_normal((9, 13)), delimiter=",")
        code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "m" / "S01.ckpt", "--input",
                           tmp_path / "in.csv", "--out", tmp_path / "o")
        assert code == 0, err
        traj = np.loadtxt(tmp_path / "o" / "trajectory.csv", delimiter=",")
        assert traj.shape == (9, 12)

    def test_missing_checkpoint(self, capsys, tmp_path):
        (tmp_path / "in.phn").write_text("1\n")
        code, _, err = run(capsys, "infer", "--checkpoint", tmp_path / "no.ckpt", "--input",
                           tmp_path / "in.phn", "--out", tmp_path)
        assert code != 0 and err.startswith("error:")


class TestBench:
    def test_report_structure_and_monotonicity(self, capsys, tmp_path):
        code, out, err = run(capsys, "bench", "--n", "64,256,1024", "--d", "32", "--out", tmp_path / "b.csv")
        assert code == 0, err
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0].startswith("# attention-only")
        rows = list(csv.DictReader(lines[1:4]))
        assert list(rows[0]) == ["n", "d", "mean_s", "std_s"]
        times = [float(r["mean_s"]) for r in rows]
        assert times == sorted(times)
        assert "slope=" in out

    def test_too_few_reps_rejected(self, capsys, tmp_path):
        code, _, err = run(capsys, "bench", "--reps", "3", "--out", tmp_path / "b.csv")
        assert code != 0 and "10" in err

    def test_bad_list(self, capsys, tmp_path):
        code, _, err = run(capsys, "bench", "--n", "1,x", "--out", tmp_path / "b.csv")
        assert code != 0 and "--n" in err


class TestGradcheck:
    def test_subset_passes(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gradcheck", "--seeds", "2", "--cases", "linear,relu,fft_layer",
                           "--out", tmp_path / "g.csv")
        assert code == 0 and out.count("PASS") == 3
        assert (tmp_path / "g.csv").read_text().startswith("case,passed")

    def test_sign_flipped_gradient_caught(self, capsys, monkeypatch):
        def flipped_relu(a):
            active = a.data > 0

            def backward(g):
                a._accumulate(-g * active)

            return make_result(a.data * active, (a,), backward)

        monkeypatch.setattr(F, "relu", flipped_relu)
        code, out, err = run(capsys, "gradcheck", "--seeds", "2", "--cases", "relu")
        assert code == 1 and "FAIL relu" in out and "failed" in err

    def test_runs_in_float64(self, capsys, monkeypatch):
        seen = []

        def probe(rng, seed):
            seen.append(nn.is_float64())
            return gradsuite.CASES["linear"](rng, seed)

        monkeypatch.setitem(gradsuite.CASES, "probe", probe)
        code, _, _ = run(capsys, "gradcheck", "--seeds", "2", "--cases", "probe")
        assert code == 0 and seen == [True, True]

    def test_unknown_case(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--cases", "nope")
        assert code != 0 and "nope" in err
