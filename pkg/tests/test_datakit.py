"""Tests for corpus I/O, preprocessing and the synthetic generator."""

import shutil

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from emaformer.datakit import (
    CorpusManifest,
    DataError,
    ManifestRecord,
    PhonemeSequence,
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    load_sentence,
    lowpass,
    make_world,
    manifest_digest,
    normalize_sentence,
    ols_baseline,
    pad_and_mask,
    read_frames,
    read_manifest,
    synth_sentence,
    unpad,
    write_frames,
    write_int_line,
    write_manifest,
)
from emaformer.models import MAX_FRAMES, MAX_PHONEMES

SMALL = SyntheticSpec(seed=11, n_subjects=2, sentences_per_subject=10, vocab_size=8,
                      min_phonemes=3, max_phonemes=6)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_synthetic(SMALL, out)
    return out


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


class TestPadding:
    def test_full_length(self):
        x = np.arange(4)
        padded, mask = pad_and_mask(x, 4)
        np.testing.assert_array_equal(padded, x)
        assert mask.all()

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            pad_and_mask(np.zeros((0, 3)), 5)

    def test_too_long_rejected(self):
        with pytest.raises(DataError):
            pad_and_mask(np.zeros(6), 5)

    @given(st.integers(1, 20), st.integers(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, n, extra):
        x = np.random.default_rng(n).standard_normal((n, 3))
        padded, mask = pad_and_mask(x, n + extra)
        np.testing.assert_array_equal(unpad(padded, mask), x)
        assert not padded[n:].any()

    def test_phoneme_cap(self):
        with pytest.raises(DataError):
            PhonemeSequence.from_ids(np.ones(MAX_PHONEMES + 1, int))


class TestLowpass:
    t = np.arange(1000) / 250.0
    interior = slice(100, 900)

    def test_constant_unchanged(self):
        x = np.full((300, 2), 3.25)
        np.testing.assert_allclose(lowpass(x, 250, 25), x, atol=1e-9)

    def test_stopband_attenuation(self):
        x = np.sin(2 * np.pi * 50 * self.t)
        y = lowpass(x, 250, 25)
        assert 20 * np.log10(rms(y[self.interior]) / rms(x[self.interior])) <= -20

    def test_passband_preserved(self):
        x = np.sin(2 * np.pi * 5 * self.t)
        y = lowpass(x, 250, 25)
        assert abs(rms(y[self.interior]) / rms(x[self.interior]) - 1) < 0.05

    def test_zero_phase(self):
        x = np.sin(2 * np.pi * 5 * self.t)
        y = lowpass(x, 250, 25)
        lag = np.argmax(np.correlate(y[self.interior], x[self.interior], "full")) - 799
        assert lag == 0

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(ValueError):
            lowpass(np.zeros(50), 100, 60)


class TestNormalize:
    def test_already_normalized(self):
        x = np.random.default_rng(0).standard_normal((50, 3))
        x = (x - x.mean(0)) / x.std(0)
        np.testing.assert_allclose(normalize_sentence(x)[0], x, atol=1e-9)

    def test_constant_channel_zero(self):
        x = np.random.default_rng(1).standard_normal((10, 3))
        x[:, 1] = 4.0
        out, _, std = normalize_sentence(x)
        assert not out[:, 1].any() and std[1] == 0.0

    def test_stats_recomputed(self):
        x = np.random.default_rng(2).normal(3, 2, (40, 4))
        out, mean, std = normalize_sentence(x)
        np.testing.assert_allclose(mean, x.mean(0), atol=1e-12)
        np.testing.assert_allclose(std, np.sqrt(((x - x.mean(0)) ** 2).mean(0)), atol=1e-12)
        np.testing.assert_allclose(out.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(0), 1, atol=1e-12)


class TestSynthetic:
    def test_byte_identical_rerun(self, tmp_path):
        generate_synthetic(SMALL, tmp_path / "a")
        generate_synthetic(SMALL, tmp_path / "b")
        assert manifest_digest(tmp_path / "a" / "manifest.tsv") == manifest_digest(tmp_path / "b" / "manifest.tsv")

    def test_different_seed_differs(self, tmp_path):
        generate_synthetic(SMALL, tmp_path / "a")
        generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, "seed": 12}), tmp_path / "b")
        assert manifest_digest(tmp_path / "a" / "manifest.tsv") != manifest_digest(tmp_path / "b" / "manifest.tsv")

    def test_noiseless_identity_subject_is_affine(self):
        spec = SyntheticSpec(seed=3, n_subjects=1, noise_std=0.0, subject_scale=0.0)
        rng = np.random.default_rng(0)
        world = make_world(spec, rng)
        _, durs, art, ac = synth_sentence(spec, world, 0, rng)
        np.testing.assert_array_equal(world.subject_maps[0][0], np.eye(12))
        np.testing.assert_allclose(ac, art @ world.mixing.T + world.offset, atol=1e-12)
        assert len(art) == durs.sum() <= MAX_FRAMES

    def test_splits_and_header(self, corpus):
        manifest = read_manifest(corpus / "manifest.tsv")
        assert manifest.subjects() == ["S01", "S02"]
        counts = {s: len(manifest.select(s, ["S01"])) for s in ("train", "val", "test")}
        assert counts == {"train": 8, "val": 1, "test": 1}
        assert float(manifest.header["fs"]) == 100.0
        assert {"ols_cc", "ols_cc.S01", "ols_cc.S02"} <= set(manifest.header)

    def test_ols_oracle_recorded(self, corpus):
        manifest = read_manifest(corpus / "manifest.tsv")
        for subject, value in ols_baseline(manifest).items():
            assert float(manifest.header[f"ols_cc.{subject}"]) == pytest.approx(value, abs=1e-6)

    def test_learnability_floor(self, tmp_path):
        spec = SyntheticSpec(seed=0, n_subjects=1, sentences_per_subject=60)
        manifest = generate_synthetic(spec, tmp_path)
        assert float(manifest.header["ols_cc"]) >= 0.9

    def test_gamma_duration_spread(self):
        spec = SyntheticSpec(seed=5)
        rng = np.random.default_rng(0)
        world = make_world(spec, rng)
        ratios = []
        for _ in range(200):
            ids, durs, _, _ = synth_sentence(spec, world, 0, rng)
            ratios.extend(durs / world.mean_durations[ids])
        assert 0.1 < np.std(ratios) < 0.25  # shape 40 gives CV near 0.16

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(cutoff=60.0)
        with pytest.raises(ValueError):
            SyntheticSpec(n_subjects=0)


class TestLoading:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        art, ac = rng.standard_normal((5, 12)), rng.standard_normal((5, 13))
        write_int_line(tmp_path / "a.phn", [3, 1])
        write_int_line(tmp_path / "a.dur", [2, 3])
        write_frames(tmp_path / "a.ema.csv", art)
        write_frames(tmp_path / "a.mfcc.csv", ac)
        manifest = CorpusManifest(tmp_path, [ManifestRecord("a", "S01", "a.phn", "a.dur", "a.ema.csv",
                                                            "a.mfcc.csv", "train")], {})
        write_manifest(tmp_path / "manifest.tsv", manifest)
        ph, dur, a, c = load_sentence(read_manifest(tmp_path / "manifest.tsv"), "a")
        np.testing.assert_array_equal(ph.values, [3, 1])
        np.testing.assert_array_equal(dur.frames_per_phoneme, [2, 3])
        np.testing.assert_array_equal(a.values, art)
        np.testing.assert_array_equal(c.values, ac)

    def test_duration_mismatch_rejected(self, corpus, tmp_path):
        root = tmp_path / "c"
        shutil.copytree(corpus, root)
        manifest = read_manifest(root / "manifest.tsv")
        rec = manifest.records[0]
        durs = (root / rec.duration_path).read_text().split()
        durs[0] = str(int(durs[0]) + 1)
        (root / rec.duration_path).write_text(" ".join(durs) + "\n")
        with pytest.raises(DataError, match="sum"):
            load_sentence(manifest, rec.id)

    def test_unknown_id(self, corpus):
        with pytest.raises(DataError):
            load_sentence(read_manifest(corpus / "manifest.tsv"), "nope")

    def test_preprocessed_corpus_is_normalized(self, corpus):
        sents = load_corpus(read_manifest(corpus / "manifest.tsv"), "train", ["S01"])
        assert len(sents) == 8
        for s in sents:
            np.testing.assert_allclose(s.articulatory.mean(0), 0, atol=1e-9)


def _mutations(rng, text: str):
    """Corruptions that must each make a sentence unloadable."""
    lines = text.splitlines()
    last_line_start = len(text) - len(lines[-1]) - 1
    cut = int(rng.integers(1, max(2, last_line_start)))
    digits = [i for i, ch in enumerate(text) if ch.isdigit()]
    k = int(rng.choice(digits))
    return {
        "drop_last_line": "\n".join(lines[:-1]) + "\n",
        "truncate": text[:cut],
        "garbage_char": text[:k] + "x" + text[k + 1:],
        "extra_column": text.replace("\n", ",0.0\n", 1),
        "nan": text.replace(text.split(",")[0], "nan", 1),
        "empty": "",
    }


class TestFuzzedFiles:
    @pytest.mark.parametrize("which", ["articulatory_path", "acoustic_path"])
    def test_corrupted_frames_rejected(self, corpus, tmp_path, which):
        rng = np.random.default_rng(7)
        root = tmp_path / "c"
        shutil.copytree(corpus, root)
        manifest = read_manifest(root / "manifest.tsv")
        for rec in manifest.records[:6]:
            path = root / getattr(rec, which)
            original = path.read_text()
            for name, bad in _mutations(rng, original).items():
                path.write_text(bad)
                with pytest.raises(DataError):
                    load_sentence(manifest, rec.id)
            path.write_bytes(b"\xff\xfe\x00garbage")
            with pytest.raises(DataError):
                load_sentence(manifest, rec.id)
            path.write_text(original)
            load_sentence(manifest, rec.id)

    @pytest.mark.parametrize("content", ["", "1 2 x\n", "1 2\n3 4\n", "0 1 2\n", "99 1\n", "-1 2\n"])
    def test_corrupted_phonemes_rejected(self, corpus, tmp_path, content):
        root = tmp_path / "c"
        shutil.copytree(corpus, root)
        manifest = read_manifest(root / "manifest.tsv")
        rec = manifest.records[0]
        (root / rec.phoneme_path).write_text(content)
        with pytest.raises(DataError):
            load_sentence(manifest, rec.id)

    def test_negative_duration_rejected(self, corpus, tmp_path):
        root = tmp_path / "c"
        shutil.copytree(corpus, root)
        manifest = read_manifest(root / "manifest.tsv")
        rec = manifest.records[0]
        durs = [int(v) for v in (root / rec.duration_path).read_text().split()]
        durs[0], durs[1] = -durs[0], durs[1] + 2 * durs[0]
        write_int_line(root / rec.duration_path, durs)
        with pytest.raises(DataError):
            load_sentence(manifest, rec.id)

    @pytest.mark.parametrize("body", [
        "a\tS01\tx.phn\n",
        "a\tS01\tp\td\te\tm\tholdout\n",
        "a\tS01\tp\td\te\tm\ttrain\na\tS01\tp\td\te\tm\ttrain\n",
        "# only=header\n",
    ])
    def test_bad_manifest_rejected(self, tmp_path, body):
        (tmp_path / "manifest.tsv").write_text(body)
        with pytest.raises(DataError):
            read_manifest(tmp_path / "manifest.tsv")

    def test_missing_referenced_file(self, corpus, tmp_path):
        root = tmp_path / "c"
        shutil.copytree(corpus, root)
        manifest = read_manifest(root / "manifest.tsv")
        (root / manifest.records[0].acoustic_path).unlink()
        with pytest.raises(DataError, match="missing"):
            load_sentence(manifest, manifest.records[0].id)

    @given(st.binary(max_size=200))
    @settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_random_bytes_never_crash(self, tmp_path, blob):
        path = tmp_path / "f.csv"
        path.write_bytes(blob)
        try:
            frames = read_frames(path, 3)
        except DataError:
            return
        assert frames.shape[1] == 3 and np.isfinite(frames).all()
