"""Corpus files, preprocessing and the synthetic articulatory corpus.

File formats (UTF-8 text):

* phoneme file: space-separated integer ids on one line
* duration file: space-separated non-negative frame counts, one per phoneme
* trajectory / acoustic file: CSV, one frame per row, 12 / 13 columns, no header
* manifest: ``# key=value`` header lines, then one tab-separated record per
  line: id, subject, phoneme path, duration path, articulatory path,
  acoustic path, split. Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.ndimage import uniform_filter1d

from .models import MAX_FRAMES, MAX_PHONEMES, N_ACOUSTIC, N_ARTICULATORY

SPLITS = ("train", "val", "test")
DEFAULT_FS = 100.0
DEFAULT_CUTOFF = 25.0


class DataError(ValueError):
    """Malformed or inconsistent corpus data."""


# ---------------------------------------------------------------------------
# padded containers
# ---------------------------------------------------------------------------

def pad_and_mask(seq, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad ``seq`` along its first axis to ``max_len``; mask is 1 on real rows."""
    seq = np.asarray(seq)
    n = len(seq)
    if n == 0:
        raise DataError("cannot pad an empty sequence")
    if n > max_len:
        raise DataError(f"sequence length {n} exceeds maximum {max_len}")
    padded = np.zeros((max_len,) + seq.shape[1:], dtype=seq.dtype)
    padded[:n] = seq
    mask = np.zeros(max_len, dtype=np.float32)
    mask[:n] = 1.0
    return padded, mask


def unpad(padded: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return padded[: int(np.asarray(mask).sum())]


@dataclass
class PhonemeSequence:
    ids: np.ndarray  # [MAX_PHONEMES], 0 = pad
    true_len: int

    @classmethod
    def from_ids(cls, ids, max_len: int = MAX_PHONEMES) -> "PhonemeSequence":
        padded, _ = pad_and_mask(np.asarray(ids, dtype=np.int64), max_len)
        return cls(padded, len(ids))

    @property
    def values(self) -> np.ndarray:
        return self.ids[: self.true_len]


@dataclass
class DurationVector:
    frames_per_phoneme: np.ndarray

    @property
    def total(self) -> int:
        return int(self.frames_per_phoneme.sum())


@dataclass
class FrameMatrix:
    """Zero-padded frame matrix (acoustic or articulatory)."""

    frames: np.ndarray
    true_len: int

    @classmethod
    def from_frames(cls, frames, max_len: int = MAX_FRAMES) -> "FrameMatrix":
        padded, _ = pad_and_mask(np.asarray(frames, dtype=np.float64), max_len)
        return cls(padded, len(frames))

    @property
    def values(self) -> np.ndarray:
        return self.frames[: self.true_len]


class AcousticFeatures(FrameMatrix):
    pass


class ArticulatoryTrajectory(FrameMatrix):
    pass


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def lowpass(x, fs: float = DEFAULT_FS, fc: float = DEFAULT_CUTOFF, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth low-pass along axis 0 (forward-backward filtering)."""
    if not 0 < fc < fs / 2:
        raise ValueError(f"cutoff {fc} Hz must lie in (0, fs/2 = {fs / 2})")
    x = np.asarray(x, dtype=np.float64)
    sos = signal.butter(order, fc, btype="low", fs=fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), x.shape[0] - 1)
    return signal.sosfiltfilt(sos, x, axis=0, padlen=max(padlen, 0))


def normalize_sentence(traj, std_floor: float = 1e-8):
    """Per-channel zero mean, unit variance. Returns ``(normalized, mean, std)``.

    Channels whose std falls below ``std_floor`` come out as zeros.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape[0] < 2:
        raise DataError("sentence normalization needs at least two frames")
    mean = traj.mean(axis=0)
    std = traj.std(axis=0)
    safe = np.where(std < std_floor, 1.0, std)
    out = (traj - mean) / safe
    out[:, std < std_floor] = 0.0
    return out, mean, std


def preprocess_trajectory(traj, fs: float = DEFAULT_FS, fc: float = DEFAULT_CUTOFF) -> np.ndarray:
    return normalize_sentence(lowpass(traj, fs, fc))[0]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    subject: str
    phoneme_path: str
    duration_path: str
    articulatory_path: str
    acoustic_path: str
    split: str


@dataclass
class CorpusManifest:
    root: Path
    records: list[ManifestRecord]
    header: dict[str, str] = field(default_factory=dict)

    def by_id(self, sentence_id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == sentence_id:
                return r
        raise KeyError(sentence_id)

    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.records})

    def select(self, split: str | None = None, subjects=None) -> list[ManifestRecord]:
        return [r for r in self.records
                if (split is None or r.split == split)
                and (subjects is None or r.subject in subjects)]

    @property
    def fs(self) -> float:
        return float(self.header.get("fs", DEFAULT_FS))

    @property
    def cutoff(self) -> float:
        return float(self.header.get("cutoff", DEFAULT_CUTOFF))


def write_manifest(path, manifest: CorpusManifest) -> None:
    lines = [f"# {k}={v}" for k, v in manifest.header.items()]
    for r in manifest.records:
        lines.append("\t".join(dataclasses.astuple(r)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 text") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        rec = ManifestRecord(*parts)
        if rec.split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {rec.split!r}")
        if rec.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate sentence id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return CorpusManifest(path.parent, records, header)


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 text") from exc


def read_int_line(path, what: str) -> np.ndarray:
    path = Path(path)
    lines = [ln for ln in _read_text(path).splitlines() if ln.strip()]
    if len(lines) != 1:
        raise DataError(f"{path}: expected one line of {what}, found {len(lines)}")
    try:
        values = [int(tok) for tok in lines[0].split()]
    except ValueError as exc:
        raise DataError(f"{path}:1: non-integer {what}: {exc}") from exc
    if not values:
        raise DataError(f"{path}:1: empty {what}")
    return np.array(values, dtype=np.int64)


def read_frames(path, n_cols: int) -> np.ndarray:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != n_cols:
            raise DataError(f"{path}:{lineno}: expected {n_cols} columns, got {len(fields)}")
        try:
            row = [float(f) for f in fields]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in row):
            raise DataError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: no frames")
    return np.array(rows, dtype=np.float64)


def write_int_line(path, values) -> None:
    Path(path).write_text(" ".join(str(int(v)) for v in values) + "\n", encoding="utf-8")


def write_frames(path, frames) -> None:
    text = "\n".join(",".join(repr(float(v)) for v in row) for row in np.asarray(frames))
    Path(path).write_text(text + "\n", encoding="utf-8")


@dataclass
class Sentence:
    """One corpus sentence held unpadded in memory."""

    id: str
    subject: str
    split: str
    phonemes: np.ndarray
    durations: np.ndarray
    articulatory: np.ndarray
    acoustic: np.ndarray


def load_sentence(manifest: CorpusManifest, sentence_id: str, vocab_size: int | None = None):
    """Read and validate one sentence.

    Returns ``(PhonemeSequence, DurationVector, ArticulatoryTrajectory, AcousticFeatures)``
    holding the raw (unpreprocessed) values.
    """
    try:
        rec = manifest.by_id(sentence_id)
    except KeyError as exc:
        raise DataError(f"sentence {sentence_id!r} not in manifest") from exc
    root = manifest.root
    ids = read_int_line(root / rec.phoneme_path, "phoneme ids")
    durs = read_int_line(root / rec.duration_path, "durations")
    art = read_frames(root / rec.articulatory_path, N_ARTICULATORY)
    ac = read_frames(root / rec.acoustic_path, N_ACOUSTIC)
    if vocab_size is None and "vocab_size" in manifest.header:
        vocab_size = int(manifest.header["vocab_size"])
    if len(ids) > MAX_PHONEMES:
        raise DataError(f"{rec.id}: {len(ids)} phonemes exceed the cap of {MAX_PHONEMES}")
    if ids.min() < 1 or (vocab_size is not None and ids.max() > vocab_size):
        raise DataError(f"{rec.id}: phoneme ids must lie in [1, {vocab_size}]")
    if len(durs) != len(ids):
        raise DataError(f"{rec.id}: {len(durs)} durations for {len(ids)} phonemes")
    if durs.min() < 0:
        raise DataError(f"{rec.id}: negative duration")
    if len(art) > MAX_FRAMES:
        raise DataError(f"{rec.id}: {len(art)} frames exceed the cap of {MAX_FRAMES}")
    if int(durs.sum()) != len(art):
        raise DataError(f"{rec.id}: durations sum to {int(durs.sum())} but trajectory has {len(art)} frames")
    if len(ac) != len(art):
        raise DataError(f"{rec.id}: {len(ac)} acoustic frames vs {len(art)} articulatory frames")
    return (PhonemeSequence.from_ids(ids), DurationVector(durs),
            ArticulatoryTrajectory.from_frames(art), AcousticFeatures.from_frames(ac))


def load_corpus(manifest: CorpusManifest, split: str | None = None, subjects=None,
                preprocess: bool = True) -> list[Sentence]:
    """Load sentences; trajectories are low-passed and sentence-normalized."""
    out = []
    for rec in manifest.select(split, subjects):
        ph, dur, art, ac = load_sentence(manifest, rec.id)
        traj = art.values
        if preprocess:
            traj = preprocess_trajectory(traj, manifest.fs, manifest.cutoff)
        out.append(Sentence(rec.id, rec.subject, rec.split, ph.values.copy(),
                            dur.frames_per_phoneme.copy(), traj, ac.values.copy()))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n_subjects: int = 4
    sentences_per_subject: int = 200
    vocab_size: int = 20
    min_phonemes: int = 5
    max_phonemes: int = 25
    min_mean_duration: float = 5.0
    max_mean_duration: float = 20.0
    duration_shape: float = 40.0  # gamma shape; duration CV is 1/sqrt(shape)
    noise_std: float = 0.05
    subject_scale: float = 0.1
    fs: float = DEFAULT_FS
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        if self.n_subjects < 1 or self.sentences_per_subject < 3:
            raise ValueError("need at least one subject and three sentences per subject")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 1 <= self.min_phonemes <= self.max_phonemes <= MAX_PHONEMES:
            raise ValueError(f"phoneme count range must lie within [1, {MAX_PHONEMES}]")
        if not 0 < self.min_mean_duration <= self.max_mean_duration:
            raise ValueError("invalid mean duration range")
        if self.noise_std < 0 or self.subject_scale < 0 or self.duration_shape <= 0:
            raise ValueError("noise_std, subject_scale must be >= 0 and duration_shape > 0")
        if not 0 < self.cutoff < self.fs / 2:
            raise ValueError("cutoff must lie below the Nyquist frequency")


DURATION_CLAMP = (2, 40)


@dataclass
class SyntheticWorld:
    """The hidden generative parameters of a synthetic corpus."""

    targets: np.ndarray  # [P + 1, 12]; row 0 unused
    mean_durations: np.ndarray  # [P + 1]
    mixing: np.ndarray  # [13, 12]
    offset: np.ndarray  # [13]
    subject_maps: list[tuple[np.ndarray, np.ndarray]]


def make_world(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticWorld:
    P = spec.vocab_size
    targets = np.zeros((P + 1, N_ARTICULATORY))
    targets[1:] = rng.standard_normal((P, N_ARTICULATORY))
    mean_d = np.zeros(P + 1)
    mean_d[1:] = rng.uniform(spec.min_mean_duration, spec.max_mean_duration, P)
    mixing = rng.standard_normal((N_ACOUSTIC, N_ARTICULATORY)) / math.sqrt(N_ARTICULATORY)
    offset = 0.1 * rng.standard_normal(N_ACOUSTIC)
    maps = []
    for _ in range(spec.n_subjects):
        S = np.eye(N_ARTICULATORY) + spec.subject_scale * rng.standard_normal((N_ARTICULATORY,) * 2)
        c = spec.subject_scale * rng.standard_normal(N_ARTICULATORY)
        maps.append((S, c))
    return SyntheticWorld(targets, mean_d, mixing, offset, maps)


def synth_sentence(spec: SyntheticSpec, world: SyntheticWorld, subject: int,
                   rng: np.random.Generator):
    """Sample ``(phonemes, durations, articulatory, acoustic)`` for one sentence."""
    n_ph = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
    ids = rng.integers(1, spec.vocab_size + 1, size=n_ph)
    k = spec.duration_shape
    raw = rng.gamma(k, world.mean_durations[ids] / k)
    durs = np.clip(np.rint(raw), *DURATION_CLAMP).astype(np.int64)
    while durs.sum() > MAX_FRAMES:
        ids, durs = ids[:-1], durs[:-1]
    canonical = np.repeat(world.targets[ids], durs, axis=0)
    canonical = uniform_filter1d(canonical, size=5, axis=0, mode="nearest")
    canonical = lowpass(canonical, spec.fs, spec.cutoff)
    acoustic = canonical @ world.mixing.T + world.offset
    if spec.noise_std > 0:
        acoustic = acoustic + spec.noise_std * rng.standard_normal(acoustic.shape)
    S, c = world.subject_maps[subject]
    articulatory = canonical @ S.T + c
    return ids, durs, articulatory, acoustic


def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 split sizes; validation and test each get at least one sentence."""
    n_val = max(1, round(0.1 * n))
    n_test = max(1, round(0.1 * n))
    return n - n_val - n_test, n_val, n_test


def generate_synthetic(spec: SyntheticSpec, out_dir) -> CorpusManifest:
    """Write a synthetic corpus plus manifest into ``out_dir``.

    The manifest header records the generator settings and the per-subject CC of an
    ordinary-least-squares map from acoustics to (preprocessed) articulators,
    fitted on the train split and scored on the test split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    world = make_world(spec, rng)
    records: list[ManifestRecord] = []
    for s in range(spec.n_subjects):
        subject = f"S{s + 1:02d}"
        sub_dir = out_dir / subject
        sub_dir.mkdir(exist_ok=True)
        n = spec.sentences_per_subject
        n_train, n_val, _ = split_counts(n)
        order = rng.permutation(n)
        split_of = np.empty(n, dtype=object)
        split_of[order[:n_train]] = "train"
        split_of[order[n_train:n_train + n_val]] = "val"
        split_of[order[n_train + n_val:]] = "test"
        for i in range(n):
            sid = f"{subject}_{i:04d}"
            ids, durs, art, ac = synth_sentence(spec, world, s, rng)
            write_int_line(sub_dir / f"{sid}.phn", ids)
            write_int_line(sub_dir / f"{sid}.dur", durs)
            write_frames(sub_dir / f"{sid}.ema.csv", art)
            write_frames(sub_dir / f"{sid}.mfcc.csv", ac)
            rel = f"{subject}/{sid}"
            records.append(ManifestRecord(sid, subject, f"{rel}.phn", f"{rel}.dur",
                                          f"{rel}.ema.csv", f"{rel}.mfcc.csv", str(split_of[i])))

    header = {f.name: str(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
    manifest = CorpusManifest(out_dir, records, header)
    oracle = ols_baseline(manifest)
    for subject, value in oracle.items():
        header[f"ols_cc.{subject}"] = f"{value:.6f}"
    header["ols_cc"] = f"{np.mean(list(oracle.values())):.6f}"
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest


def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


def ols_baseline(manifest: CorpusManifest) -> dict[str, float]:
    """Per-subject mean test CC of a least-squares map acoustics -> articulators."""
    from .evalkit import evaluate_sentence

    out = {}
    for subject in manifest.subjects():
        train = load_corpus(manifest, "train", [subject])
        test = load_corpus(manifest, "test", [subject])
        X = np.vstack([_with_intercept(s.acoustic) for s in train])
        Y = np.vstack([s.articulatory for s in train])
        coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
        ccs = [evaluate_sentence("aai", _with_intercept(s.acoustic) @ coef, s.articulatory).mean_cc
               for s in test]
        out[subject] = float(np.mean(ccs))
    return out


def manifest_digest(manifest_path) -> str:
    """SHA-256 over the manifest and every file it references."""
    manifest = read_manifest(manifest_path)
    h = hashlib.sha256(Path(manifest_path).read_bytes())
    for r in manifest.records:
        for p in (r.phoneme_path, r.duration_path, r.articulatory_path, r.acoustic_path):
            h.update((manifest.root / p).read_bytes())
    return h.hexdigest()
