"""Alignment and scoring of predicted articulatory trajectories."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .models import CHANNELS


class ZeroVarianceWarning(UserWarning):
    """CC requested for a constant vector; reported as 0."""


@dataclass
class DtwResult:
    path: list[tuple[int, int]]
    total_cost: float


def frame_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every frame of ``a`` and every frame of ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def dtw(pred: np.ndarray, gt: np.ndarray) -> DtwResult:
    """Minimum-cost monotonic alignment with steps (1,0), (0,1), (1,1).

    The cost of a path is the sum of Euclidean frame distances along it.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    n, m = len(pred), len(gt)
    if n == 0 or m == 0:
        raise ValueError("dtw needs non-empty sequences")
    if pred.shape[1] != gt.shape[1]:
        raise ValueError(f"channel count differs: {pred.shape[1]} vs {gt.shape[1]}")
    dist = frame_distances(pred, gt)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # row-wise sweep: the diagonal and vertical moves vectorize, the horizontal one is a scan
    for i in range(1, n + 1):
        best = np.minimum(acc[i - 1, :-1], acc[i - 1, 1:]) + dist[i - 1]
        row = acc[i]
        for j in range(1, m + 1):
            left = row[j - 1] + dist[i - 1, j - 1]
            row[j] = best[j - 1] if best[j - 1] <= left else left

    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        candidates = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j),
                      (acc[i, j - 1], i, j - 1))
        _, i, j = min(candidates, key=lambda c: c[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return DtwResult(path=path, total_cost=float(acc[n, m]))


def align_by_path(pred: np.ndarray, gt_len: int, path: Sequence[tuple[int, int]]) -> np.ndarray:
    """Resample ``pred`` onto the ground-truth timeline: row j is the mean of
    every prediction frame aligned to ground-truth frame j."""
    pred = np.asarray(pred, dtype=np.float64)
    sums = np.zeros((gt_len, pred.shape[1]))
    counts = np.zeros(gt_len)
    for i, j in path:
        sums[j] += pred[i]
        counts[j] += 1
    if np.any(counts == 0):
        raise ValueError("path does not cover every ground-truth frame")
    return sums / counts[:, None]


def cc(a, b) -> float:
    """Pearson correlation; 0 (with a warning) when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("cc needs at least two samples")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = math.sqrt(float((ac * ac).sum()) * float((bc * bc).sum()))
    if denom == 0.0:
        warnings.warn("zero-variance input to cc; reporting 0", ZeroVarianceWarning, stacklevel=2)
        return 0.0
    return float(np.clip((ac * bc).sum() / denom, -1.0, 1.0))


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return math.sqrt(float(np.mean((a - b) ** 2)))


@dataclass
class MetricReport:
    """Per-channel CC and RMSE for one sentence."""

    sentence_id: str
    subject: str
    cc_per_channel: np.ndarray
    rmse_per_channel: np.ndarray

    @property
    def mean_cc(self) -> float:
        return math.fsum(self.cc_per_channel) / len(self.cc_per_channel)

    @property
    def mean_rmse(self) -> float:
        return math.fsum(self.rmse_per_channel) / len(self.rmse_per_channel)


def evaluate_sentence(task: str, pred: np.ndarray, gt: np.ndarray, sentence_id: str = "",
                      subject: str = "") -> MetricReport:
    """Score one unpadded prediction against its ground truth.

    AAI predictions are frame synchronous and compared directly; PTA
    predictions are first DTW-aligned and resampled onto the ground-truth
    timeline.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("cannot evaluate an empty trajectory")
    if task == "aai":
        if pred.shape != gt.shape:
            raise ValueError(f"AAI prediction {pred.shape} does not match ground truth {gt.shape}")
        aligned = pred
    elif task == "pta":
        aligned = align_by_path(pred, len(gt), dtw(pred, gt).path)
    else:
        raise ValueError(f"unknown task {task!r}")
    ccs = np.array([cc(aligned[:, c], gt[:, c]) for c in range(gt.shape[1])])
    rmses = np.array([rmse(aligned[:, c], gt[:, c]) for c in range(gt.shape[1])])
    return MetricReport(sentence_id, subject, ccs, rmses)


@dataclass
class CorpusSummary:
    """Mean and standard deviation over sentences of the channel-averaged metrics."""

    n_sentences: int
    cc_mean: float
    cc_std: float
    rmse_mean: float
    rmse_std: float
    cc_per_channel: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rmse_per_channel: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def summarize(reports: Sequence[MetricReport]) -> CorpusSummary:
    if not reports:
        raise ValueError("no sentence reports to summarize")
    cc_mean, cc_std = _mean_std([r.mean_cc for r in reports])
    rmse_mean, rmse_std = _mean_std([r.mean_rmse for r in reports])
    n_ch = len(reports[0].cc_per_channel)
    cc_ch = np.array([math.fsum(r.cc_per_channel[c] for r in reports) / len(reports)
                      for c in range(n_ch)])
    rmse_ch = np.array([math.fsum(r.rmse_per_channel[c] for r in reports) / len(reports)
                        for c in range(n_ch)])
    return CorpusSummary(len(reports), cc_mean, cc_std, rmse_mean, rmse_std, cc_ch, rmse_ch)


METRIC_COLUMNS = ("scope", "subject", "sentence_id", "channel", "cc", "rmse")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_metrics_csv(path, reports: Sequence[MetricReport]) -> None:
    """One row per (sentence, channel), a channel-mean row per sentence, then
    per-subject and overall corpus rows (mean and std over sentences)."""
    rows = []
    for r in reports:
        for c, name in enumerate(CHANNELS[:len(r.cc_per_channel)]):
            rows.append(("sentence", r.subject, r.sentence_id, name,
                         _fmt(r.cc_per_channel[c]), _fmt(r.rmse_per_channel[c])))
        rows.append(("sentence_mean", r.subject, r.sentence_id, "ALL",
                     _fmt(r.mean_cc), _fmt(r.mean_rmse)))
    groups: dict[str, list[MetricReport]] = {}
    for r in reports:
        groups.setdefault(r.subject, []).append(r)
    scopes = [(s, groups[s]) for s in sorted(groups)] + [("ALL", list(reports))]
    for subject, group in scopes:
        if not group:
            continue
        s = summarize(group)
        for c, name in enumerate(CHANNELS[:len(s.cc_per_channel)]):
            rows.append(("channel_mean", subject, "", name,
                         _fmt(s.cc_per_channel[c]), _fmt(s.rmse_per_channel[c])))
        rows.append(("corpus_mean", subject, "", "ALL", _fmt(s.cc_mean), _fmt(s.rmse_mean)))
        rows.append(("corpus_std", subject, "", "ALL", _fmt(s.cc_std), _fmt(s.rmse_std)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# duration analysis
# ---------------------------------------------------------------------------

@dataclass
class SignificanceResult:
    t: float
    df: float
    p_value: float
    significant: bool


def welch_t_test(a, b, alpha: float = 0.05) -> SignificanceResult:
    """Two-sided Welch t-test for a difference in means."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two samples")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return SignificanceResult(0.0, float(len(a) + len(b) - 2), 1.0, False)
        return SignificanceResult(math.copysign(math.inf, diff), float(len(a) + len(b) - 2),
                                  0.0, True)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    # two-sided tail of Student's t via the regularized incomplete beta function
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return SignificanceResult(float(t), float(df), p, p < alpha)


def duration_significance(gt_durs: dict[int, Sequence[float]], pred_durs: dict[int, Sequence[float]],
                          alpha: float = 0.05) -> dict[int, SignificanceResult]:
    """Per-phoneme Welch test of predicted versus ground-truth durations.

    Phonemes with fewer than two samples on either side are skipped.
    """
    out = {}
    for ph in sorted(set(gt_durs) & set(pred_durs)):
        if len(gt_durs[ph]) >= 2 and len(pred_durs[ph]) >= 2:
            out[ph] = welch_t_test(gt_durs[ph], pred_durs[ph], alpha)
    return out


def collect_durations(pairs: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]]):
    """Group durations by phoneme id from ``(ids, gt, pred)`` triples."""
    gt: dict[int, list[float]] = {}
    pred: dict[int, list[float]] = {}
    for ids, g, p in pairs:
        for ph, dg, dp in zip(ids, g, p):
            gt.setdefault(int(ph), []).append(float(dg))
            pred.setdefault(int(ph), []).append(float(dp))
    return gt, pred


def write_duration_csv(path, gt: dict[int, list[float]], pred: dict[int, list[float]],
                       results: dict[int, SignificanceResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("phoneme", "n", "gt_mean", "pred_mean", "t", "df", "p_value", "significant"))
        for ph, res in results.items():
            writer.writerow((ph, len(gt[ph]), _fmt(float(np.mean(gt[ph]))),
                             _fmt(float(np.mean(pred[ph]))), _fmt(res.t), _fmt(res.df),
                             _fmt(res.p_value), int(res.significant)))
