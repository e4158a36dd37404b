"""Wall-clock scaling of one FFT layer's forward pass with sequence length.

This replaces a transformer-versus-LSTM timing comparison (no LSTM is built
here): it measures only how the attention layer scales in n.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nncore as nn
from .transformer import AttentionConfig, FFTLayer, FFTLayerConfig

HEADER = "attention-only scaling benchmark (FFT layer forward; LSTM baseline not built)"


@dataclass
class BenchRow:
    n: int
    d: int
    mean_s: float
    std_s: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    slopes: dict[int, float] = field(default_factory=dict)  # d -> log-log slope of time vs n
    top_ratio: dict[int, float] = field(default_factory=dict)  # d -> t(n_max) / t(n_max / 2)

    def superlinear(self, d: int) -> bool:
        return self.top_ratio.get(d, 0.0) >= 2.0


def time_fft_layer(n: int, d: int, reps: int = 10, warmup: int = 3, seed: int = 0,
                   n_heads: int = 2) -> list[float]:
    rng = np.random.default_rng(seed)
    layer = FFTLayer(FFTLayerConfig(AttentionConfig(d, n_heads)), rng).eval()
    x = rng.standard_normal((1, n, d)).astype(np.float32)
    mask = np.ones((1, n), dtype=np.float32)
    times = []
    with nn.no_grad():
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            layer(nn.Tensor(x), mask)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
    return times


def run_bench(ns: list[int], ds: list[int], reps: int = 10, warmup: int = 3,
              seed: int = 0) -> BenchReport:
    """Time every (n, d) pair single-threaded; fit log-log slopes per d."""
    if reps < 10 or warmup < 3:
        raise ValueError("need at least 10 timed repetitions and 3 warmup runs")
    ns = sorted(set(ns))
    rows = []
    with threadpool_limits(limits=1):
        for d in ds:
            for n in ns:
                times = time_fft_layer(n, d, reps, warmup, seed)
                rows.append(BenchRow(n, d, float(np.mean(times)), float(np.std(times))))
    report = BenchReport(rows)
    for d in ds:
        sub = [r for r in rows if r.d == d]
        if len(sub) >= 2:
            x = np.log([r.n for r in sub])
            y = np.log([r.mean_s for r in sub])
            report.slopes[d] = float(np.polyfit(x, y, 1)[0])
            by_n = {r.n: r.mean_s for r in sub}
            top = sub[-1].n
            if top % 2 == 0 and top // 2 in by_n:
                report.top_ratio[d] = by_n[top] / by_n[top // 2]
    return report


def write_bench_csv(path, report: BenchReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {HEADER}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("n", "d", "mean_s", "std_s"))
        for r in report.rows:
            writer.writerow((r.n, r.d, f"{r.mean_s:.6e}", f"{r.std_s:.6e}"))
        for d, slope in report.slopes.items():
            ratio = report.top_ratio.get(d, math.nan)
            fh.write(f"# d={d} loglog_slope={slope:.3f} top_ratio={ratio:.3f} "
                     f"superlinear={report.superlinear(d)}\n")
