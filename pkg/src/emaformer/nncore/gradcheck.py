"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, is_float64

STEP = 1e-5
TOL = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} "
                f"checked={self.n_checked} worst={self.worst}")


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    scale: float | None = None) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of the gradient scale (by default the largest magnitude
    in the checked set), so entries that are numerically zero are judged
    against the tensor's scale.
    """
    a = np.abs(analytic)
    n = np.abs(numeric)
    if scale is None:
        scale = max(float(a.max(initial=0.0)), float(n.max(initial=0.0)))
    floor = max(1e-3 * scale, 1e-12)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def _require_float64() -> None:
    if not is_float64():
        raise RuntimeError("gradient checks must run inside nncore.float64_mode()")


def _sample(size: int, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = TOL,
    step: float = STEP,
    seed: int = 0,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Check d<R, fn(*inputs)>/d inputs against central differences.

    ``R`` is a fixed random projection of the output, so the whole Jacobian is
    exercised rather than a single output coordinate.
    """
    _require_float64()
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)

    def objective(arrays) -> float:
        ts = [Tensor(a) for a in arrays]
        return float((fn(*ts).data * proj).sum())

    try:
        out.backward(proj)
    except NonFiniteError as exc:
        return GradCheckReport(np.inf, False, 0, worst=str(exc), failures=[str(exc)])
    arrays = [leaf.data.copy() for leaf in leaves]
    analytic_all, numeric_all, labels = [], [], []
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.isfinite(analytic).all():
            return GradCheckReport(np.inf, False, 0, worst=f"input {k}",
                                   failures=[f"non-finite analytic gradient for input {k}"])
        flat = arrays[k].reshape(-1)
        for idx in _sample(flat.size, max_entries, rng):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = objective(arrays)
            flat[idx] = orig - step
            f_minus = objective(arrays)
            flat[idx] = orig
            numeric_all.append((f_plus - f_minus) / (2 * step))
            analytic_all.append(analytic.reshape(-1)[idx])
            labels.append(f"input{k}[{int(idx)}]")
    return _summarize(np.array(analytic_all), np.array(numeric_all), labels, tol)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    tol: float = TOL,
    step: float = STEP,
    seed: int = 0,
    max_entries: int | None = 4,
) -> GradCheckReport:
    """Check parameter gradients of a scalar loss by perturbing parameters in place.

    ``max_entries`` caps how many coordinates of each parameter are probed;
    every parameter tensor is probed at least once.
    """
    _require_float64()
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic_all, numeric_all, labels, errors = [], [], [], []
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            return GradCheckReport(np.inf, False, 0, worst=name,
                                   failures=[f"non-finite analytic gradient for {name}"])
        flat = p.data.reshape(-1)
        a_list, n_list, l_list = [], [], []
        for idx in _sample(flat.size, max_entries, rng):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = float(loss_fn().data)
            flat[idx] = orig - step
            f_minus = float(loss_fn().data)
            flat[idx] = orig
            n_list.append((f_plus - f_minus) / (2 * step))
            a_list.append(g.reshape(-1)[idx])
            l_list.append(f"{name}[{int(idx)}]")
        a_arr, n_arr = np.array(a_list), np.array(n_list)
        scale = max(float(np.abs(g).max(initial=0.0)), float(np.abs(n_arr).max(initial=0.0)))
        errors.append(relative_errors(a_arr, n_arr, scale))
        analytic_all.extend(a_list)
        numeric_all.extend(n_list)
        labels.extend(l_list)
    for _, p in params:
        p.grad = None
    err = np.concatenate(errors) if errors else np.zeros(0)
    return _report(err, np.array(analytic_all), np.array(numeric_all), labels, tol)


def _summarize(analytic, numeric, labels, tol) -> GradCheckReport:
    err = relative_errors(analytic, numeric) if len(analytic) else np.zeros(0)
    return _report(err, analytic, numeric, labels, tol)


def _report(err, analytic, numeric, labels, tol) -> GradCheckReport:
    if err.size == 0:
        return GradCheckReport(0.0, True, 0)
    worst = int(np.argmax(err))
    failures = [f"{labels[i]}: analytic={analytic[i]:.6e} numeric={numeric[i]:.6e} "
                f"rel={err[i]:.2e}" for i in np.flatnonzero(err >= tol)]
    return GradCheckReport(float(err[worst]), not failures, int(err.size), labels[worst], failures)
