"""Differentiable operations.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients. Inputs that do not require
gradients are skipped on the way back.
"""

from __future__ import annotations

import warnings

import numpy as np

from .tensor import Tensor, as_tensor, get_dtype, make_result


class EmptyMaskWarning(UserWarning):
    """A reduction saw no unmasked positions."""


class ShapeError(ValueError):
    pass


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _const(x) -> np.ndarray:
    return np.asarray(x, dtype=get_dtype())


# ---------------------------------------------------------------------------
# elementwise and structural
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return make_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _acc(a, -g)

    return make_result(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _acc(a, g * c)

    return make_result(a.data * c, (a,), backward)


def identity(a: Tensor) -> Tensor:
    def backward(g):
        _acc(a, g)

    return make_result(a.data.copy(), (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_result(out, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _acc(a, g.transpose(inverse))

    return make_result(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _acc(a, g.reshape(a.shape))

    return make_result(a.data.reshape(shape), (a,), backward)


def concat(tensors: list, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _acc(t, piece)

    return make_result(out, tensors, backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _acc(a, np.broadcast_to(g, a.shape))

    return make_result(np.asarray(a.data.sum()), (a,), backward)


def relu(a: Tensor) -> Tensor:
    active = a.data > 0

    def backward(g):
        _acc(a, g * active)

    return make_result(a.data * active, (a,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis; leading axes are batch axes."""
    x = as_tensor(x)
    din, dout = W.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear expects last dim {din}, got {x.shape}")
    x2 = x.data.reshape(-1, din)
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (dout,))
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, dout)
        if x.requires_grad:
            x._accumulate((g2 @ W.data.T).reshape(x.shape))
        if W.requires_grad:
            W._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return make_result(out, parents, backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``shift``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + shift.data

    def backward(g):
        gx_hat = g * gain.data
        if x.requires_grad:
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(rstd * (gx_hat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=lead))

    return make_result(out, (x, gain, shift), backward)


def conv1d(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Cross-correlation along the sequence axis with zero "same" padding.

    x is ``[..., n, cin]``, W is ``[k, cin, cout]``; k must be odd.
    """
    k, cin, cout = W.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d expects {cin} input channels, got {x.shape}")
    n = x.shape[-2]
    lead = x.shape[:-2]
    half = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    # cols[..., t, j, c] = xp[..., t + j, c]
    cols = np.stack([xp[..., j:j + n, :] for j in range(k)], axis=-2)
    cols2 = cols.reshape(-1, k * cin)
    Wr = W.data.reshape(k * cin, cout)
    out = cols2 @ Wr
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (n, cout))
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if W.requires_grad:
            W._accumulate((cols2.T @ g2).reshape(W.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ Wr.T).reshape(lead + (n, k, cin))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[..., j:j + n, :] += gcols[..., j, :]
            x._accumulate(gxp[..., half:half + n, :])

    return make_result(out, parents, backward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable to x, truthy = keep) sends dropped logits to -inf.
    A row with every entry masked falls back to uniform weights with a warning.
    """
    logits = x.data
    dead_rows = None
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        logits = np.where(keep, logits, -np.inf)
        dead_rows = ~keep.any(axis=-1, keepdims=True)
        if dead_rows.any():
            warnings.warn("softmax row fully masked; using uniform weights", EmptyMaskWarning,
                          stacklevel=2)
            logits = np.where(dead_rows, 0.0, logits)
        else:
            dead_rows = None
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = y * (g - (g * y).sum(axis=-1, keepdims=True))
        if dead_rows is not None:
            gx = np.where(dead_rows, 0.0, gx)
        _acc(x, gx)

    return make_result(y, (x,), backward)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: scale survivors by 1/keep_prob so eval is the identity."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in (0, 1]")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RNG stream")
    m = (rng.random(x.shape) < keep_prob).astype(x.data.dtype) / keep_prob

    def backward(g):
        _acc(x, g * m)

    return make_result(x.data * m, (x,), backward)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Map each integer id to its row of ``table``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return make_result(out, (table,), backward)


def gather_last(S: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j] = S[..., i, index[i, j]]`` for a fixed 2-D index."""
    n, n2 = index.shape
    R = S.shape[-1]
    rows = np.arange(n)[:, None]
    out = S.data[..., rows, index]

    def backward(g):
        if not S.requires_grad:
            return
        onehot = (index[:, :, None] == np.arange(R)).astype(g.dtype)  # [n, n2, R]
        lead = g.shape[:-2]
        gi = np.moveaxis(g.reshape((-1, n, n2)), 1, 0)  # [n, X, n2]
        gs = gi @ onehot  # [n, X, R]
        S._accumulate(np.moveaxis(gs, 0, 1).reshape(lead + (n, R)))

    return make_result(out, (S,), backward)


def mse(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over unmasked positions.

    ``mask`` covers the leading axes of ``pred`` (``pred.shape[:mask.ndim]``);
    trailing axes are averaged too. An all-zero mask yields 0 and a warning.
    """
    target = _const(target.data if isinstance(target, Tensor) else target)
    if target.shape != pred.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    if mask is None:
        w = np.ones(pred.shape, dtype=pred.data.dtype)
    else:
        mask = np.asarray(mask, dtype=pred.data.dtype)
        if pred.shape[:mask.ndim] != mask.shape:
            raise ShapeError(f"mask shape {mask.shape} does not lead pred shape {pred.shape}")
        w = np.broadcast_to(mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim)),
                            pred.shape)
    count = float(w.sum())
    if count == 0:
        warnings.warn("mse with empty mask; loss defined as 0", EmptyMaskWarning, stacklevel=2)
        return make_result(np.zeros((), dtype=pred.data.dtype), (pred,),
                           lambda g: _acc(pred, np.zeros_like(pred.data)))
    wd = w * diff
    out = np.asarray((wd * diff).sum() / count, dtype=pred.data.dtype)

    def backward(g):
        _acc(pred, g * 2.0 * wd / count)

    return make_result(out, (pred,), backward)
