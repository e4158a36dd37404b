"""Self-attention, positional encodings and the Feed Forward Transformer block.

Sequences are ``[batch, n, features]``; a float mask ``[batch, n]`` marks real
(1) versus padded (0) positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .nncore import functional as F
from .nncore import Tensor

PE_MODES = ("none", "additive", "concatenative", "relative")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    pe_mode: str = "none"
    clip_k: int = 10

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}; expected one of {PE_MODES}")
        if self.pe_mode == "relative" and self.clip_k < 1:
            raise ConfigError("clip_k must be >= 1 for relative attention")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class FFTLayerConfig:
    attention: AttentionConfig
    conv_kernel: int = 3
    conv_hidden: int | None = None
    keep_prob: float = 0.9

    def __post_init__(self):
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be a positive odd int, got {self.conv_kernel}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")

    @property
    def hidden(self) -> int:
        return self.conv_hidden if self.conv_hidden is not None else 2 * self.attention.d_model


# ---------------------------------------------------------------------------
# positional information
# ---------------------------------------------------------------------------

def sinusoidal_pe(n: int, d_pe: int, dtype=None) -> np.ndarray:
    """Sine block followed by cosine block, ``d_pe // 2`` frequencies each.

    Frequencies are ``1 / 10000 ** (i / d_pe)`` for ``i = 0, 2, ..., d_pe - 2``.
    """
    if d_pe < 2 or d_pe % 2:
        raise ConfigError(f"positional encoding width must be a positive even int, got {d_pe}")
    i = np.arange(0, d_pe, 2, dtype=np.float64)
    omega = 1.0 / (10000.0 ** (i / d_pe))
    angles = np.arange(n, dtype=np.float64)[:, None] * omega[None, :]
    pe = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return pe.astype(dtype or nn.get_dtype())


def apply_pe(x: Tensor, mode: str, pe: np.ndarray | None = None,
             mask: np.ndarray | None = None) -> Tensor:
    """Combine ``x`` with a positional table ``pe`` of shape ``[n, d_pe]``.

    Padded rows (mask 0) receive no encoding so they stay inert.
    """
    if mode in ("none", "relative"):
        return x
    if pe is None:
        raise ConfigError(f"pe_mode={mode!r} needs a positional table")
    n = x.shape[-2]
    table = np.broadcast_to(pe[:n], x.shape[:-2] + (n, pe.shape[1]))
    if mask is not None:
        table = table * np.asarray(mask, dtype=table.dtype)[..., None]
    if mode == "additive":
        if pe.shape[1] != x.shape[-1]:
            raise ConfigError(f"additive encoding width {pe.shape[1]} != feature width {x.shape[-1]}")
        return F.add(x, table)
    if mode == "concatenative":
        return F.concat([x, Tensor(table)], axis=-1)
    raise ConfigError(f"unknown pe_mode {mode!r}")


def clip_offset(offset, k: int):
    return np.maximum(-k, np.minimum(k, offset))


def relative_index(n: int, k: int) -> np.ndarray:
    """Row of the relative table used for each (i, j): ``clip(j - i, k) + k``."""
    pos = np.arange(n)
    return clip_offset(pos[None, :] - pos[:, None], k) + k


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _key_mask(mask: np.ndarray | None, ndim: int):
    if mask is None:
        return None
    m = np.asarray(mask) > 0
    # [B, n] -> [B, 1, ..., 1, n] so it broadcasts over heads and query rows
    return m.reshape(m.shape[:1] + (1,) * (ndim - 2) + m.shape[1:])


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None,
                         rel_logits: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_head)) v. Returns ``(output, weights)``."""
    d_head = q.shape[-1]
    logits = F.matmul(q, F.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    if rel_logits is not None:
        logits = F.add(logits, rel_logits)
    logits = F.scale(logits, 1.0 / math.sqrt(d_head))
    weights = F.softmax(logits, _key_mask(key_mask, logits.ndim))
    return F.matmul(weights, v), weights


def relative_attention(q: Tensor, k: Tensor, v: Tensor, table: Tensor, clip_k: int,
                       key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Attention whose logits gain ``q_i · table[clip(j - i, clip_k) + clip_k]``."""
    n = q.shape[-2]
    per_offset = F.matmul(q, F.transpose(table, (1, 0)))  # [..., n, 2k+1]
    rel = F.gather_last(per_offset, relative_index(n, clip_k))
    return scaled_dot_attention(q, k, v, key_mask, rel_logits=rel)


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.w_q = nn.Linear(d, d, rng, bias=False)
        self.w_k = nn.Linear(d, d, rng, bias=False)
        self.w_v = nn.Linear(d, d, rng, bias=False)
        self.w_o = nn.Linear(d, d, rng)
        if cfg.pe_mode == "relative":
            self.rel_table = nn.Parameter(
                rng.normal(0.0, cfg.d_head ** -0.5, size=(2 * cfg.clip_k + 1, cfg.d_head))
                .astype(nn.get_dtype()))
        self.last_weights: np.ndarray | None = None

    def qkv_project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.w_q(x), self.w_k(x), self.w_v(x)

    def _split(self, t: Tensor) -> Tensor:
        B, n, _ = t.shape
        h, dh = self.cfg.n_heads, self.cfg.d_head
        return F.transpose(F.reshape(t, (B, n, h, dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, n, d = x.shape
        q, k, v = (self._split(t) for t in self.qkv_project(x))
        if self.cfg.pe_mode == "relative":
            heads, weights = relative_attention(q, k, v, self.rel_table, self.cfg.clip_k, mask)
        else:
            heads, weights = scaled_dot_attention(q, k, v, mask)
        self.last_weights = weights.data
        merged = F.reshape(F.transpose(heads, (0, 2, 1, 3)), (B, n, d))
        return self.w_o(merged)


def _masked(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return x
    return F.mul(x, np.asarray(mask, dtype=x.data.dtype)[..., None])


class FFTLayer(nn.Module):
    """Self-attention and a two-layer conv net, each wrapped as
    ``LayerNorm(x + Sublayer(x))``."""

    def __init__(self, cfg: FFTLayerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.attention.d_model
        self.attn = MultiHeadAttention(cfg.attention, rng)
        self.ln1 = nn.LayerNorm(d)
        self.conv1 = nn.Conv1d(d, cfg.hidden, cfg.conv_kernel, rng)
        self.conv2 = nn.Conv1d(cfg.hidden, d, cfg.conv_kernel, rng)
        self.ln2 = nn.LayerNorm(d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        keep = self.cfg.keep_prob
        with nn.scope("attn"):
            h = F.dropout(self.attn(x, mask), keep, rng, self.training)
            y1 = _masked(self.ln1(F.add(x, h)), mask)
        with nn.scope("conv"):
            # padded rows are zeroed before every conv so they cannot leak across the boundary
            c = _masked(F.relu(self.conv1(y1)), mask)
            c = F.dropout(self.conv2(c), keep, rng, self.training)
            y2 = self.ln2(F.add(y1, c))
        return _masked(y2, mask)


class FFTStack(nn.Module):
    def __init__(self, n_layers: int, cfg: FFTLayerConfig, rng: np.random.Generator):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("an FFT stack needs at least one layer")
        self.layers = nn.ModuleList([FFTLayer(cfg, rng) for _ in range(n_layers)])

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            with nn.scope(f"layer{i}"):
                x = layer(x, mask, rng)
        return x
