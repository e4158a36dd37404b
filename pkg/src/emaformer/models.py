"""The two articulatory estimators.

``AAIModel`` maps 13-dim acoustic frames to 12 articulator channels, frame
synchronously. ``PTAModel`` maps phoneme ids to articulator frames through a
duration predictor and a length regulator.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nncore as nn
from .nncore import Tensor
from .nncore import functional as F
from .transformer import (
    AttentionConfig,
    ConfigError,
    FFTLayerConfig,
    FFTStack,
    apply_pe,
    sinusoidal_pe,
)

N_ACOUSTIC = 13
N_ARTICULATORY = 12
MAX_PHONEMES = 60
MAX_FRAMES = 400
CHANNELS = ("UL_x", "UL_y", "LL_x", "LL_y", "Jaw_x", "Jaw_y",
            "TT_x", "TT_y", "TB_x", "TB_y", "TD_x", "TD_y")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "aai"
    d_model: int = 128
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    conv_kernel: int = 3
    conv_hidden: int = 0  # 0 -> 2 * width
    pe_mode: str = ""  # "" -> concatenative for aai, additive for pta
    pe_dim: int = 0  # concatenative table width; 0 -> d_model
    clip_k: int = 10
    keep_prob: float = 0.9
    dur_channels: int = 128
    dur_kernel: int = 3
    vocab_size: int = 39

    def __post_init__(self):
        if self.task not in ("aai", "pta"):
            raise ConfigError(f"task must be 'aai' or 'pta', got {self.task!r}")
        if not self.pe_mode:
            object.__setattr__(self, "pe_mode", "concatenative" if self.task == "aai" else "additive")
        for name in ("d_model", "n_heads", "enc_layers", "dec_layers", "clip_k",
                     "dur_channels", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dur_kernel % 2 == 0:
            raise ConfigError("dur_kernel must be odd")
        if self.pe_dim % 2:
            raise ConfigError("pe_dim must be even")
        # validates pe_mode, head divisibility and conv kernel
        self.layer_config(self.encoder_width)
        self.layer_config(self.decoder_width)

    @property
    def pe_width(self) -> int:
        if self.pe_mode == "concatenative":
            return self.pe_dim or self.d_model
        return self.d_model

    @property
    def encoder_width(self) -> int:
        if self.pe_mode == "concatenative":
            return self.d_model + self.pe_width
        return self.d_model

    @property
    def decoder_width(self) -> int:
        # PTA concatenates a second table onto the expanded decoder input
        if self.task == "pta" and self.pe_mode == "concatenative":
            return self.encoder_width + self.pe_width
        return self.encoder_width

    def layer_config(self, width: int) -> FFTLayerConfig:
        attention = AttentionConfig(width, self.n_heads, self.pe_mode, self.clip_k)
        return FFTLayerConfig(attention, self.conv_kernel, self.conv_hidden or None, self.keep_prob)

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                kwargs[f.name] = _coerce(f.type, d[f.name])
        return cls(**kwargs)


def _coerce(type_name, value: str):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


# ---------------------------------------------------------------------------
# duration handling
# ---------------------------------------------------------------------------

def length_regulator(H: Tensor, durations) -> Tensor:
    """Repeat row ``i`` of ``H`` ``durations[i]`` times (zero durations drop the row).

    Works on ``[m, d]`` with ``durations [m]`` or batched ``[B, m, d]`` with
    ``[B, m]``; batched outputs are zero-padded to the longest expansion.
    Implemented as a product with a 0/1 expansion matrix so gradients flow to H.
    """
    D = np.asarray(durations)
    if np.any(D < 0) or not np.all(np.equal(np.mod(D, 1), 0)):
        raise ValueError("durations must be non-negative integers")
    D = D.astype(np.int64)
    if D.shape != H.shape[:-1]:
        raise ValueError(f"durations shape {D.shape} does not match hidden states {H.shape}")
    totals = D.sum(axis=-1)
    if np.any(totals == 0):
        raise ValueError("length regulator would produce an empty output")
    E = expansion_matrix(D, H.data.dtype)
    return F.matmul(E, H)


def expansion_matrix(D: np.ndarray, dtype=np.float32) -> np.ndarray:
    """0/1 matrix ``E`` with ``E[..., t, i] = 1`` iff frame t belongs to phoneme i."""
    batched = D.ndim == 2
    Db = D if batched else D[None]
    T = int(Db.sum(axis=1).max())
    m = Db.shape[1]
    E = np.zeros((Db.shape[0], T, m), dtype=dtype)
    for b, row in enumerate(Db):
        owners = np.repeat(np.arange(m), row)
        E[b, np.arange(owners.size), owners] = 1.0
    return E if batched else E[0]


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def durations_from_prediction(raw, max_frames: int = MAX_FRAMES) -> np.ndarray:
    """Turn raw predicted durations (real phonemes only) into frame counts.

    Round half away from zero, clamp to >= 1, and if the total exceeds
    ``max_frames`` rescale proportionally, round again and trim the largest
    entries until it fits.
    """
    D = np.maximum(round_half_away(raw), 1).astype(np.int64)
    if D.size > max_frames:
        raise ValueError(f"{D.size} phonemes cannot fit in {max_frames} frames")
    total = int(D.sum())
    if total > max_frames:
        D = np.maximum(round_half_away(D * (max_frames / total)), 1).astype(np.int64)
        while D.sum() > max_frames:
            D[int(np.argmax(D))] -= 1
    return D


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
    return F.mul(x, np.asarray(mask, dtype=x.data.dtype)[..., None])


class AAIModel(nn.Module):
    """Two dense embedding layers, an encoder FFT stack and a decoder FFT stack."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.task != "aai":
            raise ConfigError("AAIModel needs task='aai'")
        self.cfg = cfg
        d = cfg.d_model
        self.embed1 = nn.Linear(N_ACOUSTIC, d, rng)
        self.embed2 = nn.Linear(d, d, rng)
        self.encoder = FFTStack(cfg.enc_layers, cfg.layer_config(cfg.encoder_width), rng)
        self.decoder = FFTStack(cfg.dec_layers, cfg.layer_config(cfg.decoder_width), rng)
        self.out = nn.Linear(cfg.decoder_width, N_ARTICULATORY, rng)
        self.assign_names()

    def __call__(self, x: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        x = Tensor(x)
        with nn.scope("embedding"):
            h = self.embed2(F.relu(self.embed1(x)))
            pe = sinusoidal_pe(h.shape[1], self.cfg.pe_width, h.data.dtype)
            h = apply_pe(_masked(h, mask), self.cfg.pe_mode, pe, mask)
        with nn.scope("encoder"):
            h = self.encoder(h, mask, rng)
        with nn.scope("decoder"):
            h = self.decoder(h, mask, rng)
        with nn.scope("output"):
            return _masked(self.out(h), mask)


class DurationPredictor(nn.Module):
    """(conv -> ReLU -> LayerNorm -> dropout) x 2, then a scalar per phoneme."""

    def __init__(self, width: int, channels: int, kernel: int, keep_prob: float,
                 rng: np.random.Generator):
        super().__init__()
        self.keep_prob = keep_prob
        self.conv1 = nn.Conv1d(width, channels, kernel, rng)
        self.ln1 = nn.LayerNorm(channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel, rng)
        self.ln2 = nn.LayerNorm(channels)
        self.proj = nn.Linear(channels, 1, rng)

    def __call__(self, H: Tensor, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        h = H
        for conv, ln in ((self.conv1, self.ln1), (self.conv2, self.ln2)):
            h = _masked(h, mask)
            h = F.dropout(ln(F.relu(conv(h))), self.keep_prob, rng, self.training)
        out = self.proj(h)
        return F.mul(F.reshape(out, out.shape[:-1]), np.asarray(mask, dtype=out.data.dtype))


class PTAModel(nn.Module):
    """Phoneme embedding, FFT block, duration predictor, length regulator, FFT block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.task != "pta":
            raise ConfigError("PTAModel needs task='pta'")
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size + 1, cfg.d_model, rng, padding_idx=0)
        self.encoder = FFTStack(cfg.enc_layers, cfg.layer_config(cfg.encoder_width), rng)
        self.duration = DurationPredictor(cfg.encoder_width, cfg.dur_channels, cfg.dur_kernel,
                                          cfg.keep_prob, rng)
        self.decoder = FFTStack(cfg.dec_layers, cfg.layer_config(cfg.decoder_width), rng)
        self.out = nn.Linear(cfg.decoder_width, N_ARTICULATORY, rng)
        self.assign_names()

    def encode(self, ids: np.ndarray, rng=None) -> tuple[Tensor, Tensor, np.ndarray]:
        """Phoneme features, raw duration predictions and the phoneme mask."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and ids.max() > self.cfg.vocab_size:
            raise ValueError(f"phoneme id {ids.max()} exceeds vocabulary size {self.cfg.vocab_size}")
        mask = (ids > 0).astype(nn.get_dtype())
        with nn.scope("embedding"):
            h = self.embedding(ids)
            pe = sinusoidal_pe(ids.shape[1], self.cfg.pe_width, h.data.dtype)
            h = apply_pe(h, self.cfg.pe_mode, pe, mask)
        with nn.scope("encoder"):
            h = self.encoder(h, mask, rng)
        with nn.scope("duration"):
            dur = self.duration(h, mask, rng)
        return h, dur, mask

    def decode(self, h: Tensor, durations: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        """Expand phoneme features by ``durations`` and decode to articulators."""
        with nn.scope("length_regulator"):
            x = length_regulator(h, durations)
        totals = np.asarray(durations).sum(axis=1)
        frame_mask = (np.arange(x.shape[1])[None, :] < totals[:, None]).astype(x.data.dtype)
        pe = sinusoidal_pe(x.shape[1], self.cfg.pe_width, x.data.dtype)
        x = apply_pe(x, self.cfg.pe_mode, pe, frame_mask)
        with nn.scope("decoder"):
            x = self.decoder(x, frame_mask, rng)
        with nn.scope("output"):
            return _masked(self.out(x), frame_mask), frame_mask

    def forward_train(self, ids: np.ndarray, durations: np.ndarray, rng=None):
        """Teacher-forced pass: decoder length comes from ground-truth durations.

        Returns ``(trajectory [B, T, 12], predicted durations [B, m], frame mask [B, T])``.
        """
        h, dur, mask = self.encode(ids, rng)
        durations = np.asarray(durations) * (mask > 0)
        traj, frame_mask = self.decode(h, durations, rng)
        return traj, dur, frame_mask

    def infer(self, ids: np.ndarray, max_frames: int = MAX_FRAMES) -> list[tuple[np.ndarray, np.ndarray]]:
        """Predict ``(trajectory [T, 12], durations [m_true])`` for each sentence."""
        was_training = self.training
        self.eval()
        with nn.no_grad():
            h, dur, mask = self.encode(ids)
            D = np.zeros(mask.shape, dtype=np.int64)
            for b in range(mask.shape[0]):
                real = mask[b] > 0
                D[b, real] = durations_from_prediction(dur.data[b, real], max_frames)
            traj, _ = self.decode(h, D)
        self.train(was_training)
        results = []
        for b in range(mask.shape[0]):
            total = int(D[b].sum())
            results.append((traj.data[b, :total].copy(), D[b, mask[b] > 0].copy()))
        return results


def build_model(cfg: ModelConfig, seed: int = 0) -> AAIModel | PTAModel:
    rng = np.random.default_rng(seed)
    return AAIModel(cfg, rng) if cfg.task == "aai" else PTAModel(cfg, rng)


def save_model(path, model: AAIModel | PTAModel, meta: dict[str, str] | None = None) -> None:
    nn.save_checkpoint(path, model.state_dict(), model.cfg.to_dict(), meta)


def load_model(path) -> tuple[AAIModel | PTAModel, dict[str, str]]:
    """Rebuild a model from its checkpoint; returns ``(model, meta)``."""
    config, params, meta = nn.load_checkpoint(Path(path))
    model = build_model(ModelConfig.from_dict(config))
    model.load_state_dict(params)
    return model, meta
