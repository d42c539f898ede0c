"""Mean-scale uniform quantization and non-overlapping instance-normalized patching."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DecodeError, ShapeError
from .synthdata import TimeSeries

PAD_ID = 0
EOS_ID = 1
DECODER_START_ID = PAD_ID
N_SPECIAL = 2

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 512
    range_low: float = -15.0
    range_high: float = 15.0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if not self.range_low < self.range_high:
            raise ValueError("range_low must be below range_high")

    @property
    def bin_width(self) -> float:
        return (self.range_high - self.range_low) / self.vocab_size

    @property
    def n_tokens(self) -> int:
        return self.vocab_size + N_SPECIAL

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int = 16

    def __post_init__(self):
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")

    def to_dict(self):
        return asdict(self)


def _values(x) -> np.ndarray:
    if isinstance(x, TimeSeries):
        if x.channels != 1:
            raise ShapeError("expected a univariate series")
        return x.values[:, 0]
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 2 and v.shape[1] == 1:
        v = v[:, 0]
    if v.ndim != 1:
        raise ShapeError("expected a univariate series")
    return v


def mean_scale(context):
    """Return ``(scale, scaled)`` with scale = mean |x| (1 when below 1e-12)."""
    v = _values(context)
    scale = float(np.mean(np.abs(v)))
    if scale < SCALE_FLOOR:
        scale = 1.0
    scaled = v / scale
    if isinstance(context, TimeSeries):
        return scale, TimeSeries(scaled, context.dt, context.name, context.period)
    return scale, scaled


def quantize(scaled, cfg: TokenizerConfig) -> np.ndarray:
    """Token ids in ``[2, V+1]``; out-of-range values clip to the edge bins."""
    v = _values(scaled)
    idx = np.floor((v - cfg.range_low) / cfg.bin_width)
    idx = np.clip(idx, 0, cfg.vocab_size - 1).astype(np.int64)
    return idx + N_SPECIAL


def bin_centers(cfg: TokenizerConfig) -> np.ndarray:
    return cfg.range_low + (np.arange(cfg.vocab_size) + 0.5) * cfg.bin_width


def dequantize(tokens, cfg: TokenizerConfig, scale: float = 1.0) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if np.any(t < N_SPECIAL) or np.any(t >= cfg.n_tokens):
        bad = t[(t < N_SPECIAL) | (t >= cfg.n_tokens)][0]
        raise DecodeError(f"token {int(bad)} is not a value bin")
    return bin_centers(cfg)[t - N_SPECIAL] * scale


@dataclass(frozen=True)
class PatchStats:
    mean: float
    std: float
    n_pad: int
    length: int

    def mask(self, patch_len: int) -> np.ndarray:
        n_patches = (self.length + self.n_pad) // patch_len
        m = np.zeros((n_patches, patch_len), dtype=bool)
        m.reshape(-1)[: self.n_pad] = True
        return m


def instance_stats(values: np.ndarray):
    mean = float(np.mean(values))
    std = float(np.std(values))
    if std < SCALE_FLOOR:
        std = 1.0
    return mean, std


def patchify(series, cfg: PatchConfig):
    """Instance-normalize and cut into non-overlapping patches.

    A trailing remainder is handled by left-padding the first patch with the
    first normalized value; the pad count is kept in the returned stats.
    """
    v = _values(series)
    p = cfg.patch_len
    if v.shape[0] < p:
        raise ShapeError(f"series length {v.shape[0]} shorter than patch_len {p}")
    mean, std = instance_stats(v)
    z = (v - mean) / std
    n_patches = -(-z.shape[0] // p)
    n_pad = n_patches * p - z.shape[0]
    if n_pad:
        z = np.concatenate([np.full(n_pad, z[0]), z])
    return z.reshape(n_patches, p), PatchStats(mean, std, n_pad, v.shape[0])


def unpatchify(patches, stats: PatchStats) -> np.ndarray:
    z = np.asarray(patches, dtype=np.float64).reshape(-1)[stats.n_pad:]
    return z * stats.std + stats.mean
