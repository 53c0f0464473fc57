"""Uncertainty estimation by Monte-Carlo dropout on MHSA outputs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, Tensor
from .rng import stream

MODALITIES = ("R", "D", "I")


@dataclass
class UncertaintyMap:
    """Token-wise variance of one block, shape ``(..., B, L, 1)``; treated as a constant."""

    block_index: int
    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("uncertainty values must be nonnegative")

    def __getitem__(self, idx) -> "UncertaintyMap":
        return UncertaintyMap(self.block_index, self.values[idx])


@dataclass
class ModalityUncertainty:
    modality: str
    u: float


def mc_token_variance(x2, rate: float, t: int, seed: int = 0, *ids: int,
                      block_index: int = -1) -> UncertaintyMap:
    """Population variance over ``t`` inverted-dropout samples, averaged over channels.

    ``ids`` select the counter-based mask stream, so identical ``(seed, ids)``
    reproduce the same samples.
    """
    if t < 2:
        raise ConfigError(f"need at least two Monte-Carlo samples, got t={t}")
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"dropout rate must lie in (0, 1), got {rate}")
    x = x2.data if isinstance(x2, Tensor) else np.asarray(x2, dtype=np.float64)
    keep = stream(seed, *ids).random((t, *x.shape)) >= rate
    samples = x * keep / (1.0 - rate)
    per_channel = samples.var(axis=0)
    return UncertaintyMap(block_index, per_channel.mean(axis=-1, keepdims=True))


def gate(u, r_e: float):
    """``exp(-r_e * u)``: 1 for certain tokens, decaying towards 0 as variance grows."""
    if r_e < 0:
        raise ConfigError(f"penalty intensity r_e must be nonnegative, got {r_e}")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("uncertainty must be nonnegative")
    out = np.exp(-r_e * u)
    return float(out) if out.ndim == 0 else out


def modality_uncertainty(last_block_map: UncertaintyMap, modality: str = "R") -> ModalityUncertainty:
    """Batch mean of the class-token (token 0) uncertainty."""
    v = last_block_map.values
    return ModalityUncertainty(modality, float(v[..., 0, 0].mean()))


def dump_uncertainty(path, umap: UncertaintyMap) -> None:
    """Write a B×L map as ``<u64 B><u64 L>`` followed by little-endian float64 values."""
    v = np.asarray(umap.values, dtype="<f8")
    if v.ndim == 3:
        v = v[..., 0]
    if v.ndim != 2:
        raise ValueError(f"expected a B×L(×1) map, got shape {umap.values.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", *v.shape))
        fh.write(np.ascontiguousarray(v).tobytes())


def load_uncertainty(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    b, L = struct.unpack_from("<QQ", raw)
    return np.frombuffer(raw, dtype="<f8", offset=16, count=b * L).reshape(b, L).astype(np.float64)
