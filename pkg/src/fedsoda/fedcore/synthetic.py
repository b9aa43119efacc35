"""Synthetic probes drawn from client statistics, their EMA memory bank, and
the consistency-weighted segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import ChannelStats
from ..tensor import ShapeError, loss_bce_weighted


@dataclass
class SyntheticBank:
    client_id: int
    v: np.ndarray | None = None  # [B, C, H, W]
    stats: ChannelStats | None = None

    @property
    def round_initialized(self) -> bool:
        return self.v is not None


def gen_synthetic(stats: ChannelStats, shape: tuple[int, int, int], count: int,
                  rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """``count`` i.i.d. Gaussian images of ``shape`` (C, H, W), channel c ~ N(mean[c], std[c])."""
    c = shape[0]
    mean = np.asarray(stats.mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float64).reshape(1, -1, 1, 1)
    if mean.shape[1] != c or std.shape[1] != c:
        raise ShapeError("channel stats vs probe channels", (mean.shape[1],), (c,))
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    z = rng.standard_normal((count,) + tuple(shape))
    return (mean + std * z).astype(dtype)


def bank_update(bank: SyntheticBank, v_new: np.ndarray, gamma: float) -> SyntheticBank:
    """v <- gamma * v_prev + (1 - gamma) * v_new; the first update stores ``v_new`` as-is."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if bank.v is None:
        bank.v = np.array(v_new, copy=True)
        return bank
    if bank.v.shape != v_new.shape:
        raise ShapeError("memory bank update", v_new.shape, bank.v.shape)
    bank.v = (gamma * bank.v + (1.0 - gamma) * v_new).astype(bank.v.dtype)
    return bank


def consistency_weights(y: np.ndarray, y_hat: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-pixel max(0, |y - y_hat| - epsilon)."""
    if y.shape != y_hat.shape:
        raise ShapeError("consistency weights", y_hat.shape, y.shape)
    return np.maximum(0.0, np.abs(y - y_hat) - epsilon).astype(y_hat.dtype, copy=False)


def loss_sc(y: np.ndarray, y_hat: np.ndarray, epsilon: float) -> tuple[float, np.ndarray]:
    # the weights are held constant: no gradient flows through max/abs
    xi = consistency_weights(y, y_hat, epsilon)
    return loss_bce_weighted(y, y_hat, xi)
