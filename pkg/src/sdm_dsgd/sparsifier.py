"""Bernoulli coordinate sparsifier with 1/p amplification.

Each coordinate of the input is kept independently with probability p and
scaled by 1/p, otherwise dropped. The operator is unbiased and its total
variance is (1/p - 1) * ||x||_2^2 (sum of the per-coordinate Bernoulli
variances x_i^2 (1/p - 1)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from . import rng


@dataclass(frozen=True)
class SparsifierConfig:
    """Transmit probability plus the run seed that keys the mask streams."""

    transmit_prob: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.transmit_prob <= 1.0:
            raise DomainError("transmit_prob must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Amplified values at the active coordinates; implicit zeros elsewhere."""

    dimension: int
    active_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.active_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if idx.shape != vals.shape:
            raise DomainError("active_indices and values must have equal length")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.dimension or np.any(np.diff(idx) <= 0)):
            raise DomainError("active_indices must be strictly increasing and within range")
        object.__setattr__(self, "active_indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def nnz(self) -> int:
        """Number of transmitted non-zero entries (exact zeros cost nothing)."""
        return int(np.count_nonzero(self.values))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.active_indices] = self.values
        return out


def sparsify(x: np.ndarray, cfg: SparsifierConfig, node: int = 0, step: int = 0) -> SparseVector:
    """Apply the Bernoulli sparsifier; deterministic per (seed, node, step)."""
    x = np.asarray(x, dtype=float)
    if cfg.transmit_prob == 1.0:
        return SparseVector(x.size, np.arange(x.size, dtype=np.int64), x.copy())
    keep = rng.uniforms(cfg.seed, rng.SPARSIFIER, node, step, x.size) < cfg.transmit_prob
    idx = np.flatnonzero(keep).astype(np.int64)
    return SparseVector(x.size, idx, x[keep] / cfg.transmit_prob)


def sparsifier_mean(x: np.ndarray) -> np.ndarray:
    """Analytic mean of the sparsifier output: the input itself (unbiased)."""
    return np.asarray(x, dtype=float).copy()


def sparsifier_total_variance(x: np.ndarray, transmit_prob: float) -> float:
    """Analytic total variance (1/p - 1) * ||x||_2^2, summed over coordinates."""
    if not 0.0 < transmit_prob <= 1.0:
        raise DomainError("transmit_prob must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    return (1.0 / transmit_prob - 1.0) * float(x @ x)
