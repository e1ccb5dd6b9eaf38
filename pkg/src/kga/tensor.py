"""Dense float64 kernels shared by the model and the fusion code.

Matrices are plain ``numpy.ndarray`` objects with dtype float64. The random
stream comes from numpy's PCG64 bit generator, whose output for a given seed
is identical on every platform numpy supports.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


def as_matrix(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise DomainError("matmul produced non-finite values")
    return out


def softmax_stable(logits) -> np.ndarray:
    """Softmax of a 1-D vector using max subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("softmax needs a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax logits must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_rows(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``logits``; False entries get
    zero weight. Every row must keep at least one True entry.
    """
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


class SeededRng:
    """Reproducible scalar stream (numpy PCG64)."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise DomainError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, stddev: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, stddev, size=size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self.generator.choice(seq, size=size, replace=replace)

    def spawn(self, offset: int) -> "SeededRng":
        """Independent stream derived from this seed."""
        return SeededRng((self.seed * 1_000_003 + offset) % 2**64)


def seeded_normal(rng: SeededRng, rows: int, cols: int, stddev: float) -> np.ndarray:
    if not stddev > 0:
        raise DomainError(f"stddev must be positive, got {stddev}")
    return rng.normal((rows, cols), stddev)
