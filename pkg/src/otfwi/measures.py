"""Discrete measures on 1D supports and the elementary functionals used by
the transport solvers: entropy, KL divergence, squared-distance cost matrices
and mass normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiscreteMeasure:
    """A nonnegative mass vector attached to a strictly increasing support.

    For seismic traces the support is the time axis in seconds and the masses
    are the (normalized) signal samples.
    """

    masses: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        support = np.asarray(self.support, dtype=float)
        if masses.ndim != 1 or support.ndim != 1:
            raise ValueError("masses and support must be 1-D")
        if masses.shape != support.shape:
            raise ValueError(
                f"length mismatch: {masses.shape[0]} masses, "
                f"{support.shape[0]} support points"
            )
        if masses.size == 0:
            raise ValueError("empty measure")
        if np.any(masses < 0):
            raise ValueError("masses must be nonnegative")
        if np.any(np.diff(support) <= 0):
            raise ValueError("support must be strictly increasing")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "support", support)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def __len__(self) -> int:
        return self.masses.size


def xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(y) with the continuity convention 0 * log(anything) = 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros(np.broadcast_shapes(x.shape, y.shape))
    nz = x != 0
    with np.errstate(divide="ignore"):
        np.log(y, out=out, where=np.broadcast_to(nz, out.shape))
    return np.where(nz, x, 0.0) * out


def kl_divergence(a: np.ndarray, b: np.ndarray) -> float:
    """KL divergence sum_i a_i log(a_i/b_i) - a_i + b_i.

    Requires b > 0 elementwise and a >= 0; entries with a_i = 0 contribute
    b_i (the 0 log 0 limit).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if np.any(b <= 0):
        raise ValueError("KL reference vector must be strictly positive")
    if np.any(a < 0):
        raise ValueError("KL argument must be nonnegative")
    terms = xlogy(a, a / np.where(a > 0, b, 1.0)) - a + b
    return float(np.sum(terms))


def entropy(p: np.ndarray) -> float:
    """Entropy -sum p (log p - 1) of a nonnegative vector or matrix."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("entropy requires nonnegative entries")
    return float(-np.sum(xlogy(p, p) - p))


def cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared-distance ground cost C[i, j] = (x_i - y_j)**2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ValueError("supports must be nonempty")
    return (x[:, None] - y[None, :]) ** 2


def normalize_mass(m: DiscreteMeasure) -> tuple[DiscreteMeasure, float]:
    """Rescale a measure to unit total mass; returns (normalized, total mass).

    Raises on zero total mass, which signals a degenerate trace.
    """
    total = m.total_mass
    if total <= 0:
        raise ValueError("cannot normalize a zero-mass measure")
    return DiscreteMeasure(m.masses / total, m.support), total
