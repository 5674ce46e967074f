"""Batched tridiagonal algebra.

A tridiagonal matrix of order ``n`` is stored as three arrays ``lower``
(n-1), ``diag`` (n) and ``upper`` (n-1) with ``M[i+1, i] = lower[i]`` and
``M[i, i+1] = upper[i]``. Every routine accepts leading batch dimensions,
which are broadcast against each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = ["TriDiag", "IllConditionedStep", "thomas_solve", "is_diag_dominant"]


class IllConditionedStep(ArithmeticError):
    """Raised when a tridiagonal elimination meets a (near) zero pivot."""


@dataclass(frozen=True, eq=False)
class TriDiag:
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        n = self.diag.shape[-1]
        if self.lower.shape[-1] != n - 1 or self.upper.shape[-1] != n - 1:
            raise ValueError("off-diagonals must have one entry fewer than the diagonal")

    @property
    def n(self) -> int:
        return self.diag.shape[-1]

    @property
    def T(self) -> "TriDiag":
        return TriDiag(self.upper, self.diag, self.lower)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        y[..., :-1] += self.upper * x[..., 1:]
        y[..., 1:] += self.lower * x[..., :-1]
        return y

    def dense(self) -> np.ndarray:
        if self.diag.ndim != 1:
            raise ValueError("dense() is only defined for unbatched matrices")
        return np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1)

    def __add__(self, other: "TriDiag") -> "TriDiag":
        return TriDiag(self.lower + other.lower, self.diag + other.diag, self.upper + other.upper)

    def scale(self, a) -> "TriDiag":
        a = np.asarray(a, dtype=float)
        return TriDiag(a[..., None] * self.lower if a.ndim else a * self.lower,
                       a[..., None] * self.diag if a.ndim else a * self.diag,
                       a[..., None] * self.upper if a.ndim else a * self.upper)

    def solve(self, rhs: np.ndarray, check_dominance: bool = False) -> np.ndarray:
        return thomas_solve(self.lower, self.diag, self.upper, rhs, check_dominance=check_dominance)


@njit(cache=True)
def _thomas_batched(lower, diag, upper, rhs, out, tiny):
    nb, n = diag.shape
    cp = np.empty(n)
    for k in range(nb):
        piv = diag[k, 0]
        if not abs(piv) > 0.0:
            return k
        cp[0] = upper[k, 0] / piv if n > 1 else 0.0
        out[k, 0] = rhs[k, 0] / piv
        for i in range(1, n):
            piv = diag[k, i] - lower[k, i - 1] * cp[i - 1]
            if not abs(piv) > tiny * abs(diag[k, i]):
                return k
            if i < n - 1:
                cp[i] = upper[k, i] / piv
            out[k, i] = (rhs[k, i] - lower[k, i - 1] * out[k, i - 1]) / piv
        for i in range(n - 2, -1, -1):
            out[k, i] -= cp[i] * out[k, i + 1]
    return -1


def is_diag_dominant(lower, diag, upper) -> np.ndarray:
    """Row-wise weak diagonal dominance with at least one strict row, per batch entry."""
    lower, diag, upper = (np.asarray(a, dtype=float) for a in (lower, diag, upper))
    n = diag.shape[-1]
    batch = np.broadcast_shapes(lower.shape[:-1], diag.shape[:-1], upper.shape[:-1])
    off = np.zeros(batch + (n,))
    off[..., :-1] += np.abs(upper)
    off[..., 1:] += np.abs(lower)
    ad = np.abs(diag)
    return np.all(ad >= off, axis=-1) & np.any(ad > off, axis=-1)


def thomas_solve(lower, diag, upper, rhs, check_dominance: bool = False, tiny: float = 1e-14) -> np.ndarray:
    """Solve ``M x = rhs`` for tridiagonal ``M`` in O(n) per system.

    Raises :class:`IllConditionedStep` if elimination hits a pivot smaller
    than ``tiny`` times the corresponding diagonal entry, or -- with
    ``check_dominance`` -- if some system is not diagonally dominant.
    """
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = diag.shape[-1]
    if rhs.shape[-1] != n:
        raise ValueError(f"rhs has length {rhs.shape[-1]}, matrix has order {n}")
    batch = np.broadcast_shapes(lower.shape[:-1], diag.shape[:-1], upper.shape[:-1], rhs.shape[:-1])
    if check_dominance and not np.all(is_diag_dominant(lower, diag, upper)):
        raise IllConditionedStep("tridiagonal system is not diagonally dominant")
    if n == 1:
        d = np.broadcast_to(diag, batch + (1,))
        if np.any(d == 0.0):
            raise IllConditionedStep("zero pivot")
        return np.broadcast_to(rhs, batch + (1,)) / d
    L = np.ascontiguousarray(np.broadcast_to(lower, batch + (n - 1,)).reshape(-1, n - 1))
    D = np.ascontiguousarray(np.broadcast_to(diag, batch + (n,)).reshape(-1, n))
    U = np.ascontiguousarray(np.broadcast_to(upper, batch + (n - 1,)).reshape(-1, n - 1))
    R = np.ascontiguousarray(np.broadcast_to(rhs, batch + (n,)).reshape(-1, n))
    out = np.empty_like(R)
    bad = _thomas_batched(L, D, U, R, out, tiny)
    if bad >= 0:
        raise IllConditionedStep(f"vanishing pivot in tridiagonal system #{bad}")
    return out.reshape(batch + (n,))
