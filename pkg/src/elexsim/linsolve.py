"""Dense LU factorization with partial pivoting (LAPACK-backed).

Factors are stored (never the explicit inverse) and reused across solves,
so the per-configuration factorization cost is paid once.  Singularity is
a flag, not an exception: a pivot smaller than ``SINGULAR_RTOL`` times the
largest pivot marks the factorization singular, and only an attempt to
solve with it raises.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg.lapack import dgetrs as _dgetrs

__all__ = ["SINGULAR_RTOL", "SingularSystemError", "LuFactors", "lu_factor", "lu_solve"]

# pivot-magnitude ratio below which a factorization is declared singular
SINGULAR_RTOL = 1e-12


class SingularSystemError(RuntimeError):
    """Attempted to solve with a singular factorization."""


@dataclass
class LuFactors:
    """Combined L/U storage plus the row-pivot permutation."""

    lu: np.ndarray
    piv: np.ndarray
    singular: bool

    @property
    def n(self) -> int:
        return self.lu.shape[0]


def lu_factor(a: np.ndarray) -> LuFactors:
    """Factor a square matrix; singularity is recorded, not raised."""
    a = np.asarray(a, dtype=float)
    n, m = a.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {a.shape}")
    if n == 0:
        return LuFactors(lu=a.copy(), piv=np.empty(0, dtype=np.int32), singular=False)
    with warnings.catch_warnings():
        # exact zero pivots are reported through the singular flag instead
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diagonal(lu))
    largest = pivots.max()
    singular = bool(largest == 0.0 or pivots.min() < SINGULAR_RTOL * largest)
    return LuFactors(lu=lu, piv=piv, singular=singular)


def lu_solve(factors: LuFactors, b: np.ndarray) -> np.ndarray:
    """Solve A x = b from a prior factorization of A."""
    if factors.singular:
        raise SingularSystemError(
            "cannot solve a singular system; change the switch configuration "
            "or enable off-state relaxation"
        )
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factors.n:
        raise ValueError(f"rhs length {b.shape[0]} != system size {factors.n}")
    if factors.n == 0:
        return b.copy()
    x, info = _dgetrs(factors.lu, factors.piv, b)
    if info != 0:  # pragma: no cover - arguments are well-formed by construction
        raise SingularSystemError(f"triangular solve failed (LAPACK info={info})")
    return x
