"""Dense complex linear algebra primitives shared by all modules.

Conventions fixed here for the whole package:

* arrays are numpy ndarrays in row-major (C) order;
* complex Hermitian matrices are mapped onto real symmetric matrices of
  doubled dimension through ``embed_hermitian``::

      E(C) = [[Re C, -Im C],
              [Im C,  Re C]]

  E preserves products, positive semidefiniteness, and doubles traces and
  eigenvalue multiplicities.  The interior-point core operates on the real
  side only; ``unembed_hermitian`` is the exact inverse on embedded input.
"""

from __future__ import annotations

import numpy as np

HERMITIAN_RTOL = 1e-12


class InvariantViolation(ValueError):
    """A domain-type invariant does not hold (e.g. non-Hermitian input)."""


class DimensionMismatch(ValueError):
    """Operands have incompatible shapes."""


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a)
    if not np.all(np.isfinite(a.view(float) if np.iscomplexobj(a) else a)):
        raise InvariantViolation(f"{name} contains NaN or Inf entries")
    return a


def require_hermitian(a: np.ndarray, rtol: float = HERMITIAN_RTOL) -> np.ndarray:
    """Validate A = A^H up to ``rtol`` (relative, with absolute floor 1)."""
    a = check_finite(np.asarray(a))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    dev = np.linalg.norm(a - a.conj().T)
    if dev > rtol * max(1.0, np.linalg.norm(a)):
        raise InvariantViolation(
            f"matrix is not Hermitian: ||A - A^H|| = {dev:.3e}"
        )
    return a


def hermitian_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix, eigenvalues descending.

    Returns (w, U) with A = U diag(w) U^H and w[0] >= w[1] >= ...
    """
    a = require_hermitian(a)
    w, u = np.linalg.eigh(a)
    return w[::-1].copy(), u[:, ::-1].copy()


def min_eigenvalue(a: np.ndarray) -> float:
    """Smallest eigenvalue of a Hermitian matrix."""
    a = require_hermitian(a)
    return float(np.linalg.eigvalsh(a)[0])


def trace_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Re tr(A B) for Hermitian A, B (exactly real up to roundoff)."""
    a = require_hermitian(a)
    b = require_hermitian(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.real(np.sum(a * b.T)))


def embed_hermitian(c: np.ndarray) -> np.ndarray:
    """Real symmetric embedding of a complex Hermitian matrix."""
    c = np.asarray(c, dtype=complex)
    re, im = c.real, c.imag
    top = np.hstack([re, -im])
    bot = np.hstack([im, re])
    return np.vstack([top, bot])


def unembed_hermitian(r: np.ndarray) -> np.ndarray:
    """Inverse of ``embed_hermitian`` (averages the two redundant copies)."""
    r = np.asarray(r, dtype=float)
    n2 = r.shape[0]
    if r.ndim != 2 or r.shape[0] != r.shape[1] or n2 % 2:
        raise DimensionMismatch(f"expected square matrix of even dim, got {r.shape}")
    n = n2 // 2
    re = 0.5 * (r[:n, :n] + r[n:, n:])
    im = 0.5 * (r[n:, :n] - r[:n, n:])
    return re + 1j * im
