"""Small dense complex linear algebra: density operators, square roots, fidelity.

Matrices are plain ``numpy`` arrays of ``complex128``. Most helpers accept a
single ``(d, d)`` matrix or a stack ``(..., d, d)``; the validating entry
points (:func:`as_density`, :func:`normalize`, :func:`fidelity`) work on
single matrices.
"""

from __future__ import annotations

import numpy as np

from qpf.errors import DimensionMismatch, NotHermitian, NotNormalized, NotPSD, VanishingTrace

HERMITIAN_TOL = 1e-10
PSD_TOL = 1e-10
TRACE_TOL = 1e-10
SQRT_HERMITIAN_TOL = 1e-8
SQRT_PSD_TOL = 1e-8
VANISHING_TRACE = 1e-14

_PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def dag(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.swapaxes(a, -1, -2).conj()


def max_norm(a: np.ndarray) -> float:
    """Largest absolute entry; the norm used by every tolerance in qpf."""
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def hermitian_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + dag(a))


def trace(a: np.ndarray) -> np.ndarray | float:
    """Real part of the trace (of each matrix in a stack)."""
    return np.trace(a, axis1=-2, axis2=-1).real


def pauli(which: str) -> np.ndarray:
    """Return a fresh copy of the Pauli matrix ``X``, ``Y``, ``Z`` or ``I``."""
    try:
        return _PAULI[which.upper()].copy()
    except KeyError:
        raise ValueError(f"unknown Pauli matrix {which!r}") from None


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {a.shape}")
    return a


def hermitian_sqrt(a) -> np.ndarray:
    """Principal square root of a Hermitian positive semidefinite matrix.

    Computed from the eigendecomposition of the Hermitian part of ``a``.
    Eigenvalues down to ``-1e-8`` (relative to ``max(1, |a|)``) are treated
    as rounding noise and clamped to zero.

    Raises
    ------
    NotHermitian
        If ``|a - a^H| > 1e-8 |a|`` entrywise.
    NotPSD
        If an eigenvalue is more negative than the clamp window.
    """
    a = _as_square(a)
    scale = max_norm(a)
    if max_norm(a - dag(a)) > SQRT_HERMITIAN_TOL * scale:
        raise NotHermitian("matrix is not Hermitian")
    w, v = np.linalg.eigh(hermitian_part(a))
    if w.size and w.min() < -SQRT_PSD_TOL * max(1.0, scale):
        raise NotPSD(f"minimum eigenvalue {w.min():.3e} is negative")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ dag(v)


def check_density(a, *, name: str = "rho") -> None:
    """Raise unless ``a`` is a valid density operator within the qpf tolerances."""
    scale = max(max_norm(a), 1.0)
    if max_norm(a - dag(a)) > HERMITIAN_TOL * scale:
        raise NotHermitian(f"{name} is not Hermitian")
    tr = np.trace(a)
    if abs(tr - 1.0) > TRACE_TOL:
        raise NotNormalized(f"{name} has trace {tr} instead of 1")
    w = np.linalg.eigvalsh(hermitian_part(a))
    if w.min() < -PSD_TOL:
        raise NotPSD(f"{name} has eigenvalue {w.min():.3e}")


def as_density(a, *, name: str = "rho") -> np.ndarray:
    """Validate ``a`` as a density operator and return it as a complex array."""
    a = _as_square(a)
    check_density(a, name=name)
    return a


def normalize(s) -> tuple[np.ndarray, float]:
    """Divide a subnormalized state by its trace.

    Returns the symmetrized density operator and the trace that was divided
    out. Eigenvalues in ``[-1e-10, 0)`` are clamped to zero.

    Raises
    ------
    VanishingTrace
        When ``tr(s) <= 1e-14``.
    NotPSD
        When ``s`` has an eigenvalue below ``-1e-10`` after normalization.
    """
    s = _as_square(s)
    tr = float(trace(s))
    if not tr > VANISHING_TRACE:
        raise VanishingTrace(f"trace {tr:.3e} is numerically zero")
    rho = hermitian_part(s) / tr
    w, v = np.linalg.eigh(rho)
    if w.min() < -PSD_TOL:
        raise NotPSD(f"normalized state has eigenvalue {w.min():.3e}")
    if w.min() < 0.0:
        w = np.clip(w, 0.0, None)
        rho = (v * w) @ dag(v)
        rho = hermitian_part(rho) / trace(rho)
    return rho, tr


def fidelity(rho, sigma) -> float:
    """Squared Uhlmann fidelity ``tr(sqrt(sqrt(rho) sigma sqrt(rho)))**2``.

    The raw value is clamped to ``[0, 1]``.
    """
    rho = _as_square(rho)
    sigma = _as_square(sigma)
    if rho.shape != sigma.shape:
        raise DimensionMismatch(f"dimensions differ: {rho.shape} vs {sigma.shape}")
    root = hermitian_sqrt(rho)
    inner = hermitian_sqrt(hermitian_part(root @ sigma @ root))
    f = float(trace(inner)) ** 2
    return min(max(f, 0.0), 1.0)


def fidelity_batch(rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Vectorized :func:`fidelity` over stacks ``(n, d, d)``, without validation."""
    w, v = np.linalg.eigh(hermitian_part(rho))
    root = (v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]) @ dag(v)
    inner = hermitian_part(root @ sigma @ root)
    lam = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    return np.clip(np.sqrt(lam).sum(axis=-1) ** 2, 0.0, 1.0)


def pure_state(psi) -> np.ndarray:
    """``|psi><psi|`` for a (not necessarily normalized) vector."""
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def maximally_mixed(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=complex) / dim


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random density operator ``G G^H / tr`` from a complex Ginibre matrix."""
    rank = dim if rank is None else rank
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    rho = g @ dag(g)
    return hermitian_part(rho / trace(rho))
