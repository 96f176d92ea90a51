"""Dense non-symmetric eigenproblems and polynomial roots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NearEPError, SolverFailure

#: eigenvector-matrix condition number above which a matrix counts as defective
NEAR_EP_COND = 1e8


def eig_dense(A) -> np.ndarray:
    """Eigenvalues of a square complex matrix (LAPACK ``geev``: Hessenberg + shifted QR)."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise InvalidInputError("eig_dense needs a non-empty square matrix")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix has non-finite entries")
    try:
        return scipy.linalg.eigvals(A, overwrite_a=False, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        # geev reports the index of the first unconverged eigenvalue
        raise SolverFailure(f"QR iteration did not converge: {exc}", partial_dimension=A.shape[0]) from exc


def eigvals_batched(A) -> np.ndarray:
    """Eigenvalues of a stack of matrices ``(..., m, m)``."""
    A = np.asarray(A, dtype=complex)
    if A.shape[-1] == 1:
        return A[..., 0].copy()
    if A.shape[-1] == 2:
        # closed form; the product formula avoids cancellation in the small root
        half = 0.5 * (A[..., 0, 0] + A[..., 1, 1])
        det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
        s = np.sqrt(half * half - det)
        big = np.where((half.conj() * s).real >= 0, half + s, half - s)
        with np.errstate(divide="ignore", invalid="ignore"):
            small = np.where(big != 0, det / big, half - (big - half))
        return np.stack([big, small], axis=-1)
    try:
        return np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(str(exc), partial_dimension=A.shape[-1]) from exc


@dataclass(frozen=True)
class EigenFrame:
    """Eigenvalues with right (columns of ``right``) and left eigenvectors.

    ``left`` is normalised so that ``left.conj().T @ right`` is the identity.
    """

    values: np.ndarray
    right: np.ndarray
    left: np.ndarray

    @property
    def overlap(self) -> np.ndarray:
        """``U^dagger U`` for the right-eigenvector matrix ``U``."""
        return self.right.conj().T @ self.right

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.right))


def _normalized_columns(U):
    return U / np.linalg.norm(U, axis=-2, keepdims=True)


def eig_frame(A, cond_max: float = NEAR_EP_COND) -> EigenFrame:
    """Biorthogonal eigen-decomposition; raises :class:`NearEPError` if defective."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError("eig_frame needs a square matrix")
    w, U = scipy.linalg.eig(A)
    U = _normalized_columns(U)
    cond = np.linalg.cond(U)
    if not np.isfinite(cond) or cond > cond_max:
        raise NearEPError(f"eigenvector matrix condition {cond:.3g} exceeds {cond_max:.1g}", condition=cond)
    L = np.linalg.inv(U).conj().T
    return EigenFrame(w, U, L)


def frames_batched(A):
    """Stacked eigen-decomposition ``(w, U, Uinv, cond)`` for ``A`` of shape ``(..., m, m)``."""
    A = np.asarray(A, dtype=complex)
    m = A.shape[-1]
    if m == 1:
        w = A[..., 0].copy()
        ones = np.ones(A.shape, dtype=complex)
        return w, ones, ones, np.ones(A.shape[:-2])
    w, U = np.linalg.eig(A)
    U = _normalized_columns(U)
    s = np.linalg.svd(U, compute_uv=False)
    with np.errstate(divide="ignore"):
        cond = s[..., 0] / s[..., -1]
    cond = np.where(np.isfinite(cond), cond, np.inf)
    Uinv = np.full_like(U, np.nan)
    ok = cond < 1e15
    if np.any(ok):
        Uinv[ok] = np.linalg.inv(U[ok])
    return w, U, Uinv, cond


# ---------------------------------------------------------------- polynomials


def _trim(c):
    c = np.asarray(c, dtype=complex).ravel()
    if c.size == 0 or not np.any(c != 0):
        raise InvalidInputError("zero polynomial has no well-defined roots")
    last = np.max(np.nonzero(c)[0])
    return c[: last + 1]


def polyval_asc(c, z):
    """Horner evaluation of ``sum c[i] z**i``."""
    z = np.asarray(z, dtype=complex)
    out = np.zeros_like(z)
    for a in c[::-1]:
        out = out * z + a
    return out


def _polyval_and_derivative(c, z):
    p = np.zeros_like(z)
    dp = np.zeros_like(z)
    for a in c[::-1]:
        dp = dp * z + p
        p = p * z + a
    return p, dp


def poly_roots(c, maxiter: int = 2000) -> np.ndarray:
    """All roots of ``sum c[i] z**i`` (ascending powers), with multiplicity.

    Aberth-Ehrlich simultaneous iteration followed by one Newton step per root.
    """
    c = _trim(c)
    deg = c.size - 1
    if deg == 0:
        return np.zeros(0, dtype=complex)
    nz = int(np.argmax(c != 0))
    zeros = np.zeros(nz, dtype=complex)
    c = c[nz:]
    n = c.size - 1
    if n == 0:
        return zeros
    if n == 1:
        return np.concatenate([zeros, [-c[0] / c[1]]])
    c = c / c[-1]

    # initial guesses on a circle of radius set by the coefficient magnitudes
    r = np.abs(c[0]) ** (1.0 / n)
    bound = 1 + np.max(np.abs(c[:-1]))
    r = min(max(r, 1e-3 * bound), bound)
    z = r * np.exp(1j * (2 * np.pi * np.arange(n) / n + 0.4))
    active = np.ones(n, dtype=bool)
    for _ in range(maxiter):
        p, dp = _polyval_and_derivative(c, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dp != 0, p / dp, 0)
            diff = z[:, None] - z[None, :]
            np.fill_diagonal(diff, 1)
            inv = 1 / diff
            np.fill_diagonal(inv, 0)
            s = inv.sum(axis=1)
            step = ratio / (1 - ratio * s)
        step = np.where(np.isfinite(step), step, 1e-8 * (1 + abs(z)))
        step[~active] = 0
        z = z - step
        # converged: step at round-off, or residual at its backward-error level
        absz = np.abs(z)
        resid = np.abs(_polyval_and_derivative(c, z)[0])
        floor = 8e-16 * _polyval_and_derivative(np.abs(c), absz)[0]
        active = (np.abs(step) > 4e-16 * np.maximum(1, absz)) & (resid > floor)
        if not active.any():
            break
    else:
        raise SolverFailure("Aberth iteration did not converge", partial_dimension=int(active.sum()))
    p, dp = _polyval_and_derivative(c, z)
    with np.errstate(divide="ignore", invalid="ignore"):
        newton = np.where(dp != 0, p / dp, 0)
    good = np.isfinite(newton) & (np.abs(newton) < 1e-6 * np.maximum(1, np.abs(z)))
    z = np.where(good, z - newton, z)
    return np.concatenate([zeros, z])


def poly_from_roots(roots) -> np.ndarray:
    """Monic polynomial coefficients (ascending) with the given roots."""
    c = np.array([1.0 + 0j])
    for r in np.asarray(roots, dtype=complex):
        c = np.concatenate([[0], c]) - r * np.concatenate([c, [0]])
    return c


def companion(c) -> np.ndarray:
    """Companion matrix of ``sum c[i] z**i`` (ascending)."""
    c = _trim(c)
    n = c.size - 1
    C = np.zeros((n, n), dtype=complex)
    if n > 1:
        C[1:, :-1] = np.eye(n - 1)
    C[:, -1] = -c[:-1] / c[-1]
    return C


def roots_batched(C) -> np.ndarray:
    """Roots of many same-degree polynomials (rows of ``C``, ascending, nonzero leading).

    Companion-matrix eigenvalues polished by one Newton step.
    """
    C = np.asarray(C, dtype=complex)
    n = C.shape[-1] - 1
    comp = np.zeros(C.shape[:-1] + (n, n), dtype=complex)
    if n > 1:
        comp[..., 1:, :-1] = np.eye(n - 1)
    comp[..., :, -1] = -C[..., :-1] / C[..., -1:]
    z = eigvals_batched(comp)
    p = np.zeros_like(z)
    dp = np.zeros_like(z)
    for i in range(n, -1, -1):
        a = C[..., i][..., None]
        dp = dp * z + p
        p = p * z + a
    with np.errstate(divide="ignore", invalid="ignore"):
        newton = p / dp
    good = np.isfinite(newton) & (np.abs(newton) < 1e-6 * np.maximum(1, np.abs(z)))
    return np.where(good, z - newton, z)


def charpoly_faddeev(A) -> np.ndarray:
    """Coefficients (ascending) of ``det(z I - A)`` by the Faddeev-LeVerrier recursion."""
    A = np.asarray(A, dtype=complex)
    n = A.shape[0]
    c = np.zeros(n + 1, dtype=complex)
    c[n] = 1
    Mk = np.zeros_like(A)
    eye = np.eye(n)
    for k in range(1, n + 1):
        Mk = A @ Mk + c[n - k + 1] * eye
        c[n - k] = -np.trace(A @ Mk) / k
    return c
