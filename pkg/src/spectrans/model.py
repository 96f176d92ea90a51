"""Laurent-polynomial Bloch Hamiltonians and their finite lattices.

Convention used throughout the package: the coefficient ``T[n]`` multiplies
``beta**n`` with ``beta = exp(i k + mu)``, and in real space it is the block
connecting cell ``j`` to cell ``j + n``, i.e. ``H[j, j + n] = T[n]``.  With
this choice a plane wave ``psi_j = beta**j v`` satisfies
``(H psi)_j = H(beta) v beta**j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .errors import InvalidModelError, PoleError, WrapAroundError


@dataclass(frozen=True)
class LaurentBlochHamiltonian:
    """``H(beta) = sum_{n=-p}^{q} T[n] beta**n`` with dense ``m x m`` blocks."""

    blocks: Mapping[int, np.ndarray]
    name: str = "custom"
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.blocks:
            raise InvalidModelError("no hopping blocks given")
        clean = {}
        m = None
        for n, blk in self.blocks.items():
            blk = np.atleast_2d(np.asarray(blk, dtype=complex))
            if blk.ndim != 2 or blk.shape[0] != blk.shape[1]:
                raise InvalidModelError(f"block T[{n}] is not square")
            if m is None:
                m = blk.shape[0]
            elif blk.shape[0] != m:
                raise InvalidModelError("blocks have inconsistent band number")
            if not np.all(np.isfinite(blk)):
                raise InvalidModelError(f"block T[{n}] has non-finite entries")
            blk = blk.copy()
            blk.setflags(write=False)
            clean[int(n)] = blk
        nonzero = [n for n, b in clean.items() if np.any(b != 0)]
        if not nonzero:
            raise InvalidModelError("all hopping blocks vanish")
        p = max(0, -min(clean))
        q = max(0, max(clean))
        if p + q < 1:
            raise InvalidModelError("model has no hopping (p + q = 0)")
        edges = [n for n in (-p, q) if n in clean and np.any(clean[n] != 0)]
        if not edges:
            raise InvalidModelError("hopping ranges are not tight")
        object.__setattr__(self, "blocks", clean)
        object.__setattr__(self, "_m", m)
        object.__setattr__(self, "_p", p)
        object.__setattr__(self, "_q", q)

    @property
    def m(self) -> int:
        return self._m

    @property
    def p(self) -> int:
        return self._p

    @property
    def q(self) -> int:
        return self._q

    def block(self, n: int) -> np.ndarray:
        return self.blocks.get(n, np.zeros((self.m, self.m), dtype=complex))

    def __call__(self, beta):
        return evaluate(self, beta)


def build_hatano_nelson(tL: float, tR: float) -> LaurentBlochHamiltonian:
    """``H(beta) = tL beta + tR / beta``."""
    if tL == 0 and tR == 0:
        raise InvalidModelError("Hatano-Nelson model needs tL or tR nonzero")
    blocks = {1: [[tL]], 0: [[0.0]], -1: [[tR]]}
    return LaurentBlochHamiltonian(blocks, "hatano_nelson", {"tL": tL, "tR": tR})


def build_nonreciprocal_ssh(t1: float, t2: float, t3: float, gamma: float) -> LaurentBlochHamiltonian:
    """Non-reciprocal SSH chain with next-nearest hopping ``t3``.

    Off-diagonal entries are ``R+(beta) = t1 + gamma/2 + t3 beta + t2/beta`` (row 0,
    column 1) and ``R-(beta) = t1 - gamma/2 + t2 beta + t3/beta`` (row 1, column 0).
    """
    t0 = np.array([[0.0, t1 + gamma / 2], [t1 - gamma / 2, 0.0]])
    tp = np.array([[0.0, t3], [t2, 0.0]])
    tm = np.array([[0.0, t2], [t3, 0.0]])
    if not (np.any(tp) or np.any(tm)):
        raise InvalidModelError("SSH model needs t2 or t3 nonzero")
    params = {"t1": t1, "t2": t2, "t3": t3, "gamma": gamma}
    return LaurentBlochHamiltonian({-1: tm, 0: t0, 1: tp}, "ssh", params)


def evaluate(H: LaurentBlochHamiltonian, beta) -> np.ndarray:
    """Return ``sum_n T[n] beta**n``; vectorised over the shape of ``beta``.

    The result has shape ``beta.shape + (m, m)``.
    """
    beta = np.asarray(beta, dtype=complex)
    if np.any(beta == 0):
        raise PoleError("H(beta) has a pole at beta = 0")
    out = np.zeros(beta.shape + (H.m, H.m), dtype=complex)
    for n, blk in H.blocks.items():
        out += (beta**n)[..., None, None] * blk
    return out


def evaluate_dk(H: LaurentBlochHamiltonian, beta) -> np.ndarray:
    """``dH/dk`` at ``beta = exp(ik + mu)``, i.e. ``sum_n i n T[n] beta**n``."""
    beta = np.asarray(beta, dtype=complex)
    out = np.zeros(beta.shape + (H.m, H.m), dtype=complex)
    for n, blk in H.blocks.items():
        if n:
            out += (1j * n * beta**n)[..., None, None] * blk
    return out


def momenta(N: int) -> np.ndarray:
    """Uniform endpoint-excluded grid ``k_j = 2 pi j / N``."""
    return 2 * np.pi * np.arange(N) / N


def bloch_eigenvalues(H: LaurentBlochHamiltonian, k, mu: float = 0.0) -> np.ndarray:
    """Eigenvalues of ``H(exp(ik + mu))``; shape ``k.shape + (m,)``, unordered."""
    from .eigensolve import eigvals_batched

    beta = np.exp(1j * np.asarray(k, dtype=float) + mu)
    return eigvals_batched(evaluate(H, beta))


def pbc_spectrum(H: LaurentBlochHamiltonian, N: int, mu: float) -> np.ndarray:
    """The ``m N`` eigenvalues of the gauged ring, via its Bloch decomposition."""
    return bloch_eigenvalues(H, momenta(N), mu).reshape(-1)


@dataclass(frozen=True)
class FiniteLattice:
    matrix: np.ndarray
    boundary: str
    mu: float
    sites: int
    bands: int = 1

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        from .eigensolve import eig_dense

        return eig_dense(self.matrix)


def _check_size(H: LaurentBlochHamiltonian, N: int):
    if N <= H.p + H.q:
        raise WrapAroundError(f"need N > p + q = {H.p + H.q}, got N = {N}")


def ring_lattice(H: LaurentBlochHamiltonian, N: int, mu: float = 0.0) -> FiniteLattice:
    """Block-circulant ring; block ``T[n] e^{n mu}`` couples cell ``j`` to ``j + n``."""
    _check_size(H, N)
    m = H.m
    M = np.zeros((m * N, m * N), dtype=complex)
    for n, blk in H.blocks.items():
        scaled = blk * np.exp(n * mu)
        for j in range(N):
            jj = (j + n) % N
            M[m * j : m * j + m, m * jj : m * jj + m] += scaled
    return FiniteLattice(M, "PBC", float(mu), N, m)


def open_lattice(H: LaurentBlochHamiltonian, N: int, gauge: float = 0.0) -> FiniteLattice:
    """Block-Toeplitz chain with hoppings truncated at the edges.

    ``gauge`` applies the similarity ``site j -> e^{j gauge}``; it leaves the
    spectrum unchanged and is only used to improve conditioning.
    """
    _check_size(H, N)
    m = H.m
    M = np.zeros((m * N, m * N), dtype=complex)
    for n, blk in H.blocks.items():
        scaled = blk * np.exp(n * gauge)
        for j in range(N):
            jj = j + n
            if 0 <= jj < N:
                M[m * j : m * j + m, m * jj : m * jj + m] += scaled
    return FiniteLattice(M, "OBC", 0.0, N, m)


def build_model(spec: Mapping) -> LaurentBlochHamiltonian:
    """Model from a ``{"type": ..., "parameters": {...}}`` mapping."""
    kind = spec.get("type")
    pars = dict(spec.get("parameters", {}))
    try:
        if kind == "hatano_nelson":
            return build_hatano_nelson(float(pars["tL"]), float(pars["tR"]))
        if kind == "ssh":
            return build_nonreciprocal_ssh(
                float(pars["t1"]), float(pars["t2"]), float(pars.get("t3", 0.0)), float(pars["gamma"])
            )
    except KeyError as exc:
        raise InvalidModelError(f"missing model parameter {exc}") from None
    raise InvalidModelError(f"unknown model type {kind!r}")


def replace_parameter(H: LaurentBlochHamiltonian, name: str, value: float) -> LaurentBlochHamiltonian:
    pars = dict(H.params)
    if name not in pars:
        raise InvalidModelError(f"model {H.name!r} has no parameter {name!r}")
    pars[name] = value
    return build_model({"type": H.name, "parameters": pars})


def is_hermitian_at(H: LaurentBlochHamiltonian, k: float, tol: float = 1e-12, mu: Optional[float] = 0.0) -> bool:
    A = evaluate(H, np.exp(1j * k + mu))
    return bool(np.allclose(A, A.conj().T, atol=tol))
