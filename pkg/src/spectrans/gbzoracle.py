"""Metric-free GBZ data: characteristic roots, self-crossings, OBC spectra, windings.

Everything here works from ``f(E, beta) = det(E - H(beta))`` and dense
eigensolves, so it can cross-check the transport-based detectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .eigensolve import poly_roots, roots_batched
from .errors import AtTransitionError, ConditioningError, InvalidInputError, PreconditionError, SolverFailure
from .metric import ModulusRange, _intervals
from .model import LaurentBlochHamiltonian, bloch_eigenvalues, evaluate, momenta, open_lattice
from .transport import SpectrumCloud

MAX_OBC_SITES = 80


class CharPoly(NamedTuple):
    """Ascending coefficients of ``beta**shift * det(E - H(beta))``."""

    coeffs: np.ndarray
    shift: int

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1


@dataclass(frozen=True)
class GBZPoint:
    beta: complex
    E: complex
    pair_index: int

    def __post_init__(self):
        if not abs(self.beta) > 0:
            raise InvalidInputError("GBZ point needs beta != 0")


@dataclass(frozen=True)
class WindingData:
    w: float
    N_plus: int
    N_minus: int
    p_plus: int
    p_minus: int

    def __post_init__(self):
        expect = -(self.N_plus - self.N_minus) / 2 + (self.p_plus - self.p_minus) / 2
        if self.w != expect:
            raise InvalidInputError("winding inconsistent with its root counts")


# ------------------------------------------------------- characteristic polynomial


def _det_on_circle(H: LaurentBlochHamiltonian, E, L: int, radius: float = 1.0):
    """``det(E - H(beta))`` at ``L`` points of the circle; ``E`` may be an array."""
    E = np.atleast_1d(np.asarray(E, dtype=complex))
    beta = radius * np.exp(2j * np.pi * np.arange(L) / L)
    A = evaluate(H, beta)  # (L, m, m)
    m = H.m
    M = E[:, None, None, None] * np.eye(m) - A[None]
    if m == 1:
        return M[..., 0, 0]
    if m == 2:
        return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    return np.linalg.det(M)


def _laurent_fft(H, E, radius=1.0):
    lo, hi = -H.m * H.p, H.m * H.q
    L = 1 << int(math.ceil(math.log2(2 * (hi - lo + 1))))
    vals = _det_on_circle(H, E, L, radius)
    fc = np.fft.fft(vals, axis=-1) / L
    powers = np.arange(lo, hi + 1)
    c = fc[..., powers % L] / radius ** powers
    return c, lo


def _structure(H: LaurentBlochHamiltonian) -> Tuple[int, int]:
    """Lowest and highest power of beta present in ``det(E - H(beta))`` for generic ``E``."""
    rng = np.random.default_rng(12345)
    E = rng.normal(size=3) + 1j * rng.normal(size=3)
    c, lo = _laurent_fft(H, E)
    mag = np.abs(c).max(axis=0)
    keep = np.nonzero(mag > 1e-11 * mag.max())[0]
    return lo + int(keep[0]), lo + int(keep[-1])


def gbz_index(H: LaurentBlochHamiltonian) -> int:
    """Order of the pole of ``det(E - H(beta))`` at the origin: the GBZ is that aGBZ."""
    return -_structure(H)[0]


def char_poly_coeffs(H: LaurentBlochHamiltonian, E: complex) -> CharPoly:
    """Coefficients of the characteristic polynomial in beta at energy ``E``.

    Obtained by sampling the determinant on a circle and interpolating with
    the FFT; structural zeros at either end are trimmed, so for generic ``E``
    the degree equals the number of beta-roots.
    """
    lo, hi = _structure(H)
    for radius in (1.0, 0.5, 2.0):
        c, base = _laurent_fft(H, E, radius)
        c = c[0, lo - base : hi - base + 1]
        if not np.all(np.isfinite(c)):
            continue
        # verify the interpolant at fresh points
        test = radius * 1.3 * np.exp(1j * np.array([0.3, 1.9, 4.1]))
        from .eigensolve import polyval_asc

        ref = np.array([np.linalg.det(E * np.eye(H.m) - evaluate(H, b)) for b in test])
        got = polyval_asc(c, test) * test**lo
        if np.all(np.abs(got - ref) <= 1e-9 * max(1.0, np.abs(ref).max(), np.abs(c).max())):
            return CharPoly(c, -lo)
    raise ConditioningError("characteristic polynomial interpolation failed on all circles")


def beta_roots_sorted(H: LaurentBlochHamiltonian, E: complex) -> np.ndarray:
    """All beta-roots of ``det(E - H(beta)) = 0``, ascending in modulus, ties by phase."""
    cp = char_poly_coeffs(H, E)
    r = poly_roots(cp.coeffs)
    order = np.lexsort((np.angle(r), np.round(np.abs(r), 12)))
    return r[order]


def _roots_many(H: LaurentBlochHamiltonian, E) -> np.ndarray:
    """beta-roots for many energies at once, shape ``E.shape + (degree,)``, unsorted."""
    E = np.asarray(E, dtype=complex)
    lo, hi = _structure(H)
    c, base = _laurent_fft(H, E.ravel())
    c = c[:, lo - base : hi - base + 1]
    return roots_batched(c).reshape(E.shape + (hi - lo,))


# ---------------------------------------------------------------- self-crossings


def _below_counts(H, k, mu):
    """For each band and k: number of other beta-roots strictly inside ``|beta| = e^mu``."""
    E = bloch_eigenvalues(H, k, mu)  # (K, m)
    roots = _roots_many(H, E)  # (K, m, d)
    lm = np.log(np.abs(roots)) - mu
    own = np.argmin(np.abs(roots - np.exp(1j * k + mu)[:, None, None]), axis=-1)
    mask = np.ones(lm.shape, dtype=bool)
    np.put_along_axis(mask, own[..., None], False, axis=-1)
    return np.sum((lm < 0) & mask, axis=-1), E, roots, mask


def _polish(H, k1, b1, k2, b2, mu, iters=30):
    """Newton on ``E_b1(k1) - E_b2(k2) = 0`` in the two real unknowns ``k1, k2``."""
    from .metric import _levels

    for _ in range(iters):
        E1, D1 = _levels(H, k1, mu)
        E2, D2 = _levels(H, k2, mu)
        e1, d1 = (E1[b1], D1[b1]) if np.ndim(E1) else (E1, D1)
        e2, d2 = (E2[b2], D2[b2]) if np.ndim(E2) else (E2, D2)
        F = e1 - e2
        J = np.array([[d1.real, -d2.real], [d1.imag, -d2.imag]])
        try:
            dk = np.linalg.solve(J, -np.array([F.real, F.imag]))
        except np.linalg.LinAlgError:
            break
        k1, k2 = k1 + dk[0], k2 + dk[1]
        if np.max(np.abs(dk)) < 1e-14:
            break
    return k1 % (2 * np.pi), k2 % (2 * np.pi), e1


def self_crossings(H: LaurentBlochHamiltonian, mu: float, K: int = 256, polish: bool = True):
    """Momentum pairs ``(k', k'', E, n)`` with ``E(k', mu) = E(k'', mu)`` and ``k' != k''``.

    A crossing is found where, moving along the band, another beta-root
    passes through the circle ``|beta| = e^mu``; ``n`` is the position of the
    coincident pair in the modulus-sorted root list.
    """
    if K < 64:
        raise PreconditionError("need at least 64 momenta")
    k = momenta(K)
    cnt, E, roots, mask = _below_counts(H, k, mu)
    out = []
    seen = []
    # a partner root lying on the circle is itself a crossing (the whole
    # spectrum can collapse onto a doubly traced arc, with no count jumps)
    lm = np.abs(np.log(np.abs(roots)) - mu)
    on_circle = set()
    for a, band, r in zip(*np.nonzero(mask & (lm < 1e-9))):
        k2 = float(np.angle(roots[a, band, r])) % (2 * np.pi)
        if abs(np.angle(np.exp(1j * (k2 - k[a])))) < 1e-6:
            continue  # the root belonging to k itself
        on_circle.add(int(band))
        key = tuple(sorted((round(float(k[a]), 6), round(k2, 6))))
        if key not in seen:
            seen.append(key)
            out.append((float(k[a]), k2, complex(E[a, band]), int(cnt[a, band]) + 1))
    for band in range(H.m):
        if band in on_circle:
            continue  # counts there only flicker with rounding
        c = cnt[:, band]
        nxt = np.roll(c, -1)
        for a in np.nonzero(c != nxt)[0]:
            n = int(min(c[a], nxt[a]) + 1)
            # root closest to the circle at the jump gives the partner momentum
            b = (a + 1) % K
            lm = np.abs(np.log(np.abs(roots[a, band])) - mu) + np.where(mask[a, band], 0, np.inf)
            partner = roots[a, band][np.argmin(lm)]
            k1, k2 = 0.5 * (k[a] + (k[b] if b else 2 * np.pi)), float(np.angle(partner)) % (2 * np.pi)
            Ek = bloch_eigenvalues(H, np.array([k2]), mu)[0]
            b2 = int(np.argmin(np.abs(Ek - E[a, band])))
            e = E[a, band]
            if polish:
                k1, k2, e = _polish(H, k1, band, k2, b2, mu)
            key = tuple(sorted((round(k1, 6), round(k2, 6))))
            if key in seen:
                continue
            seen.append(key)
            out.append((float(k1), float(k2), complex(e), n))
    return out


def crossing_indices(H: LaurentBlochHamiltonian, mu: float, K: int = 256) -> List[int]:
    """Sorted distinct aGBZ indices with a self-crossing at this gauge."""
    cnt, _, _, _ = _below_counts(H, momenta(K), mu)
    idx = set()
    for band in range(H.m):
        c = cnt[:, band]
        nxt = np.roll(c, -1)
        for a in np.nonzero(c != nxt)[0]:
            idx.add(int(min(c[a], nxt[a]) + 1))
    return sorted(idx)


def agbz_ranges_oracle(H: LaurentBlochHamiltonian, mu_grid, K: int = 256) -> List[ModulusRange]:
    """aGBZ modulus ranges from self-crossings, each tagged with its true index ``n``."""
    grid = np.asarray(mu_grid, dtype=float)
    per_mu = [crossing_indices(H, float(m), K) for m in grid]
    indices = sorted({n for s in per_mu for n in s})
    out = []
    for n in indices:
        mask = np.array([n in s for s in per_mu])
        for a, b in _intervals(mask, grid, 2):
            out.append(ModulusRange(float(a), float(b), n))
    return sorted(out, key=lambda r: (r.mu_lo, r.index))


# -------------------------------------------------------------------- OBC


def default_gauge(H: LaurentBlochHamiltonian) -> float:
    """Pre-balancing gauge: the central local minimum of ``G_W`` on a coarse scan."""
    from .metric import find_minima, scan_metric

    curve = scan_metric(H, -3.0, 3.0, 241, area=False)
    mins = sorted(find_minima(curve))
    if not mins:
        return float(curve.mu[np.nanargmin(np.where(np.isfinite(curve.gw_thermo), curve.gw_thermo, np.nan))])
    return mins[len(mins) // 2]


def obc_spectrum(H: LaurentBlochHamiltonian, N: int, gauge: Optional[float] = None, cond_max: float = 1e13) -> SpectrumCloud:
    """Open-chain spectrum in double precision, computed on a similarity-balanced matrix."""
    if N > MAX_OBC_SITES:
        raise ConditioningError(f"N = {N} exceeds {MAX_OBC_SITES}; OBC spectra lose accuracy, use a smaller N")
    mu0 = default_gauge(H) if gauge is None else gauge
    lat = open_lattice(H, N, gauge=mu0)
    w, U = np.linalg.eig(lat.matrix)
    U = U / np.linalg.norm(U, axis=0)
    cond = np.linalg.cond(U)
    if not cond < cond_max:
        raise ConditioningError(f"eigenvector condition {cond:.2g}; reduce N")
    return SpectrumCloud(w)


def gbz_points_from_obc(H: LaurentBlochHamiltonian, cloud, tol: float = 1e-4) -> List[GBZPoint]:
    """OBC energies whose middle root pair has equal modulus, with ``beta = beta_P``."""
    P = gbz_index(H)
    pts = cloud.points if isinstance(cloud, SpectrumCloud) else np.asarray(cloud, dtype=complex)
    out = []
    for E in pts:
        r = beta_roots_sorted(H, E)
        if r.size < P + 1:
            continue
        a, b = abs(r[P - 1]), abs(r[P])
        if abs(a - b) <= tol * a:
            out.append(GBZPoint(complex(r[P - 1]), complex(E), P))
    return out


def gbz_radius_oracle(H: LaurentBlochHamiltonian, N: int = 60) -> float:
    """Median of ``sqrt(|beta_P| |beta_{P+1}|)`` over the OBC energies.

    At finite N the middle pair differs in modulus at the 1e-3 level for some
    models, while its geometric mean sits on the GBZ far more accurately, so
    no closeness filter is applied here.  Edge modes near a topological transition can trip the conditioning guard;
    the chain is then shortened (to no fewer than 20 sites) and retried.
    """
    sizes = [n for n in (N, 40, 30, 20) if n <= N] or [N]
    for n in sizes:
        try:
            cloud = obc_spectrum(H, n)
        except ConditioningError:
            if n == sizes[-1]:
                raise
            continue
        P = gbz_index(H)
        mods = [np.abs(r[P - 1] * r[P]) for r in map(lambda E: beta_roots_sorted(H, E), cloud.points) if r.size > P]
        if mods:
            return float(np.sqrt(np.median(mods)))
    raise SolverFailure("no OBC eigenvalue has a middle root pair")


def write_gbz_csv(path, points: Sequence[GBZPoint]):
    from .io import write_csv

    return write_csv(
        path,
        {
            "re_beta": [p.beta.real for p in points],
            "im_beta": [p.beta.imag for p in points],
            "re_E": [p.E.real for p in points],
            "im_E": [p.E.imag for p in points],
            "pair_index": [p.pair_index for p in points],
        },
    )


# ---------------------------------------------------------------- winding


def _entry_laurent(H: LaurentBlochHamiltonian, i: int, j: int):
    items = {n: blk[i, j] for n, blk in H.blocks.items() if blk[i, j] != 0}
    if not items:
        raise PreconditionError(f"off-diagonal entry ({i},{j}) vanishes identically")
    lo, hi = min(items), max(items)
    c = np.array([items.get(n, 0) for n in range(lo, hi + 1)], dtype=complex)
    return c, max(0, -lo), lo


def winding_number_nonbloch(H: LaurentBlochHamiltonian, radius: float, rtol: float = 1e-6) -> WindingData:
    """``w = -(N+ - N-)/2 + (p+ - p-)/2`` for ``H = [[0, R+], [R-, 0]]`` on a circular GBZ.

    ``N+-`` count zeros of ``beta^{p+-} R+-(beta)`` inside ``|beta| < radius``.
    """
    if H.m != 2 or any(np.any(np.diag(b) != 0) for b in H.blocks.values()):
        raise PreconditionError("winding needs a two-band purely off-diagonal model")
    if not radius > 0:
        raise PreconditionError("radius must be positive")
    counts, orders = [], []
    for i, j in ((0, 1), (1, 0)):
        c, p, lo = _entry_laurent(H, i, j)
        # beta^p R(beta) = beta^(p + lo) * poly(c); extra powers are roots at 0
        roots = np.concatenate([np.zeros(p + lo), poly_roots(c)]) if c.size > 1 else np.zeros(p + lo)
        mods = np.abs(roots)
        near = np.abs(mods - radius) <= rtol * radius
        if np.any(near):
            raise AtTransitionError(f"a zero of R at |beta| = {mods[near][0]:.8g} sits on the GBZ")
        counts.append(int(np.sum(mods < radius)))
        orders.append(p)
    Np, Nm = counts
    pp, pm = orders
    return WindingData(-(Np - Nm) / 2 + (pp - pm) / 2, Np, Nm, pp, pm)


def circular_gbz_radius(H: LaurentBlochHamiltonian) -> float:
    """Radius of a circular GBZ from the central minimum of the metric."""
    return math.exp(default_gauge(H))


def winding_transition(family, t_lo: float, t_hi: float, radius_fn=None, tol: float = 1e-7) -> float:
    """Parameter at which the non-Bloch winding changes, by bisection."""
    from .errors import NotBracketedError

    radius_fn = radius_fn or gbz_radius_oracle

    def w(t):
        H = family(t)
        try:
            return winding_number_nonbloch(H, radius_fn(H)).w
        except AtTransitionError:
            return None

    a, b = t_lo, t_hi
    wa, wb = w(a), w(b)
    if wa is None or wb is None or wa == wb:
        raise NotBracketedError("winding number does not change across the interval")
    while b - a > tol:
        c = 0.5 * (a + b)
        wc = w(c)
        if wc is None:
            return c
        if wc == wa:
            a = c
        else:
            b = c
    return 0.5 * (a + b)
