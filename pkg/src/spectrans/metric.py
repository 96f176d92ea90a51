"""The Wasserstein metric G_W(mu) of a Bloch Hamiltonian under an imaginary gauge.

In the thermodynamic limit ``G_W(mu) = sum_i (1/2pi) int |dE_i/dk|^2 dk``.  At
finite size the estimator :func:`spectrans.transport.metric_fd` departs from it
only where the ring spectrum has exact self-crossings; the size-scaled gap
``N * |G_fd - G_thermo|`` therefore marks the modulus ranges of the auxiliary
generalized Brillouin zones.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .eigensolve import NEAR_EP_COND, eigvals_batched, frames_batched, poly_roots
from .errors import (
    AmbiguousCentralError,
    InvalidInputError,
    NotBracketedError,
    NotFoundError,
    PreconditionError,
    WrongArityError,
)
from .model import LaurentBlochHamiltonian, evaluate, evaluate_dk, momenta
from .transport import match_clouds, metric_fd

DEFAULT_K = 512
#: fraction of near-EP k-points above which a sample counts as divergent
DIVERGENT_FRACTION = 0.01
#: a sample this many times above the curve median counts as divergent
DIVERGENT_RATIO = 1e6
#: a spike must carry at least this fraction of its own value above the background
SPIKE_DOMINANCE = 0.9
#: samples within this many dmu of an exceptional-point modulus are not spikes
EP_GUARD = 5.0
#: a spike-free stretch must exceed this many neighbouring spike spacings to count as a gap
TOUCH_RESOLUTION = 4.0


# ------------------------------------------------------------------ data types


@dataclass(frozen=True)
class MetricSample:
    mu: float
    gw_thermo: float
    gw_finite: Optional[float] = None
    n_delta_gw: Optional[float] = None
    area: Optional[float] = None
    flags: str = ""

    @property
    def divergent(self) -> bool:
        return not math.isfinite(self.gw_thermo)


@dataclass(frozen=True)
class EPSingularity:
    mu_c: float
    k_c: Optional[float] = None
    order: Optional[int] = 2
    multiplicity: int = 1

    def __post_init__(self):
        if self.order is not None and self.order < 2:
            raise InvalidInputError("singularity order must be at least 2")


@dataclass(frozen=True)
class ModulusRange:
    mu_lo: float
    mu_hi: float
    index: int

    def __post_init__(self):
        if self.mu_lo > self.mu_hi:
            raise InvalidInputError("mu_lo exceeds mu_hi")

    @property
    def width(self) -> float:
        return self.mu_hi - self.mu_lo


@dataclass
class MetricCurve:
    """Sampled metric curve.  Optional columns hold NaN where not computed."""

    mu: np.ndarray
    gw_thermo: np.ndarray
    gw_finite: Optional[np.ndarray] = None
    n_delta_gw: Optional[np.ndarray] = None
    area: Optional[np.ndarray] = None
    flags: Optional[List[str]] = None
    singularities: List[EPSingularity] = field(default_factory=list)
    minima: List[float] = field(default_factory=list)
    model: Optional[LaurentBlochHamiltonian] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        n = self.mu.size
        if n and np.any(np.diff(self.mu) <= 0):
            raise InvalidInputError("curve abscissae must increase strictly")
        self.gw_thermo = np.asarray(self.gw_thermo, dtype=float)
        for name in ("gw_finite", "n_delta_gw", "area"):
            val = getattr(self, name)
            setattr(self, name, np.full(n, np.nan) if val is None else np.asarray(val, dtype=float))
        if self.flags is None:
            self.flags = [""] * n
        if any(a.size != n for a in (self.gw_thermo, self.gw_finite, self.n_delta_gw, self.area)) or len(self.flags) != n:
            raise InvalidInputError("curve columns differ in length")

    def __len__(self):
        return self.mu.size

    @property
    def samples(self) -> List[MetricSample]:
        def opt(x):
            return None if np.isnan(x) else float(x)

        return [
            MetricSample(float(m), float(g), opt(f), opt(d), opt(a), fl)
            for m, g, f, d, a, fl in zip(self.mu, self.gw_thermo, self.gw_finite, self.n_delta_gw, self.area, self.flags)
        ]

    def to_csv(self, path):
        from .io import write_csv

        return write_csv(
            path,
            {
                "mu": self.mu,
                "gw_thermo": self.gw_thermo,
                "gw_finite": self.gw_finite,
                "n_delta_gw": self.n_delta_gw,
                "area": self.area,
                "flags": self.flags,
            },
        )

    @classmethod
    def from_csv(cls, path) -> "MetricCurve":
        from .io import read_csv_columns

        cols = read_csv_columns(path)
        if "mu" not in cols or "gw_thermo" not in cols:
            raise InvalidInputError(f"{path}: metric CSV needs mu and gw_thermo columns")
        if len(cols["mu"]) == 0:
            raise InvalidInputError(f"{path}: curve has no samples")
        flags = cols.get("flags")
        if flags is not None:
            flags = ["" if isinstance(f, float) and np.isnan(f) else str(f) for f in flags]
        return cls(
            cols["mu"],
            cols["gw_thermo"],
            cols.get("gw_finite"),
            cols.get("n_delta_gw"),
            cols.get("area"),
            flags,
        )


# ----------------------------------------------------------- thermodynamic G_W


def gw_closed_singleband(H: LaurentBlochHamiltonian, mu: float) -> float:
    """``sum_n n^2 |t_n|^2 e^{2 n mu}`` for a single-band model."""
    if H.m != 1:
        raise WrongArityError(f"closed form needs a single band, model has m = {H.m}")
    return float(sum(n * n * abs(blk[0, 0]) ** 2 * math.exp(2 * n * mu) for n, blk in H.blocks.items()))


@dataclass(frozen=True)
class _BandData:
    E: np.ndarray  # (K, m)
    dE: np.ndarray  # (K, m), dE/dk
    cond: np.ndarray  # (K,)

    @property
    def near_ep(self) -> np.ndarray:
        return ~(self.cond <= NEAR_EP_COND)


def _two_band(A, dA):
    """Closed-form eigenvalues, k-derivatives and a conditioning proxy for 2x2 stacks."""
    half = 0.5 * (A[..., 0, 0] + A[..., 1, 1])
    dhalf = 0.5 * (dA[..., 0, 0] + dA[..., 1, 1])
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    ddet = dA[..., 0, 0] * A[..., 1, 1] + A[..., 0, 0] * dA[..., 1, 1] - dA[..., 0, 1] * A[..., 1, 0] - A[..., 0, 1] * dA[..., 1, 0]
    s = np.sqrt(half * half - det)
    with np.errstate(divide="ignore", invalid="ignore"):
        ds = (half * dhalf - 0.5 * ddet) / s
        # ||A - half I|| / |s| is the eigenvector condition number up to a factor 2
        off = np.sqrt(np.abs(A[..., 0, 0] - half) ** 2 + np.abs(A[..., 0, 1]) ** 2 + np.abs(A[..., 1, 0]) ** 2 + np.abs(A[..., 1, 1] - half) ** 2)
        cond = np.where(off == 0, 1.0, off / np.abs(s))
    E = np.stack([half + s, half - s], axis=-1)
    dE = np.stack([dhalf + ds, dhalf - ds], axis=-1)
    return E, dE, np.where(np.isfinite(cond), cond, np.inf)


def _band_data(H: LaurentBlochHamiltonian, mu: float, K: int) -> _BandData:
    if K < 64:
        raise PreconditionError("need at least 64 quadrature points")
    beta = np.exp(1j * momenta(K) + mu)
    A = evaluate(H, beta)
    dA = evaluate_dk(H, beta)
    if H.m == 1:
        return _BandData(A[:, 0, :], dA[:, 0, :], np.ones(K))
    if H.m == 2:
        return _BandData(*_two_band(A, dA))
    w, U, Uinv, cond = frames_batched(A)
    # biorthogonal first-order perturbation: dE_i = (U^-1 dH U)_ii
    dE = np.einsum("kij,kjl,kli->ki", Uinv, dA, U)
    return _BandData(w, dE, cond)


def _thermo_from_bands(bd: _BandData) -> Tuple[float, float]:
    bad = bd.near_ep
    frac = float(bad.mean())
    if frac >= DIVERGENT_FRACTION:
        return math.inf, frac
    vals = np.sum(np.abs(bd.dE[~bad]) ** 2, axis=-1)
    # a k-point sitting on an EP dominates the sum even when its frame passes the condition test
    if vals.size and vals.max() > DIVERGENT_RATIO * max(float(np.median(vals)), 1e-300):
        return math.inf, frac
    return float(vals.mean()), frac


def gw_thermo(H: LaurentBlochHamiltonian, mu: float, K: int = DEFAULT_K) -> float:
    """Band-summed ``(1/2pi) int |dE/dk|^2 dk`` by the periodic trapezoid rule.

    Returns ``inf`` when at least 1% of the k-points are numerically defective.
    Isolated defective points are dropped from the average.
    """
    return _thermo_from_bands(_band_data(H, mu, K))[0]


def spectral_area(H: LaurentBlochHamiltonian, mu: float, K: int = DEFAULT_K) -> float:
    """Signed area ``sum_i int Re(E_i) d Im(E_i)`` swept with increasing k."""
    bd = _band_data(H, mu, K)
    if bd.near_ep.mean() >= DIVERGENT_FRACTION:
        return math.nan
    integrand = np.sum(bd.E.real * bd.dE.imag, axis=-1)
    return float(2 * np.pi * integrand[~bd.near_ep].mean())


def _trace_integral(H, mu, K):
    beta = np.exp(1j * momenta(K) + mu)
    A = evaluate(H, beta)
    _, U, Uinv, cond = frames_batched(A)
    if np.any(~(cond <= NEAR_EP_COND)):
        return math.nan
    M = U @ np.conj(np.swapaxes(U, -1, -2))
    Minv = np.conj(np.swapaxes(Uinv, -1, -2)) @ Uinv
    Ah = np.conj(np.swapaxes(A, -1, -2))
    tr = np.einsum("kii->k", A @ M @ Ah @ Minv)
    return float(2 * np.pi * tr.real.mean())


def gw_multiband_trace(H: LaurentBlochHamiltonian, mu: float, K: int = DEFAULT_K, dmu: float = 1e-3) -> float:
    """``(1/8pi) d^2/dmu^2 int Tr(H M H^+ M^-1) dk`` with ``M = U U^+`` (central difference).

    Returns ``inf`` if any of the three stencil points sits on a near-EP k-point.
    """
    f = [_trace_integral(H, mu + s * dmu, K) for s in (-1, 0, 1)]
    if any(math.isnan(x) for x in f):
        return math.inf
    return (f[0] - 2 * f[1] + f[2]) / dmu**2 / (8 * np.pi)


# ------------------------------------------------------------ finite-size gap


def n_delta_gw(H: LaurentBlochHamiltonian, mu: float, dmu: float, N: int, K: int = DEFAULT_K) -> float:
    """``N |G_fd(mu, N) - G_thermo(mu)|``; NaN where the thermodynamic value diverges."""
    g = gw_thermo(H, mu, K)
    if not math.isfinite(g):
        return math.nan
    return N * abs(metric_fd(H, mu, dmu, N) - g)


def degeneracy_correction(H: LaurentBlochHamiltonian, mu: float, pairs, tol: float = 1e-6) -> float:
    """Predicted peak of ``N dG_W`` from exact degeneracies ``E(k', mu) = E(k'', mu)``.

    Each pair contributes ``|dE/dmu(k') - dE/dmu(k'')|^2 / 2``: the cost saved
    by swapping the two partners in the matching.  Several simultaneous pairs
    are summed.  ``pairs`` holds ``(k1, k2)`` or ``(k1, band1, k2, band2)``.
    """
    total = 0.0
    for pair in pairs:
        if len(pair) == 2:
            (k1, k2), (b1, b2) = pair, (None, None)
        else:
            k1, b1, k2, b2 = pair
        e1, d1 = _level(H, k1, mu, b1)
        e2, d2 = _level(H, k2, mu, b2)
        if b1 is None and b2 is None and H.m > 1:
            # choose the band combination that is degenerate
            best = None
            E1, D1 = _levels(H, k1, mu)
            E2, D2 = _levels(H, k2, mu)
            for i in range(H.m):
                for j in range(H.m):
                    gap = abs(E1[i] - E2[j])
                    if best is None or gap < best[0]:
                        best = (gap, E1[i], D1[i], E2[j], D2[j])
            _, e1, d1, e2, d2 = best
        scale = max(1.0, abs(e1), abs(e2))
        if abs(e1 - e2) > tol * scale:
            raise PreconditionError(f"E({k1}) = {e1:.6g} and E({k2}) = {e2:.6g} are not degenerate")
        # Cauchy-Riemann: dE/dmu = -i dE/dk
        total += 0.5 * abs(-1j * d1 + 1j * d2) ** 2
    return total


def _levels(H, k, mu):
    beta = np.exp(1j * np.array([float(k)]) + mu)
    A, dA = evaluate(H, beta), evaluate_dk(H, beta)
    if H.m == 1:
        return A[0, 0], dA[0, 0]
    if H.m == 2:
        E, dE, _ = _two_band(A, dA)
        return E[0], dE[0]
    w, U, Uinv, _ = frames_batched(A)
    d = np.einsum("kij,kjl,kli->ki", Uinv, dA, U)
    return w[0], d[0]


def _level(H, k, mu, band):
    E, D = _levels(H, k, mu)
    if band is None:
        return E[0], D[0]
    return E[band], D[band]


# ------------------------------------------------------------------ scanning


def _thread_count() -> int:
    import os

    try:
        return max(1, int(os.environ.get("SPECTRANS_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map; uses up to ``SPECTRANS_THREADS`` worker threads."""
    items = list(items)
    n = _thread_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _sample(H, mu, N, dmu, K, with_area):
    bd = _band_data(H, mu, K)
    g, frac = _thermo_from_bands(bd)
    flags = []
    if frac > 0:
        flags.append("near_ep")
    if not math.isfinite(g):
        flags.append("divergent")
    area = math.nan
    if with_area and math.isfinite(g):
        integrand = np.sum(bd.E.real * bd.dE.imag, axis=-1)
        area = float(2 * np.pi * integrand[~bd.near_ep].mean())
    gf = nd = math.nan
    if N is not None:
        gf = metric_fd(H, mu, dmu, N)
        if math.isfinite(g):
            nd = N * abs(gf - g)
    return g, gf, nd, area, "|".join(flags)


def scan_metric(
    H: LaurentBlochHamiltonian,
    mu_lo: float,
    mu_hi: float,
    steps: int,
    N: Optional[int] = None,
    dmu: float = 1e-4,
    K: int = DEFAULT_K,
    area: bool = True,
) -> MetricCurve:
    """Sample the metric on a uniform grid and annotate singularities and minima."""
    if steps < 2:
        raise PreconditionError("need at least two grid points")
    if not mu_lo < mu_hi:
        raise PreconditionError("need mu_lo < mu_hi")
    if N is not None and not 0 < dmu < 2 * np.pi / N:
        raise PreconditionError(f"dmu must lie in (0, 2 pi / N) = (0, {2 * np.pi / N:.3g})")
    mus = np.linspace(mu_lo, mu_hi, steps)
    rows = parallel_map(lambda m: _sample(H, m, N, dmu, K, area), mus)
    g, gf, nd, ar, fl = (list(c) for c in zip(*rows))
    g = np.array(g)
    # second divergence criterion: far above the curve median
    finite = g[np.isfinite(g)]
    if finite.size:
        med = float(np.median(finite))
        for i in np.nonzero(np.isfinite(g) & (g > DIVERGENT_RATIO * max(med, 1e-300)))[0]:
            g[i] = math.inf
            fl[i] = "|".join(filter(None, [fl[i], "divergent"]))
    curve = MetricCurve(mus, g, gf, nd, ar, fl, model=H)
    curve.singularities = find_singularities(curve)
    curve.minima = find_minima(curve)
    return curve


# ---------------------------------------------------------- singularities


def discriminant_coefficients(H: LaurentBlochHamiltonian) -> Tuple[np.ndarray, int]:
    """Laurent coefficients of ``prod_{i<j} (E_i - E_j)^2`` as a function of beta.

    Returns ascending coefficients of ``beta^s * disc(beta)`` and the shift ``s``.
    """
    m = H.m
    if m == 1:
        raise WrongArityError("a single band has no discriminant")
    lo, hi = -m * (m - 1) * H.p, m * (m - 1) * H.q
    n = hi - lo + 1
    L = 1 << int(math.ceil(math.log2(4 * n)))
    beta = np.exp(2j * np.pi * np.arange(L) / L)
    A = evaluate(H, beta)
    if m == 2:
        tr = A[:, 0, 0] + A[:, 1, 1]
        det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
        d = tr * tr - 4 * det
    else:
        E = eigvals_batched(A)
        d = np.ones(L, dtype=complex)
        for i in range(m):
            for j in range(i + 1, m):
                d *= (E[:, i] - E[:, j]) ** 2
    fc = np.fft.fft(d) / L
    coeffs = np.array([fc[k % L] for k in range(lo, hi + 1)])
    coeffs[np.abs(coeffs) < 1e-13 * np.abs(coeffs).max()] = 0
    return coeffs, -lo


def exceptional_points(H: LaurentBlochHamiltonian, tol: float = 1e-6) -> List[Tuple[complex, complex]]:
    """Defective points ``(beta_c, E_c)`` of ``H(beta)`` in the punctured plane."""
    if H.m == 1:
        return []
    c, _ = discriminant_coefficients(H)
    if not np.any(c):
        return []
    out = []
    for b in poly_roots(c):
        if b == 0 or not np.isfinite(b):
            continue
        A = evaluate(H, b)
        E = np.linalg.eigvals(A)
        i, j = min(((i, j) for i in range(H.m) for j in range(i + 1, H.m)), key=lambda ij: abs(E[ij[0]] - E[ij[1]]))
        Ec = 0.5 * (E[i] + E[j])
        s = np.linalg.svd(A - Ec * np.eye(H.m), compute_uv=False)
        # a defective double root leaves exactly one null direction
        second = s[-2] if H.m > 1 else 0.0
        if second > tol * max(1.0, s[0]):
            out.append((complex(b), complex(Ec)))
    return out


def ep_moduli(H: LaurentBlochHamiltonian) -> List[float]:
    """Gauges ``ln|beta_c|`` of the exceptional points, sorted."""
    return sorted(float(np.log(abs(b))) for b, _ in exceptional_points(H))


def _golden_max(f, a, b, tol=1e-9):
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def find_singularities(curve: MetricCurve, H: Optional[LaurentBlochHamiltonian] = None) -> List[EPSingularity]:
    """Divergences of the sampled metric, refined to the exceptional-point modulus.

    Candidates are divergent samples and interior local maxima (a convex
    segment has none).  With a model at hand each candidate bracket is matched
    against the exceptional points of ``H(beta)``; several EPs of equal modulus
    merge into one singularity of higher multiplicity.
    """
    if len(curve) < 5:
        raise PreconditionError("need at least 5 samples")
    H = H if H is not None else curve.model
    mu, g = curve.mu, curve.gw_thermo
    n = mu.size
    cand = []
    for i in range(n):
        if not math.isfinite(g[i]):
            cand.append(i)
        elif 0 < i < n - 1 and math.isfinite(g[i - 1]) and math.isfinite(g[i + 1]):
            if g[i] > g[i - 1] and g[i] >= g[i + 1]:
                cand.append(i)
    # contiguous divergent samples form one bracket
    brackets = []
    for i in cand:
        lo, hi = mu[max(i - 1, 0)], mu[min(i + 1, n - 1)]
        if brackets and lo <= brackets[-1][1]:
            brackets[-1][1] = hi
        else:
            brackets.append([lo, hi])

    eps = []
    if H is not None and H.m > 1:
        for b, _ in exceptional_points(H):
            eps.append((math.log(abs(b)), float(np.angle(b)) % (2 * np.pi)))
    out = []
    for lo, hi in brackets:
        inside = sorted((e for e in eps if lo <= e[0] <= hi), key=lambda e: e[0])
        if inside:
            groups = [[inside[0]]]
            for e in inside[1:]:
                if abs(e[0] - groups[-1][-1][0]) <= 1e-7:
                    groups[-1].append(e)
                else:
                    groups.append([e])
            for grp in groups:
                out.append(EPSingularity(float(np.mean([e[0] for e in grp])), grp[0][1], 2, len(grp)))
        elif H is not None:
            out.append(EPSingularity(_golden_max(lambda x: gw_thermo(H, x, DEFAULT_K), lo, hi, tol=1e-7), None, None))
        else:
            i = int(np.argmin(np.abs(mu - 0.5 * (lo + hi))))
            out.append(EPSingularity(float(mu[i]), None, None))
    return out


def convexity_check(curve: MetricCurve, tol: float = 1e-6) -> List[bool]:
    """Discrete convexity of every singularity-free segment (one flag per segment).

    Samples within one grid step of a singularity are excluded; the allowed
    negative second difference is ``tol`` times the segment's largest value.
    """
    mu, g = curve.mu, curve.gw_thermo
    step = float(np.min(np.diff(mu))) if mu.size > 1 else 0.0
    sing = [s.mu_c for s in curve.singularities]
    bad = ~np.isfinite(g)
    for s in sing:
        bad |= np.abs(mu - s) <= 1.0 * step + 1e-12
    cuts = sorted(sing)
    seg_id = np.searchsorted(np.array(cuts), mu) if cuts else np.zeros(mu.size, dtype=int)
    result = []
    for sid in np.unique(seg_id):
        idx = np.nonzero((seg_id == sid) & ~bad)[0]
        # split at excluded gaps too
        for run in np.split(idx, np.nonzero(np.diff(idx) > 1)[0] + 1):
            if run.size < 3:
                continue
            x, y = mu[run], g[run]
            h1, h2 = np.diff(x)[:-1], np.diff(x)[1:]
            d2 = 2 * ((y[2:] - y[1:-1]) / h2 - (y[1:-1] - y[:-2]) / h1) / (h1 + h2)
            scale = max(1.0, float(np.max(np.abs(y))))
            result.append(bool(np.all(d2 * min(h1.min(), h2.min()) ** 2 >= -tol * scale)))
    return result


def find_minima(curve: MetricCurve) -> List[float]:
    """Interior local minima, refined by a parabola through the three nearest samples."""
    mu, g = curve.mu, curve.gw_thermo
    out = []
    for i in range(1, mu.size - 1):
        a, b, c = g[i - 1], g[i], g[i + 1]
        if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
            continue
        if b < a and b <= c:
            x0, x1, x2 = mu[i - 1], mu[i], mu[i + 1]
            den = (x0 - x1) * (x0 - x2) * (x1 - x2)
            A = (x2 * (b - a) + x1 * (a - c) + x0 * (c - b)) / den
            B = (x2 * x2 * (a - b) + x1 * x1 * (c - a) + x0 * x0 * (b - c)) / den
            xm = -B / (2 * A) if A > 0 else x1
            out.append(float(min(max(xm, x0), x2)))
    return out


def gbz_radius_circular(curve: MetricCurve) -> float:
    """The central local minimum; it marks the radius of a circular GBZ."""
    mins = curve.minima if curve.minima else find_minima(curve)
    if not mins:
        raise NotFoundError("curve has no interior minimum (edge minimum, possibly unbounded)")
    if len(mins) % 2 == 0:
        raise AmbiguousCentralError(f"{len(mins)} minima have no central one")
    return sorted(mins)[len(mins) // 2]


# ------------------------------------------------------- modulus ranges


def _gw_thermo_batch(H, mus, K):
    """Thermodynamic metric at many gauges at once (NaN where divergent)."""
    mus = np.asarray(mus, dtype=float)
    beta = np.exp(1j * momenta(K)[None, :] + mus[:, None])
    A = evaluate(H, beta)
    dA = evaluate_dk(H, beta)
    if H.m == 1:
        return np.mean(np.abs(dA[..., 0, 0]) ** 2, axis=1)
    if H.m == 2:
        _, dE, cond = _two_band(A, dA)
    else:
        w, U, Uinv, cond = frames_batched(A.reshape(-1, H.m, H.m))
        dE = np.einsum("kij,kjl,kli->ki", Uinv, dA.reshape(-1, H.m, H.m), U).reshape(mus.size, K, H.m)
    bad = ~(cond.reshape(mus.size, K) <= NEAR_EP_COND)
    vals = np.sum(np.abs(dE) ** 2, axis=-1)
    vals[bad] = 0
    good = (~bad).sum(axis=1)
    out = vals.sum(axis=1) / np.maximum(good, 1)
    out[bad.mean(axis=1) >= DIVERGENT_FRACTION] = np.nan
    return out


def finite_size_profile(
    H: LaurentBlochHamiltonian,
    mu_lo: float,
    mu_hi: float,
    N: int,
    dmu: float = 1e-4,
    step: Optional[float] = None,
    K: int = DEFAULT_K,
    chunk: int = 256,
) -> Tuple[np.ndarray, np.ndarray]:
    """``N dG_W`` on a grid fine enough to resolve every spike (default step ``dmu/2``).

    A spike from one degeneracy is a parabola of full width ``dmu``, so a step
    of ``dmu/2`` catches at least three quarters of its height.
    """
    if not 0 < dmu < 2 * np.pi / N:
        raise PreconditionError(f"dmu must lie in (0, 2 pi / N) = (0, {2 * np.pi / N:.3g})")
    step = dmu / 2 if step is None else step
    if step > dmu:
        raise PreconditionError("fine step larger than dmu would skip spikes")
    mus = np.arange(mu_lo, mu_hi + 0.5 * step, step)
    out = np.empty(mus.size)
    ks = momenta(N)
    for s in range(0, mus.size, chunk):
        part = mus[s : s + chunk]
        g = _gw_thermo_batch(H, part, K)
        up = eigvals_batched(evaluate(H, np.exp(1j * ks[None, :] + (part + dmu / 2)[:, None]))).reshape(part.size, -1)
        dn = eigvals_batched(evaluate(H, np.exp(1j * ks[None, :] + (part - dmu / 2)[:, None]))).reshape(part.size, -1)
        for i in range(part.size):
            _, total = match_clouds(up[i], dn[i])
            out[s + i] = N * abs(total / N / dmu**2 - g[i])
    return mus, out


def noise_floor(values) -> float:
    """Median of ``N dG_W`` over a window known to be free of degeneracies."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise InvalidInputError("no finite values for the noise floor")
    return float(np.median(v))


def _intervals(mask, x, close):
    """Maximal runs of True after closing gaps of fewer than ``close`` samples."""
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return []
    runs = [[idx[0], idx[0]]]
    for i in idx[1:]:
        if i - runs[-1][1] <= close:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    return [(x[a], x[b]) for a, b in runs]


def spike_mask(mus, values, dmu: float, threshold: float, exclude: Sequence[float] = ()) -> np.ndarray:
    """Samples sitting on a degeneracy spike rather than on a smooth background.

    A spike has full width ``dmu``, so the samples ``dmu`` away on either side
    lie outside it.  A sample counts when it exceeds the mean of those two by
    more than ``threshold`` and by at least ``SPIKE_DOMINANCE`` of its own
    value; smooth finite-size backgrounds near an exceptional point fail the
    second test.  The sharp cusp at the exceptional point itself is removed
    by passing its modulus in ``exclude``.
    """
    mus, v = np.asarray(mus, dtype=float), np.asarray(values, dtype=float)
    if mus.size < 3:
        return np.zeros(mus.size, dtype=bool)
    step = mus[1] - mus[0]
    off = max(1, int(round(dmu / step)))
    v = np.where(np.isfinite(v), v, np.nan)
    pad = np.full(off, np.nan)
    left = np.concatenate([pad, v[:-off]])
    right = np.concatenate([v[off:], pad])
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        base = np.nanmean(np.stack([left, right]), axis=0)
    excess = v - base
    with np.errstate(invalid="ignore"):
        ok = (excess > threshold) & (excess >= SPIKE_DOMINANCE * v)
    for m in exclude:
        ok &= np.abs(mus - m) > EP_GUARD * dmu
    return ok & np.isfinite(base)


def agbz_modulus_ranges(
    H: LaurentBlochHamiltonian,
    mu_grid,
    N: int,
    dmu: float = 1e-4,
    threshold: Optional[float] = None,
    reference: Optional[Tuple[float, float]] = None,
    K: int = DEFAULT_K,
    profile: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    close: int = 2,
    resolve: float = TOUCH_RESOLUTION,
) -> List[ModulusRange]:
    """Gauge intervals where ``N dG_W`` is finite, indexed 1, 2, ... from the left.

    The finely sampled profile is reduced to its degeneracy spikes (see
    :func:`spike_peaks`).  Consecutive spikes belong to one range unless the
    empty stretch between them is wider than ``close`` grid steps and wider
    than ``resolve`` times the spike spacing on either side, the same rule
    :func:`touch_gap` uses.  This bridges the short holes where spikes are
    buried under an exceptional point's cusp.  Range ends are snapped to
    ``mu_grid``.  Without an explicit threshold it is ten times the noise
    floor over ``reference``.
    """
    grid = np.asarray(mu_grid, dtype=float)
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise PreconditionError("mu grid must have at least two increasing points")
    h = float(np.min(np.diff(grid)))
    if profile is None:
        profile = finite_size_profile(H, grid[0] - h / 2, grid[-1] + h / 2, N, dmu, K=K)
    fmu, fval = profile[0], profile[1]
    if threshold is None:
        if reference is None:
            raise PreconditionError("give a threshold or a degeneracy-free reference window")
        sel = (fmu >= reference[0]) & (fmu <= reference[1])
        ref_val = fval[sel] if np.any(sel) else finite_size_profile(H, reference[0], reference[1], N, dmu, K=K)[1]
        threshold = 10 * noise_floor(ref_val)
    if not threshold > 0:
        raise PreconditionError("threshold must be positive")
    mu = np.array([m for m, _ in spike_peaks(fmu, fval, threshold, dmu, ep_moduli(H))])
    mu = mu[(mu >= grid[0] - h / 2) & (mu <= grid[-1] + h / 2)]
    if mu.size == 0:
        return []
    gaps = np.diff(mu)
    prev = np.r_[0.0, gaps[:-1]]
    nxt = np.r_[gaps[1:], 0.0]
    breaks = np.nonzero((gaps > (close + 0.5) * h) & (gaps > resolve * np.maximum(prev, nxt)))[0]
    cells = np.clip(np.round((mu - grid[0]) / h).astype(int), 0, grid.size - 1)
    out = []
    for i, run in enumerate(np.split(np.arange(mu.size), breaks + 1)):
        out.append(ModulusRange(float(grid[cells[run[0]]]), float(grid[cells[run[-1]]]), i + 1))
    return out


def gbz_modulus_range(ranges: Sequence[ModulusRange], p: int) -> ModulusRange:
    """The ``p``-th range from the left."""
    if p < 1 or len(ranges) < p:
        raise NotFoundError(f"need at least {p} ranges, have {len(ranges)}")
    return sorted(ranges, key=lambda r: r.mu_lo)[p - 1]


def spike_peaks(mus, values, threshold: float, dmu: float, exclude: Sequence[float] = ()) -> List[Tuple[float, float]]:
    """Degeneracy spikes as ``(mu*, height)``.

    Samples passing :func:`spike_mask` within ``dmu`` of each other form one
    spike.  A spike is a parabola of full width ``dmu``,
    ``v = A (1 - (2 (mu - mu*) / dmu)^2)``, so the two largest samples inside
    it (after removing the local background) fix both ``A`` and ``mu*``.
    """
    mus, values = np.asarray(mus, dtype=float), np.asarray(values, dtype=float)
    idx = np.nonzero(spike_mask(mus, values, dmu, threshold, exclude))[0]
    if idx.size == 0:
        return []
    step = mus[1] - mus[0]
    span = max(1, int(round(dmu / step)))
    n = mus.size

    def background(j):
        side = [values[i] for i in (j - 2 * span, j + 2 * span) if 0 <= i < n and np.isfinite(values[i])]
        return min(side) if side else 0.0

    out = []
    for grp in np.split(idx, np.nonzero(np.diff(idx) > span)[0] + 1):
        j = int(grp[np.argmax(values[grp])])
        b = background(j)
        nb = [i for i in (j - 1, j + 1) if 0 <= i < n and np.isfinite(values[i])]
        i = max(nb, key=lambda t: values[t]) if nb else None
        v1 = values[j] - b
        if i is None or not values[i] - b > threshold:
            out.append((float(mus[j]), float(v1)))
            continue
        # samples at u and u + a (in units of the half width), with 0 < r = v2/v1 <= 1
        a = 2 * step / dmu
        r = (values[i] - b) / v1
        if abs(1 - r) < 1e-12:
            u = -a / 2
        else:
            u = (-a + math.sqrt(max(a * a - (1 - r) * (r - 1 + a * a), 0.0))) / (1 - r)
        height = v1 / max(1 - u * u, 1e-12)
        sign = 1 if i > j else -1
        out.append((float(mus[j] - sign * u * dmu / 2), float(height)))
    return out


def _resolved(mu: np.ndarray, dmu: float, resolve: float) -> np.ndarray:
    gaps = np.diff(mu)
    nearest = np.minimum(np.r_[np.inf, gaps], np.r_[gaps, np.inf])
    return nearest >= resolve * dmu


def match_spike_heights(reference, other, dmu: float, resolve: float = 4.0, bridge: float = 3.0) -> np.ndarray:
    """Compare spike heights of two sizes at the reference spike positions.

    Degeneracies at different ``N`` sit at different gauges, so the heights
    of ``other`` are interpolated onto each reference spike.  Only spikes
    whose nearest neighbour is at least ``resolve * dmu`` away take part
    (closer ones overlap the background stencil of :func:`spike_mask`), and
    no interpolation spans a hole wider than ``bridge`` local spacings.

    Returns rows ``(mu, h_reference, h_other, h_other / h_reference - 1)``.
    """
    ref = np.asarray(reference, dtype=float).reshape(-1, 2)
    oth = np.asarray(other, dtype=float).reshape(-1, 2)
    if len(ref) == 0 or len(oth) < 2:
        return np.empty((0, 4))
    m, h = oth[:, 0], oth[:, 1]
    ok_ref, ok_oth = _resolved(ref[:, 0], dmu, resolve), _resolved(m, dmu, resolve)
    gaps = np.diff(m)
    rows = []
    for (mu0, h0), good in zip(ref, ok_ref):
        j = int(np.searchsorted(m, mu0))
        if not good or j == 0 or j == m.size or not (ok_oth[j - 1] and ok_oth[j]):
            continue
        if gaps[j - 1] > bridge * np.median(gaps[max(0, j - 4) : j + 3]):
            continue
        hi = float(np.interp(mu0, m, h))
        rows.append((mu0, h0, hi, hi / h0 - 1))
    return np.array(rows).reshape(-1, 4)


# ---------------------------------------------------------- EP touching


def range_gap(ranges: Sequence[ModulusRange], gbz_index: int) -> float:
    """Signed distance between the GBZ range and its nearest neighbour (negative once merged)."""
    if len(ranges) < gbz_index:
        # the GBZ range has absorbed its neighbour
        return -1.0
    if len(ranges) < 2:
        return -1.0
    ranges = sorted(ranges, key=lambda r: r.mu_lo)
    g = ranges[gbz_index - 1]
    gaps = []
    if gbz_index - 2 >= 0:
        gaps.append(g.mu_lo - ranges[gbz_index - 2].mu_hi)
    if gbz_index < len(ranges):
        gaps.append(ranges[gbz_index].mu_lo - g.mu_hi)
    return min(gaps)


def touch_gap(
    H: LaurentBlochHamiltonian,
    mu_lo: float,
    mu_hi: float,
    N: int,
    dmu: float = 1e-4,
    threshold: float = 1e-5,
    resolve: float = TOUCH_RESOLUTION,
    K: int = DEFAULT_K,
) -> float:
    """Signed separation of the two modulus ranges meeting inside ``[mu_lo, mu_hi]``.

    The ranges are known only through discrete spikes, so an empty stretch
    counts as a real gap only when it is wider than ``resolve`` times the
    spike spacing on either side of it.  Separated ranges end in a dense
    pile-up of ever smaller spikes (spacing ~1e-3), whereas touching ranges
    are sampled sparsely right up to the junction.  Returns the widest hole
    (away from the window edges) minus that allowance: positive once the ranges have come apart.
    """
    peaks = spike_peaks(*finite_size_profile(H, mu_lo, mu_hi, N, dmu, K=K), threshold, dmu, ep_moduli(H))
    mu = np.array([p for p, _ in peaks])
    if mu.size < 4:
        raise NotFoundError("too few degeneracy spikes in the window to judge a gap")
    gaps = np.diff(mu)
    i = int(np.argmax(gaps[1:-1])) + 1
    return float(gaps[i] - resolve * max(gaps[i - 1], gaps[i + 1]))


def ep_touch_scan(
    family: Callable[[float], LaurentBlochHamiltonian],
    t_lo: float,
    t_hi: float,
    gap: Callable[[LaurentBlochHamiltonian], float],
    tol: float = 2e-3,
    maxiter: int = 40,
) -> float:
    """Bisection for the parameter where ``gap(family(t))`` changes sign.

    ``gap`` is the signed separation between the GBZ modulus range and the
    adjacent aGBZ range, for example :func:`touch_gap` on a window around
    their junction or :func:`range_gap` on precomputed ranges.
    """
    g_lo, g_hi = gap(family(t_lo)), gap(family(t_hi))
    if g_lo == 0:
        return t_lo
    if g_hi == 0:
        return t_hi
    if (g_lo > 0) == (g_hi > 0):
        raise NotBracketedError(f"gap has the same sign at both ends ({g_lo:.3g}, {g_hi:.3g})")
    a, b = t_lo, t_hi
    for _ in range(maxiter):
        if b - a <= tol:
            break
        c = 0.5 * (a + b)
        g_c = gap(family(c))
        if g_c == 0:
            return c
        if (g_c > 0) == (g_lo > 0):
            a, g_lo = c, g_c
        else:
            b = c
    return 0.5 * (a + b)


def singularity_split(H: LaurentBlochHamiltonian, mu_lo: float, mu_hi: float, steps: int, K: int = DEFAULT_K) -> float:
    """Signed gauge distance between the two singularities of a curve, ordered by momentum.

    Zero when they merge into one twofold singularity.
    """
    curve = scan_metric(H, mu_lo, mu_hi, steps, K=K, area=False)
    sing = curve.singularities
    if len(sing) == 1 and sing[0].multiplicity == 2:
        return 0.0
    if len(sing) != 2:
        raise NotFoundError(f"expected two singularities, found {len(sing)}")
    a, b = sorted(sing, key=lambda s: s.k_c if s.k_c is not None else 0.0)
    return b.mu_c - a.mu_c


def singularity_merge_scan(
    family: Callable[[float], LaurentBlochHamiltonian],
    t_lo: float,
    t_hi: float,
    mu_lo: float,
    mu_hi: float,
    steps: int = 201,
    tol: float = 1e-5,
) -> float:
    """Parameter at which the two metric singularities coincide (bisection on their signed split)."""
    return ep_touch_scan(family, t_lo, t_hi, lambda H: singularity_split(H, mu_lo, mu_hi, steps), tol=tol, maxiter=60)
