"""Quasiperiodic non-Hermitian chains (Aubry-Andre class) and their h-space metric.

The chain has hoppings ``t e^{-g}`` (``j -> j+1`` entry) and ``t e^{g}``, and
on-site potential ``V_j = sum_l 2 lambda_l cos(l (2 pi omega j + phi + i h))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .eigensolve import eig_dense
from .errors import InvalidModelError, NotFoundError, OnSpectrumError, PreconditionError
from .model import FiniteLattice
from .transport import match_clouds

GOLDEN = (math.sqrt(5) - 1) / 2
#: gw_h values below this are eigensolver round-off amplified by 1/dh^2
NOISE_FLOOR = 1e-6
#: default onset threshold for the transition (energy^2 units, t = 1)
ONSET_THRESHOLD = 1e-2


@dataclass(frozen=True)
class QuasiModel:
    lambdas: Tuple[float, ...] = (0.5,)
    omega: float = GOLDEN
    phi: float = 0.0
    h: float = 0.0
    g: float = 0.0
    N: int = 610
    t: float = 1.0

    def __post_init__(self):
        lam = tuple(float(x) for x in np.atleast_1d(self.lambdas))
        if len(lam) < 1:
            raise InvalidModelError("need at least one harmonic")
        if self.N < 2:
            raise InvalidModelError("need at least two sites")
        object.__setattr__(self, "lambdas", lam)

    @property
    def d(self) -> int:
        return len(self.lambdas)

    def with_h(self, h: float) -> "QuasiModel":
        return replace(self, h=float(h))


def fibonacci_closure(N: int) -> Tuple[int, float]:
    """Largest Fibonacci number ``F_n <= N`` and the rational ``F_{n-1}/F_n``."""
    a, b = 1, 1
    while a + b <= N:
        a, b = b, a + b
    return b, a / b


def potential(q: QuasiModel, phi: Optional[float] = None, h: Optional[float] = None, j=None) -> np.ndarray:
    phi = q.phi if phi is None else phi
    h = q.h if h is None else h
    j = np.arange(q.N) if j is None else np.asarray(j)
    theta = 2 * np.pi * q.omega * j + phi + 1j * h
    return sum(2 * lam * np.cos((l + 1) * theta) for l, lam in enumerate(q.lambdas))


def build_quasiperiodic(q: QuasiModel) -> FiniteLattice:
    """Periodic ring of the quasiperiodic chain."""
    N = q.N
    M = np.diag(potential(q).astype(complex))
    j = np.arange(N)
    M[j, (j + 1) % N] += q.t * math.exp(-q.g)
    M[(j + 1) % N, j] += q.t * math.exp(q.g)
    return FiniteLattice(M, "PBC", float(q.h), N, 1)


def build_dual(q: QuasiModel) -> FiniteLattice:
    """Fourier-dual ring: hoppings ``lambda_n e^{+-n(i phi - h)}``, potential ``2 t cos(2 pi omega m + i g)``.

    With ``omega = p/N`` the plane waves ``e^{2 pi i omega m j}`` map the ring
    onto this matrix exactly, so both spectra coincide.
    """
    N = q.N
    m = np.arange(N)
    M = np.diag(2 * q.t * np.cos(2 * np.pi * q.omega * m + 1j * q.g)).astype(complex)
    for n, lam in enumerate(q.lambdas, start=1):
        if lam == 0:
            continue
        M[(m + n) % N, m] += lam * np.exp(n * (1j * q.phi - q.h))
        M[m, (m + n) % N] += lam * np.exp(-n * (1j * q.phi - q.h))
    return FiniteLattice(M, "PBC", float(q.h), N, 1)


def spectrum(q: QuasiModel, h: Optional[float] = None) -> np.ndarray:
    q = q if h is None else q.with_h(h)
    return eig_dense(build_quasiperiodic(q).matrix)


def gw_h(q: QuasiModel, h: Optional[float] = None, dh: float = 1e-4) -> float:
    """``W^2(spectrum(h + dh/2), spectrum(h - dh/2)) / dh^2`` with exact matching."""
    if not dh > 0:
        raise PreconditionError("dh must be positive")
    h = q.h if h is None else h
    if all(lam == 0 for lam in q.lambdas):
        return 0.0
    a, b = spectrum(q, h + dh / 2), spectrum(q, h - dh / 2)
    _, total = match_clouds(a, b)
    return total / q.N / dh**2


# ------------------------------------------------------------------ winding


def _log_det_ring(q: QuasiModel, E: complex, phis: np.ndarray):
    """``log det(H(phi + i h) - E)`` for a nearest-neighbour ring, vectorised over ``phis``.

    Transfer matrices ``[[a_j, -b c], [1, 0]]`` give the leading-minor
    recursion; the ring closure adds the two corner products.
    Returned as ``(log|det|, arg det)``.
    """
    N = q.N
    b, c = q.t * math.exp(-q.g), q.t * math.exp(q.g)
    bc = b * c
    # product of transfer matrices, rescaled each step; track the log scale
    P = np.zeros((phis.size, 2, 2), dtype=complex)
    P[:, 0, 0] = P[:, 1, 1] = 1
    logscale = np.zeros(phis.size)
    j = np.arange(N)
    V = potential(q, phi=0.0, h=q.h, j=j)
    for jj in range(N):
        a = potential(q, phi=phis, h=q.h, j=jj) - E if q.d else V[jj] - E
        # P <- T_j P with T_j = [[a, -bc], [1, 0]]
        p00 = a * P[:, 0, 0] - bc * P[:, 1, 0]
        p01 = a * P[:, 0, 1] - bc * P[:, 1, 1]
        P[:, 1, 0] = P[:, 0, 0]
        P[:, 1, 1] = P[:, 0, 1]
        P[:, 0, 0] = p00
        P[:, 0, 1] = p01
        s = np.max(np.abs(P).reshape(phis.size, -1), axis=1)
        P /= s[:, None, None]
        logscale += np.log(s)
    # det = tr(P) - (-1)^N (b^N + c^N), P the full product
    tr = P[:, 0, 0] + P[:, 1, 1]
    corner_log = N * math.log(b), N * math.log(c)
    sign = -((-1) ** N)
    cb = np.exp(corner_log[0] - logscale) + np.exp(corner_log[1] - logscale)
    val = tr + sign * cb
    with np.errstate(divide="ignore"):
        return logscale + np.log(np.abs(val)), np.angle(val)


def winding_phi(q: QuasiModel, E_B: complex, n_phi: int = 256, max_points: int = 1 << 14) -> int:
    """Winding of ``det(H(phi + i h) - E_B)`` over ``phi in [0, 2 pi)`` divided by ``N``.

    For a commensurate ring the determinant is ``2 pi / N`` periodic in phi,
    so one period suffices; the grid doubles until the integer is stable twice.
    """
    Np, _ = fibonacci_closure(q.N)
    period = 2 * np.pi / q.N if Np == q.N and abs(q.omega * q.N - round(q.omega * q.N)) < 1e-12 else 2 * np.pi
    scale = 1.0 if period < 2 * np.pi else float(q.N)
    history = []
    n = n_phi
    while n <= max_points:
        phis = np.linspace(0, period, n + 1)
        logabs, arg = _log_det_ring(q, E_B, phis)
        if not np.all(np.isfinite(logabs)):
            raise OnSpectrumError("det vanishes on the phase grid")
        steps = np.angle(np.exp(1j * np.diff(arg)))
        w = steps.sum() / (2 * np.pi) / (1.0 if scale == 1.0 else scale)
        wi = int(round(w))
        if np.max(np.abs(steps)) < np.pi / 4 and abs(w - wi) < 1e-6:
            history.append(wi)
            if len(history) >= 3 and history[-1] == history[-2] == history[-3]:
                return wi
        else:
            history.clear()
        n *= 2
    raise OnSpectrumError(f"phase of det(H - E_B) is not resolved; E_B = {E_B} lies on or near the spectrum")


# ---------------------------------------------------------------- Lyapunov


class LyapunovResult(NamedTuple):
    numeric: float
    formula: float


def lyapunov_exponent(q: QuasiModel, E_B: complex, M: int = 20000, renorm: int = 8) -> LyapunovResult:
    """Growth rate of the transfer-matrix product ``(1/M) log ||T_M ... T_1||``.

    ``formula`` is ``ln|lambda| + |h|`` for the single-harmonic chain (NaN otherwise).
    """
    if M < 10000:
        raise PreconditionError("need at least 10^4 transfer steps")
    b, c = q.t * math.exp(-q.g), q.t * math.exp(q.g)
    j = np.arange(M)
    a = (E_B - potential(q, j=j)) / b
    r = c / b
    x00, x01, x10, x11 = 1 + 0j, 0j, 0j, 1 + 0j
    total = 0.0
    for i in range(M):
        ai = a[i]
        x00, x01, x10, x11 = ai * x00 - r * x10, ai * x01 - r * x11, x00, x01
        if i % renorm == renorm - 1:
            s = max(abs(x00), abs(x01), abs(x10), abs(x11))
            if not (s > 0 and math.isfinite(s)):
                raise PreconditionError("transfer product overflowed; renormalise more often")
            x00, x01, x10, x11 = x00 / s, x01 / s, x10 / s, x11 / s
            total += math.log(s)
    s = max(abs(x00), abs(x01), abs(x10), abs(x11))
    total += math.log(s)
    formula = math.log(abs(q.lambdas[0])) + abs(q.h) if q.d == 1 and q.lambdas[0] != 0 else math.nan
    return LyapunovResult(total / M, formula)


# ---------------------------------------------------------- transition scan


@dataclass
class QuasiSweep:
    h: np.ndarray
    gw: np.ndarray
    flags: List[str]
    h_c: Optional[float] = None
    onset_singularity: Optional[float] = None
    singularities: List[float] = None

    def to_csv(self, path):
        from .io import write_csv

        return write_csv(path, {"h": self.h, "gw_h": self.gw, "flags": self.flags})


def _golden_max(f, a, b, tol):
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


def singular_candidates(h: np.ndarray, g: np.ndarray, rtol: float = 1e-3) -> List[Tuple[int, int]]:
    """Index brackets where the sampled curve fails to be convex.

    Between exceptional points the metric is convex, so every local maximum
    and every concave kink (negative second difference beyond ``rtol``
    relative to the local value) marks a singularity.
    """
    d2 = g[2:] - 2 * g[1:-1] + g[:-2]
    bad = d2 < -rtol * np.maximum(np.abs(g[1:-1]), NOISE_FLOOR)
    idx = np.nonzero(bad)[0] + 1
    out = []
    for run in np.split(idx, np.nonzero(np.diff(idx) > 1)[0] + 1) if idx.size else []:
        out.append((int(run[0]) - 1, int(run[-1]) + 1))
    return out


def h_transition_scan(
    q: QuasiModel,
    h_lo: float,
    h_hi: float,
    steps: int,
    dh: float = 1e-4,
    threshold: float = ONSET_THRESHOLD,
    refine_tol: float = 2e-4,
    refine: bool = True,
) -> QuasiSweep:
    """Sweep ``gw_h``; locate the onset ``h_c`` and the singularities beyond it.

    ``h_c`` is the threshold crossing (linear interpolation between grid
    points).  The first singularity past ``h_c`` is the transition's own EP
    and is reported separately as ``onset_singularity``.
    """
    from .metric import parallel_map

    if steps < 50:
        raise PreconditionError("need at least 50 grid points")
    hs = np.linspace(h_lo, h_hi, steps)
    g = np.array(parallel_map(lambda x: gw_h(q, x, dh), hs))
    flags = ["" if v <= NOISE_FLOOR else "finite" for v in g]
    above = np.nonzero(g > threshold)[0]
    if above.size == 0:
        raise NotFoundError("no transition inside the window")
    i = int(above[0])
    if i == 0:
        h_c = float(hs[0])
    else:
        # interpolate in log space: the onset grows exponentially
        a, b = max(g[i - 1], 1e-300), g[i]
        f = (math.log(threshold) - math.log(a)) / (math.log(b) - math.log(a))
        h_c = float(hs[i - 1] + f * (hs[i] - hs[i - 1]))
    sings = []
    for lo, hi in singular_candidates(hs, g):
        if hs[hi] < h_c:
            continue
        if refine:
            a, b = hs[lo], hs[hi]
            ga, gb = g[lo], g[hi]

            def excess(x, a=a, b=b, ga=ga, gb=gb):
                return gw_h(q, x, dh) - (ga + (gb - ga) * (x - a) / (b - a))

            sings.append(_golden_max(excess, a, b, refine_tol))
        else:
            sings.append(float(hs[lo + int(np.argmax(g[lo : hi + 1]))]))
    for s in sings:
        j = int(np.argmin(np.abs(hs - s)))
        flags[j] = "|".join(filter(None, [flags[j], "singular"]))
    onset = sings[0] if sings else None
    return QuasiSweep(hs, g, flags, h_c, onset, sings[1:])
