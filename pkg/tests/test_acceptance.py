"""Acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL ...`` line (outside
pytest's capture) with the measured numbers, then asserts.  Run on its own
with ``pytest -v -s tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from spectrans import gbzoracle, metric, quasi
from spectrans.eigensolve import charpoly_faddeev, eig_dense, poly_roots
from spectrans.errors import AtTransitionError
from spectrans.model import build_hatano_nelson, build_nonreciprocal_ssh, evaluate
from spectrans.transport import (
    brute_force_matching,
    match_clouds,
    metric_fd,
    min_cost_matching,
    squared_cost_matrix,
    wasserstein2,
)

HN = build_hatano_nelson(3, 1)
SSH0 = build_nonreciprocal_ssh(1.3, 1, 0, 4 / 3)
SSH2 = build_nonreciprocal_ssh(2.5, 1, 0.2, 4 / 3)
SSH0_CENTRE = -0.5667
SSH0_EPS = (-0.6765, -0.4568)


@pytest.fixture
def report(request, capsys):
    """Print one verdict line per criterion, even when an assertion fails."""
    n = request.node.get_closest_marker("criterion").args[0]
    state = {"t0": time.perf_counter(), "checks": []}

    def check(name, ok, detail=""):
        state["checks"].append((name, bool(ok), detail))

    yield check
    elapsed = time.perf_counter() - state["t0"]
    limit = request.node.get_closest_marker("criterion").args[1]
    check("time", elapsed < limit, f"{elapsed:.1f}s < {limit}s")
    ok = all(c[1] for c in state["checks"]) and bool(state["checks"])
    parts = "; ".join(f"{name}{'' if good else ' [x]'} {detail}".strip() for name, good, detail in state["checks"])
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {parts}")
    if not ok:
        pytest.fail(f"criterion {n} failed: {parts}", pytrace=False)


def criterion(n, limit):
    return pytest.mark.criterion(n, limit)


# ---------------------------------------------------------------------------


@criterion(1, 10)
def test_c1_single_band_closed_form(report):
    tL, tR = 3.0, 1.0
    mus = np.linspace(-1.5, 0.5, 201)
    closed = 2 * tL * tR * np.cosh(2 * mus + math.log(tL / tR))
    got = np.array([metric.gw_thermo(HN, m) for m in mus])
    err = float(np.max(np.abs(got / closed - 1)))
    argmin = float(mus[np.argmin(got)])
    step = mus[1] - mus[0]
    report("max rel err", err <= 1e-6, f"{err:.2e}")
    report("argmin", abs(argmin - (-0.549)) <= step, f"{argmin:.3f}")


@criterion(2, 60)
def test_c2_finite_size_estimator(report):
    v = metric_fd(HN, 0.0, 1e-4, 400)
    report("metric_fd(N=400)", abs(v / 10 - 1) < 0.01, f"{v:.8f}")
    rows = [(N, d, metric_fd(HN, 0.0, d, N) - 10) for N in (100, 200, 400, 800) for d in (1e-4, 1e-3, 3e-3)]
    X = np.array([[1 / N, d**2] for N, d, _ in rows])
    y = np.array([e for *_, e in rows])
    (c1, c2), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.max(np.abs(X @ [c1, c2] - y)) / np.max(np.abs(y)))
    report("fit c1/N + c2 dmu^2", resid < 0.01, f"c1={c1:.2e} c2={c2:.4f} max resid {resid:.1e}")


@criterion(3, 30)
def test_c3_area_law(report):
    h = 1e-4
    worst = 0.0
    cases = [(HN, m) for m in (-1.2, -0.549, -0.2, 0.3)] + [(SSH0, m) for m in (-0.95, -0.8, -0.56, -0.3, 0.0)]
    for H, m in cases:
        dA = (metric.spectral_area(H, m + h) - metric.spectral_area(H, m - h)) / (2 * h)
        worst = max(worst, abs(dA / (2 * math.pi * metric.gw_thermo(H, m)) - 1))
    report("dA/dmu vs 2pi G_W", worst < 1e-3, f"worst rel {worst:.1e} over {len(cases)} gauges")


@criterion(4, 30)
def test_c4_trace_formula(report):
    rng = np.random.default_rng(20240517)
    mus = []
    while len(mus) < 20:
        m = rng.uniform(-1.2, 0.2)
        if min(abs(m - e) for e in SSH0_EPS) > 0.03:
            mus.append(m)
    worst = max(abs(metric.gw_multiband_trace(SSH0, m) / metric.gw_thermo(SSH0, m) - 1) for m in mus)
    report("trace vs band sum", worst < 1e-4, f"worst rel {worst:.1e} at 20 gauges")


@criterion(5, 60)
def test_c5_ssh_structure(report):
    curve = metric.scan_metric(SSH0, -1.0, -0.1, 181)
    sing = sorted(s.mu_c for s in curve.singularities)
    ok = len(sing) == 2 and all(abs(a - b) <= 1e-3 for a, b in zip(sing, SSH0_EPS))
    report("singularities", ok, "[" + ", ".join(f"{s:.4f}" for s in sing) + "]")
    # locate the mirror axis from the curve itself, then test the mirror property about it
    axis = brentq(lambda c: metric.gw_thermo(SSH0, c - 0.08) - metric.gw_thermo(SSH0, c + 0.08), -0.60, -0.53, xtol=1e-12)
    derived = 0.5 * math.log(abs((1.3 - 2 / 3) / (1.3 + 2 / 3)))
    asym = max(abs(metric.gw_thermo(SSH0, axis - d) / metric.gw_thermo(SSH0, axis + d) - 1) for d in np.linspace(0.02, 0.5, 25))
    report(
        "symmetry",
        asym <= 1e-6 and abs(axis - derived) <= 1e-6 and abs(axis - SSH0_CENTRE) <= 1e-3,
        f"axis {axis:.6f} (derived {derived:.6f}, stated {SSH0_CENTRE}), max asym {asym:.1e}",
    )
    cloud = gbzoracle.obc_spectrum(SSH0, 60)
    mods = np.abs([p.beta for p in gbzoracle.gbz_points_from_obc(SSH0, cloud)])
    dev = float(np.max(np.abs(mods - 0.5674))) if mods.size else math.inf
    report("OBC |beta|", dev <= 1e-3, f"{mods.size} points, max |dev| {dev:.1e}")


@criterion(6, 600)
def test_c6_finite_size_bands(report):
    dmu, step = 1e-4, 0.01
    grid = np.round(np.arange(-2.3, 0.1 + step / 2, step), 10)
    reference = (-1.7, -1.3)  # between the two ranges, away from every exceptional point
    eps = metric.ep_moduli(SSH2)
    oracle = gbzoracle.agbz_ranges_oracle(SSH2, grid)
    peaks, worst_steps = {}, 0.0
    for N in (200, 300, 400):
        profile = metric.finite_size_profile(SSH2, grid[0] - step / 2, grid[-1] + step / 2, N, dmu)
        sel = (profile[0] >= reference[0]) & (profile[0] <= reference[1])
        threshold = 10 * metric.noise_floor(profile[1][sel])
        peaks[N] = metric.spike_peaks(profile[0], profile[1], threshold, dmu, eps)
        ranges = metric.agbz_modulus_ranges(SSH2, grid, N, dmu, threshold=threshold, profile=profile)
        same = len(ranges) == len(oracle)
        # both sides sit on grid points, so the mismatch is a whole number of steps
        mismatch = max(
            (round(max(abs(r.mu_lo - o.mu_lo), abs(r.mu_hi - o.mu_hi)) / step, 6) for r, o in zip(ranges, oracle)),
            default=math.inf,
        )
        worst_steps = max(worst_steps, mismatch if same else math.inf)
        shown = " ".join(f"[{r.mu_lo:.2f},{r.mu_hi:.2f}]" for r in ranges)
        report(f"N={N} ranges", same and mismatch <= 2, f"{shown} ({mismatch:.0f} steps)")
    report("oracle", True, " ".join(f"[{o.mu_lo:.2f},{o.mu_hi:.2f}]#{o.index}" for o in oracle))
    for N in (300, 400):
        rows = metric.match_spike_heights(peaks[200], peaks[N], dmu)
        dev = float(np.max(np.abs(rows[:, 3]))) if len(rows) else math.inf
        report(f"heights 200 vs {N}", len(rows) >= 50 and dev <= 0.25, f"{len(rows)} matched spikes, max rel dev {dev:.3f}")


@criterion(7, 600)
def test_c7_non_bloch_ep(report):
    def family(t1):
        return build_nonreciprocal_ssh(t1, 1, 0.2, 4 / 3)

    def gap(H):
        return metric.touch_gap(H, -1.2, -0.45, 400, 1e-4)

    t_c = metric.ep_touch_scan(family, 1.4, 1.7, gap, tol=0.02)
    report("t1 critical", abs(t_c - 1.56) <= 0.02, f"{t_c:.4f}")


@criterion(8, 120)
def test_c8_topological_transition(report):
    def family(t1):
        return build_nonreciprocal_ssh(t1, 0.4, 0, 1)

    def winding(t1):
        H = family(t1)
        return gbzoracle.winding_number_nonbloch(H, gbzoracle.gbz_radius_oracle(H)).w

    w_lo, w_hi = winding(0.29), winding(0.31)
    report("jump", abs(w_hi - w_lo) == 1, f"w(0.29)={w_lo:g}, w(0.31)={w_hi:g}")
    try:
        winding(0.30)
        flagged = False
    except AtTransitionError:
        flagged = True
    t_w = gbzoracle.winding_transition(family, 0.29, 0.31, tol=1e-6)
    report("at-transition", flagged and abs(t_w - 0.300) <= 1e-3, f"flagged at 0.30, bisection {t_w:.6f}")
    t_m = metric.singularity_merge_scan(family, 0.25, 0.35, -1.5, 0.5, steps=201)
    report("singularity merge", abs(t_m - t_w) <= 1e-3, f"merge at {t_m:.6f}")


@criterion(9, 1200)
def test_c9_quasiperiodic_transition(report):
    N, om = quasi.fibonacci_closure(610)
    q = quasi.QuasiModel((0.5,), omega=om, N=N)
    low = [quasi.gw_h(q, h) for h in np.linspace(0.0, 0.5, 11)]
    report("noise floor h<=0.5", max(low) <= quasi.NOISE_FLOOR, f"max gw_h {max(low):.1e}")
    sweep = quasi.h_transition_scan(q, 0.5, 1.0, 101)
    report("h_c", sweep.h_c is not None and abs(sweep.h_c - 0.693) <= 0.01, f"{sweep.h_c:.4f}")
    first = sorted(sweep.singularities)[:3]
    ok = len(first) == 3 and all(abs(a - b) <= 0.01 for a, b in zip(first, (0.715, 0.749, 0.963)))
    report(
        "singularities",
        ok,
        "[" + ", ".join(f"{x:.4f}" for x in first) + f"] (onset EP {sweep.onset_singularity:.4f})",
    )


@criterion(10, 300)
def test_c10_property_suites(report):
    rng = np.random.default_rng(7)
    # exact optimal transport against brute force
    bad = 0
    for i in range(200):
        n = 1 + i % 8
        a = rng.normal(size=n) + 1j * rng.normal(size=n)
        b = rng.normal(size=n) + 1j * rng.normal(size=n)
        C = squared_cost_matrix(a, b)
        _, best = brute_force_matching(C)
        if abs(min_cost_matching(C).total_cost - best) > 1e-12 * max(1, best):
            bad += 1
        if abs(match_clouds(a, b)[1] - best) > 1e-12 * max(1, best):
            bad += 1
    report("transport vs brute force", bad == 0, f"{bad} mismatches / 200")

    # metric axioms of sqrt(W^2)
    worst = 0.0
    for _ in range(50):
        x, y, z = (rng.normal(size=12) + 1j * rng.normal(size=12) for _ in range(3))
        d = lambda p, q: math.sqrt(wasserstein2(p, q))  # noqa: E731
        worst = max(worst, d(x, z) - d(x, y) - d(y, z), abs(d(x, y) - d(y, x)), d(x, x), d(x, rng.permutation(x)))
    report("metric axioms", worst < 1e-12, f"worst violation {worst:.1e}")

    # convexity between singularities
    curves = [metric.scan_metric(HN, -1.5, 0.5, 201), metric.scan_metric(SSH0, -1.0, -0.1, 181)]
    segs = [ok for c in curves for ok in metric.convexity_check(c)]
    report("convexity", all(segs), f"{sum(segs)}/{len(segs)} segments")

    # Cauchy-Riemann: dE/dmu = -i dE/dk
    h, worst = 1e-6, 0.0
    for _ in range(40):
        k, m = rng.uniform(0, 2 * math.pi), rng.uniform(-1.0, 0.5)

        def E(kk, mm):
            return np.sort_complex(np.linalg.eigvals(evaluate(SSH2, np.exp(1j * kk + mm))))

        if abs(np.diff(E(k, m))[0]) < 1e-2:
            continue
        dmu = (E(k, m + h) - E(k, m - h)) / (2 * h)
        dk = (E(k + h, m) - E(k - h, m)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(dmu + 1j * dk)) / (1 + np.abs(dk).max())))
    report("Cauchy-Riemann", worst < 1e-5, f"worst {worst:.1e}")

    # eigensolver invariants
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 13))
        A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        w = eig_dense(A)
        S = rng.normal(size=(n, n)) + 3 * np.eye(n)
        v = eig_dense(np.linalg.solve(S, A @ S))
        sim = np.abs(w[:, None] - v[None, :]).min(axis=1).max() / (1 + np.abs(w).max())
        roots = poly_roots(charpoly_faddeev(A))
        rt = np.abs(w[:, None] - roots[None, :]).min(axis=1).max() / (1 + np.abs(w).max())
        worst = max(
            worst,
            abs(w.sum() - np.trace(A)) / n,
            abs(np.prod(w) / np.linalg.det(A) - 1),
            sim,
            rt if n <= 8 else 0.0,
        )
    report("eigensolver invariants", worst < 1e-6, f"worst {worst:.1e}")

    # duality at Fibonacci closure
    N, om = quasi.fibonacci_closure(144)
    worst = 0.0
    for lam, h_, g in ((0.5, 0.3, 0.0), (1.5, 0.8, 0.2), (0.7, 0.0, -0.3)):
        q = quasi.QuasiModel((lam,), omega=om, N=N, h=h_, g=g, phi=0.37)
        a = np.linalg.eigvals(quasi.build_quasiperiodic(q).matrix)
        b = np.linalg.eigvals(quasi.build_dual(q).matrix)
        worst = max(worst, math.sqrt(wasserstein2(a, b)) / (1 + np.abs(a).max()))
    report("duality", worst < 1e-6, f"worst {worst:.1e}")


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main(["-v", "-s", __file__]))
