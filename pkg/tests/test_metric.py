import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectrans import metric
from spectrans.errors import InvalidInputError, NotBracketedError, PreconditionError, WrongArityError
from spectrans.metric import (
    MetricCurve,
    ModulusRange,
    agbz_modulus_ranges,
    convexity_check,
    degeneracy_correction,
    ep_touch_scan,
    exceptional_points,
    find_minima,
    finite_size_profile,
    gbz_radius_circular,
    gw_closed_singleband,
    gw_multiband_trace,
    gw_thermo,
    n_delta_gw,
    range_gap,
    scan_metric,
    singularity_merge_scan,
    spectral_area,
    match_spike_heights,
    spike_mask,
    spike_peaks,
)
from spectrans.model import build_hatano_nelson, build_nonreciprocal_ssh, evaluate, pbc_spectrum
from spectrans.transport import metric_fd

HN = build_hatano_nelson(3, 1)
SSH0 = build_nonreciprocal_ssh(1.3, 1, 0, 4 / 3)
SSH_CENTRE = 0.5 * math.log(abs((1.3 - 2 / 3) / (1.3 + 2 / 3)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 0.5), st.floats(0.2, 4), st.floats(0.2, 4))
def test_single_band_closed_form(mu, tL, tR):
    H = build_hatano_nelson(tL, tR)
    closed = tL**2 * math.exp(2 * mu) + tR**2 * math.exp(-2 * mu)
    assert gw_closed_singleband(H, mu) == pytest.approx(closed, rel=1e-12)
    assert gw_thermo(H, mu) == pytest.approx(closed, rel=1e-10)


def test_closed_form_needs_single_band():
    with pytest.raises(WrongArityError):
        gw_closed_singleband(SSH0, 0.0)


def test_hatano_nelson_minimum():
    curve = scan_metric(HN, -1.5, 0.5, 201)
    assert curve.singularities == []
    assert curve.minima[0] == pytest.approx(-0.5 * math.log(3), abs=1e-4)
    assert gbz_radius_circular(curve) == pytest.approx(-0.549, abs=1e-3)
    assert all(convexity_check(curve))


@pytest.mark.parametrize("H, mu", [(HN, -0.2), (SSH0, -0.9), (SSH0, -0.3)])
def test_area_law(H, mu):
    h = 1e-4
    dA = (spectral_area(H, mu + h) - spectral_area(H, mu - h)) / (2 * h)
    assert dA == pytest.approx(2 * math.pi * gw_thermo(H, mu), rel=1e-3)


@pytest.mark.parametrize("mu", [-0.9, -0.56, -0.3, 0.1])
def test_trace_formula_matches_band_sum(mu):
    assert gw_multiband_trace(SSH0, mu) == pytest.approx(gw_thermo(SSH0, mu), rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-1.0, 0.5))
def test_cauchy_riemann(k, mu):
    # E is holomorphic in beta, so dE/dmu = -i dE/dk
    H = build_nonreciprocal_ssh(2.5, 1, 0.2, 4 / 3)
    h = 1e-6

    def E(kk, mm):
        return np.sort_complex(np.linalg.eigvals(evaluate(H, np.exp(1j * kk + mm))))

    e0 = E(k, mu)
    if abs(e0[0] - e0[1]) < 1e-2:
        return
    dmu = (E(k, mu + h) - E(k, mu - h)) / (2 * h)
    dk = (E(k + h, mu) - E(k - h, mu)) / (2 * h)
    assert np.allclose(dmu, -1j * dk, atol=1e-5 * (1 + np.abs(dk).max()))


def test_ssh_singularities_and_symmetry():
    curve = scan_metric(SSH0, -1.0, -0.1, 181)
    mus = sorted(s.mu_c for s in curve.singularities)
    assert mus == pytest.approx([-0.6763, -0.4568], abs=1e-3)
    for d in (0.05, 0.2, 0.4):
        a, b = gw_thermo(SSH0, SSH_CENTRE - d), gw_thermo(SSH0, SSH_CENTRE + d)
        assert a == pytest.approx(b, rel=1e-6)
    assert all(convexity_check(curve))
    assert len(find_minima(curve)) == 3


def test_exceptional_points_modulus():
    eps = sorted(math.log(abs(b)) for b, _ in exceptional_points(SSH0))
    assert eps == pytest.approx([-0.67634, -0.45676], abs=1e-5)
    assert exceptional_points(HN) == []


def test_exact_ep_on_grid_is_divergent():
    # put the EP of SSH0 exactly onto a quadrature node
    assert gw_thermo(SSH0, math.log(abs(exceptional_points(SSH0)[0][0]))) == math.inf


def test_finite_size_estimator_converges():
    for N in (200, 400, 800):
        err = abs(metric_fd(HN, 0.0, 1e-4, N) - 10)
        assert err < 0.1
    assert n_delta_gw(HN, 0.0, 1e-4, 400) < 1e-3


def test_degeneracy_correction_matches_spike_height():
    H = build_nonreciprocal_ssh(2.5, 1, 0.2, 4 / 3)
    N, dmu = 200, 1e-4
    mus, vals = finite_size_profile(H, -0.2, -0.19, N, dmu, step=dmu / 8)
    peaks = spike_peaks(mus, vals, 1e-4, dmu)
    assert peaks
    mu_star, height = max(peaks, key=lambda p: p[1])
    E = pbc_spectrum(H, N, mu_star)
    ks = np.repeat(2 * np.pi * np.arange(N) / N, 2)
    d = np.abs(E[:, None] - E[None, :]) + np.eye(E.size) * 1e9
    # real hoppings: a degeneracy at (k', k'') comes with its mirror (-k', -k'')
    close = np.argwhere(np.triu(d < 20 * d.min()))
    assert len(close) == 2
    corr = degeneracy_correction(H, mu_star, [(ks[i], ks[j]) for i, j in close], tol=1e-2)
    assert corr == pytest.approx(height, rel=0.1)


def test_degeneracy_correction_rejects_non_degenerate_pair():
    with pytest.raises(PreconditionError):
        degeneracy_correction(HN, 0.0, [(0.1, 0.5)])


def test_spike_mask_ignores_smooth_backgrounds():
    mu = np.arange(0, 0.01, 5e-5)
    background = 1e-6 + 5e-3 * np.exp(400 * (mu - 0.01))  # steep but smooth
    v = background.copy()
    centre = 200 * 5e-5 / 2
    spike = np.clip(1 - ((mu - centre) / 5e-5) ** 2, 0, None) * 3
    mask = spike_mask(mu, v + spike, 1e-4, 1e-5)
    assert mask.any()
    assert np.all(np.abs(mu[mask] - centre) <= 1e-4)
    assert not spike_mask(mu, v, 1e-4, 1e-5).any()


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0.01, 50))
def test_spike_apex_from_two_samples(offset, height):
    step, dmu = 5e-5, 1e-4
    mu = np.arange(-2e-3, 2e-3, step)
    centre = (offset - 0.5) * step
    v = 1e-7 + height * np.clip(1 - (2 * (mu - centre) / dmu) ** 2, 0, None)
    ((m, h),) = spike_peaks(mu, v, 1e-5, dmu)
    assert h == pytest.approx(height, rel=1e-6)
    assert m == pytest.approx(centre, abs=1e-9)


def test_match_spike_heights_uses_resolved_spikes_only():
    envelope = lambda m: 5 - 40 * m**2  # noqa: E731
    ref = [(m, envelope(m)) for m in np.arange(-0.2, 0.2, 0.01)]
    other = [(m, 1.1 * envelope(m)) for m in np.arange(-0.2, 0.2, 0.007)]
    rows = match_spike_heights(ref, other, 1e-4)
    assert len(rows) > 30
    assert np.allclose(rows[:, 3], 0.1, atol=0.02)
    # a pile-up closer than the resolution is skipped
    crowded = [(m, 1.0) for m in np.arange(0, 0.003, 2e-4)]
    assert len(match_spike_heights(crowded, crowded, 1e-4)) == 0


def test_ranges_from_synthetic_profile():
    step, dmu = 5e-5, 1e-4
    mu = np.arange(-1, 1, step)
    v = np.full(mu.size, 1e-6)
    for c in np.concatenate([np.arange(-0.9, -0.5, 0.01), np.arange(0.2, 0.4, 0.005)]):
        v += 2 * np.clip(1 - ((mu - c) / 5e-5) ** 2, 0, None)
    grid = np.arange(-1, 1 + 1e-9, 0.01)
    r = agbz_modulus_ranges(HN, grid, 200, dmu, threshold=1e-5, profile=(mu, v))
    assert [(round(x.mu_lo, 2), round(x.mu_hi, 2), x.index) for x in r] == [(-0.9, -0.51, 1), (0.2, 0.39, 2)]


def test_range_gap_and_bisection_guards():
    rs = [ModulusRange(-2, -1, 1), ModulusRange(-0.5, 0, 2)]
    assert range_gap(rs, 2) == pytest.approx(0.5)
    assert range_gap(rs[:1], 2) == -1
    with pytest.raises(NotBracketedError):
        ep_touch_scan(lambda t: t, 0, 1, lambda t: 1.0)
    assert ep_touch_scan(lambda t: t, 0, 1, lambda t: t - 0.3, tol=1e-6) == pytest.approx(0.3, abs=1e-6)


def test_singularity_merge_at_topological_transition():
    t = singularity_merge_scan(lambda x: build_nonreciprocal_ssh(x, 0.4, 0, 1), 0.25, 0.35, -1.2, -0.2, 501, tol=1e-5)
    assert t == pytest.approx(0.30, abs=1e-3)


def test_curve_csv_round_trip_is_exact(tmp_path):
    curve = scan_metric(SSH0, -1.0, -0.1, 31, N=50)
    path = curve.to_csv(tmp_path / "c.csv")
    back = MetricCurve.from_csv(path)
    for name in ("mu", "gw_thermo", "gw_finite", "n_delta_gw", "area"):
        a, b = getattr(curve, name), getattr(back, name)
        assert np.array_equal(a, b, equal_nan=True)
    assert back.flags == curve.flags
    path2 = back.to_csv(tmp_path / "d.csv")
    assert path.read_bytes() == path2.read_bytes()


def test_threads_do_not_change_results(monkeypatch):
    a = scan_metric(SSH0, -1.0, -0.1, 41, N=60)
    monkeypatch.setenv("SPECTRANS_THREADS", "3")
    b = scan_metric(SSH0, -1.0, -0.1, 41, N=60)
    assert np.array_equal(a.gw_thermo, b.gw_thermo) and np.array_equal(a.gw_finite, b.gw_finite)


def test_curve_validation():
    with pytest.raises(InvalidInputError):
        MetricCurve([0, 0], [1, 1])
    with pytest.raises(PreconditionError):
        scan_metric(HN, 0, 1, 5, N=100, dmu=1.0)
    with pytest.raises(InvalidInputError):
        ModulusRange(1, 0, 1)


def test_constants_are_sane():
    assert metric.DEFAULT_K == 512 and metric.DIVERGENT_FRACTION == 0.01
