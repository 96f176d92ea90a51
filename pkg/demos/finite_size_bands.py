"""Finite-size spikes of N dG_W mark the auxiliary-GBZ modulus ranges.

A small N and a narrow window keep this under a minute; the acceptance test
runs the full window at N = 200, 300 and 400.
"""

import numpy as np

from spectrans import gbzoracle, metric
from spectrans.model import build_nonreciprocal_ssh

H = build_nonreciprocal_ssh(2.5, 1, 0.2, 4 / 3)
grid = np.round(np.arange(-0.35, -0.05 + 1e-9, 0.01), 10)
N, dmu = 200, 1e-4

mu, v = metric.finite_size_profile(H, grid[0] - 0.005, grid[-1] + 0.005, N, dmu)
threshold = 10 * metric.noise_floor(v[(mu > -0.35) & (mu < -0.3)])
peaks = metric.spike_peaks(mu, v, threshold, dmu)
print(f"{len(peaks)} spikes, tallest {max(h for _, h in peaks):.3f} at mu = {max(peaks, key=lambda p: p[1])[0]:.4f}")
# the metric numbers ranges from the left edge of the window; the oracle knows the true index
print("metric ranges:", metric.agbz_modulus_ranges(H, grid, N, dmu, threshold=threshold, profile=(mu, v)))
print("oracle ranges:", gbzoracle.agbz_ranges_oracle(H, grid))
