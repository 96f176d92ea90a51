"""Localization transition of the non-Hermitian Aubry-Andre chain seen by gw_h.

Below h_c = ln(1/lambda) the spectrum does not move with h at all (gw_h sits
at round-off); past it the spectrum opens into a loop and the winding in phi
becomes nonzero.  N = 144 keeps this fast; the acceptance test uses N = 610.
"""

import numpy as np

from spectrans import quasi

N, omega = quasi.fibonacci_closure(144)
q = quasi.QuasiModel((0.5,), omega=omega, N=N)
for h in np.arange(0.4, 1.01, 0.1):
    print(f"h = {h:.1f}   gw_h = {quasi.gw_h(q, h):10.3e}   winding(E=0.1i) = {quasi.winding_phi(q.with_h(h), 0.1j):+d}")
print(f"ln(1/lambda) = {np.log(2):.4f}")
