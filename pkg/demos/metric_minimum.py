"""Where is the GBZ of a non-reciprocal chain?  Read it off the metric.

For the Hatano-Nelson chain the metric G_W(mu) is a single convex bowl whose
bottom is the GBZ gauge.  For the SSH chain two exceptional points cut the
curve into three convex pieces; the middle minimum is again the GBZ, and the
OBC oracle confirms the radius.
"""

import math

from spectrans import gbzoracle, metric
from spectrans.model import build_hatano_nelson, build_nonreciprocal_ssh

hn = build_hatano_nelson(3, 1)
curve = metric.scan_metric(hn, -1.5, 0.5, 201)
print(f"Hatano-Nelson: minimum at mu = {curve.minima[0]:.4f}  (1/2 ln(tR/tL) = {0.5 * math.log(1 / 3):.4f})")

ssh = build_nonreciprocal_ssh(1.3, 1, 0, 4 / 3)
curve = metric.scan_metric(ssh, -1.0, -0.1, 181)
print("SSH singularities:", [round(s.mu_c, 4) for s in curve.singularities])
print("SSH minima:       ", [round(m, 4) for m in curve.minima])
print(f"OBC oracle radius: ln r = {math.log(gbzoracle.gbz_radius_oracle(ssh)):.4f}")
