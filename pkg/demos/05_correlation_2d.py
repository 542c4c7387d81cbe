"""2D correlation through nuclear spin diffusion, for an isolated pair.

Run: python demos/05_correlation_2d.py
"""

# %% Polarise at p, let the pair exchange for t_d, read back at q
import numpy as np

from nvimaging import analytic as an
from nvimaging import protocol as pr
from nvimaging.spinsys import SpinSystem

bi, bj, d = 350.0, 450.0, 150.0
s = SpinSystem.from_couplings([3000.0, 4500.0], [bi, bj], omega_L=2e6, d_matrix=[[0, d], [d, 0]])
base = pr.fig3_protocol("ideal")
axis = pr.SweepAxis("A", (3000.0, 4500.0), 404)

# %% Diagonal and cross peaks against the closed forms
for td in (0.0, 1 / (8 * d), 1 / (4 * d), 1 / (2 * d)):
    num = pr.make_2d_scan(s, base, axis, td, engine="numeric").values
    sii, sij = an.twod_peaks(an.TwoDPeakParams(bi, bj, d, base.contact_time, td))
    print(f"t_d = {td * 1e3:5.2f} ms  S_ii {num[0, 0]:.4f} ({sii:.4f})  S_ij {num[0, 1]:.4f} ({sij:.4f})")

# %% Full analytic map on a grid
grid = pr.SweepAxis("A", tuple(np.linspace(2500, 5000, 26)), 404)
spec = pr.make_2d_scan(s, base, grid, 1 / (4 * d))
i, j = np.unravel_index(np.argmax(spec.values - np.diag(np.diag(spec.values))), spec.values.shape)
print(f"strongest off-diagonal point at p = {grid.values[i]:.0f} Hz, q = {grid.values[j]:.0f} Hz")
