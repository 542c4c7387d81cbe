"""Hyperfine couplings of nuclear spins near a shallow NV center.

Run: python demos/01_couplings.py
"""

# %% A single 13C spin
# Positions are in nm in the NV frame (z along the NV axis, NV at the origin).
# Couplings come back in Hz.
import numpy as np

from nvimaging import ingest
from nvimaging.spinsys import NuclearSpin, NvConfig, SpinSystem, field_map, hyperfine_from_position, slab_grid

hf = hyperfine_from_position(NuclearSpin("13C", (0.3, 0.1, 2.0)))
print(f"A = {hf.a_par:.1f} Hz, B_perp = {hf.b_perp:.1f} Hz, phi = {hf.phi:.3f} rad")

# %% Couplings fall off as r^-3
for z in (1.8, 2.4, 3.2):
    h = hyperfine_from_position(NuclearSpin("13C", (0.3, 0.0, z)))
    print(f"z = {z} nm: A = {h.a_par:8.1f} Hz, B = {h.b_perp:7.1f} Hz")

# %% The bundled ARG/ILE site, placed 1.75 nm below the surface
# The field is chosen so the 13C Larmor frequency is 2 MHz.
site = ingest.load_cxcr4_site()
print(f"\n{site.n_spins} carbons, omega_L = {site.omega_L / 1e6:.3f} MHz")
for lab, a, b in zip(site.labels, site.a, site.b):
    print(f"  {lab:>12}  A = {a:7.1f} Hz  B = {b:6.1f} Hz")

# %% Homonuclear couplings between the carbons
d = site.d_matrix
iu = np.triu_indices(site.n_spins, 1)
print(f"\n|D| ranges {np.abs(d[iu]).min():.1f} to {np.abs(d[iu]).max():.1f} Hz")

# %% Shift map over a slab (plot-ready)
# A depends only on (r_z, r_perp), so every ring around the NV axis is degenerate.
nv = NvConfig.for_larmor(2e6, depth=1.75)
grid = slab_grid((-1.5, 1.5), (-1.5, 1.5), (2.0, 2.0), (7, 7, 1))
shift = field_map(nv, grid)
print("\nA on the z = 2 nm plane (Hz):")
print(np.round(shift.reshape(7, 7)).astype(int))

# %% Spin systems can also be built straight from couplings
s = SpinSystem.from_couplings([3000.0, 4500.0], [400.0, 300.0], omega_L=2e6)
print(s.labels, s.a, s.b)
