"""The gradient-interval grating filter.

Run: python demos/03_grating_filter.py
"""

# %% Transmission of F repetitions spaced by t_g
# Each repetition adds a phase 2 pi t_g (omega_L + A); the sum only survives
# when that phase is a whole number of turns.
import numpy as np

from nvimaging import analytic as an
from nvimaging import protocol as pr

F, wl = 30, 2e6
n_h, tg = pr.pick_harmonic(3000.0, wl, 6.1e-3, F)
print(f"harmonic {n_h}, t_g = {tg * 1e6:.3f} us, F t_g = {F * tg * 1e3:.3f} ms")
det = np.linspace(-600, 600, 13)
_, mag = an.filter_value(F, tg, 3000.0 + det, wl)
for d, m in zip(det, mag):
    print(f"detuning {d:6.0f} Hz  |G| = {m:.4f}  " + "#" * int(40 * m))

# %% Linewidth and bandwidth
lw, bw = an.linewidth_bandwidth(an.FilterParams(F, tg, 720e-6))
print(f"\nlinewidth 1/(F t_g) = {lw:.1f} Hz, bandwidth 1/t_g = {bw:.0f} Hz")

# %% Larger F sharpens the line at fixed t_g
for f in (6, 15, 30):
    x = np.linspace(-500, 500, 20001)
    _, m = an.filter_value(f, tg, 3000.0 + x, wl)
    above = x[m ** 2 >= 0.5]
    print(f"F = {f:2d}: FWHM of |G|^2 = {above.max() - above.min():6.1f} Hz")
