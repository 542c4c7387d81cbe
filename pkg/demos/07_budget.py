"""How long the measurements take.

Run: python demos/07_budget.py
"""

# %% The published operating point
from nvimaging import budget as bd

p = bd.BudgetParams(M=1000, b=15, T_g=6e-3, T_rho=2e-3, F=30)
print(f"contrast {bd.dip_contrast(p.b_perp, p.T_rho):.3f}, SNR {bd.snr(p):.2f}")
print(f"repetitions for SNR 3: {bd.repetitions_for_snr(3, p):.0f}")
print(f"per point {bd.time_shot(p):.2f} s, 1D {bd.time_1d(p) / 60:.2f} min, 2D {bd.time_2d(p) / 60:.1f} min")

# %% Covering a bandwidth W sets the number of bins
for w in (500, 1000, 2500):
    q = bd.BudgetParams(M=1000, T_g=6e-3, W=w)
    rep = bd.report(q)
    print(f"W = {w:5d} Hz -> b = {rep['params']['b']:3d}, T_2D = {rep['T_2D_min']:7.1f} min")
