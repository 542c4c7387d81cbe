"""Dynamical decoupling and spin-lock transfer: closed forms against exact propagation.

Run: python demos/02_sensing_sequences.py
"""

# %% CPMG dips
# The NV sees a nuclear spin as a dip when the pulse spacing matches the
# nuclear precession. The closed form is compared with the explicit pulse train.
import numpy as np

from nvimaging import analytic as an
from nvimaging import qdyn
from nvimaging.spinsys import SpinSystem

wl, a, b = 5e5, 12e3, 9e3
s = SpinSystem.from_couplings([a], [b], [0.3], omega_L=wl)
taus = np.linspace(0.8, 1.2, 9) / (2 * (wl + a / 2))
for tau in taus:
    _, closed = an.cpmg_signal(an.CpmgParams(tau, 8, wl, [a], [b]))
    exact = qdyn.simulate_cpmg(s, tau, 8)
    print(f"tau = {tau * 1e9:7.1f} ns  closed {closed:.6f}  exact {exact:.6f}")
print("predicted first dip near", an.cpmg_dip_times(wl, a, 0)[0] * 1e9, "ns")

# %% Hartmann-Hahn transfer under a spin lock
# The NV drive Omega is matched to omega_L + A; the population oscillates at B.
s = SpinSystem.from_couplings([3000.0], [800.0], omega_L=2e6)
alg = qdyn.OperatorAlgebra(1)
om = 2e6 + 3000
evo = qdyn.Evolution(qdyn.build_hamiltonian(qdyn.spin_lock_term(s, om, 2e6), alg))
state = qdyn.initial_state(1, "up", frame=2e6)
for t in np.linspace(0, 1.25e-3, 6):
    num = qdyn.measure_nv(qdyn.apply_unitary(state, evo.unitary(t), t))
    print(f"t = {t * 1e3:5.2f} ms  signal {num:.4f}  closed form {an.hh_dip(om, 3000, 800, 2e6, t):.4f}")

# %% WAHUHA decoupling rescales what the NV sees
sc = an.decoupling_scales("wahuha")
eff = an.wahuha_effective(3000.0, 800.0)
print(f"\nWAHUHA: resonance at omega_L + {eff.resonance - 2e6:.1f} Hz, rate {eff.rate:.1f} Hz "
      f"(scales lock {sc.lock:.4f}, rate {sc.rate:.4f}, gradient {sc.gradient:.4f})")
