"""Physical constants (SI) and nuclear gyromagnetic ratios.

Gyromagnetic ratios are linear (Hz/T). Values are CODATA 2018 / IUPAC
tabulations rounded to the digits below.
"""

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

MU0 = 1.25663706212e-6  # vacuum permeability, T m / A (CODATA 2018)
HBAR = 1.054571817e-34  # reduced Planck constant, J s (CODATA 2018, exact)
PLANCK = 2.0 * np.pi * HBAR

GAMMA_E = 28.02495e9  # NV electron, |g| mu_B / h in Hz/T

# Nuclear gyromagnetic ratios, Hz/T (IUPAC recommended values)
GAMMA_N = MappingProxyType({
    "1H": 42.5775e6,
    "2H": 6.5359e6,
    "13C": 10.7084e6,
    "15N": -4.3163e6,
    "19F": 40.0776e6,
    "31P": 17.2514e6,
})

# element symbol -> isotope assumed when reading coordinate files
DEFAULT_ISOTOPE = MappingProxyType({
    "H": "1H", "D": "2H", "C": "13C", "N": "15N", "F": "19F", "P": "31P",
})

NM = 1e-9
ANGSTROM = 1e-10


@dataclass(frozen=True)
class PhysicalConstants:
    """Constants consumed by the coupling model.

    ``gamma_n`` maps isotope tags (``"13C"``) to gyromagnetic ratios in Hz/T.
    """

    mu0: float = MU0
    hbar: float = HBAR
    gamma_e: float = GAMMA_E
    gamma_n: dict = field(default_factory=lambda: dict(GAMMA_N))

    def __post_init__(self):
        for name in ("mu0", "hbar", "gamma_e"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        missing = {"1H", "13C", "15N"} - set(self.gamma_n)
        if missing:
            raise ValueError(f"gamma table lacks {sorted(missing)}")
        if any(g == 0 for g in self.gamma_n.values()):
            raise ValueError("zero gyromagnetic ratio")

    def gamma(self, species: str) -> float:
        try:
            return self.gamma_n[species]
        except KeyError:
            raise KeyError(f"unknown nuclear species {species!r}") from None

    def electron_nuclear_prefactor(self, species: str) -> float:
        """(mu0/4pi) (hbar/2pi) gamma_e gamma_n in Hz m^3, gammas taken in rad/s/T."""
        return (self.mu0 / (4 * np.pi)) * (self.hbar / (2 * np.pi)) \
            * (2 * np.pi * self.gamma_e) * (2 * np.pi * self.gamma(species))

    def nuclear_nuclear_prefactor(self, species_i: str, species_j: str) -> float:
        """(mu0/4pi) (hbar/2pi) gamma_i gamma_j in Hz m^3."""
        return (self.mu0 / (4 * np.pi)) * (self.hbar / (2 * np.pi)) \
            * (2 * np.pi * self.gamma(species_i)) * (2 * np.pi * self.gamma(species_j))


DEFAULT_CONSTANTS = PhysicalConstants()
