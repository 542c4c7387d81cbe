"""Acquisition-time and signal-to-noise estimates for filtered spectroscopy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

# per-cycle ancilla overhead: 500 ns polarisation + 20 ns pi pulse + 4 us swap
T_POLARIZE = 500e-9
T_PI = 20e-9
T_SWAP = 4e-6
DEFAULT_T_A = T_POLARIZE + T_PI + T_SWAP
DEFAULT_T_RO = 10e-6  # assumed single-shot readout window
T_RHO_KINDS = ("coherence", "contact")


@dataclass(frozen=True)
class BudgetParams:
    """Resource inputs; times in seconds.

    ``T_g`` is the total gradient time per shot (F t_g when left ``None``).
    ``T_rho`` is either the spin-lock coherence time or the contact time;
    ``T_rho_kind`` records which.
    """

    M: float = 1000
    C: float = 0.2
    T_rho: float = 2e-3
    T_g: Optional[float] = None
    F: int = 30
    t_g: float = 0.0
    t_a: float = DEFAULT_T_A
    t_ro: float = DEFAULT_T_RO
    b: int = 15
    t_d: float = 0.0
    W: Optional[float] = None
    b_perp: float = 250.0
    T_rho_kind: str = "coherence"

    def __post_init__(self):
        for name in ("M", "T_rho", "F", "t_g", "t_a", "t_ro", "t_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.T_g is not None and self.T_g < 0:
            raise ValueError("T_g must be non-negative")
        if not 0 <= self.C <= 1:
            raise ValueError("C must lie in [0, 1]")
        if self.b < 1:
            raise ValueError("b must be at least 1")
        if self.T_rho_kind not in T_RHO_KINDS:
            raise ValueError(f"T_rho_kind must be one of {T_RHO_KINDS}")

    @property
    def gradient_time(self) -> float:
        return self.F * self.t_g if self.T_g is None else self.T_g


def dip_contrast(b_perp: float, t_rho: float) -> float:
    """Dip depth ``sin^2(pi B T_rho)/2``. Past the first maximum the contact
    can be shortened, so the value is held at 1/2 there."""
    x = np.pi * b_perp * t_rho
    return 0.5 if x >= np.pi / 2 else float(0.5 * np.sin(x) ** 2)


def snr(p: BudgetParams) -> float:
    """Signal-to-noise proxy ``sqrt(M/2) C contrast``."""
    return float(np.sqrt(p.M / 2) * p.C * dip_contrast(p.b_perp, p.T_rho))


def repetitions_for_snr(target: float, p: BudgetParams) -> float:
    """M needed to reach ``target`` with the other parameters of ``p``."""
    per = p.C * dip_contrast(p.b_perp, p.T_rho)
    if per == 0:
        return float("inf")
    return float(2 * (target / per) ** 2)


def time_shot(p: BudgetParams) -> float:
    """Time per spin, ``M (T_g + T_rho + F t_a + t_ro)``."""
    return float(p.M * (p.gradient_time + p.T_rho + p.F * p.t_a + p.t_ro))


def time_1d(p: BudgetParams) -> float:
    return float(p.b * time_shot(p))


def time_2d(p: BudgetParams) -> float:
    """``b T_1D + b t_d``, identical to ``b^2 T_s + b t_d``."""
    return float(p.b * time_1d(p) + p.b * p.t_d)


def bins_for_bandwidth(W: float, p: BudgetParams) -> int:
    """Frequency bins of width 1/T_g needed to cover ``W`` Hz."""
    tg = p.gradient_time
    if tg <= 0:
        return 1
    return max(1, int(np.ceil(W * tg - 1e-9)))


def report(p: BudgetParams) -> dict:
    if p.W is not None:
        p = replace(p, b=bins_for_bandwidth(p.W, p))
    return {
        "params": asdict(p),
        "T_rho_used": {"value_s": p.T_rho, "kind": p.T_rho_kind},
        "T_g_s": p.gradient_time,
        "contrast": dip_contrast(p.b_perp, p.T_rho),
        "snr": snr(p),
        "M_for_snr3": repetitions_for_snr(3.0, p),
        "T_s_s": time_shot(p),
        "T_1D_s": time_1d(p),
        "T_2D_s": time_2d(p),
        "T_1D_min": time_1d(p) / 60,
        "T_2D_min": time_2d(p) / 60,
    }


def report_json(p: BudgetParams) -> str:
    return json.dumps(report(p), indent=1, sort_keys=True)
