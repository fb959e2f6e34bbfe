"""Black-oil constitutive relations in field units.

Densities are evaluated at the oil (reference) pressure. Components are
indexed oil=0, water=1, gas=2 and mass fractions are used for the
phase compositions, so ``x_1o = 1 - R_g`` and ``x_3o = R_g``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, ConsistencyError, StateError

PHASES = ("oil", "water", "gas")
CAPILLARY_CLAMP = 1e-6
SATURATION_SUM_TOL = 1e-10


@dataclass(frozen=True)
class FluidModel:
    c_g: float = 4.7e-3       # psi^-1, rho_g = c_g * P
    c_o: float = 1.0e-4
    c_w: float = 1.0e-6
    rho_o_ref: float = 56.0   # lbs/cuft
    rho_w_ref: float = 66.5
    mu_g: float = 0.018       # cP
    mu_o: float = 2.0
    mu_w: float = 1.0
    beta: float = 5.0e-4      # psi^-1
    p_dew: float = 1000.0     # psi

    def __post_init__(self) -> None:
        bad = [f.name for f in fields(self) if f.name not in ("c_o", "c_w", "beta")
               and not getattr(self, f.name) > 0]
        bad += [n for n in ("c_o", "c_w", "beta") if getattr(self, n) < 0]
        if bad:
            raise ConfigurationError(f"fluid parameters must be positive: {', '.join(bad)}")

    def viscosity(self, phase: str) -> float:
        return {"oil": self.mu_o, "water": self.mu_w, "gas": self.mu_g}[phase]


@dataclass(frozen=True)
class RockType:
    krg_max: float = 0.6
    kro_max: float = 0.7
    krw_max: float = 0.8
    s_gr: float = 0.1
    s_or: float = 0.15
    s_wr: float = 0.2
    n_g: float = 1.5
    n_o: float = 1.2
    n_w: float = 2.0
    p_tg: float = 5.0         # psi, gas-oil entry pressure
    p_to: float = 10.0        # psi, oil-water entry pressure
    lambda_go: float = 0.5
    lambda_ow: float = 0.25
    porosity: float = 0.2

    def __post_init__(self) -> None:
        problems = []
        for name in ("s_gr", "s_or", "s_wr"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.s_gr + self.s_or + self.s_wr >= 1.0:
            problems.append("sum of residual saturations must be < 1")
        for name in ("krg_max", "kro_max", "krw_max"):
            if not 0.0 < getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in (0, 1]")
        for name in ("n_g", "n_o", "n_w", "lambda_go", "lambda_ow"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.p_tg < 0 or self.p_to < 0:
            problems.append("entry pressures must be non-negative")
        if not 0.0 < self.porosity < 1.0:
            problems.append("porosity must lie in (0, 1)")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def mobile_span(self) -> float:
        return 1.0 - self.s_gr - self.s_or - self.s_wr

    def residual(self, phase: str) -> float:
        return {"oil": self.s_or, "water": self.s_wr, "gas": self.s_gr}[phase]

    def mobile_window(self, phase: str) -> tuple[float, float]:
        lo = self.residual(phase)
        return lo, lo + self.mobile_span

    def _kr_params(self, phase: str) -> tuple[float, float, float]:
        return {
            "oil": (self.kro_max, self.s_or, self.n_o),
            "water": (self.krw_max, self.s_wr, self.n_w),
            "gas": (self.krg_max, self.s_gr, self.n_g),
        }[phase]


class PhaseConcentrations(NamedTuple):
    """Component masses per unit pore volume (lbs/cuft)."""

    n_o: np.ndarray
    n_w: np.ndarray
    n_g: np.ndarray


# -- densities and solution gas ---------------------------------------------

def density(fluid: FluidModel, phase: str, pressure):
    return density_and_derivative(fluid, phase, pressure)[0]


def density_and_derivative(fluid: FluidModel, phase: str, pressure):
    p = np.asarray(pressure, dtype=float)
    if phase == "gas":
        if np.any(p <= 0):
            raise StateError("gas density requires positive pressure")
        return fluid.c_g * p, np.full_like(p, fluid.c_g)
    if phase == "oil":
        rho = fluid.rho_o_ref * np.exp(fluid.c_o * p)
        return rho, fluid.c_o * rho
    if phase == "water":
        rho = fluid.rho_w_ref * np.exp(fluid.c_w * p)
        return rho, fluid.c_w * rho
    raise ValueError(f"unknown phase {phase!r}")


def solution_gas(fluid: FluidModel, p_o):
    return solution_gas_and_derivative(fluid, p_o)[0]


def solution_gas_and_derivative(fluid: FluidModel, p_o):
    p = np.asarray(p_o, dtype=float)
    above = p > fluid.p_dew
    e = np.exp(-fluid.beta * np.where(above, p - fluid.p_dew, 0.0))
    rg = np.where(above, 1.0 - e, 0.0)
    drg = np.where(above, fluid.beta * e, 0.0)
    return rg, drg


# -- saturation functions -----------------------------------------------------

def relative_permeability(rock: RockType, phase: str, saturation):
    return relative_permeability_and_derivative(rock, phase, saturation)[0]


def relative_permeability_and_derivative(rock: RockType, phase: str, saturation):
    """Brooks-Corey curve with the normalised argument clamped to [0, 1]."""
    kmax, sr, n = rock._kr_params(phase)
    span = rock.mobile_span
    s = (np.asarray(saturation, dtype=float) - sr) / span
    inside = (s > 0.0) & (s < 1.0)
    sc = np.clip(s, 0.0, 1.0)
    kr = kmax * sc ** n
    dkr = np.where(inside, kmax * n * np.where(inside, sc, 1.0) ** (n - 1.0) / span, 0.0)
    return kr, dkr


def capillary_pressure(rock: RockType, pair: str, saturation):
    return capillary_pressure_and_derivative(rock, pair, saturation)[0]


def capillary_pressure_and_derivative(rock: RockType, pair: str, saturation):
    """``pair='cow'`` takes S_w, ``pair='cgo'`` takes S_o.

    The wetting saturation is clamped to ``[S_r + 1e-6, 1]``; the derivative is
    zero outside that window.
    """
    if pair == "cow":
        pt, sr, lam = rock.p_to, rock.s_wr, rock.lambda_ow
    elif pair == "cgo":
        pt, sr, lam = rock.p_tg, rock.s_or, rock.lambda_go
    else:
        raise ValueError(f"unknown capillary pair {pair!r}")
    s = np.asarray(saturation, dtype=float)
    lo = sr + CAPILLARY_CLAMP
    sc = np.clip(s, lo, 1.0)
    pc = pt * ((1.0 - sr) / (sc - sr)) ** lam
    dpc = np.where((s >= lo) & (s <= 1.0), -lam * pc / (sc - sr), 0.0)
    return pc, dpc


# -- mobilities -----------------------------------------------------------------

class Mobilities(NamedTuple):
    oil: np.ndarray
    water: np.ndarray
    gas1: np.ndarray
    gas2: np.ndarray


def mobilities(fluid: FluidModel, rock: RockType, s_o, s_w, s_g, p_o) -> Mobilities:
    """Density-weighted mobilities of the expanded mixed form."""
    rho_o = density(fluid, "oil", p_o)
    rho_w = density(fluid, "water", p_o)
    rho_g = density(fluid, "gas", p_o)
    rg = solution_gas(fluid, p_o)
    mo = relative_permeability(rock, "oil", s_o) / fluid.mu_o
    mw = relative_permeability(rock, "water", s_w) / fluid.mu_w
    mg = relative_permeability(rock, "gas", s_g) / fluid.mu_g
    lam_o = rho_o * (1.0 - rg) * mo
    lam_g2 = rho_g * mg
    return Mobilities(lam_o, rho_w * mw, lam_g2 + rho_o * rg * mo, lam_g2)


# -- concentrations ---------------------------------------------------------------

def concentrations_from_saturations(fluid: FluidModel, s_o, s_w, s_g, p_o) -> PhaseConcentrations:
    s_o, s_w, s_g = (np.asarray(v, dtype=float) for v in (s_o, s_w, s_g))
    err = np.abs(s_o + s_w + s_g - 1.0)
    if np.any(err > SATURATION_SUM_TOL):
        raise ConsistencyError(f"saturations do not sum to one (max error {err.max():.3e})")
    rho_o = density(fluid, "oil", p_o)
    rg = solution_gas(fluid, p_o)
    return PhaseConcentrations(rho_o * s_o * (1.0 - rg),
                               density(fluid, "water", p_o) * s_w,
                               rho_o * s_o * rg + density(fluid, "gas", p_o) * s_g)


def saturations_from_concentrations(fluid: FluidModel, n: PhaseConcentrations, p_o,
                                    tol: float = 1e-10):
    n_o, n_w, n_g = (np.asarray(v, dtype=float) for v in n)
    if np.any(n_o < 0) or np.any(n_w < 0) or np.any(n_g < 0):
        raise StateError("component concentrations must be non-negative")
    rg = solution_gas(fluid, p_o)
    if np.any(1.0 - rg <= 0):
        raise StateError("solution gas ratio must be < 1")
    s_o = n_o / (density(fluid, "oil", p_o) * (1.0 - rg))
    s_w = n_w / density(fluid, "water", p_o)
    s_g = (n_g - n_o * rg / (1.0 - rg)) / density(fluid, "gas", p_o)
    if np.any(s_g < -tol):
        raise StateError(f"negative free-gas saturation {s_g.min():.3e}: "
                         "dissolved gas exceeds total gas")
    return s_o, s_w, s_g


def saturation_constraint_residual(fluid: FluidModel, n: PhaseConcentrations, p_o):
    """Left side of the saturation constraint minus one."""
    n_o, n_w, n_g = (np.asarray(v, dtype=float) for v in n)
    rg = solution_gas(fluid, p_o)
    return (n_o / (density(fluid, "oil", p_o) * (1.0 - rg))
            + n_w / density(fluid, "water", p_o)
            + (n_g - n_o * rg / (1.0 - rg)) / density(fluid, "gas", p_o) - 1.0)


def flash_pressure(fluid: FluidModel, n: PhaseConcentrations, p_guess,
                   tol: float = 1e-12, max_iter: int = 60):
    """Pressure at which given component masses exactly fill the pore volume.

    Solved cell-wise by a safeguarded Newton iteration on the saturation
    constraint, using a finite-difference slope.
    """
    p = np.array(p_guess, dtype=float, copy=True)
    for _ in range(max_iter):
        f = saturation_constraint_residual(fluid, n, p)
        if np.all(np.abs(f) < tol):
            return p
        h = 1e-3 * np.maximum(np.abs(p), 1.0) * 1e-3
        df = (saturation_constraint_residual(fluid, n, p + h) - f) / h
        step = np.where(df != 0, -f / np.where(df != 0, df, 1.0), 0.0)
        p = np.maximum(p + np.clip(step, -0.5 * p, 0.5 * p), 1e-3)
    raise StateError("flash pressure iteration did not converge")
