"""Fully implicit black-oil time stepping on an arbitrary flux space.

Unknowns are cell pressures and water/gas saturations plus the
coefficients of three pseudo-fluxes: the oil-pressure flux (shared by oil
and by the dissolved-plus-free gas driven by oil pressure), the water flux
and the gas-oil capillary flux. Component fluxes are obtained afterwards by
multiplying pseudo-fluxes with upwinded density-weighted mobilities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from . import fluid_rock as fr
from .errors import ConfigurationError, SolverError, TimeStepUnderflow
from .grid import StructuredGrid
from .linalg import sparse_solve
from .mixed_fem import ActiveMesh, FluxSpace, upwind_cells

log = logging.getLogger(__name__)

STB_TO_CUFT = 5.615
STANDARD_PRESSURE = 14.7
COMPONENTS = ("oil", "water", "gas")


# -- well descriptions --------------------------------------------------------

@dataclass(frozen=True)
class WellSpec:
    """A corner well: ``pressure-producer`` (psi) or ``rate-injector`` (STB/day)."""

    kind: str
    cell: int
    value: float
    phase: str = "water"

    def __post_init__(self) -> None:
        if self.kind not in ("pressure-producer", "rate-injector"):
            raise ConfigurationError(f"unknown well kind {self.kind!r}")
        if self.kind == "pressure-producer" and not self.value > 0:
            raise ConfigurationError("producer pressure must be positive")
        if self.kind == "rate-injector":
            if self.value < 0:
                raise ConfigurationError("injection rate must be non-negative")
            if self.phase != "water":
                raise ConfigurationError("only water injection is supported")


@dataclass(frozen=True)
class TimeControls:
    dt_init: float = 0.5
    dt_max: float = 5.0
    dt_min: float = 1e-5
    tolerance: float = 1e-10
    flux_tolerance: float = 1e-9
    max_newton: int = 25
    cut_factor: float = 0.5
    growth_factor: float = 1.5
    max_saturation_change: float = 0.2
    max_pressure_change: float = 1000.0

    def __post_init__(self) -> None:
        if not 0 < self.dt_min <= self.dt_init <= self.dt_max:
            raise ConfigurationError("time controls need 0 < dt_min <= dt_init <= dt_max")
        if not self.tolerance > 0 or not self.flux_tolerance > 0:
            raise ConfigurationError("Newton tolerances must be positive")
        if not 0 < self.cut_factor < 1 or not self.growth_factor >= 1:
            raise ConfigurationError("cut factor must be in (0, 1) and growth factor >= 1")
        if self.max_newton < 1:
            raise ConfigurationError("max_newton must be at least 1")


@dataclass
class ReservoirState:
    """Primary unknowns on one active mesh.

    ``flux`` holds the coefficients of the oil, water and gas-capillary
    pseudo-fluxes, shape ``(3, n_dofs)``. Cells flagged ``undersaturated``
    have no free gas; their third unknown is the dissolved gas mass
    fraction ``dissolved`` instead of ``s_g``.
    """

    time: float
    pressure: np.ndarray
    s_w: np.ndarray
    s_g: np.ndarray
    flux: np.ndarray
    undersaturated: np.ndarray | None = None
    dissolved: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.pressure.size
        if self.undersaturated is None:
            self.undersaturated = np.zeros(n, dtype=bool)
        if self.dissolved is None:
            self.dissolved = np.zeros(n)

    @property
    def s_o(self) -> np.ndarray:
        return 1.0 - self.s_w - self.s_g

    @property
    def n_cells(self) -> int:
        return int(self.pressure.size)

    def copy(self, **changes) -> "ReservoirState":
        base = dict(time=self.time, pressure=self.pressure.copy(), s_w=self.s_w.copy(),
                    s_g=self.s_g.copy(), flux=self.flux.copy(),
                    undersaturated=self.undersaturated.copy(), dissolved=self.dissolved.copy())
        base.update(changes)
        return ReservoirState(**base)

    def dissolved_fraction(self, fluid: fr.FluidModel) -> np.ndarray:
        """Actual gas mass fraction of the oil phase."""
        return np.where(self.undersaturated, self.dissolved, fr.solution_gas(fluid, self.pressure))

    def concentrations(self, fluid: fr.FluidModel) -> fr.PhaseConcentrations:
        rg = self.dissolved_fraction(fluid)
        rho_o = fr.density(fluid, "oil", self.pressure)
        return fr.PhaseConcentrations(rho_o * self.s_o * (1 - rg),
                                      fr.density(fluid, "water", self.pressure) * self.s_w,
                                      rho_o * self.s_o * rg + fr.density(fluid, "gas", self.pressure) * self.s_g)

    def third_unknown(self) -> np.ndarray:
        return np.where(self.undersaturated, self.dissolved, self.s_g)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.pressure, self.s_w, self.third_unknown(), self.flux.ravel()])

    def unpacked(self, x) -> "ReservoirState":
        """State with the same phase flags and new unknown values ``x``."""
        x = np.asarray(x, dtype=float)
        n = self.n_cells
        x3 = x[2 * n:3 * n]
        u = self.undersaturated
        return ReservoirState(self.time, x[:n].copy(), x[n:2 * n].copy(), np.where(u, 0.0, x3),
                              x[3 * n:].reshape(3, -1).copy(), u.copy(), np.where(u, x3, 0.0))


def uniform_state(n_cells: int, n_dofs: int, pressure: float, s_w: float, s_g: float,
                  time: float = 0.0) -> ReservoirState:
    return ReservoirState(time, np.full(n_cells, float(pressure)), np.full(n_cells, float(s_w)),
                          np.full(n_cells, float(s_g)), np.zeros((3, n_dofs)))


# -- saturation functions per active cell -------------------------------------

class SaturationValues(NamedTuple):
    """Relative permeabilities per direction ``(3, k, 2)`` and capillary pressures.

    ``dkr`` is the derivative of each phase curve with respect to its own
    saturation. ``dpcgo`` is taken with respect to oil saturation.
    """

    kr: np.ndarray
    dkr: np.ndarray
    pcow: np.ndarray
    dpcow: np.ndarray
    pcgo: np.ndarray
    dpcgo: np.ndarray


class RockCurves:
    """Exact rock-type curves, isotropic in both directions."""

    def __init__(self, rock: fr.RockType):
        self.rock = rock

    def __call__(self, s_o, s_w, s_g) -> SaturationValues:
        kr, dkr = [], []
        for phase, s in zip(fr.PHASES, (s_o, s_w, s_g)):
            k, dk = fr.relative_permeability_and_derivative(self.rock, phase, s)
            kr.append(np.repeat(k[:, None], 2, axis=1))
            dkr.append(np.repeat(dk[:, None], 2, axis=1))
        pcow, dpcow = fr.capillary_pressure_and_derivative(self.rock, "cow", s_w)
        pcgo, dpcgo = fr.capillary_pressure_and_derivative(self.rock, "cgo", s_o)
        return SaturationValues(np.array(kr), np.array(dkr), pcow, dpcow, pcgo, dpcgo)


@dataclass
class CellModel:
    """Porosity and saturation-function evaluators of every active cell.

    ``groups`` is a list of ``(cells, evaluator)`` pairs partitioning the
    cells; each evaluator maps ``(s_o, s_w, s_g)`` of its cells to
    :class:`SaturationValues`.
    """

    porosity: np.ndarray
    groups: list

    def __post_init__(self) -> None:
        n = self.porosity.size
        seen = np.zeros(n, dtype=np.int64)
        for cells, _ in self.groups:
            np.add.at(seen, np.asarray(cells, dtype=np.int64), 1)
        if np.any(seen != 1):
            raise ConfigurationError("cell-model groups must partition the active cells")

    @property
    def n_cells(self) -> int:
        return int(self.porosity.size)

    def evaluate(self, s_o, s_w, s_g) -> SaturationValues:
        n = self.n_cells
        kr = np.empty((3, n, 2))
        dkr = np.empty((3, n, 2))
        pc = np.empty((4, n))
        for cells, evaluator in self.groups:
            v = evaluator(s_o[cells], s_w[cells], s_g[cells])
            kr[:, cells] = v.kr
            dkr[:, cells] = v.dkr
            pc[:, cells] = v.pcow, v.dpcow, v.pcgo, v.dpcgo
        return SaturationValues(kr, dkr, *pc)


def rock_cell_model(rocks, rock_index, porosity) -> CellModel:
    """Cell model where every cell follows the exact curves of its rock type."""
    rock_index = np.asarray(rock_index, dtype=np.int64)
    groups = [(np.flatnonzero(rock_index == k), RockCurves(rock)) for k, rock in enumerate(rocks)
              if np.any(rock_index == k)]
    return CellModel(np.asarray(porosity, dtype=float), groups)


# -- wells ----------------------------------------------------------------------

@dataclass(frozen=True)
class WellTerms:
    producer_faces: np.ndarray
    producer_pressure: np.ndarray
    injector_cells: np.ndarray        # active-cell ids
    injector_mass_rate: np.ndarray    # lbs/day of water


def well_boundary_faces(grid: StructuredGrid, well: WellSpec) -> np.ndarray:
    if not 0 <= well.cell < grid.n_fine:
        raise ConfigurationError(f"well cell {well.cell} outside the grid")
    faces = grid.boundary_faces_of_fine_cell(well.cell)
    if faces.size == 0:
        raise ConfigurationError(f"well cell {well.cell} is not on the domain boundary")
    return faces


def apply_wells(wells, grid: StructuredGrid, mesh: ActiveMesh, fluid: fr.FluidModel) -> WellTerms:
    """Translate well descriptions into boundary carriers and sources on ``mesh``.

    Producers become Dirichlet pressure on the outer faces of their cell;
    injectors become a water mass source of ``rate`` STB/day measured at
    stock-tank density.
    """
    p_faces, p_values, i_cells, i_rates = [], [], [], []
    for w in wells:
        faces = well_boundary_faces(grid, w)
        if w.kind == "pressure-producer":
            p_faces.append(faces)
            p_values.append(np.full(faces.size, w.value))
        else:
            i_cells.append(mesh.fine_to_active[w.cell])
            i_rates.append(w.value * STB_TO_CUFT * fluid.rho_w_ref)
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return WellTerms(cat(p_faces, np.int64), cat(p_values, float),
                     np.asarray(i_cells, dtype=np.int64), np.asarray(i_rates, dtype=float))


# -- discrete system --------------------------------------------------------------

@dataclass
class BlackOilSystem:
    """Everything needed to evaluate the discrete residual on one active mesh."""

    fluid: fr.FluidModel
    space: FluxSpace
    cells: CellModel
    volume: np.ndarray
    wells: WellTerms
    mesh: ActiveMesh | None = None

    def __post_init__(self) -> None:
        n = self.space.n_cells
        if self.cells.n_cells != n or self.volume.size != n:
            raise ConfigurationError("cell model, volumes and flux space disagree on the cell count")

    @property
    def n_cells(self) -> int:
        return self.space.n_cells

    @property
    def n_dofs(self) -> int:
        return self.space.n_dofs

    @property
    def pore_volume(self) -> np.ndarray:
        return self.cells.porosity * self.volume

    def source(self) -> np.ndarray:
        q = np.zeros((3, self.n_cells))
        np.add.at(q[1], self.wells.injector_cells, self.wells.injector_mass_rate)
        return q


class CellTerms(NamedTuple):
    n: np.ndarray        # (3, n) concentrations
    dn: np.ndarray       # (3, 3, n) d N_alpha / d (P, Sw, x3)
    lam: np.ndarray      # (4, n, 2) oil, water, gas1, gas2
    dlam: np.ndarray     # (4, 3, n, 2)
    sat: SaturationValues
    dso_dx3: np.ndarray  # -1 where x3 is S_g, 0 where it is the dissolved fraction


def cell_terms(system: BlackOilSystem, state: ReservoirState) -> CellTerms:
    """Accumulation and mobility terms with derivatives in ``(P, Sw, x3)``."""
    fluid = system.fluid
    p, s_w, s_g = state.pressure, state.s_w, state.s_g
    s_o = 1.0 - s_w - s_g
    u = state.undersaturated
    rho_o, drho_o = fr.density_and_derivative(fluid, "oil", p)
    rho_w, drho_w = fr.density_and_derivative(fluid, "water", p)
    rho_g, drho_g = fr.density_and_derivative(fluid, "gas", p)
    rg_sat, drg_sat = fr.solution_gas_and_derivative(fluid, p)
    rg = np.where(u, state.dissolved, rg_sat)
    drg_dp = np.where(u, 0.0, drg_sat)
    drg_dx = u.astype(float)
    dsg_dx = 1.0 - drg_dx
    dso_dx = -dsg_dx
    zero = np.zeros_like(p)

    n = np.array([rho_o * s_o * (1 - rg), rho_w * s_w, rho_o * s_o * rg + rho_g * s_g])
    dn = np.array([
        [(drho_o * (1 - rg) - rho_o * drg_dp) * s_o, -rho_o * (1 - rg),
         rho_o * (dso_dx * (1 - rg) - s_o * drg_dx)],
        [drho_w * s_w, rho_w, zero],
        [(drho_o * rg + rho_o * drg_dp) * s_o + drho_g * s_g, -rho_o * rg,
         rho_o * (dso_dx * rg + s_o * drg_dx) + rho_g * dsg_dx],
    ])

    sat = system.cells.evaluate(s_o, s_w, s_g)
    m_o, m_w, m_g = sat.kr[0] / fluid.mu_o, sat.kr[1] / fluid.mu_w, sat.kr[2] / fluid.mu_g
    dm_o, dm_w, dm_g = sat.dkr[0] / fluid.mu_o, sat.dkr[1] / fluid.mu_w, sat.dkr[2] / fluid.mu_g
    c = lambda v: v[:, None]
    lam_o = c(rho_o * (1 - rg)) * m_o
    lam_w = c(rho_w) * m_w
    lam_g2 = c(rho_g) * m_g
    lam_g1 = lam_g2 + c(rho_o * rg) * m_o
    z2 = np.zeros_like(m_o)
    dlam_o = [c(drho_o * (1 - rg) - rho_o * drg_dp) * m_o, -c(rho_o * (1 - rg)) * dm_o,
              c(rho_o) * (c(-drg_dx) * m_o + c((1 - rg) * dso_dx) * dm_o)]
    dlam_w = [c(drho_w) * m_w, c(rho_w) * dm_w, z2]
    dlam_g2 = [c(drho_g) * m_g, z2, c(rho_g * dsg_dx) * dm_g]
    dlam_g1 = [dlam_g2[0] + c(drho_o * rg + rho_o * drg_dp) * m_o, -c(rho_o * rg) * dm_o,
               dlam_g2[2] + c(rho_o) * (c(drg_dx) * m_o + c(rg * dso_dx) * dm_o)]
    return CellTerms(n, dn, np.array([lam_o, lam_w, lam_g1, lam_g2]),
                     np.array([dlam_o, dlam_w, dlam_g1, dlam_g2]), sat, dso_dx)


class FluxTerms(NamedTuple):
    pseudo: np.ndarray     # (3, n_carriers) oil, water, gas-capillary pseudo-fluxes
    up: np.ndarray         # (3, n_carriers) upwind cell per pseudo-flux
    component: np.ndarray  # (3, n_carriers) oil, water, gas mass fluxes


def flux_terms(system: BlackOilSystem, state: ReservoirState, terms: CellTerms) -> FluxTerms:
    sp_ = system.space
    f = (sp_.phi @ state.flux.T).T
    up = np.array([upwind_cells(sp_.left, sp_.right, fk) for fk in f])
    d = sp_.direction
    lam = terms.lam
    comp = np.array([
        lam[0][up[0], d] * f[0],
        lam[1][up[1], d] * f[1],
        lam[2][up[0], d] * f[0] + lam[3][up[2], d] * f[2],
    ])
    return FluxTerms(f, up, comp)


def boundary_values(system: BlackOilSystem, sat: SaturationValues) -> np.ndarray:
    """Outside values of oil, water and gas-capillary potentials on carriers."""
    sp_ = system.space
    k = sp_.producer_carriers
    xb = np.zeros((3, sp_.n_carriers))
    xb[0, k] = sp_.producer_pressure
    xb[1, k] = sp_.producer_pressure - sat.pcow[sp_.left[k]]
    xb[2, k] = sat.pcgo[sp_.left[k]]
    return xb


def residual(system: BlackOilSystem, state: ReservoirState, old: ReservoirState, dt: float,
             terms: CellTerms | None = None):
    """Backward-Euler residual: ``(cell (3, n) in lbs/day, flux (3, m) in psi-weighted units)``."""
    if state.n_cells != system.n_cells or old.n_cells != system.n_cells:
        raise ConfigurationError("states and system live on different meshes")
    if state.flux.shape != (3, system.n_dofs):
        raise ConfigurationError("flux coefficients do not match the flux space")
    terms = cell_terms(system, state) if terms is None else terms
    fluxes = flux_terms(system, state, terms)
    n_old = cell_terms(system, old).n if old is not state else terms.n
    sp_ = system.space
    cell_res = (system.pore_volume / dt) * (terms.n - n_old) + (sp_.incidence @ fluxes.component.T).T \
        - system.source()
    sat = terms.sat
    xb = boundary_values(system, sat)
    grad = sp_.gradient
    potentials = (state.pressure, state.pressure - sat.pcow, sat.pcgo)
    flux_res = np.array([sp_.mass @ state.flux[a] - sp_.phi.T @ (grad @ potentials[a] - xb[a])
                         for a in range(3)])
    return cell_res, flux_res


def jacobian(system: BlackOilSystem, state: ReservoirState, dt: float,
             terms: CellTerms | None = None) -> sp.csr_matrix:
    """Analytic Jacobian with unknown order ``[P, Sw, Sg, c_o, c_w, c_g2]``."""
    terms = cell_terms(system, state) if terms is None else terms
    fluxes = flux_terms(system, state, terms)
    sp_ = system.space
    n, m, nc = system.n_cells, system.n_dofs, sp_.n_carriers
    C, phi = sp_.incidence, sp_.phi
    d = sp_.direction
    rows = np.arange(nc)
    select = [sp.csr_matrix((np.ones(nc), (rows, u)), shape=(nc, n)) for u in fluxes.up]
    f = fluxes.pseudo
    acc = system.pore_volume / dt

    # (lambda index, pseudo-flux index) pairs composing each component flux
    parts = {0: [(0, 0)], 1: [(1, 1)], 2: [(2, 0), (3, 2)]}
    blocks = [[None] * 6 for _ in range(6)]
    for a in range(3):
        for v in range(3):
            mat = sp.diags(acc * terms.dn[a, v])
            for lam_i, f_i in parts[a]:
                dl = terms.dlam[lam_i, v][fluxes.up[f_i], d]
                mat = mat + C @ sp.diags(dl * f[f_i]) @ select[f_i]
            blocks[a][v] = mat
        for lam_i, f_i in parts[a]:
            lam_face = terms.lam[lam_i][fluxes.up[f_i], d]
            blk = C @ sp.diags(lam_face) @ phi
            blocks[a][3 + f_i] = blk if blocks[a][3 + f_i] is None else blocks[a][3 + f_i] + blk

    gt = sp_.phi_t_gradient
    gt_int = sp_.phi_t_gradient_interior
    sat = terms.sat
    blocks[3][0] = -gt
    blocks[4][0] = -gt
    blocks[4][1] = gt_int @ sp.diags(sat.dpcow)
    blocks[5][1] = gt_int @ sp.diags(sat.dpcgo)
    blocks[5][2] = gt_int @ sp.diags(-sat.dpcgo * terms.dso_dx3)
    for a in range(3):
        blocks[3 + a][3 + a] = sp_.mass
    shapes = [n, n, n, m, m, m]
    for i in range(6):
        for j in range(6):
            if blocks[i][j] is None and i == j:
                blocks[i][j] = sp.csr_matrix((shapes[i], shapes[j]))
    return sp.bmat(blocks, format="csr")


def residual_vector(system, state, old, dt) -> np.ndarray:
    cell_res, flux_res = residual(system, state, old, dt)
    return np.concatenate([cell_res.ravel(), flux_res.ravel()])


def finite_difference_jacobian(system: BlackOilSystem, state: ReservoirState, old: ReservoirState,
                               dt: float, rel_step: float = 1e-6) -> np.ndarray:
    """Dense central-difference Jacobian; a verification mode for small systems."""
    x0 = state.pack()
    n = system.n_cells
    scale = np.concatenate([np.full(n, 1000.0), np.full(2 * n, 1.0),
                            np.full(x0.size - 3 * n, 1.0)])
    h = rel_step * np.maximum(np.abs(x0), scale)
    cols = []
    for j in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        rp = residual_vector(system, state.unpacked(xp), old, dt)
        rm = residual_vector(system, state.unpacked(xm), old, dt)
        cols.append((rp - rm) / (2 * h[j]))
    return np.column_stack(cols)


# -- Newton ------------------------------------------------------------------------

@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    history: list = field(default_factory=list)


def _reference_density(fluid: fr.FluidModel) -> np.ndarray:
    return np.array([fluid.rho_o_ref, fluid.rho_w_ref, fluid.rho_o_ref])


def residual_norms(system: BlackOilSystem, cell_res, flux_res, state: ReservoirState, dt: float):
    """Dimensionless (cell, flux) residual measures used for convergence."""
    scale = dt / (system.pore_volume[None, :] * _reference_density(system.fluid)[:, None])
    cell = float(np.abs(cell_res * scale).max()) if cell_res.size else 0.0
    sp_ = system.space
    ref = max(float(np.abs(sp_.phi_t_gradient @ state.pressure).max()) if state.pressure.size else 0.0,
              float(np.abs(sp_.mass @ state.flux[0]).max()) if state.flux.size else 0.0, 1.0)
    flux = float(np.abs(flux_res).max() / ref) if flux_res.size else 0.0
    return cell, flux


def _solve_linear(system: BlackOilSystem, J: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    n3 = 3 * system.n_cells
    if not system.space.is_lumped:
        return sparse_solve(J, rhs)
    # eliminate the diagonal flux blocks
    a_inv = 1.0 / np.tile(system.space.mass.diagonal(), 3)
    Jss, Jsc = J[:n3, :n3], J[:n3, n3:]
    Jcs = J[n3:, :n3]
    schur = Jss - Jsc @ sp.diags(a_inv) @ Jcs
    r_s, r_c = rhs[:n3], rhs[n3:]
    ds = sparse_solve(schur, r_s - Jsc @ (a_inv * r_c))
    dc = a_inv * (r_c - Jcs @ ds)
    return np.concatenate([ds, dc])


def _damp_and_apply(state: ReservoirState, dx: np.ndarray, controls: TimeControls,
                    fluid: fr.FluidModel) -> ReservoirState:
    """Scale the Newton update, clip saturations and switch gas-phase status."""
    n = state.n_cells
    u = state.undersaturated
    dp, dsw, dx3 = dx[:n], dx[n:2 * n], dx[2 * n:3 * n]
    dsg = np.where(u, 0.0, dx3)
    ds_max = max(np.abs(dsw).max(initial=0), np.abs(dsg).max(initial=0),
                 np.abs(dsw + dsg).max(initial=0), np.abs(np.where(u, dx3, 0.0)).max(initial=0))
    factor = 1.0
    if ds_max > controls.max_saturation_change:
        factor = controls.max_saturation_change / ds_max
    dp_max = np.abs(dp).max(initial=0)
    if dp_max * factor > controls.max_pressure_change:
        factor = controls.max_pressure_change / dp_max
    new = state.unpacked(state.pack() + factor * dx)
    new.s_w = np.clip(new.s_w, 0.0, 1.0)

    # free gas exhausted: oil becomes undersaturated
    rg_sat = fr.solution_gas(fluid, new.pressure)
    vanish = ~new.undersaturated & (new.s_g < 0)
    new.undersaturated[vanish] = True
    new.dissolved[vanish] = rg_sat[vanish]
    # dissolved gas beyond saturation: free gas reappears
    appear = new.undersaturated & (new.dissolved > rg_sat)
    new.undersaturated[appear] = False
    new.dissolved[new.undersaturated] = np.clip(new.dissolved[new.undersaturated], 0.0, None)
    new.dissolved[~new.undersaturated] = 0.0
    new.s_g = np.where(new.undersaturated, 0.0, np.clip(new.s_g, 0.0, 1.0))

    total = new.s_w + new.s_g
    over = total > 1.0
    new.s_w[over] /= total[over]
    new.s_g[over] = 1.0 - new.s_w[over]
    return new


def newton_solve(system: BlackOilSystem, guess: ReservoirState, old: ReservoirState, dt: float,
                 controls: TimeControls = TimeControls(),
                 jacobian_mode: str = "analytic") -> tuple[ReservoirState, NewtonReport]:
    """Iterate Newton steps from ``guess`` until the residual meets the tolerances."""
    state = guess.copy(time=old.time + dt)
    report = NewtonReport(False, 0)
    for it in range(controls.max_newton + 1):
        try:
            terms = cell_terms(system, state)
            cell_res, flux_res = residual(system, state, old, dt, terms)
        except (fr.StateError, FloatingPointError) as exc:
            raise SolverError(f"invalid Newton iterate: {exc}") from exc
        norms = residual_norms(system, cell_res, flux_res, state, dt)
        report.history.append(norms)
        if not np.all(np.isfinite(norms)):
            raise SolverError("non-finite residual")
        if norms[0] <= controls.tolerance and norms[1] <= controls.flux_tolerance:
            report.converged = True
            report.iterations = it
            return state, report
        if it == controls.max_newton:
            break
        if jacobian_mode == "analytic":
            J = jacobian(system, state, dt, terms)
        elif jacobian_mode == "fd":
            J = sp.csr_matrix(finite_difference_jacobian(system, state, old, dt))
        else:
            raise ValueError(f"unknown jacobian mode {jacobian_mode!r}")
        rhs = -np.concatenate([cell_res.ravel(), flux_res.ravel()])
        dx = _solve_linear(system, J, rhs)
        state = _damp_and_apply(state, dx, controls, system.fluid)
    report.iterations = controls.max_newton
    return state, report


def newton_step(system: BlackOilSystem, guess: ReservoirState, old: ReservoirState, dt: float,
                controls: TimeControls = TimeControls()) -> tuple[ReservoirState, float]:
    """A single damped Newton update; returns the new iterate and the pre-update cell norm."""
    terms = cell_terms(system, guess)
    cell_res, flux_res = residual(system, guess, old, dt, terms)
    J = jacobian(system, guess, dt, terms)
    dx = _solve_linear(system, J, -np.concatenate([cell_res.ravel(), flux_res.ravel()]))
    new = _damp_and_apply(guess, dx, controls, system.fluid)
    new.time = old.time + dt
    return new, residual_norms(system, cell_res, flux_res, guess, dt)[0]


# -- accounting ------------------------------------------------------------------------

def component_mass(system: BlackOilSystem, state: ReservoirState) -> np.ndarray:
    """Mass in place per component (lbs)."""
    return np.array(state.concentrations(system.fluid)) @ system.pore_volume


def producer_mass_rates(system: BlackOilSystem, state: ReservoirState) -> np.ndarray:
    """Outflow through producer carriers per component (lbs/day)."""
    terms = cell_terms(system, state)
    comp = flux_terms(system, state, terms).component
    return comp[:, system.space.producer_carriers].sum(axis=1)


def carrier_component_fluxes(system: BlackOilSystem, state: ReservoirState) -> np.ndarray:
    return flux_terms(system, state, cell_terms(system, state)).component


def conservation_error(system: BlackOilSystem, old: ReservoirState, new: ReservoirState,
                       dt: float) -> np.ndarray:
    """Per-component ``|dM - dt (in - out)| / M`` for one accepted step."""
    m_old = component_mass(system, old)
    m_new = component_mass(system, new)
    inflow = system.source().sum(axis=1)
    outflow = producer_mass_rates(system, new)
    ref = np.maximum(np.maximum(np.abs(m_old), np.abs(m_new)), 1e-300)
    return np.abs(m_new - m_old - dt * (inflow - outflow)) / ref


# -- time stepping ------------------------------------------------------------------------

@dataclass
class StepReport:
    dt: float
    newton_iterations: int
    cuts: int
    conservation: np.ndarray


def advance(system: BlackOilSystem, state: ReservoirState, dt_target: float,
            controls: TimeControls = TimeControls(),
            solve: Callable | None = None) -> tuple[ReservoirState, StepReport]:
    """Advance by at most ``dt_target`` days, cutting the step on Newton failure.

    ``solve(state, dt)`` may replace the plain Newton solve (the multiscale
    strategies use it to change the discrete space within a step). It must
    return ``(new_state, NewtonReport, system_used, old_state_on_that_system)``
    so the conservation audit is done on the system that produced the step.
    """
    dt = dt_target
    cuts = 0
    while True:
        if dt < controls.dt_min * (1 - 1e-12):
            raise TimeStepUnderflow(
                f"time step fell below dt_min={controls.dt_min:g} days at t={state.time:g}")
        try:
            if solve is None:
                new, rep = newton_solve(system, state, state, dt, controls)
                used, old = system, state
            else:
                new, rep, used, old = solve(state, dt)
            if rep.converged:
                break
            reason = f"no convergence in {rep.iterations} iterations"
        except (SolverError, fr.StateError) as exc:
            reason = str(exc)
        log.debug("t=%.4g dt=%.4g cut: %s", state.time, dt, reason)
        dt *= controls.cut_factor
        cuts += 1
    err = conservation_error(used, old, new, dt)
    return new, StepReport(dt, rep.iterations, cuts, err)


def suggest_next_dt(dt: float, report: StepReport, controls: TimeControls) -> float:
    grow = controls.growth_factor if report.cuts == 0 and report.newton_iterations <= 8 else 1.0
    return min(dt * grow, controls.dt_max)


# -- state transfer between meshes ------------------------------------------------

def _constraint(fluid: fr.FluidModel, n_o, n_w, n_g, p):
    """Saturation-constraint residual allowing undersaturated oil, plus the split."""
    rho_o = fr.density(fluid, "oil", p)
    rho_g = fr.density(fluid, "gas", p)
    r_avail = np.where(n_o + n_g > 0, n_g / np.maximum(n_o + n_g, 1e-300), 0.0)
    r_sat = fr.solution_gas(fluid, p)
    r = np.minimum(r_sat, r_avail)
    s_o = n_o / (rho_o * (1.0 - r))
    s_g = np.maximum(n_g - n_o * r / (1.0 - r), 0.0) / rho_g
    s_w = n_w / fr.density(fluid, "water", p)
    return s_o + s_w + s_g - 1.0, s_w, s_g, r_avail < r_sat, r


def flash_state(fluid: fr.FluidModel, n, p_guess, tol: float = 1e-13, max_iter: int = 80):
    """Pressure and phase split holding the component masses ``n`` per unit pore volume.

    Returns ``(pressure, s_w, s_g, undersaturated, dissolved)``.
    """
    n_o, n_w, n_g = (np.asarray(v, dtype=float) for v in n)
    p = np.array(p_guess, dtype=float, copy=True)
    for _ in range(max_iter):
        f = _constraint(fluid, n_o, n_w, n_g, p)[0]
        if np.all(np.abs(f) < tol):
            break
        h = 1e-6 * np.maximum(np.abs(p), 1.0)
        df = (_constraint(fluid, n_o, n_w, n_g, p + h)[0] - f) / h
        step = np.where(df != 0, -f / np.where(df != 0, df, 1.0), 0.0)
        p = np.maximum(p + np.clip(step, -0.5 * p, 0.5 * p), 1e-3)
    else:
        raise fr.StateError("flash did not converge")
    _, s_w, s_g, under, r = _constraint(fluid, n_o, n_w, n_g, p)
    return p, s_w, s_g, under, np.where(under, r, 0.0)


def transfer_state(fluid: fr.FluidModel, state: ReservoirState, old_mesh: ActiveMesh,
                   new_mesh: ActiveMesh, fine_porosity, n_dofs: int = 0) -> ReservoirState:
    """Move a state to another active mesh over the same grid, conserving mass.

    Cells present on both meshes are copied, refined cells receive their
    parent's values, and newly coarsened cells get the pore-volume weighted
    mean concentration followed by a flash. Fluxes are reset to zero with
    ``n_dofs`` coefficients per pseudo-flux.
    """
    grid = old_mesh.grid
    phi = np.asarray(fine_porosity, dtype=float)
    n_new = new_mesh.n_cells
    src = old_mesh.fine_to_active
    out = ReservoirState(state.time, np.empty(n_new), np.empty(n_new), np.empty(n_new),
                         np.zeros((3, n_dofs)), np.zeros(n_new, dtype=bool), np.zeros(n_new))
    fields_ = ("pressure", "s_w", "s_g", "undersaturated", "dissolved")

    fine_new = np.flatnonzero(new_mesh.is_fine)
    donor = src[new_mesh.fine_id[fine_new]]
    for name in fields_:
        getattr(out, name)[fine_new] = getattr(state, name)[donor]

    coarse_new = np.flatnonzero(~new_mesh.is_fine)
    kept = old_mesh.coarse_to_active[new_mesh.coarse_id[coarse_new]]
    same = kept >= 0
    for name in fields_:
        getattr(out, name)[coarse_new[same]] = getattr(state, name)[kept[same]]

    merge = coarse_new[~same]
    if merge.size:
        n_old = np.array(state.concentrations(fluid))
        n_fine = n_old[:, src]
        w = phi * grid.fine_volume
        target = new_mesh.fine_to_active
        num = np.array([np.bincount(target, weights=w * n_fine[a], minlength=n_new) for a in range(3)])
        den = np.bincount(target, weights=w, minlength=n_new)
        n_merge = num[:, merge] / den[merge]
        p_guess = (np.bincount(target, weights=w * state.pressure[src], minlength=n_new) / den)[merge]
        p, s_w, s_g, under, r = flash_state(fluid, n_merge, p_guess)
        out.pressure[merge], out.s_w[merge], out.s_g[merge] = p, s_w, s_g
        out.undersaturated[merge], out.dissolved[merge] = under, r
    return out
