"""End-to-end benchmark runs for the fine, adaptive homogenization and multiscale methods."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blackoil as bo
from . import gmsfem as gm
from . import homogenization as hom
from .adaptivity import mark_transient, saturation_jump_indicator
from .config import SimulationConfig
from .errors import BlackOilError, DataError
from .grid import StructuredGrid, build_grid
from .mixed_fem import ActiveMesh, active_permeability, fine_mesh, lumped_flux_space
from .permeability import load_permeability, synthetic_permeability
from .report import ProductionReport, surface_rates, write_matrix_csv, write_region_mask, write_vtk_snapshot

log = logging.getLogger(__name__)


@dataclass
class Problem:
    """Grid, rock and well data shared by every method."""

    grid: StructuredGrid
    perm: np.ndarray           # (n_fine, 2) mD
    porosity: np.ndarray
    rock_index: np.ndarray
    rocks: list
    fluid: object
    wells: list

    @property
    def pinned(self) -> tuple:
        """Coarse cells holding a well."""
        return tuple(sorted({int(self.grid.coarse_of_fine[w.cell]) for w in self.wells}))

    @property
    def single_rock_blocks(self) -> bool:
        g = self.grid
        return all(np.unique(self.rock_index[g.fine_cells_of_coarse(c)]).size == 1
                   for c in range(g.n_coarse))


def build_problem(config: SimulationConfig, perm=None) -> Problem:
    g = config.grid
    grid = build_grid(g.nx_fine, g.ny_fine, g.dx_fine, g.dy_fine, g.refinement_ratio, g.thickness)
    if perm is None:
        src = config.permeability
        if src.source == "file":
            perm = load_permeability(src.path, grid.nx_fine, grid.ny_fine)
        elif src.source == "uniform":
            perm = np.full((grid.n_fine, 2), src.value)
        else:
            perm = synthetic_permeability(grid.nx_fine, grid.ny_fine, src.seed)
    perm = np.asarray(perm, dtype=float)
    if perm.ndim == 1:
        perm = np.column_stack([perm, perm])
    if perm.shape != (grid.n_fine, 2):
        raise DataError(f"permeability has shape {perm.shape}, expected ({grid.n_fine}, 2)")
    wells = [bo.WellSpec("rate-injector", 0, config.wells.injection_rate),
             bo.WellSpec("pressure-producer", grid.n_fine - 1, config.wells.producer_pressure)]
    return Problem(grid, perm, np.full(grid.n_fine, config.permeability.porosity),
                   np.zeros(grid.n_fine, dtype=np.int64), [config.rock], config.fluid, wells)


# -- steppers ---------------------------------------------------------------------------

class FineStepper:
    name = "fine"

    def __init__(self, problem: Problem, controls: bo.TimeControls):
        self.problem = problem
        self.controls = controls
        mesh = fine_mesh(problem.grid)
        wt = bo.apply_wells(problem.wells, problem.grid, mesh, problem.fluid)
        space = lumped_flux_space(mesh, problem.perm, wt.producer_faces, wt.producer_pressure)
        cells = bo.rock_cell_model(problem.rocks, problem.rock_index, problem.porosity)
        self.system = bo.BlackOilSystem(problem.fluid, space, cells, mesh.volume, wt, mesh)
        self.region = tuple(range(problem.grid.n_coarse))

    def initial_state(self, init) -> bo.ReservoirState:
        return bo.uniform_state(self.system.n_cells, self.system.n_dofs, init.pressure, init.s_w, init.s_g)

    def step(self, state, dt):
        return bo.advance(self.system, state, dt, self.controls)


class AdaptiveHomogenizationStepper:
    """Enhanced-velocity coupling of fine cells with homogenized coarse blocks.

    The finely resolved region is re-marked from the water-saturation jump
    indicator before every step.
    """

    name = "homog-amr"

    def __init__(self, problem: Problem, controls: bo.TimeControls, eps: float, buffer: int = 1,
                 tables=None, table_samples: int = hom.N_TABLE_SAMPLES, pin_wells: bool = True,
                 derefine: bool = True):
        self.problem = problem
        self.controls = controls
        self.eps = eps
        self.buffer = buffer
        self.derefine = derefine
        self.tables = tables if tables is not None else hom.build_effective_tables(
            problem.grid, problem.perm, problem.porosity, problem.rock_index, problem.rocks,
            table_samples)
        self.coarse_perm = hom.coarse_permeability(self.tables)
        self.pinned = problem.pinned if pin_wells else ()
        self._cache: dict = {}
        self.region = self._mark(None)
        self.system = self.system_for(self.region)

    def _mark(self, state) -> tuple:
        if self.eps <= 0:
            return tuple(range(self.problem.grid.n_coarse))
        if state is None:
            return tuple(self.pinned)
        ind = saturation_jump_indicator(state.s_w, self.system.mesh)
        cells = mark_transient(ind, self.system.mesh, self.eps, self.buffer, self.pinned).cells
        if not self.derefine:
            cells = np.union1d(cells, np.asarray(self.region, dtype=np.int64))
        return tuple(int(c) for c in cells)

    def system_for(self, region: tuple) -> bo.BlackOilSystem:
        if region not in self._cache:
            p = self.problem
            refined = np.zeros(p.grid.n_coarse, dtype=bool)
            refined[list(region)] = True
            mesh = ActiveMesh(p.grid, refined)
            wt = bo.apply_wells(p.wells, p.grid, mesh, p.fluid)
            perm = active_permeability(mesh, p.perm, self.coarse_perm)
            space = lumped_flux_space(mesh, perm, wt.producer_faces, wt.producer_pressure)
            cells = hom.coarse_cell_model(mesh, p.porosity, p.rock_index, p.rocks, self.tables)
            self._cache[region] = bo.BlackOilSystem(p.fluid, space, cells, mesh.volume, wt, mesh)
        return self._cache[region]

    def initial_state(self, init) -> bo.ReservoirState:
        return bo.uniform_state(self.system.n_cells, self.system.n_dofs, init.pressure, init.s_w, init.s_g)

    def step(self, state, dt):
        region = self._mark(state)
        if region != self.region:
            new_sys = self.system_for(region)
            state = bo.transfer_state(self.problem.fluid, state, self.system.mesh, new_sys.mesh,
                                      self.problem.porosity, new_sys.n_dofs)
            self.region, self.system = region, new_sys
        new, rep = bo.advance(self.system, state, dt, self.controls)
        self.last_step = (self.system, state, new, rep.dt)
        return new, rep


class MultiscaleStepAdapter:
    """Time stepping in the multiscale velocity space with residual-driven refinement."""

    name = "gmsfem"

    def __init__(self, problem: Problem, controls: bo.TimeControls, bases: dict, theta: float,
                 region_mode: str = "adaptive", tables=None, pin_wells: bool = True):
        self.problem = problem
        p = problem
        factory = lambda mesh: hom.coarse_cell_model(mesh, p.porosity, p.rock_index, p.rocks, tables)
        self.stepper = gm.MultiscaleStepper(p.grid, p.perm, p.porosity, factory, p.fluid, p.wells,
                                            bases, theta, p.pinned if pin_wells else (), controls,
                                            region_mode)
        self.controls = controls

    @property
    def region(self) -> tuple:
        return self.stepper.region

    @property
    def system(self) -> bo.BlackOilSystem:
        return self.stepper.system(self.stepper.region)

    def initial_state(self, init) -> bo.ReservoirState:
        return self.stepper.initial_state(init.pressure, init.s_w, init.s_g)

    def step(self, state, dt):
        new, rep = bo.advance(None, state, dt, self.controls, solve=self.stepper.solve)
        self.stepper.commit()
        return new, rep


def build_bases(problem: Problem, config: SimulationConfig) -> dict:
    m = config.method
    return gm.build_spectral_bases(
        problem.grid, problem.perm, m.snapshot_variant, m.basis_count or None,
        pad=None if m.pad < 0 else m.pad, n_samples=m.n_samples or None, seed=m.seed,
        guard=m.eigen_guard)


def make_stepper(problem: Problem, config: SimulationConfig, bases=None, tables=None):
    m = config.method
    if m.name == "fine":
        return FineStepper(problem, config.time)
    if m.name == "homog-amr":
        return AdaptiveHomogenizationStepper(problem, config.time, m.eps_adap, m.buffer, tables,
                                             m.table_samples, m.pin_wells, m.derefine)
    if tables is None and not problem.single_rock_blocks:
        g = problem.grid
        tables = hom.build_effective_tables(g, problem.perm, problem.porosity, problem.rock_index,
                                            problem.rocks, m.table_samples)
    return MultiscaleStepAdapter(problem, config.time, bases if bases is not None else
                                 build_bases(problem, config), m.theta, m.region_mode, tables,
                                 m.pin_wells)


# -- audits -------------------------------------------------------------------------------

def interface_audit(system: bo.BlackOilSystem, old: bo.ReservoirState, new: bo.ReservoirState,
                    dt: float) -> dict:
    """Independent accounting of fluxes across coarse/fine interfaces.

    Each interface fine face is traced back through the grid geometry to the
    fine and coarse cells on its two sides and must map to a single carrier
    shared by both. Per cell, the interface outflow implied by the mass
    balance (accumulation, sources and non-interface fluxes) is compared
    with the carrier values.
    """
    mesh = system.mesh
    grid = mesh.grid
    inter = np.flatnonzero(mesh.face_is_interface)
    shared = True
    for k in inter:
        faces = mesh.face_to_fine[k].indices
        for f in faces:
            a = mesh.fine_to_active[grid.face_left[f]]
            b = mesh.fine_to_active[grid.face_right[f]]
            if mesh.fine_face_to_face[f] != k or {a, b} != {mesh.face_left[k], mesh.face_right[k]}:
                shared = False
    comp = bo.carrier_component_fluxes(system, new)
    sp_ = system.space
    n = system.n_cells
    m_new = np.array(new.concentrations(system.fluid)) * system.pore_volume
    m_old = np.array(old.concentrations(system.fluid)) * system.pore_volume
    net_required = system.source() - (m_new - m_old) / dt        # required net outflow per cell
    is_inter = np.zeros(sp_.left.size, dtype=bool)
    is_inter[inter] = True
    other = np.zeros((3, n))
    carried = np.zeros((3, n))
    for target, mask in ((other, ~is_inter), (carried, is_inter)):
        k = np.flatnonzero(mask)
        for a in range(3):
            np.add.at(target[a], sp_.left[k], comp[a, k])
            inside = sp_.right[k] >= 0
            np.add.at(target[a], sp_.right[k][inside], -comp[a, k][inside])
    implied = net_required - other
    touched = np.unique(np.concatenate([mesh.face_left[inter], mesh.face_right[inter]])) \
        if inter.size else np.zeros(0, dtype=np.int64)
    scale = np.maximum(np.abs(comp).max(axis=1, initial=0.0),
                       (system.pore_volume.max() * np.array([system.fluid.rho_o_ref, system.fluid.rho_w_ref,
                                                             system.fluid.rho_o_ref]) / dt))
    mismatch = (np.abs(implied[:, touched] - carried[:, touched]).max(axis=1, initial=0.0) / scale
                if touched.size else np.zeros(3))
    return {"interface_carriers": int(inter.size), "shared_unknowns": bool(shared),
            "balance_mismatch": float(mismatch.max()),
            "fine_side_total": carried[:, touched[mesh.is_fine[touched]]].sum(axis=1) if touched.size
            else np.zeros(3),
            "coarse_side_total": carried[:, touched[~mesh.is_fine[touched]]].sum(axis=1) if touched.size
            else np.zeros(3)}


# -- driver ---------------------------------------------------------------------------------

@dataclass
class StepRecord:
    time: float
    dt: float
    newton_iterations: int
    cuts: int
    conservation: np.ndarray
    n_cells: int
    n_refined: int


@dataclass
class RunResult:
    method: str
    report: ProductionReport
    snapshots: dict = field(default_factory=dict)     # time -> fine fields
    regions: dict = field(default_factory=dict)       # time -> refined coarse cells
    steps: list = field(default_factory=list)
    audits: list = field(default_factory=list)

    @property
    def max_conservation_error(self) -> float:
        return max((float(s.conservation.max()) for s in self.steps), default=0.0)

    @property
    def newton_iterations(self) -> np.ndarray:
        return np.array([s.newton_iterations for s in self.steps])


def fine_fields(mesh: ActiveMesh, state: bo.ReservoirState) -> dict:
    return {"pressure": mesh.prolong(state.pressure), "s_w": mesh.prolong(state.s_w),
            "s_o": mesh.prolong(state.s_o), "s_g": mesh.prolong(state.s_g)}


def simulate(config: SimulationConfig, problem: Problem | None = None, stepper=None,
             audit: bool = False, output_dir=None) -> RunResult:
    """Run the configured method to ``end_time`` and collect the production report."""
    problem = problem or build_problem(config)
    stepper = stepper or make_stepper(problem, config)
    sched = config.schedule
    controls = config.time
    state = stepper.initial_state(config.initial)
    events = np.unique(np.concatenate([np.arange(sched.report_interval, sched.end_time + 1e-9,
                                                 sched.report_interval),
                                       [sched.end_time], np.asarray(sched.snapshot_times, float)]))
    events = events[events > 0]
    times, rates = [0.0], [np.zeros(3)]
    result = RunResult(stepper.name, None)
    snap_times = set(float(t) for t in sched.snapshot_times)
    if 0.0 in snap_times:
        result.snapshots[0.0] = fine_fields(stepper.system.mesh, state)
        result.regions[0.0] = stepper.region
    dt = controls.dt_init
    t = 0.0
    for target in events:
        while t < target - 1e-9:
            step_dt = min(dt, target - t)
            try:
                state, rep = stepper.step(state, step_dt)
            except BlackOilError as exc:
                raise type(exc)(f"{stepper.name} run failed at t={t:.6g} d "
                                f"(step {len(result.steps) + 1}): {exc}") from exc
            t = float(state.time)
            sys_ = stepper.system
            result.steps.append(StepRecord(t, rep.dt, rep.newton_iterations, rep.cuts,
                                           rep.conservation, sys_.n_cells, len(stepper.region)))
            if rep.cuts or step_dt >= dt * (1 - 1e-12):
                dt = bo.suggest_next_dt(rep.dt, rep, controls)
        if audit and hasattr(stepper, "last_step"):
            result.audits.append((t, interface_audit(*stepper.last_step)))
        q = surface_rates(problem.fluid, bo.producer_mass_rates(stepper.system, state))
        times.append(t)
        rates.append(q)
        if any(abs(t - s) < 1e-9 for s in snap_times):
            key = min(snap_times, key=lambda s: abs(s - t))
            result.snapshots[key] = fine_fields(stepper.system.mesh, state)
            result.regions[key] = stepper.region
        log.info("%s t=%.3f d steps=%d cells=%d", stepper.name, t, len(result.steps),
                 stepper.system.n_cells)
    result.report = ProductionReport(np.array(times), np.array(rates))
    if output_dir is not None:
        write_outputs(result, problem.grid, output_dir, config.output.write_snapshots)
    return result


def write_outputs(result: RunResult, grid: StructuredGrid, output_dir, snapshots: bool = True) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.report.write_csv(out / "production.csv")
    if not snapshots:
        return
    for t, fields_ in sorted(result.snapshots.items()):
        tag = f"{t:08.3f}".replace(".", "p")
        write_vtk_snapshot(out / f"fields_t{tag}.vtk", grid, fields_, f"{result.method} t={t}")
        for name, values in fields_.items():
            write_matrix_csv(out / f"{name}_t{tag}.csv", values, grid.nx_fine, grid.ny_fine)
        if result.method != "fine":
            write_region_mask(out / f"region_t{tag}.csv", grid, result.regions[t])
