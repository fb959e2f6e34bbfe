"""Local numerical homogenization of coarse blocks.

Each coarse block is treated as a periodic cell. Correctors are solved
with a two-point scheme on the block's fine cells; the effective tensor is
the volume average of the corrected fluxes. Multi-rock blocks additionally
need capillary-equilibrium matching of saturations between rock types and
tables of effective relative mobility and capillary pressure versus
effective saturation.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fluid_rock as fr
from .blackoil import CellModel, RockCurves, SaturationValues
from .errors import DataError
from .grid import StructuredGrid
from .linalg import sparse_solve

N_TABLE_SAMPLES = 11
COEFFICIENT_FLOOR = 1e-12
TABLE_PHASES = ("oil", "water", "gas")


# -- cell problems ---------------------------------------------------------------

@dataclass
class CellProblemSolution:
    """Zero-mean periodic correctors, one ``(ny, nx)`` field per unit direction."""

    correctors: np.ndarray
    coefficient: np.ndarray
    dx: float
    dy: float
    degenerate: bool = False


def _as_directional(coef) -> np.ndarray:
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 2:
        coef = np.stack([coef, coef], axis=-1)
    if coef.ndim != 3 or coef.shape[-1] != 2:
        raise ValueError("coefficient must have shape (ny, nx) or (ny, nx, 2)")
    return coef


def _face_coefficients(coef: np.ndarray):
    """Harmonic face values between each cell and its periodic +x / +y neighbour."""
    ax, ay = coef[..., 0], coef[..., 1]
    ax_r = np.roll(ax, -1, axis=1)
    ay_t = np.roll(ay, -1, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        fx = np.where(ax + ax_r > 0, 2 * ax * ax_r / (ax + ax_r), 0.0)
        fy = np.where(ay + ay_t > 0, 2 * ay * ay_t / (ay + ay_t), 0.0)
    return fx, fy


def solve_cell_problem(coefficient, dx: float, dy: float) -> CellProblemSolution:
    """Periodic correctors of ``div(a (e_d + grad chi_d)) = 0`` with zero mean.

    ``coefficient`` is the fine-scale ``K * lambda`` on the block, shape
    ``(ny, nx)`` or ``(ny, nx, 2)`` for diagonal tensors.
    """
    coef = _as_directional(coefficient)
    if np.any(coef < 0):
        raise DataError("cell-problem coefficient must be non-negative")
    ny, nx = coef.shape[:2]
    top = coef.max()
    if not top > 0:
        return CellProblemSolution(np.zeros((2, ny, nx)), coef, dx, dy, degenerate=True)
    coef = np.maximum(coef, COEFFICIENT_FLOOR * top)
    fx, fy = _face_coefficients(coef)

    n = nx * ny
    idx = np.arange(n).reshape(ny, nx)
    right = np.roll(idx, -1, axis=1)
    upper = np.roll(idx, -1, axis=0)
    tx = (fx * dy / dx).ravel()
    ty = (fy * dx / dy).ravel()
    rows, cols, vals = [], [], []
    for nb, t in ((right.ravel(), tx), (upper.ravel(), ty)):
        me = idx.ravel()
        mask = nb != me      # a single column/row is its own periodic neighbour
        me, nb2, t2 = me[mask], nb[mask], t[mask]
        rows += [me, nb2, me, nb2]
        cols += [me, nb2, nb2, me]
        vals += [t2, t2, -t2, -t2]
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    # pin the first cell, then shift to zero mean
    K = L[1:, 1:].tocsc()

    correctors = np.zeros((2, ny, nx))
    for d in range(2):
        # outward flux of a_f * e_d through each cell's faces
        if d == 0:
            face_flux = fx * dy
            div = face_flux - np.roll(face_flux, 1, axis=1)
        else:
            face_flux = fy * dx
            div = face_flux - np.roll(face_flux, 1, axis=0)
        rhs = div.ravel()
        if not np.any(rhs) or n == 1:
            continue
        chi = np.concatenate([[0.0], sparse_solve(K, rhs[1:])])
        correctors[d] = (chi - chi.mean()).reshape(ny, nx)
    return CellProblemSolution(correctors, coef, dx, dy)


def effective_tensor(solution: CellProblemSolution, symmetrize: bool = True) -> np.ndarray:
    """Volume-averaged corrected flux tensor, ``Lambda[d', d]``."""
    if solution.degenerate:
        return np.zeros((2, 2))
    fx, fy = _face_coefficients(solution.coefficient)
    out = np.empty((2, 2))
    for d in range(2):
        chi = solution.correctors[d]
        gx = (np.roll(chi, -1, axis=1) - chi) / solution.dx + (d == 0)
        gy = (np.roll(chi, -1, axis=0) - chi) / solution.dy + (d == 1)
        out[0, d] = np.mean(fx * gx)
        out[1, d] = np.mean(fy * gy)
    if symmetrize:
        out = 0.5 * (out + out.T)
    return out


def effective_coefficient(coefficient, dx: float, dy: float) -> np.ndarray:
    return effective_tensor(solve_cell_problem(coefficient, dx, dy))


def mean_bounds(coefficient) -> tuple[float, float]:
    """(harmonic, arithmetic) means of a scalar coefficient field."""
    a = np.asarray(coefficient, dtype=float).ravel()
    return float(a.size / np.sum(1.0 / a)), float(a.mean())


# -- porosity and saturation matching ------------------------------------------------

def effective_porosity(porosity, rock_index, n_rocks: int | None = None):
    """``(mean porosity, per-rock mean porosity)``; absent rock types map to NaN."""
    phi = np.asarray(porosity, dtype=float).ravel()
    rock_index = np.asarray(rock_index, dtype=np.int64).ravel()
    if phi.size == 0:
        raise ValueError("empty subdomain")
    n_rocks = int(rock_index.max()) + 1 if n_rocks is None else n_rocks
    per_rock = np.full(n_rocks, np.nan)
    for k in range(n_rocks):
        mask = rock_index == k
        if mask.any():
            per_rock[k] = phi[mask].mean()
    return float(phi.mean()), per_rock


@dataclass
class MatchResult:
    saturation: np.ndarray   # per rock type
    clamped: np.ndarray      # bool per rock type


def _bisect_monotone(func, target, lo, hi, tol=1e-10, max_iter=200):
    """Root of a non-increasing ``func(s) = target`` on ``[lo, hi]``."""
    f_lo, f_hi = func(lo) - target, func(hi) - target
    if f_lo < 0:
        return lo, True
    if f_hi > 0:
        return hi, True
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol:
            break
        if func(mid) - target > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def capillary_equilibrium_match(rocks, pair: str, reference: int, s_ref: float,
                                tol: float = 1e-10) -> MatchResult:
    """Per-rock wetting saturations sharing the capillary value of the reference rock.

    ``pair='cow'`` matches water saturation, ``pair='cgo'`` oil saturation.
    Targets outside a rock's attainable range are clamped to its endpoint.
    """
    target = float(fr.capillary_pressure(rocks[reference], pair, s_ref))
    out = np.empty(len(rocks))
    clamped = np.zeros(len(rocks), dtype=bool)
    for k, rock in enumerate(rocks):
        if k == reference:
            out[k] = s_ref
            continue
        sr = rock.s_wr if pair == "cow" else rock.s_or
        lo = sr + fr.CAPILLARY_CLAMP
        out[k], clamped[k] = _bisect_monotone(
            lambda s: float(fr.capillary_pressure(rock, pair, s)), target, lo, 1.0, tol)
    return MatchResult(out, clamped)


def effective_saturation(volume_fractions, rock_porosity, mean_porosity: float, saturations):
    """Pore-volume weighted saturation over rock types."""
    w = np.asarray(volume_fractions, dtype=float) * np.asarray(rock_porosity, dtype=float)
    s = np.asarray(saturations, dtype=float)
    present = np.asarray(volume_fractions) > 0
    return float(np.sum(w[present] * s[present]) / mean_porosity)


# -- global pressure -------------------------------------------------------------------

@dataclass
class GlobalPressureCurves:
    s_o: np.ndarray
    g_o: np.ndarray
    g_w: np.ndarray
    g_g: np.ndarray
    pcow: np.ndarray
    pcgo: np.ndarray


def global_pressure_curves(fluid: fr.FluidModel, rock: fr.RockType, n_points: int = 201,
                           s_g: float | None = None, g0: float = 0.0) -> GlobalPressureCurves:
    """Global-pressure functions along a path of fixed gas saturation.

    ``G_o`` is integrated by the composite trapezoid rule from residual oil;
    ``G_w = G_o - P_cow`` and ``G_g = G_o + P_cgo``.
    """
    s_g = rock.s_gr if s_g is None else s_g
    s_lo, s_hi = rock.s_or, 1.0 - s_g - rock.s_wr
    if not s_hi > s_lo:
        raise ValueError("degenerate mobile window for the global-pressure path")
    s_o = np.linspace(s_lo, s_hi, n_points)
    s_w = 1.0 - s_o - s_g
    mob = [fr.relative_permeability(rock, ph, s) / fluid.viscosity(ph)
           for ph, s in zip(fr.PHASES, (s_o, s_w, np.full_like(s_o, s_g)))]
    lam_t = mob[0] + mob[1] + mob[2]
    if np.any(lam_t <= 0):
        bad = s_o[np.argmax(lam_t <= 0)]
        raise ValueError(f"total mobility vanishes on the integration path at S_o={bad:.6g}")
    pcow, dpcow_dsw = fr.capillary_pressure_and_derivative(rock, "cow", s_w)
    pcgo, dpcgo = fr.capillary_pressure_and_derivative(rock, "cgo", s_o)
    # d/dS_o of P_cow along the path is -dP_cow/dS_w
    integrand = (mob[2] / lam_t) * dpcgo - (mob[1] / lam_t) * (-dpcow_dsw)
    g_o = g0 + np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(s_o))])
    return GlobalPressureCurves(s_o, g_o, g_o - pcow, g_o + pcgo, pcow, pcgo)


# -- effective tables ---------------------------------------------------------------------

@dataclass
class EffectivePropertyTable:
    """Upscaled properties of one coarse block."""

    block: int
    porosity: float
    rock_fractions: np.ndarray
    rock_porosity: np.ndarray
    permeability: np.ndarray                 # 2x2 effective absolute tensor
    s_eff: dict = field(default_factory=dict)       # phase -> (n,)
    tensors: dict = field(default_factory=dict)     # phase -> (n, 2, 2)
    pcow: np.ndarray | None = None           # vs s_eff['water']
    pcgo: np.ndarray | None = None           # vs s_eff['oil'] of the gas sweep
    s_o_gas_sweep: np.ndarray | None = None
    flags: list = field(default_factory=list)

    @property
    def single_rock(self) -> int:
        present = np.flatnonzero(self.rock_fractions > 0)
        return int(present[0]) if present.size == 1 else -1

    def relative_mobility(self, phase: str) -> np.ndarray:
        """Diagonal of the phase tensor divided by the absolute tensor, ``(n, 2)``."""
        t = self.tensors[phase]
        k = np.diag(self.permeability)
        return np.stack([t[:, 0, 0] / k[0], t[:, 1, 1] / k[1]], axis=1)


def _block_arrays(grid: StructuredGrid, block: int, *fields):
    i0, i1, j0, j1 = grid.coarse_cell_box(block)
    out = []
    for f in fields:
        arr = np.asarray(f)
        shaped = arr.reshape(grid.ny_fine, grid.nx_fine, *arr.shape[1:])
        out.append(shaped[j0:j1, i0:i1])
    return out


def _sweep(rocks, rock_block, perm_block, dx, dy, ref, pair, phase_pairs, fixed, n_samples,
           fractions, rock_phi, mean_phi, flags, block):
    """Sample one sweep: vary the wetting saturation of ``pair`` in the reference rock."""
    rock = rocks[ref]
    if pair == "cow":
        lo, hi = rock.s_wr, 1.0 - rock.s_or - rock.s_gr
    else:
        lo, hi = rock.s_or, 1.0 - rock.s_wr - rock.s_gr
    samples = np.linspace(lo, hi, n_samples)
    present = np.flatnonzero(fractions > 0)
    s_eff = {ph: np.empty(n_samples) for ph in fr.PHASES}
    tensors = {ph: np.empty((n_samples, 2, 2)) for ph, _ in phase_pairs}
    pc = np.empty(n_samples)
    for i, s_ref in enumerate(samples):
        match = capillary_equilibrium_match(rocks, pair, ref, s_ref)
        if match.clamped[present].any():
            flags.append(f"block {block}: capillary match clamped at {pair} sample {i}")
        sat = {}
        for k in range(len(rocks)):
            r = rocks[k]
            wet = match.saturation[k]
            if pair == "cow":
                sg = r.s_gr if fixed is None else fixed
                wet = min(wet, 1.0 - sg)
                sat[k] = {"water": wet, "gas": sg, "oil": 1.0 - wet - sg}
            else:
                sw = r.s_wr if fixed is None else fixed
                wet = min(wet, 1.0 - sw)
                sat[k] = {"oil": wet, "water": sw, "gas": 1.0 - wet - sw}
        for ph in fr.PHASES:
            s_eff[ph][i] = effective_saturation(fractions, rock_phi,
                                                mean_phi, [sat[k][ph] for k in range(len(rocks))])
        for ph, _ in phase_pairs:
            kr_cell = np.empty(rock_block.shape)
            for k in present:
                kr_cell[rock_block == k] = fr.relative_permeability(rocks[k], ph, sat[k][ph])
            tensors[ph][i] = effective_coefficient(perm_block * kr_cell[..., None], dx, dy)
        pc[i] = fr.capillary_pressure(rocks[ref], pair, s_ref)
    return s_eff, tensors, pc


def build_block_table(grid: StructuredGrid, block: int, perm, porosity, rock_index, rocks,
                      n_samples: int = N_TABLE_SAMPLES) -> EffectivePropertyTable:
    if n_samples < 2:
        raise ValueError("at least two saturation samples are required")
    perm = np.asarray(perm, dtype=float)
    if perm.ndim == 1:
        perm = np.column_stack([perm, perm])
    perm_b, phi_b, rock_b = _block_arrays(grid, block, perm, porosity, rock_index)
    n_rocks = len(rocks)
    mean_phi, rock_phi = effective_porosity(phi_b, rock_b, n_rocks)
    fractions = np.bincount(rock_b.ravel(), minlength=n_rocks) / rock_b.size
    dx, dy = grid.dx_fine, grid.dy_fine
    k_eff = effective_coefficient(perm_b, dx, dy)
    table = EffectivePropertyTable(block, mean_phi, fractions, np.nan_to_num(rock_phi), k_eff)
    ref = int(np.argmax(fractions))
    s_eff_w, t_w, pcow = _sweep(rocks, rock_b, perm_b, dx, dy, ref, "cow",
                                [("water", None), ("oil", None)], None, n_samples, fractions,
                                table.rock_porosity, mean_phi, table.flags, block)
    s_eff_g, t_g, pcgo = _sweep(rocks, rock_b, perm_b, dx, dy, ref, "cgo",
                                [("gas", None)], None, n_samples, fractions,
                                table.rock_porosity, mean_phi, table.flags, block)
    # oil saturation decreases along the water sweep; store increasing grids
    table.s_eff = {"water": s_eff_w["water"], "oil": s_eff_w["oil"][::-1],
                   "gas": s_eff_g["gas"][::-1]}
    table.tensors = {"water": t_w["water"], "oil": t_w["oil"][::-1], "gas": t_g["gas"][::-1]}
    table.pcow = pcow
    table.s_o_gas_sweep = s_eff_g["oil"]
    table.pcgo = pcgo
    for ph in TABLE_PHASES:
        if np.any(np.diff(table.s_eff[ph]) <= 0):
            table.flags.append(f"block {block}: non-increasing {ph} saturation grid")
    return table


def build_effective_tables(grid: StructuredGrid, perm, porosity, rock_index, rocks,
                           n_samples: int = N_TABLE_SAMPLES) -> list[EffectivePropertyTable]:
    """Upscale every coarse block (computed once, before the simulation)."""
    return [build_block_table(grid, b, perm, porosity, rock_index, rocks, n_samples)
            for b in range(grid.n_coarse)]


# -- table evaluation --------------------------------------------------------------------

def _interp(x, xp, fp):
    """Piecewise-linear interpolation with constant extension and its slope."""
    x = np.asarray(x, dtype=float)
    val = np.interp(x, xp, fp)
    k = np.clip(np.searchsorted(xp, x, side="right") - 1, 0, len(xp) - 2)
    slope = (fp[k + 1] - fp[k]) / (xp[k + 1] - xp[k])
    slope = np.where((x < xp[0]) | (x > xp[-1]), 0.0, slope)
    return val, slope


class TableCurves:
    """Saturation functions of a coarse cell interpolated from its table."""

    def __init__(self, table: EffectivePropertyTable):
        self.table = table
        self._rel = {ph: table.relative_mobility(ph) for ph in TABLE_PHASES}

    def __call__(self, s_o, s_w, s_g) -> SaturationValues:
        t = self.table
        kr, dkr = [], []
        for ph, s in zip(fr.PHASES, (s_o, s_w, s_g)):
            cols = [_interp(s, t.s_eff[ph], self._rel[ph][:, d]) for d in range(2)]
            kr.append(np.stack([c[0] for c in cols], axis=-1))
            dkr.append(np.stack([c[1] for c in cols], axis=-1))
        pcow, dpcow = _interp(s_w, t.s_eff["water"], t.pcow)
        order = np.argsort(t.s_o_gas_sweep)
        pcgo, dpcgo = _interp(s_o, t.s_o_gas_sweep[order], t.pcgo[order])
        return SaturationValues(np.array(kr), np.array(dkr), pcow, dpcow, pcgo, dpcgo)


def coarse_cell_model(mesh, fine_porosity, rock_index, rocks, tables=None,
                      mode: str = "auto") -> CellModel:
    """Cell model of an active mesh: exact curves on fine cells and single-rock blocks.

    Coarse porosity is the volume average of the fine porosity. With
    ``mode='auto'`` a coarse cell covering one rock type uses that rock's
    exact curves (its correctors do not depend on saturation, so this equals
    the homogenized law); multi-rock blocks interpolate their ``tables``.
    ``mode='table'`` forces table interpolation for every coarse cell.
    """
    if mode not in ("auto", "table"):
        raise ValueError(f"unknown coarse curve mode {mode!r}")
    grid = mesh.grid
    fine_porosity = np.asarray(fine_porosity, dtype=float)
    rock_index = np.asarray(rock_index, dtype=np.int64)
    porosity = np.empty(mesh.n_cells)
    fine = np.flatnonzero(mesh.is_fine)
    porosity[fine] = fine_porosity[mesh.fine_id[fine]]
    rock_of_cell = np.full(mesh.n_cells, -1)
    rock_of_cell[fine] = rock_index[mesh.fine_id[fine]]
    groups = []
    for c in np.flatnonzero(~mesh.is_fine):
        block = mesh.coarse_id[c]
        cells = grid.fine_cells_of_coarse(block)
        porosity[c] = fine_porosity[cells].mean()
        kinds = np.unique(rock_index[cells])
        if mode == "auto" and kinds.size == 1:
            rock_of_cell[c] = kinds[0]
        elif tables is None:
            raise ValueError(f"coarse block {block} needs effective tables")
        else:
            groups.append((np.array([c]), TableCurves(tables[block])))
    for k, rock in enumerate(rocks):
        cells = np.flatnonzero(rock_of_cell == k)
        if cells.size:
            groups.append((cells, RockCurves(rock)))
    return CellModel(porosity, groups)


def coarse_permeability(tables) -> np.ndarray:
    """Diagonal ``(kxx, kyy)`` of the effective tensors, one row per block."""
    return np.array([np.diag(t.permeability) for t in tables])


# -- serialization -------------------------------------------------------------------------

def write_tables(tables, path) -> None:
    """Plain-text table container: one ``[block]`` record per coarse block."""
    buf = io.StringIO()
    buf.write("# effective property tables v1\n")
    fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))
    for t in tables:
        buf.write(f"[block {t.block}]\n")
        buf.write(f"porosity {t.porosity!r}\n")
        buf.write(f"rock_fractions {fmt(t.rock_fractions)}\n")
        buf.write(f"rock_porosity {fmt(t.rock_porosity)}\n")
        buf.write(f"permeability {fmt(t.permeability)}\n")
        for ph in TABLE_PHASES:
            buf.write(f"s_eff_{ph} {fmt(t.s_eff[ph])}\n")
            buf.write(f"tensor_{ph} {fmt(t.tensors[ph])}\n")
        buf.write(f"pcow {fmt(t.pcow)}\n")
        buf.write(f"s_o_gas_sweep {fmt(t.s_o_gas_sweep)}\n")
        buf.write(f"pcgo {fmt(t.pcgo)}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_tables(path) -> list[EffectivePropertyTable]:
    tables = []
    cur: dict | None = None

    def flush():
        if cur is None:
            return
        vec = lambda k: np.array(cur[k], dtype=float)
        n = len(cur["s_eff_water"])
        t = EffectivePropertyTable(int(cur["block"]), float(cur["porosity"][0]),
                                   vec("rock_fractions"), vec("rock_porosity"),
                                   vec("permeability").reshape(2, 2))
        t.s_eff = {ph: vec(f"s_eff_{ph}") for ph in TABLE_PHASES}
        t.tensors = {ph: vec(f"tensor_{ph}").reshape(n, 2, 2) for ph in TABLE_PHASES}
        t.pcow, t.s_o_gas_sweep, t.pcgo = vec("pcow"), vec("s_o_gas_sweep"), vec("pcgo")
        tables.append(t)

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[block"):
                flush()
                cur = {"block": line[len("[block"):].rstrip("]").strip()}
                continue
            if cur is None:
                raise DataError(f"line {lineno}: record outside a block section")
            key, *vals = line.split()
            try:
                cur[key] = [float(v) for v in vals]
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    flush()
    return tables
