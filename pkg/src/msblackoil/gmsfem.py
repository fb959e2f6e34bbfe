"""Generalized multiscale velocity spaces for the pseudo-flux.

For every interior coarse edge, snapshot fields are built from local
Neumann problems on the two adjacent coarse cells, a spectral problem on
the snapshot space selects the dominant modes, and the retained fields are
extended by zero to form the global multiscale velocity space. Fine face
unknowns inside an adaptively chosen set of coarse cells, and well faces,
are added on top.

All fields are stored as total fluxes on fine faces, positive along the
coordinate direction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import blackoil as bo
from .adaptivity import residual_indicator, select_fine_region
from .errors import ConfigurationError, DataError, SolverError
from .grid import CoarseEdge, StructuredGrid, oversampling_box
from .linalg import generalized_symmetric_eig, sparse_solve
from .mixed_fem import DARCY_CONSTANT, ActiveMesh, FluxSpace, fine_mesh, lumped_flux_space

log = logging.getLogger(__name__)

DEFAULT_BASIS_COUNT = 3
EIGEN_GUARD = 0.01


def _perm2(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=float)
    if perm.ndim == 1:
        perm = np.column_stack([perm, perm])
    if np.any(perm <= 0):
        bad = int(np.flatnonzero(~(perm > 0).all(axis=1))[0])
        raise DataError(f"non-positive permeability in cell {bad}")
    return perm


def fine_face_resistance(grid: StructuredGrid, perm, darcy: float = DARCY_CONSTANT) -> np.ndarray:
    """Lumped inverse-permeability entry of every fine face (boundary faces one-sided)."""
    perm = _perm2(perm)
    L, R, d = grid.face_left, grid.face_right, grid.face_direction
    half = np.where(d == 0, 0.5 * grid.dx_fine, 0.5 * grid.dy_fine)
    out = np.zeros(L.size)
    for side in (L, R):
        ok = side >= 0
        out[ok] += half[ok] / perm[side[ok], d[ok]]
    return out / (darcy * grid.face_area)


# -- local problems ----------------------------------------------------------------

def _box_faces(grid: StructuredGrid, cells: np.ndarray):
    """(interior faces, boundary faces) of a set of fine cells."""
    inside = np.zeros(grid.n_fine, dtype=bool)
    inside[cells] = True
    L, R = grid.face_left, grid.face_right
    in_l = np.where(L >= 0, inside[np.maximum(L, 0)], False)
    in_r = np.where(R >= 0, inside[np.maximum(R, 0)], False)
    return np.flatnonzero(in_l & in_r), np.flatnonzero(in_l ^ in_r)


def local_neumann_solve(grid: StructuredGrid, resistance: np.ndarray, cells: np.ndarray,
                        boundary_faces: np.ndarray, boundary_outflow: np.ndarray,
                        source: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-point Neumann problem on a set of fine cells.

    ``boundary_outflow`` is the prescribed total outflow on each boundary face,
    ``source`` the total source per cell; they must balance. Returns the
    faces and their coordinate-signed fluxes (interior and boundary faces).
    """
    cells = np.asarray(cells, dtype=np.int64)
    local = np.full(grid.n_fine, -1, dtype=np.int64)
    local[cells] = np.arange(cells.size)
    interior, _ = _box_faces(grid, cells)
    imbalance = source.sum() - boundary_outflow.sum()
    scale = max(np.abs(source).sum(), np.abs(boundary_outflow).sum(), 1e-300)
    if abs(imbalance) > 1e-10 * scale:
        raise SolverError(f"incompatible Neumann data (imbalance {imbalance:.3e})")

    a = local[grid.face_left[interior]]
    b = local[grid.face_right[interior]]
    t = 1.0 / resistance[interior]
    n = cells.size
    L = sp.csr_matrix((np.concatenate([t, t, -t, -t]),
                       (np.concatenate([a, b, a, b]), np.concatenate([a, b, b, a]))), shape=(n, n))
    rhs = source.astype(float).copy()
    bl = grid.face_left[boundary_faces]
    owner = np.where((bl >= 0) & (local[np.maximum(bl, 0)] >= 0), bl, grid.face_right[boundary_faces])
    np.add.at(rhs, local[owner], -boundary_outflow)
    p = np.zeros(n)
    if n > 1:
        p[1:] = sparse_solve(L[1:, 1:], rhs[1:])
    flux_int = t * (p[a] - p[b])
    sign = np.where(grid.face_left[boundary_faces] == owner, 1.0, -1.0)
    faces = np.concatenate([interior, boundary_faces])
    values = np.concatenate([flux_int, sign * boundary_outflow])
    return faces, values


def _edge_side_solve(grid, resistance, edge: CoarseEdge, coarse_cell: int, trace_flux: np.ndarray):
    """Local problem on one coarse cell of the edge neighborhood with given edge fluxes."""
    cells = grid.box_cells(*grid.coarse_cell_box(coarse_cell))
    _, bfaces = _box_faces(grid, cells)
    on_edge = np.isin(bfaces, edge.fine_faces)
    outflow = np.zeros(bfaces.size)
    # the cell is on the left of the edge faces iff it owns face_left
    first = edge.fine_faces[0]
    left_side = grid.coarse_of_fine[grid.face_left[first]] == coarse_cell
    sign = 1.0 if left_side else -1.0
    pos = {int(f): k for k, f in enumerate(edge.fine_faces)}
    for k in np.flatnonzero(on_edge):
        outflow[k] = sign * trace_flux[pos[int(bfaces[k])]]
    vol = grid.fine_volume
    alpha = outflow.sum() / (cells.size * vol)
    source = np.full(cells.size, alpha * vol)
    return local_neumann_solve(grid, resistance, cells, bfaces, outflow, source), alpha


@dataclass
class SnapshotBasis:
    """Snapshot fields of one coarse edge on the faces of its neighborhood."""

    edge: CoarseEdge
    faces: np.ndarray          # fine faces of the neighborhood (interior to it)
    vectors: np.ndarray        # (n_faces, J) coordinate-signed total fluxes
    traces: np.ndarray         # (J_edge, J) normal velocities on the edge's fine faces
    divergence: dict = field(default_factory=dict)   # coarse cell -> (J,) alpha values

    @property
    def count(self) -> int:
        return int(self.vectors.shape[1])


def _neighborhood_faces(grid: StructuredGrid, edge: CoarseEdge) -> np.ndarray:
    cells = np.concatenate([grid.box_cells(*grid.coarse_cell_box(c)) for c in edge.cells])
    return _box_faces(grid, cells)[0]


def snapshots_from_traces(grid: StructuredGrid, perm, edge: CoarseEdge, traces: np.ndarray,
                          resistance: np.ndarray | None = None) -> SnapshotBasis:
    """Snapshot fields whose normal velocities on the edge are the columns of ``traces``."""
    if not edge.is_interior:
        raise ConfigurationError(f"edge {edge.id} is on the domain boundary")
    res = fine_face_resistance(grid, perm) if resistance is None else resistance
    faces = _neighborhood_faces(grid, edge)
    index = {int(f): k for k, f in enumerate(faces)}
    traces = np.atleast_2d(np.asarray(traces, dtype=float))
    vectors = np.zeros((faces.size, traces.shape[1]))
    div = {c: np.zeros(traces.shape[1]) for c in edge.cells}
    for j in range(traces.shape[1]):
        flux = traces[:, j] * edge.measures
        for c in edge.cells:
            try:
                (f, v), alpha = _edge_side_solve(grid, res, edge, c, flux)
            except SolverError as exc:
                raise SolverError(f"local solve failed on edge {edge.id}: {exc}") from exc
            div[c][j] = alpha
            keep = np.array([int(x) in index for x in f])
            rows = np.array([index[int(x)] for x in f[keep]])
            # edge faces get the same value from both sides; outer faces carry zero
            vectors[rows, j] = v[keep]
    return SnapshotBasis(edge, faces, vectors, traces, div)


def build_snapshots_exhaustive(grid: StructuredGrid, perm, edge: CoarseEdge,
                               resistance: np.ndarray | None = None) -> SnapshotBasis:
    """One snapshot per fine face of the edge (unit normal velocity there, zero elsewhere)."""
    return snapshots_from_traces(grid, perm, edge, np.eye(edge.fine_faces.size), resistance)


def build_snapshots_randomized(grid: StructuredGrid, perm, edge: CoarseEdge, pad: int,
                               n_samples: int, seed: int,
                               resistance: np.ndarray | None = None) -> SnapshotBasis:
    """Snapshots seeded by oversampled problems with Gaussian boundary fluxes.

    Edge traces of the oversampled solutions are orthonormalized (a span
    preserving step) before the neighborhood problems are solved.
    """
    J = edge.fine_faces.size
    if not 1 <= n_samples <= J:
        raise ConfigurationError(f"n_samples must lie in [1, {J}] for edge {edge.id}")
    if pad < 0:
        raise ConfigurationError("pad must be non-negative")
    res = fine_face_resistance(grid, perm) if resistance is None else resistance
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(edge.id)]))
    cells = grid.box_cells(*oversampling_box(grid, edge, pad))
    _, bfaces = _box_faces(grid, cells)
    area = grid.face_area[bfaces]
    vol = grid.fine_volume
    traces = np.empty((J, n_samples))
    for s in range(n_samples):
        r = rng.standard_normal(bfaces.size)
        outflow = r * area
        beta = outflow.sum() / (cells.size * vol)
        source = np.full(cells.size, beta * vol)
        faces, values = local_neumann_solve(grid, res, cells, bfaces, outflow, source)
        lookup = dict(zip(faces.tolist(), values.tolist()))
        traces[:, s] = [lookup[int(f)] / a for f, a in zip(edge.fine_faces, edge.measures)]
    q, _ = np.linalg.qr(traces)
    return snapshots_from_traces(grid, perm, edge, q, res)


# -- spectral decomposition ----------------------------------------------------------

@dataclass
class SpectralBasis:
    edge_id: int
    faces: np.ndarray
    eigenvalues: np.ndarray       # all, ascending
    coefficients: np.ndarray      # (J, J) snapshot-space eigenvectors, s-orthonormal
    snapshots: np.ndarray         # (n_faces, J)
    n_keep: int
    a_matrix: np.ndarray | None = None
    s_matrix: np.ndarray | None = None

    @property
    def fields(self) -> np.ndarray:
        return self.snapshots @ self.coefficients[:, :self.n_keep]

    def with_count(self, n_keep: int) -> "SpectralBasis":
        n_keep = int(min(max(n_keep, 1), self.eigenvalues.size))
        return SpectralBasis(self.edge_id, self.faces, self.eigenvalues, self.coefficients,
                             self.snapshots, n_keep, self.a_matrix, self.s_matrix)


def spectral_forms(grid: StructuredGrid, perm, snapshots: SnapshotBasis,
                   darcy: float = DARCY_CONSTANT, resistance: np.ndarray | None = None):
    """Edge form ``a`` and neighborhood form ``s`` in snapshot coordinates."""
    perm = _perm2(perm)
    res = fine_face_resistance(grid, perm, darcy) if resistance is None else resistance
    edge, faces, V = snapshots.edge, snapshots.faces, snapshots.vectors
    pos = np.searchsorted(faces, edge.fine_faces) if np.all(np.diff(faces) > 0) else \
        np.array([int(np.flatnonzero(faces == f)[0]) for f in edge.fine_faces])
    d = edge.orientation
    kl = perm[grid.face_left[edge.fine_faces], d]
    kr = perm[grid.face_right[edge.fine_faces], d]
    k_e = 2 * kl * kr / (kl + kr)
    w = 1.0 / (edge.measures * darcy * k_e)
    Ve = V[pos]
    A = Ve.T @ (w[:, None] * Ve)
    cells = np.concatenate([grid.box_cells(*grid.coarse_cell_box(c)) for c in edge.cells])
    B = grid.fine_divergence[cells][:, faces]
    BV = B @ V
    S = V.T @ (res[faces][:, None] * V) + BV.T @ BV / grid.fine_volume
    return 0.5 * (A + A.T), 0.5 * (S + S.T)


def choose_basis_count(eigenvalues: np.ndarray, requested: int = DEFAULT_BASIS_COUNT,
                       guard: float = EIGEN_GUARD) -> int:
    """Grow the count until the first discarded eigenvalue is not near zero."""
    J = eigenvalues.size
    L = min(max(requested, 1), J)
    top = eigenvalues.max(initial=0.0)
    while L < J and eigenvalues[L] < guard * top:
        L += 1
    return L


def spectral_decompose(grid: StructuredGrid, perm, snapshots: SnapshotBasis,
                       n_keep: int | None = DEFAULT_BASIS_COUNT, guard: float = EIGEN_GUARD,
                       resistance: np.ndarray | None = None) -> SpectralBasis:
    """Generalized eigenproblem ``a phi = lambda s phi`` on the snapshot space.

    ``n_keep=None`` keeps every mode.
    """
    if snapshots.count < 1:
        raise ConfigurationError("at least one snapshot is required")
    A, S = spectral_forms(grid, perm, snapshots, resistance=resistance)
    vals, vecs = generalized_symmetric_eig(A, S)
    L = vals.size if n_keep is None else choose_basis_count(vals, n_keep, guard)
    return SpectralBasis(snapshots.edge.id, snapshots.faces, vals, vecs, snapshots.vectors, L, A, S)


def spectral_diagnostics(basis: SpectralBasis) -> dict:
    """Ordering, s-orthonormality and eigen-residual measures of one edge problem."""
    A, S, X, lam = basis.a_matrix, basis.s_matrix, basis.coefficients, basis.eigenvalues
    gram = X.T @ S @ X
    res = A @ X - S @ X * lam[None, :]
    return {
        "ascending": bool(np.all(np.diff(lam) >= 0)),
        "min_eigenvalue": float(lam.min()),
        "orthonormality": float(np.abs(gram - np.eye(lam.size)).max()),
        "residual": float(np.abs(res).max() / max(np.abs(A).max(), 1e-300)),
    }


def build_spectral_bases(grid: StructuredGrid, perm, variant: str = "exhaustive",
                         n_keep: int | None = DEFAULT_BASIS_COUNT, pad: int | None = None,
                         n_samples: int | None = None, seed: int = 0,
                         guard: float = EIGEN_GUARD) -> dict[int, SpectralBasis]:
    """Offline stage: spectral bases of every interior coarse edge."""
    res = fine_face_resistance(grid, perm)
    pad = grid.refinement_ratio if pad is None else pad
    out = {}
    for edge in grid.interior_coarse_edges:
        if variant == "exhaustive":
            snaps = build_snapshots_exhaustive(grid, perm, edge, res)
        elif variant == "randomized":
            J = edge.fine_faces.size
            ns = min(J, (n_keep or J) + 4) if n_samples is None else n_samples
            snaps = build_snapshots_randomized(grid, perm, edge, pad, ns, seed, res)
        else:
            raise ConfigurationError(f"unknown snapshot variant {variant!r}")
        out[edge.id] = spectral_decompose(grid, perm, snaps, n_keep, guard, res)
    return out


# -- serialization --------------------------------------------------------------------

def write_bases(bases: dict, path) -> None:
    """Text container: per edge its faces, eigenvalues, retained count and fields."""
    fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))
    with open(path, "w") as fh:
        fh.write("# multiscale velocity bases v1\n")
        for eid in sorted(bases):
            b = bases[eid]
            fh.write(f"[edge {eid}]\n")
            fh.write("faces " + " ".join(str(int(f)) for f in b.faces) + "\n")
            fh.write(f"eigenvalues {fmt(b.eigenvalues)}\n")
            fh.write(f"retained {b.n_keep}\n")
            fh.write(f"snapshots {b.snapshots.shape[1]} {fmt(b.snapshots)}\n")
            fh.write(f"coefficients {fmt(b.coefficients)}\n")


def read_bases(path) -> dict[int, SpectralBasis]:
    out: dict[int, SpectralBasis] = {}
    cur: dict | None = None

    def flush():
        if cur is None:
            return
        faces = np.array(cur["faces"], dtype=np.int64)
        lam = np.array(cur["eigenvalues"])
        J = int(cur["snapshots"][0])
        snaps = np.array(cur["snapshots"][1:]).reshape(faces.size, J)
        coef = np.array(cur["coefficients"]).reshape(J, J)
        out[cur["id"]] = SpectralBasis(cur["id"], faces, lam, coef, snaps, int(cur["retained"][0]))

    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[edge"):
                flush()
                cur = {"id": int(line[len("[edge"):].rstrip("]"))}
                continue
            if cur is None:
                raise DataError(f"line {lineno}: record outside an edge section")
            key, *vals = line.split()
            try:
                cur[key] = [float(v) for v in vals]
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    flush()
    return out


# -- global space ---------------------------------------------------------------------

def assemble_multiscale_space(grid: StructuredGrid, perm, bases: dict, fine_region=(),
                              producer_faces=(), producer_pressure=(),
                              darcy: float = DARCY_CONSTANT) -> tuple[ActiveMesh, FluxSpace]:
    """Active mesh and flux space of ``V_ms`` plus fine faces inside ``fine_region``.

    ``fine_region`` lists coarse cells resolved by fine pressures and
    saturations; fine face unknowns are added on faces interior to them.
    """
    cells = np.asarray(getattr(fine_region, "cells", fine_region), dtype=np.int64)
    refined = np.zeros(grid.n_coarse, dtype=bool)
    refined[cells] = True
    mesh = ActiveMesh(grid, refined)
    producer_faces = np.asarray(producer_faces, dtype=np.int64)

    L, R = grid.face_left, grid.face_right
    cof = grid.coarse_of_fine
    interior = grid.interior_fine_faces
    same = cof[L[interior]] == cof[R[interior]]
    inner = interior[same & refined[cof[L[interior]]]]
    # entries on faces inside refined blocks are spanned by the fine columns;
    # dropping them changes the basis, not the space, and keeps fields local
    spanned = np.zeros(grid.n_fine_faces, dtype=bool)
    spanned[inner] = True

    rows, cols, vals, keys = [], [], [], []
    for eid in sorted(bases):
        b = bases[eid]
        F = b.fields
        for l in range(F.shape[1]):
            nz = np.flatnonzero((F[:, l] != 0) & ~spanned[b.faces])
            rows.append(b.faces[nz])
            cols.append(np.full(nz.size, len(keys)))
            vals.append(F[nz, l])
            keys.append(("ms", int(eid), l))
    for f in inner:
        rows.append(np.array([f]))
        cols.append(np.array([len(keys)]))
        vals.append(np.array([1.0]))
        keys.append(("fine", int(f)))
    for f in producer_faces:
        rows.append(np.array([f]))
        cols.append(np.array([len(keys)]))
        vals.append(np.array([1.0]))
        keys.append(("well", int(f)))
    m = len(keys)
    phi_f = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(grid.n_fine_faces, m))
    M = sp.diags(fine_face_resistance(grid, perm, darcy))
    mass = (phi_f.T @ M @ phi_f).tocsr()

    f2a = mesh.fine_to_active
    carriers = interior[f2a[L[interior]] != f2a[R[interior]]]
    if producer_faces.size:
        inside = np.where(L[producer_faces] >= 0, L[producer_faces], R[producer_faces])
        sign_p = np.where(L[producer_faces] >= 0, 1.0, -1.0)
    else:
        inside = sign_p = np.zeros(0)
    left = np.concatenate([f2a[L[carriers]], f2a[inside.astype(np.int64)]])
    right = np.concatenate([f2a[R[carriers]], -np.ones(producer_faces.size, np.int64)])
    direction = np.concatenate([grid.face_direction[carriers], grid.face_direction[producer_faces]])
    car_faces = np.concatenate([carriers, producer_faces])
    sign = np.concatenate([np.ones(carriers.size), sign_p])
    phi_c = (sp.diags(sign) @ phi_f[car_faces]).tocsr()
    space = FluxSpace(mesh.n_cells, left.astype(np.int64), right.astype(np.int64),
                      direction.astype(np.int64), phi_c, mass,
                      np.arange(carriers.size, car_faces.size),
                      np.broadcast_to(np.asarray(producer_pressure, dtype=float),
                                      (producer_faces.size,)).copy(),
                      keys, car_faces, phi_f)
    return mesh, space


def map_flux_coefficients(old_keys, new_keys, coefficients, old_fine_phi=None) -> np.ndarray:
    """Carry coefficients across spaces by basis key.

    New fine-face unknowns take the old field's value on their face when
    ``old_fine_phi`` is given; other unmatched entries start at zero.
    """
    pos = {k: i for i, k in enumerate(old_keys)}
    field_ = None if old_fine_phi is None else np.asarray((old_fine_phi @ coefficients.T).T)
    out = np.zeros((coefficients.shape[0], len(new_keys)))
    for j, k in enumerate(new_keys):
        i = pos.get(k)
        if i is not None:
            out[:, j] = coefficients[:, i]
        elif field_ is not None and k[0] == "fine":
            out[:, j] = field_[:, k[1]]
    return out


# -- residual on the fine grid ----------------------------------------------------------

def fine_scale_residual(fine_system: bo.BlackOilSystem, grid: StructuredGrid, mesh: ActiveMesh,
                        space: FluxSpace, state: bo.ReservoirState, old_fine: bo.ReservoirState,
                        dt: float) -> np.ndarray:
    """Cell residuals of a multiscale solution evaluated on every fine cell.

    Cell unknowns are injected into fine cells and the pseudo-fluxes are
    evaluated on all fine faces from the full basis fields, so imbalances
    hidden inside coarse cells become visible. Returns ``(3, n_fine)``.
    """
    fine_flux = np.asarray((space.fine_phi @ state.flux.T).T)
    fm = fine_system.mesh
    prod = fine_system.wells.producer_faces
    sign = np.where(grid.face_left[prod] >= 0, 1.0, -1.0)
    carrier_flux = np.concatenate([fine_flux[:, fm.face_to_fine.indices], fine_flux[:, prod] * sign],
                                  axis=1)
    # face_to_fine of a fine mesh is a permutation-free one-to-one map
    fine_state = bo.ReservoirState(state.time, mesh.prolong(state.pressure), mesh.prolong(state.s_w),
                                   mesh.prolong(state.s_g), carrier_flux,
                                   mesh.prolong(state.undersaturated), mesh.prolong(state.dissolved))
    cell_res, _ = bo.residual(fine_system, fine_state, old_fine, dt)
    return cell_res


def prolong_state(mesh: ActiveMesh, state: bo.ReservoirState) -> bo.ReservoirState:
    """Piecewise-constant injection of cell unknowns onto the fine cells (fluxes dropped)."""
    return bo.ReservoirState(state.time, mesh.prolong(state.pressure), mesh.prolong(state.s_w),
                             mesh.prolong(state.s_g), np.zeros((3, 0)),
                             mesh.prolong(state.undersaturated), mesh.prolong(state.dissolved))


# -- time stepping ------------------------------------------------------------------------

class MultiscaleStepper:
    """Coarse-then-adaptive implicit steps in the multiscale space.

    Each step first solves with fine resolution only in the ``pinned`` coarse
    cells, evaluates the fine-grid residual of that solution, selects
    ``Omega_h`` by the ``theta`` rule and re-solves warm-started from the
    coarse solution. ``region_mode='all'`` resolves every coarse cell finely
    and ``'none'`` keeps only the pinned cells.
    """

    def __init__(self, grid: StructuredGrid, perm, fine_porosity, cell_model_factory,
                 fluid, wells, bases: dict, theta: float = 0.04, pinned=(),
                 controls: bo.TimeControls = bo.TimeControls(), region_mode: str = "adaptive"):
        if region_mode not in ("adaptive", "all", "none"):
            raise ConfigurationError(f"unknown region mode {region_mode!r}")
        self.grid = grid
        self.perm = perm
        self.fine_porosity = np.asarray(fine_porosity, dtype=float)
        self.cell_model_factory = cell_model_factory
        self.fluid = fluid
        self.wells = list(wells)
        self.bases = bases
        self.theta = theta
        self.pinned = tuple(sorted(set(int(c) for c in pinned)))
        self.controls = controls
        self.region_mode = region_mode
        self._cache: dict = {}
        fmesh = fine_mesh(grid)
        wt = bo.apply_wells(self.wells, grid, fmesh, fluid)
        self.producer_faces = wt.producer_faces
        self.producer_pressure = wt.producer_pressure
        fspace = lumped_flux_space(fmesh, perm, wt.producer_faces, wt.producer_pressure)
        self.fine_system = bo.BlackOilSystem(fluid, fspace, cell_model_factory(fmesh), fmesh.volume,
                                             wt, fmesh)
        self.region = self.initial_region()
        self.pending_region = self.region
        self.last_coarse_iterations = 0

    def initial_region(self) -> tuple:
        if self.region_mode == "all":
            return tuple(range(self.grid.n_coarse))
        return self.pinned

    def system(self, region: tuple) -> bo.BlackOilSystem:
        if region not in self._cache:
            mesh, space = assemble_multiscale_space(self.grid, self.perm, self.bases, region,
                                                    self.producer_faces, self.producer_pressure)
            wt = bo.apply_wells(self.wells, self.grid, mesh, self.fluid)
            self._cache[region] = bo.BlackOilSystem(self.fluid, space, self.cell_model_factory(mesh),
                                                    mesh.volume, wt, mesh)
        return self._cache[region]

    def transfer(self, state: bo.ReservoirState, src: tuple, dst: tuple) -> bo.ReservoirState:
        a, b = self.system(src), self.system(dst)
        if src == dst:
            return state.copy()
        out = bo.transfer_state(self.fluid, state, a.mesh, b.mesh, self.fine_porosity, b.n_dofs)
        out.flux = map_flux_coefficients(a.space.keys, b.space.keys, state.flux, a.space.fine_phi)
        return out

    def initial_state(self, pressure, s_w, s_g) -> bo.ReservoirState:
        sys_ = self.system(self.region)
        return bo.uniform_state(sys_.n_cells, sys_.n_dofs, pressure, s_w, s_g)

    def solve(self, state: bo.ReservoirState, dt: float):
        """Step solve for :func:`blackoil.advance`."""
        if self.region_mode != "adaptive":
            sys_ = self.system(self.region)
            new, rep = bo.newton_solve(sys_, state, state, dt, self.controls)
            self.pending_region = self.region
            return new, rep, sys_, state
        coarse = self.pinned
        sys_c = self.system(coarse)
        old_c = self.transfer(state, self.region, coarse)
        sol_c, rep_c = bo.newton_solve(sys_c, old_c, old_c, dt, self.controls)
        self.last_coarse_iterations = rep_c.iterations
        if not rep_c.converged:
            return sol_c, rep_c, sys_c, old_c
        old_fine = prolong_state(self.system(self.region).mesh, state)
        res = fine_scale_residual(self.fine_system, self.grid, sys_c.mesh, sys_c.space, sol_c,
                                  old_fine, dt)
        indicator = residual_indicator(self.grid, res)
        chosen = select_fine_region(indicator, self.theta).cells
        region = tuple(sorted(set(chosen.tolist()) | set(self.pinned)))
        sys_h = self.system(region)
        old_h = self.transfer(state, self.region, region)
        guess = self.transfer(sol_c, coarse, region)
        sol, rep = bo.newton_solve(sys_h, guess, old_h, dt, self.controls)
        self.pending_region = region
        return sol, rep, sys_h, old_h

    def commit(self) -> None:
        self.region = self.pending_region
