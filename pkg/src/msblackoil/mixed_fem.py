"""Lowest-order mixed discretization on a two-level (coarse/fine) mesh.

Velocity unknowns are total normal fluxes (velocity times face area) on
*carriers*: a carrier is a coarse face between two coarse active cells, or a
single fine face whenever at least one neighbour is a fine active cell. The
latter rule is the enhanced-velocity coupling: interface faces between a
coarse and a fine region carry fine-resolution fluxes, and the coarse cell's
divergence row sums all of them.

The RT0 mass matrix is lumped by vertex quadrature, which makes it diagonal
on rectangles; with it the expanded mixed method is equivalent to a
two-point flux scheme with harmonic transmissibilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DataError
from .grid import StructuredGrid, X_NORMAL

# mD * psi / cP / ft -> bbl/day/ft^2 is 1.127e-3; times 5.615 cuft/bbl.
DARCY_CONSTANT = 1.127e-3 * 5.615


class ActiveMesh:
    """Cells and interior carriers of a mixed coarse/fine mesh."""

    def __init__(self, grid: StructuredGrid, refined):
        refined = np.asarray(refined, dtype=bool)
        if refined.shape != (grid.n_coarse,):
            raise ConfigurationError("refined mask must have one entry per coarse cell")
        self.grid = grid
        self.refined = refined
        r = grid.refinement_ratio
        nxf = grid.nx_fine

        fine_active = refined[grid.coarse_of_fine]
        fine_ids = np.flatnonzero(fine_active)
        coarse_ids = np.flatnonzero(~refined)
        fi, fj = grid.fine_ij(fine_ids)
        ci, cj = grid.coarse_ij(coarse_ids)
        key = np.concatenate([fj * nxf + fi, (cj * r) * nxf + ci * r])
        order = np.argsort(key, kind="stable")
        is_fine = np.concatenate([np.ones(fine_ids.size, bool), np.zeros(coarse_ids.size, bool)])[order]
        fine_id = np.concatenate([fine_ids, -np.ones(coarse_ids.size, np.int64)])[order]
        coarse_id = np.concatenate([grid.coarse_of_fine[fine_ids], coarse_ids])[order]

        self.n_cells = int(order.size)
        self.is_fine = is_fine
        self.fine_id = fine_id.astype(np.int64)
        self.coarse_id = coarse_id.astype(np.int64)
        self.size = np.where(is_fine[:, None], [grid.dx_fine, grid.dy_fine],
                             [grid.dx_coarse, grid.dy_coarse])
        self.volume = self.size[:, 0] * self.size[:, 1] * grid.thickness

        f2a = np.empty(grid.n_fine, dtype=np.int64)
        f2a[fine_id[is_fine]] = np.flatnonzero(is_fine)
        coarse_active = np.full(grid.n_coarse, -1, dtype=np.int64)
        coarse_active[coarse_id[~is_fine]] = np.flatnonzero(~is_fine)
        coarse_cells_fine = ~fine_active
        f2a[coarse_cells_fine] = coarse_active[grid.coarse_of_fine[coarse_cells_fine]]
        self.fine_to_active = f2a
        self.coarse_to_active = coarse_active

        self._build_faces()

    def _build_faces(self) -> None:
        g = self.grid
        faces = g.interior_fine_faces
        aL = self.fine_to_active[g.face_left[faces]]
        aR = self.fine_to_active[g.face_right[faces]]
        keep = aL != aR
        faces, aL, aR = faces[keep], aL[keep], aR[keep]
        grouped = ~self.is_fine[aL] & ~self.is_fine[aR]

        # each single carrier owns one fine face; grouped ones own a coarse face
        single = np.flatnonzero(~grouped)
        pair_key = aL[grouped] * self.n_cells + aR[grouped]
        uniq, inverse = np.unique(pair_key, return_inverse=True)
        gfaces = faces[grouped]
        first = np.full(uniq.size, np.iinfo(np.int64).max)
        np.minimum.at(first, inverse, gfaces)

        car_first = np.concatenate([faces[single], first])
        order = np.argsort(car_first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        n_car = order.size
        carrier_of_face = np.empty(faces.size, dtype=np.int64)
        carrier_of_face[single] = rank[np.arange(single.size)]
        carrier_of_face[np.flatnonzero(grouped)] = rank[single.size + inverse]

        left = np.empty(n_car, np.int64)
        right = np.empty(n_car, np.int64)
        left[carrier_of_face] = aL
        right[carrier_of_face] = aR
        direction = np.empty(n_car, np.int64)
        direction[carrier_of_face] = g.face_direction[faces]
        area = np.bincount(carrier_of_face, weights=g.face_area[faces], minlength=n_car)

        self.n_faces = int(n_car)
        self.face_left = left
        self.face_right = right
        self.face_direction = direction
        self.face_area = area
        self.face_is_interface = self.is_fine[left] != self.is_fine[right]
        self.face_to_fine = sp.csr_matrix(
            (np.ones(faces.size), (carrier_of_face, faces)), shape=(n_car, g.n_fine_faces))
        f2c = np.full(g.n_fine_faces, -1, dtype=np.int64)
        f2c[faces] = carrier_of_face
        self.fine_face_to_face = f2c

    # ------------------------------------------------------------------
    @property
    def n_coarse_cells(self) -> int:
        return int((~self.is_fine).sum())

    def half_length(self, cells, direction):
        return 0.5 * self.size[cells, direction]

    def prolong(self, values):
        """Piecewise-constant injection of active-cell values onto fine cells."""
        return np.asarray(values)[..., self.fine_to_active]

    def restrict_volume_weighted(self, fine_values, weights=None):
        """Weighted average of fine-cell values over each active cell."""
        fine_values = np.asarray(fine_values, dtype=float)
        w = np.ones(self.grid.n_fine) if weights is None else np.asarray(weights, dtype=float)
        num = np.bincount(self.fine_to_active, weights=w * fine_values, minlength=self.n_cells)
        den = np.bincount(self.fine_to_active, weights=w, minlength=self.n_cells)
        return num / den

    def refined_cells(self) -> np.ndarray:
        return np.flatnonzero(self.refined)

    def neighbors(self) -> list[np.ndarray]:
        """Edge-adjacent active cells of every active cell."""
        pairs = np.concatenate([np.column_stack([self.face_left, self.face_right]),
                                np.column_stack([self.face_right, self.face_left])])
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = np.unique(pairs[order], axis=0)
        counts = np.bincount(pairs[:, 0], minlength=self.n_cells)
        return np.split(pairs[:, 1], np.cumsum(counts)[:-1])

    def boundary_carrier_geometry(self, fine_faces):
        """(cell, direction, area, half length) of carriers on fine boundary faces."""
        g = self.grid
        fine_faces = np.asarray(fine_faces, dtype=np.int64)
        inside = np.where(g.face_left[fine_faces] >= 0, g.face_left[fine_faces],
                          g.face_right[fine_faces])
        if np.any((g.face_left[fine_faces] >= 0) & (g.face_right[fine_faces] >= 0)):
            raise ConfigurationError("well faces must lie on the domain boundary")
        cells = self.fine_to_active[inside]
        direction = g.face_direction[fine_faces]
        return cells, direction, g.face_area[fine_faces], self.half_length(cells, direction)


def fine_mesh(grid: StructuredGrid) -> ActiveMesh:
    return ActiveMesh(grid, np.ones(grid.n_coarse, dtype=bool))


def coarse_mesh(grid: StructuredGrid) -> ActiveMesh:
    return ActiveMesh(grid, np.zeros(grid.n_coarse, dtype=bool))


def build_enhanced_velocity_coupling(grid: StructuredGrid, fine_region, coarse_region) -> ActiveMesh:
    """Mesh with fine cells in ``fine_region`` and coarse cells in ``coarse_region``.

    Both regions are collections of coarse-cell ids and must partition the
    coarse grid.
    """
    fine_region = np.asarray(getattr(fine_region, "cells", fine_region), dtype=np.int64).ravel()
    coarse_region = np.asarray(getattr(coarse_region, "cells", coarse_region), dtype=np.int64).ravel()
    count = np.zeros(grid.n_coarse, dtype=np.int64)
    for region in (fine_region, coarse_region):
        if region.size and (region.min() < 0 or region.max() >= grid.n_coarse):
            raise ConfigurationError("region contains an invalid coarse cell id")
        np.add.at(count, np.unique(region), 1)
    if np.any(count > 1):
        raise ConfigurationError(f"regions overlap at coarse cells {np.flatnonzero(count > 1).tolist()}")
    if np.any(count == 0):
        raise ConfigurationError(f"regions do not cover coarse cells {np.flatnonzero(count == 0).tolist()}")
    refined = np.zeros(grid.n_coarse, dtype=bool)
    refined[fine_region] = True
    return ActiveMesh(grid, refined)


def _check_permeability(perm):
    perm = np.asarray(perm, dtype=float)
    if perm.ndim == 1:
        perm = np.column_stack([perm, perm])
    bad = np.flatnonzero(~(perm > 0).all(axis=1))
    if bad.size:
        raise DataError(f"non-positive permeability in cell {int(bad[0])}: {perm[bad[0]].tolist()}")
    return perm


def active_permeability(mesh: ActiveMesh, fine_perm, coarse_perm):
    """Per-active-cell (kxx, kyy): fine values in fine cells, effective values elsewhere."""
    fine_perm = _check_permeability(fine_perm)
    coarse_perm = _check_permeability(coarse_perm)
    out = np.empty((mesh.n_cells, 2))
    out[mesh.is_fine] = fine_perm[mesh.fine_id[mesh.is_fine]]
    out[~mesh.is_fine] = coarse_perm[mesh.coarse_id[~mesh.is_fine]]
    return out


def face_resistance(mesh: ActiveMesh, perm, darcy: float = DARCY_CONSTANT):
    """Lumped inverse-permeability mass entry of every interior carrier."""
    perm = _check_permeability(perm)
    d = mesh.face_direction
    L, R = mesh.face_left, mesh.face_right
    return (mesh.half_length(L, d) / perm[L, d] + mesh.half_length(R, d) / perm[R, d]) / (
        darcy * mesh.face_area)


def assemble_inverse_perm_mass(grid: StructuredGrid, mesh: ActiveMesh, perm,
                               darcy: float = DARCY_CONSTANT, boundary_faces=()):
    """Diagonal (lumped) representation of ``(K^-1 u, v)`` on the carrier space.

    ``perm`` holds per-active-cell permeabilities, shape ``(n,)`` or ``(n, 2)``.
    Fine boundary faces listed in ``boundary_faces`` are appended as extra
    unknowns with a single half-cell contribution.
    """
    perm = _check_permeability(perm)
    diag = [face_resistance(mesh, perm, darcy)]
    if len(boundary_faces):
        cells, direction, area, half = mesh.boundary_carrier_geometry(boundary_faces)
        diag.append(half / perm[cells, direction] / (darcy * area))
    return sp.diags(np.concatenate(diag)).tocsr()


def assemble_divergence(grid: StructuredGrid, mesh: ActiveMesh, boundary_faces=()):
    """Signed incidence: row ``i`` sums the outward fluxes of active cell ``i``."""
    k = np.arange(mesh.n_faces)
    rows = [mesh.face_left, mesh.face_right]
    cols = [k, k]
    vals = [np.ones(mesh.n_faces), -np.ones(mesh.n_faces)]
    if len(boundary_faces):
        boundary_faces = np.asarray(boundary_faces, dtype=np.int64)
        cells, *_ = mesh.boundary_carrier_geometry(boundary_faces)
        outward = np.where(grid.face_right[boundary_faces] < 0, 1.0, -1.0)
        rows.append(cells)
        cols.append(mesh.n_faces + np.arange(cells.size))
        vals.append(outward)
    n_cols = mesh.n_faces + len(boundary_faces)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(mesh.n_cells, n_cols))


def upwind_cells(left, right, flux):
    """Upwind cell of each face: left for non-negative flux, else right (if it exists)."""
    return np.where((flux >= 0) | (right < 0), left, right)


def project_mobility(left, right, direction, mobility, pseudo_flux, scheme: str = "upwind"):
    """Component flux ``Pi(lambda * F~)`` realised face by face.

    ``mobility`` is per cell, either scalar ``(n,)`` or directional ``(n, 2)``.
    """
    mobility = np.asarray(mobility, dtype=float)
    if np.any(mobility < 0):
        raise ValueError("mobility must be non-negative")
    if mobility.ndim == 1:
        mobility = np.column_stack([mobility, mobility])
    pseudo_flux = np.asarray(pseudo_flux, dtype=float)
    if scheme == "upwind":
        face_mob = mobility[upwind_cells(left, right, pseudo_flux), direction]
    elif scheme == "centered":
        r = np.where(right >= 0, right, left)
        face_mob = 0.5 * (mobility[left, direction] + mobility[r, direction])
    else:
        raise ValueError(f"unknown projection scheme {scheme!r}")
    return face_mob * pseudo_flux


@dataclass
class FluxSpace:
    """A velocity space expressed on carriers.

    ``phi`` maps velocity coefficients to carrier fluxes; ``mass`` is
    ``(K^-1 u, v)`` in coefficient space. Producer carriers are boundary
    carriers (``right == -1``) with a prescribed outside pressure.
    """

    n_cells: int
    left: np.ndarray
    right: np.ndarray
    direction: np.ndarray
    phi: sp.csr_matrix
    mass: sp.csr_matrix
    producer_carriers: np.ndarray
    producer_pressure: np.ndarray
    keys: list = field(default_factory=list)
    fine_faces: np.ndarray | None = None
    fine_phi: sp.csr_matrix | None = None

    @property
    def n_carriers(self) -> int:
        return int(self.left.size)

    @property
    def n_dofs(self) -> int:
        return int(self.phi.shape[1])

    @cached_property
    def is_lumped(self) -> bool:
        n = self.phi.shape[0]
        return (self.phi.shape == (n, n) and (self.phi - sp.identity(n)).count_nonzero() == 0
                and self.mass.count_nonzero() <= n and abs(self.mass - sp.diags(self.mass.diagonal())).max() == 0)

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        k = np.arange(self.n_carriers)
        inner = self.right >= 0
        rows = np.concatenate([self.left, self.right[inner]])
        cols = np.concatenate([k, k[inner]])
        vals = np.concatenate([np.ones(k.size), -np.ones(inner.sum())])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_cells, self.n_carriers))

    @cached_property
    def gradient(self) -> sp.csr_matrix:
        """Carrier differences ``X_left - X_right`` (outside counts as zero)."""
        return self.incidence.T.tocsr()

    @cached_property
    def producer_selector(self) -> sp.csr_matrix:
        k = self.producer_carriers
        return sp.csr_matrix((np.ones(k.size), (k, self.left[k])),
                             shape=(self.n_carriers, self.n_cells))

    @cached_property
    def divergence(self) -> sp.csr_matrix:
        """Integrated divergence of each velocity basis field in each cell."""
        return (self.incidence @ self.phi).tocsr()

    @cached_property
    def phi_t_gradient(self) -> sp.csr_matrix:
        return (self.phi.T @ self.gradient).tocsr()

    @cached_property
    def phi_t_gradient_interior(self) -> sp.csr_matrix:
        return (self.phi.T @ (self.gradient - self.producer_selector)).tocsr()

    def producer_pressure_vector(self) -> np.ndarray:
        out = np.zeros(self.n_carriers)
        out[self.producer_carriers] = self.producer_pressure
        return out


def lumped_flux_space(mesh: ActiveMesh, perm, producer_faces=(), producer_pressure=(),
                      darcy: float = DARCY_CONSTANT) -> FluxSpace:
    """Flux space of the (enhanced-velocity) two-point scheme on ``mesh``."""
    producer_faces = np.asarray(producer_faces, dtype=np.int64)
    mass = assemble_inverse_perm_mass(mesh.grid, mesh, perm, darcy, producer_faces)
    n_b = producer_faces.size
    if n_b:
        cells, direction, _, _ = mesh.boundary_carrier_geometry(producer_faces)
    else:
        cells = direction = np.zeros(0, dtype=np.int64)
    left = np.concatenate([mesh.face_left, cells])
    right = np.concatenate([mesh.face_right, -np.ones(n_b, np.int64)])
    dirs = np.concatenate([mesh.face_direction, direction])
    n = left.size
    keys = [("face", int(k)) for k in range(mesh.n_faces)] + [("well", int(f)) for f in producer_faces]
    return FluxSpace(mesh.n_cells, left, right, dirs, sp.identity(n, format="csr"), mass,
                     np.arange(mesh.n_faces, n), np.broadcast_to(
                         np.asarray(producer_pressure, dtype=float), (n_b,)).copy(), keys)
