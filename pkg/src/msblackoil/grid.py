"""Two-level structured rectangular grid.

Cells and faces are numbered lexicographically, x fastest. Fine x-normal faces
come first (``(nx + 1) * ny`` of them), followed by the y-normal faces
(``nx * (ny + 1)``). Face ``k`` separates ``face_left[k]`` (lower coordinate)
from ``face_right[k]``; ``-1`` marks the outside of the domain. A positive
face flux points from left to right, i.e. along +x or +y.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

X_NORMAL = 0
Y_NORMAL = 1


@dataclass(frozen=True)
class CoarseEdge:
    """A coarse face together with the fine faces that compose it."""

    id: int
    orientation: int
    i: int
    j: int
    normal: tuple[float, float]
    fine_faces: np.ndarray
    measures: np.ndarray
    cells: tuple[int, ...]

    @property
    def measure(self) -> float:
        return float(self.measures.sum())

    @property
    def is_interior(self) -> bool:
        return len(self.cells) == 2


@dataclass(frozen=True)
class SubdomainIndex:
    """Sorted set of cell ids, either coarse or fine."""

    kind: str
    cells: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in ("coarse", "fine"):
            raise ValueError(f"unknown subdomain kind {self.kind!r}")
        object.__setattr__(self, "cells", np.unique(np.asarray(self.cells, dtype=np.int64)))

    def __len__(self) -> int:
        return int(self.cells.size)

    def __contains__(self, cell: int) -> bool:
        idx = np.searchsorted(self.cells, cell)
        return bool(idx < self.cells.size and self.cells[idx] == cell)


@dataclass(frozen=True)
class StructuredGrid:
    nx_fine: int
    ny_fine: int
    dx_fine: float
    dy_fine: float
    refinement_ratio: int
    thickness: float = 1.0

    def __post_init__(self) -> None:
        for name in ("nx_fine", "ny_fine", "refinement_ratio"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        for name in ("dx_fine", "dy_fine", "thickness"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        r = self.refinement_ratio
        if self.nx_fine % r:
            raise ConfigurationError(
                f"nx_fine={self.nx_fine} is not divisible by refinement_ratio={r}")
        if self.ny_fine % r:
            raise ConfigurationError(
                f"ny_fine={self.ny_fine} is not divisible by refinement_ratio={r}")

    # -- sizes -------------------------------------------------------------
    @property
    def nx_coarse(self) -> int:
        return self.nx_fine // self.refinement_ratio

    @property
    def ny_coarse(self) -> int:
        return self.ny_fine // self.refinement_ratio

    @property
    def dx_coarse(self) -> float:
        return self.dx_fine * self.refinement_ratio

    @property
    def dy_coarse(self) -> float:
        return self.dy_fine * self.refinement_ratio

    @property
    def n_fine(self) -> int:
        return self.nx_fine * self.ny_fine

    @property
    def n_coarse(self) -> int:
        return self.nx_coarse * self.ny_coarse

    @property
    def extent(self) -> tuple[float, float]:
        return self.nx_fine * self.dx_fine, self.ny_fine * self.dy_fine

    @property
    def fine_volume(self) -> float:
        return self.dx_fine * self.dy_fine * self.thickness

    @property
    def coarse_volume(self) -> float:
        return self.dx_coarse * self.dy_coarse * self.thickness

    @property
    def n_fine_xfaces(self) -> int:
        return (self.nx_fine + 1) * self.ny_fine

    @property
    def n_fine_faces(self) -> int:
        return self.n_fine_xfaces + self.nx_fine * (self.ny_fine + 1)

    # -- indexing ----------------------------------------------------------
    def fine_index(self, i, j):
        return np.asarray(i) + self.nx_fine * np.asarray(j)

    def coarse_index(self, I, J):
        return np.asarray(I) + self.nx_coarse * np.asarray(J)

    def fine_ij(self, cell):
        cell = np.asarray(cell)
        return cell % self.nx_fine, cell // self.nx_fine

    def coarse_ij(self, cell):
        cell = np.asarray(cell)
        return cell % self.nx_coarse, cell // self.nx_coarse

    def fine_xface(self, i, j):
        return np.asarray(i) + (self.nx_fine + 1) * np.asarray(j)

    def fine_yface(self, i, j):
        return self.n_fine_xfaces + np.asarray(i) + self.nx_fine * np.asarray(j)

    @cached_property
    def coarse_of_fine(self) -> np.ndarray:
        i, j = self.fine_ij(np.arange(self.n_fine))
        r = self.refinement_ratio
        return self.coarse_index(i // r, j // r)

    @cached_property
    def _fine_of_coarse(self) -> list[np.ndarray]:
        order = np.argsort(self.coarse_of_fine, kind="stable")
        counts = np.bincount(self.coarse_of_fine, minlength=self.n_coarse)
        return np.split(order, np.cumsum(counts)[:-1])

    def fine_cells_of_coarse(self, coarse_cell: int) -> np.ndarray:
        return self._fine_of_coarse[int(coarse_cell)]

    def fine_cells_of(self, coarse_cells) -> np.ndarray:
        coarse_cells = np.atleast_1d(np.asarray(coarse_cells, dtype=np.int64))
        if coarse_cells.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self._fine_of_coarse[c] for c in coarse_cells]))

    # -- fine faces --------------------------------------------------------
    @cached_property
    def _face_arrays(self):
        nx, ny = self.nx_fine, self.ny_fine
        # x-normal faces
        i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="xy")
        i, j = i.ravel(), j.ravel()
        xl = np.where(i > 0, self.fine_index(i - 1, j), -1)
        xr = np.where(i < nx, self.fine_index(np.minimum(i, nx - 1), j), -1)
        xc = np.column_stack([i * self.dx_fine, (j + 0.5) * self.dy_fine])
        # y-normal faces
        i2, j2 = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="xy")
        i2, j2 = i2.ravel(), j2.ravel()
        yl = np.where(j2 > 0, self.fine_index(i2, j2 - 1), -1)
        yr = np.where(j2 < ny, self.fine_index(i2, np.minimum(j2, ny - 1)), -1)
        yc = np.column_stack([(i2 + 0.5) * self.dx_fine, j2 * self.dy_fine])
        left = np.concatenate([xl, yl]).astype(np.int64)
        right = np.concatenate([xr, yr]).astype(np.int64)
        direction = np.concatenate([np.zeros(xl.size, np.int64), np.ones(yl.size, np.int64)])
        area = np.where(direction == X_NORMAL, self.dy_fine, self.dx_fine) * self.thickness
        centers = np.vstack([xc, yc])
        return left, right, direction, area, centers

    @property
    def face_left(self) -> np.ndarray:
        return self._face_arrays[0]

    @property
    def face_right(self) -> np.ndarray:
        return self._face_arrays[1]

    @property
    def face_direction(self) -> np.ndarray:
        return self._face_arrays[2]

    @property
    def face_area(self) -> np.ndarray:
        return self._face_arrays[3]

    @property
    def face_center(self) -> np.ndarray:
        return self._face_arrays[4]

    @cached_property
    def interior_fine_faces(self) -> np.ndarray:
        return np.flatnonzero((self.face_left >= 0) & (self.face_right >= 0))

    def boundary_faces_of_fine_cell(self, cell: int) -> np.ndarray:
        i, j = (int(v) for v in self.fine_ij(cell))
        faces = []
        if i == 0:
            faces.append(int(self.fine_xface(0, j)))
        if i == self.nx_fine - 1:
            faces.append(int(self.fine_xface(self.nx_fine, j)))
        if j == 0:
            faces.append(int(self.fine_yface(i, 0)))
        if j == self.ny_fine - 1:
            faces.append(int(self.fine_yface(i, self.ny_fine)))
        return np.asarray(faces, dtype=np.int64)

    @cached_property
    def fine_cell_centers(self) -> np.ndarray:
        i, j = self.fine_ij(np.arange(self.n_fine))
        return np.column_stack([(i + 0.5) * self.dx_fine, (j + 0.5) * self.dy_fine])

    @cached_property
    def fine_divergence(self):
        """Signed incidence (n_fine x n_fine_faces): net outflow of face fluxes."""
        import scipy.sparse as sp

        left, right = self.face_left, self.face_right
        k = np.arange(left.size)
        rows = np.concatenate([left[left >= 0], right[right >= 0]])
        cols = np.concatenate([k[left >= 0], k[right >= 0]])
        vals = np.concatenate([np.ones((left >= 0).sum()), -np.ones((right >= 0).sum())])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_fine, left.size))

    # -- coarse edges ------------------------------------------------------
    @cached_property
    def coarse_edges(self) -> list[CoarseEdge]:
        NX, NY, r = self.nx_coarse, self.ny_coarse, self.refinement_ratio
        edges: list[CoarseEdge] = []
        for J in range(NY):
            for I in range(NX + 1):
                faces = self.fine_xface(I * r, J * r + np.arange(r)).astype(np.int64)
                cells = tuple(int(self.coarse_index(c, J)) for c in (I - 1, I) if 0 <= c < NX)
                edges.append(CoarseEdge(len(edges), X_NORMAL, I, J, (1.0, 0.0), faces,
                                        self.face_area[faces].copy(), cells))
        for J in range(NY + 1):
            for I in range(NX):
                faces = self.fine_yface(I * r + np.arange(r), J * r).astype(np.int64)
                cells = tuple(int(self.coarse_index(I, c)) for c in (J - 1, J) if 0 <= c < NY)
                edges.append(CoarseEdge(len(edges), Y_NORMAL, I, J, (0.0, 1.0), faces,
                                        self.face_area[faces].copy(), cells))
        return edges

    @cached_property
    def interior_coarse_edges(self) -> list[CoarseEdge]:
        return [e for e in self.coarse_edges if e.is_interior]

    def coarse_edge(self, edge_id: int) -> CoarseEdge:
        if not 0 <= edge_id < len(self.coarse_edges):
            raise ConfigurationError(f"coarse edge id {edge_id} out of range")
        return self.coarse_edges[edge_id]

    def coarse_cell_box(self, coarse_cell: int) -> tuple[int, int, int, int]:
        """Fine index box ``(i0, i1, j0, j1)`` (half open) covered by a coarse cell."""
        I, J = (int(v) for v in self.coarse_ij(coarse_cell))
        r = self.refinement_ratio
        return I * r, (I + 1) * r, J * r, (J + 1) * r

    def box_cells(self, i0: int, i1: int, j0: int, j1: int) -> np.ndarray:
        i, j = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="xy")
        return self.fine_index(i.ravel(), j.ravel()).astype(np.int64)


def build_grid(nx_fine: int, ny_fine: int, dx_fine: float, dy_fine: float,
               refinement_ratio: int, thickness: float = 1.0) -> StructuredGrid:
    return StructuredGrid(nx_fine, ny_fine, dx_fine, dy_fine, refinement_ratio, thickness)


def coarse_neighborhood(grid: StructuredGrid, coarse_edge: CoarseEdge | int) -> SubdomainIndex:
    """Coarse cells whose closure meets the edge (one on the boundary, two inside)."""
    edge = grid.coarse_edge(coarse_edge) if isinstance(coarse_edge, (int, np.integer)) else coarse_edge
    return SubdomainIndex("coarse", np.asarray(edge.cells))


def neighborhood_box(grid: StructuredGrid, edge: CoarseEdge) -> tuple[int, int, int, int]:
    boxes = [grid.coarse_cell_box(c) for c in edge.cells]
    return (min(b[0] for b in boxes), max(b[1] for b in boxes),
            min(b[2] for b in boxes), max(b[3] for b in boxes))


def oversampling_domain(grid: StructuredGrid, coarse_edge: CoarseEdge | int,
                        pad_fine_cells: int) -> SubdomainIndex:
    """Fine cells of the edge neighborhood grown by ``pad_fine_cells``, clipped to the domain."""
    if pad_fine_cells < 0:
        raise ConfigurationError("pad_fine_cells must be >= 0")
    edge = grid.coarse_edge(coarse_edge) if isinstance(coarse_edge, (int, np.integer)) else coarse_edge
    return SubdomainIndex("fine", grid.box_cells(*oversampling_box(grid, edge, pad_fine_cells)))


def oversampling_box(grid: StructuredGrid, edge: CoarseEdge, pad: int) -> tuple[int, int, int, int]:
    i0, i1, j0, j1 = neighborhood_box(grid, edge)
    return (max(i0 - pad, 0), min(i1 + pad, grid.nx_fine),
            max(j0 - pad, 0), min(j1 + pad, grid.ny_fine))
