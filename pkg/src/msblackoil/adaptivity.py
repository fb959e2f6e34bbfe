"""Indicators and region selection for local enrichment."""
from __future__ import annotations

import numpy as np

from .grid import StructuredGrid, SubdomainIndex
from .mixed_fem import ActiveMesh


def saturation_jump_indicator(s_w, mesh: ActiveMesh) -> np.ndarray:
    """Largest water-saturation jump to any edge-adjacent active cell."""
    s_w = np.asarray(s_w, dtype=float)
    jump = np.abs(s_w[mesh.face_left] - s_w[mesh.face_right])
    out = np.zeros(mesh.n_cells)
    np.maximum.at(out, mesh.face_left, jump)
    np.maximum.at(out, mesh.face_right, jump)
    return out


def buffer_region(grid: StructuredGrid, coarse_cells, width: int = 1) -> np.ndarray:
    """Coarse cells within Chebyshev distance ``width`` of ``coarse_cells``."""
    mask = np.zeros((grid.ny_coarse, grid.nx_coarse), dtype=bool)
    cells = np.asarray(coarse_cells, dtype=np.int64)
    if cells.size == 0:
        return cells
    I, J = grid.coarse_ij(cells)
    for dj in range(-width, width + 1):
        for di in range(-width, width + 1):
            jj = np.clip(J + dj, 0, grid.ny_coarse - 1)
            ii = np.clip(I + di, 0, grid.nx_coarse - 1)
            mask[jj, ii] = True
    return np.flatnonzero(mask.ravel())


def mark_transient(indicator, mesh: ActiveMesh, eps: float, buffer: int = 1,
                   pinned=()) -> SubdomainIndex:
    """Coarse cells to resolve finely: indicator above ``eps`` plus a buffer layer.

    ``eps <= 0`` selects the whole domain; ``pinned`` coarse cells (wells)
    are always included.
    """
    grid = mesh.grid
    if eps <= 0:
        return SubdomainIndex("coarse", np.arange(grid.n_coarse))
    indicator = np.asarray(indicator, dtype=float)
    hot = np.unique(mesh.coarse_id[indicator > eps])
    cells = buffer_region(grid, hot, buffer)
    cells = np.union1d(cells, np.asarray(pinned, dtype=np.int64))
    return SubdomainIndex("coarse", cells)


def residual_indicator(grid: StructuredGrid, fine_residual) -> np.ndarray:
    """Dual-norm residual per coarse cell, maximised over components.

    ``fine_residual`` holds integrated residuals per fine cell, shape
    ``(n_components, n_fine)``. For piecewise-constant test functions the
    dual norm over a coarse cell is ``sqrt(sum_f r_f^2 / |f|)``.
    """
    r = np.atleast_2d(np.asarray(fine_residual, dtype=float))
    sq = np.zeros((r.shape[0], grid.n_coarse))
    for a in range(r.shape[0]):
        sq[a] = np.bincount(grid.coarse_of_fine, weights=r[a] ** 2 / grid.fine_volume,
                            minlength=grid.n_coarse)
    return np.sqrt(sq).max(axis=0)


def select_fine_region(indicator, theta: float) -> SubdomainIndex:
    """Coarse cells whose indicator reaches ``theta`` times the (positive) maximum."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    indicator = np.asarray(indicator, dtype=float)
    top = indicator.max(initial=0.0)
    if top <= 0:
        return SubdomainIndex("coarse", np.zeros(0, dtype=np.int64))
    return SubdomainIndex("coarse", np.flatnonzero(indicator >= theta * top))
