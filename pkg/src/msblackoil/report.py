"""Production reports, field snapshots and run comparison metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import fluid_rock as fr
from .blackoil import STANDARD_PRESSURE, STB_TO_CUFT
from .errors import DataError
from .grid import StructuredGrid

CSV_HEADER = ("time_day", "q_g_mscf_per_day", "q_o_stb_per_day", "q_w_stb_per_day",
              "cum_g_mscf", "cum_o_stb", "cum_w_stb")
RATE_COLUMNS = CSV_HEADER[1:4]
CUMULATIVE_COLUMNS = CSV_HEADER[4:]


def surface_rates(fluid: fr.FluidModel, mass_rates) -> np.ndarray:
    """Convert (oil, water, gas) lbs/day to (gas Mscf/day, oil STB/day, water STB/day).

    Surface volumes use phase densities at the nominal standard pressure.
    """
    m = np.asarray(mass_rates, dtype=float)
    p = STANDARD_PRESSURE
    q_o = m[..., 0] / (fr.density(fluid, "oil", p) * STB_TO_CUFT)
    q_w = m[..., 1] / (fr.density(fluid, "water", p) * STB_TO_CUFT)
    q_g = m[..., 2] / fr.density(fluid, "gas", p) / 1000.0
    return np.stack([q_g, q_o, q_w], axis=-1)


@dataclass
class ProductionReport:
    """Producer rates over time; cumulatives are trapezoid integrals of the rates."""

    time: np.ndarray
    rates: np.ndarray      # (n, 3): q_g, q_o, q_w

    def __post_init__(self) -> None:
        self.time = np.asarray(self.time, dtype=float)
        self.rates = np.asarray(self.rates, dtype=float).reshape(-1, 3)
        if self.time.size != self.rates.shape[0]:
            raise DataError("report times and rates differ in length")
        if np.any(np.diff(self.time) <= 0):
            raise DataError("report times must be strictly increasing")

    @property
    def cumulative(self) -> np.ndarray:
        if self.time.size == 0:
            return np.zeros((0, 3))
        return cumulative_trapezoid(self.rates, self.time, axis=0, initial=0.0)

    def table(self) -> np.ndarray:
        return np.column_stack([self.time, self.rates, self.cumulative])

    def column(self, name: str) -> np.ndarray:
        return self.table()[:, CSV_HEADER.index(name)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in self.table():
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "ProductionReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise DataError(f"{path}: unexpected header")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(CSV_HEADER))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        return cls(data[:, 0], data[:, 1:4])


# -- field output -------------------------------------------------------------------

def write_vtk_snapshot(path, grid: StructuredGrid, fields: dict, title: str = "snapshot") -> None:
    """Legacy structured-points VTK file with fine-cell data."""
    nx, ny = grid.nx_fine, grid.ny_fine
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\nORIGIN 0 0 0\n")
        fh.write(f"SPACING {grid.dx_fine!r} {grid.dy_fine!r} 1\n")
        fh.write(f"CELL_DATA {nx * ny}\n")
        for name, values in fields.items():
            values = np.asarray(values, dtype=float).ravel()
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for chunk in np.array_split(values, max(1, values.size // 10)):
                fh.write(" ".join(repr(float(v)) for v in chunk) + "\n")


def write_matrix_csv(path, values, nx: int, ny: int) -> None:
    """Field as a ``ny x nx`` matrix, first row is ``j = 0``."""
    np.savetxt(path, np.asarray(values, dtype=float).reshape(ny, nx), delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2).ravel()


def write_region_mask(path, grid: StructuredGrid, coarse_cells) -> None:
    """Coarse-cell 0/1 mask of the finely resolved region."""
    mask = np.zeros(grid.n_coarse, dtype=int)
    mask[np.asarray(coarse_cells, dtype=np.int64)] = 1
    np.savetxt(path, mask.reshape(grid.ny_coarse, grid.nx_coarse), delimiter=",", fmt="%d")


# -- comparison ----------------------------------------------------------------------

def relative_l2(values, reference, time=None) -> float:
    """``||values - reference|| / ||reference||``, time-weighted when ``time`` is given."""
    a = np.asarray(values, dtype=float)
    b = np.asarray(reference, dtype=float)
    if time is None:
        num, den = np.sum((a - b) ** 2), np.sum(b ** 2)
    else:
        num = np.trapezoid((a - b) ** 2, time)
        den = np.trapezoid(b ** 2, time)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(np.sqrt(num / den))


def relative_linf(values, reference) -> float:
    a = np.asarray(values, dtype=float)
    b = np.asarray(reference, dtype=float)
    den = np.abs(b).max(initial=0.0)
    num = np.abs(a - b).max(initial=0.0)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)


def compare_reports(report: ProductionReport, reference: ProductionReport) -> dict:
    """Relative L2 and Linf errors of every rate and cumulative column.

    ``report`` is interpolated onto the reference times inside the common
    time range.
    """
    lo = max(report.time[0], reference.time[0])
    hi = min(report.time[-1], reference.time[-1])
    if not hi > lo:
        raise DataError("reports cover disjoint time ranges")
    sel = (reference.time >= lo - 1e-12) & (reference.time <= hi + 1e-12)
    t = reference.time[sel]
    a_tab, b_tab = report.table(), reference.table()[sel]
    out = {}
    for k, name in enumerate(CSV_HEADER[1:], start=1):
        a = np.interp(t, report.time, a_tab[:, k])
        out[name] = {"l2": relative_l2(a, b_tab[:, k], t), "linf": relative_linf(a, b_tab[:, k])}
    return out


def saturation_errors(fields, reference_fields, phase: str = "s_w") -> dict:
    """Relative L2 field error at each common snapshot time."""
    common = sorted(set(fields) & set(reference_fields))
    return {t: relative_l2(fields[t][phase], reference_fields[t][phase]) for t in common}
