"""Permeability input: ASCII field files and a seeded synthetic slice generator."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def load_permeability(path, nx: int, ny: int) -> np.ndarray:
    """Read a whitespace-separated field, row-major with x fastest, in mD.

    The file holds either ``nx*ny`` values (isotropic) or a ``k_xx`` block
    followed by a ``k_yy`` block. Returns ``(nx*ny, 2)``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"permeability file not found: {path}")
    n = nx * ny
    values: list[float] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        for col, tok in enumerate(line.split(), 1):
            try:
                v = float(tok)
            except ValueError:
                raise DataError(f"{path}:{lineno}: token {col} is not a number: {tok!r}") from None
            if not v > 0 or not np.isfinite(v):
                raise DataError(f"{path}:{lineno}: token {col} must be positive, got {tok}")
            values.append(v)
    if len(values) == n:
        k = np.asarray(values)
        return np.column_stack([k, k])
    if len(values) >= 2 * n:
        k = np.asarray(values[: 2 * n])
        return np.column_stack([k[:n], k[n:]])
    raise DataError(f"{path}: expected {n} (isotropic) or {2 * n} values, found {len(values)}")


def write_permeability(path, perm) -> None:
    """Write ``(n, 2)`` permeabilities as a k_xx block then a k_yy block."""
    perm = np.asarray(perm, dtype=float)
    if perm.ndim == 1:
        perm = np.column_stack([perm, perm])
    with open(path, "w") as fh:
        for col in range(2):
            for chunk in np.array_split(perm[:, col], max(1, perm.shape[0] // 10)):
                fh.write(" ".join(repr(float(v)) for v in chunk) + "\n")


def synthetic_permeability(nx: int, ny: int, seed: int = 20, log10_mean: float = 1.5,
                           log10_std: float = 1.0, n_channels: int = 2) -> np.ndarray:
    """Layered background with sinuous high-permeability channels, in mD.

    Returns an isotropic ``(nx*ny, 2)`` field. The background varies mainly
    across rows (layering) with weaker along-row correlation; channels run
    along x with a random phase and amplitude.
    """
    rng = np.random.default_rng(seed)
    x = np.arange(nx)
    y = np.arange(ny)
    layers = rng.normal(0.0, 1.0, ny)
    layers = np.convolve(layers, np.ones(2) / 2, mode="same")
    along = rng.normal(0.0, 1.0, (ny, nx))
    kernel = np.ones(5) / 5
    along = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, along)
    field = layers[:, None] + 0.6 * along
    field = (field - field.mean()) / field.std()
    logk = log10_mean + log10_std * field
    width = max(1.0, ny / 10)
    for _ in range(n_channels):
        centre = rng.uniform(0.2, 0.8) * ny
        amp = rng.uniform(0.1, 0.25) * ny
        wave = rng.uniform(1.0, 2.5) * 2 * np.pi / nx
        phase = rng.uniform(0, 2 * np.pi)
        path_y = centre + amp * np.sin(wave * x + phase)
        dist = np.abs(y[:, None] - path_y[None, :])
        logk = np.where(dist <= width, np.maximum(logk, log10_mean + 1.5 * log10_std), logk)
    k = 10.0 ** logk.ravel()
    return np.column_stack([k, k])
