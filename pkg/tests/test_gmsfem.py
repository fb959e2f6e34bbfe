import numpy as np
import pytest

from msblackoil import gmsfem as gm
from msblackoil.errors import ConfigurationError
from msblackoil.grid import X_NORMAL, build_grid

GRID = build_grid(12, 8, 1.0, 1.0, 4)        # 3 x 2 coarse, 4 fine faces per coarse edge
PERM = np.exp(np.random.default_rng(2).normal(3.0, 1.0, GRID.n_fine))


def _edge(i, j, orientation=X_NORMAL, grid=GRID):
    return next(e for e in grid.coarse_edges if e.orientation == orientation and e.i == i and e.j == j)


def _positions(faces, wanted):
    return np.array([int(np.flatnonzero(faces == f)[0]) for f in wanted])


def test_exhaustive_snapshot_divergence():
    edge = _edge(1, 0)
    snaps = gm.build_snapshots_exhaustive(GRID, PERM, edge)
    coarse_volume = GRID.dx_coarse * GRID.dy_coarse * GRID.thickness
    left, right = edge.cells
    assert np.allclose(np.abs(snaps.divergence[left]), edge.measures / coarse_volume, rtol=1e-14)
    assert np.allclose(snaps.divergence[left], -snaps.divergence[right], rtol=1e-14)
    # fine-level divergence is the constant alpha inside each coarse cell
    for c in edge.cells:
        cells = GRID.fine_cells_of_coarse(c)
        div = GRID.fine_divergence[cells][:, snaps.faces] @ snaps.vectors
        assert np.allclose(div, snaps.divergence[c][None, :] * GRID.fine_volume, rtol=1e-10, atol=1e-14)


def test_exhaustive_snapshots_partition_unit_trace():
    edge = _edge(1, 1)
    snaps = gm.build_snapshots_exhaustive(GRID, PERM, edge)
    pos = _positions(snaps.faces, edge.fine_faces)
    assert np.allclose(snaps.vectors[pos].sum(axis=1), edge.measures, rtol=1e-13)
    assert np.allclose(snaps.vectors[pos], np.diag(edge.measures), atol=1e-13)


def test_neighbourhood_has_no_outer_faces():
    edge = _edge(2, 0)
    snaps = gm.build_snapshots_exhaustive(GRID, PERM, edge)
    cells = np.concatenate([GRID.fine_cells_of_coarse(c) for c in edge.cells])
    for f in snaps.faces:
        assert GRID.face_left[f] in cells and GRID.face_right[f] in cells


def test_homogeneous_permeability_bases_translate():
    grid = build_grid(12, 4, 1.0, 1.0, 4)
    perm = np.full(grid.n_fine, 50.0)
    a = gm.spectral_decompose(grid, perm, gm.build_snapshots_exhaustive(grid, perm, _edge(1, 0, grid=grid)))
    b = gm.spectral_decompose(grid, perm, gm.build_snapshots_exhaustive(grid, perm, _edge(2, 0, grid=grid)))
    assert np.allclose(a.eigenvalues, b.eigenvalues, rtol=1e-10, atol=1e-14)


def test_single_snapshot_rayleigh_quotient():
    edge = _edge(1, 0)
    trace = np.linspace(1.0, 2.0, edge.fine_faces.size)[:, None]
    snaps = gm.snapshots_from_traces(GRID, PERM, edge, trace)
    basis = gm.spectral_decompose(GRID, PERM, snaps, n_keep=None)
    A, S = gm.spectral_forms(GRID, PERM, snaps)
    assert basis.eigenvalues[0] == pytest.approx(A[0, 0] / S[0, 0], rel=1e-12)


def test_randomized_snapshots_span_the_exhaustive_space():
    edge = _edge(1, 1)
    ex = gm.build_snapshots_exhaustive(GRID, PERM, edge).vectors
    J = edge.fine_faces.size
    rnd = gm.build_snapshots_randomized(GRID, PERM, edge, pad=2, n_samples=J, seed=5).vectors
    coef, *_ = np.linalg.lstsq(rnd, ex, rcond=None)
    assert np.linalg.norm(rnd @ coef - ex) <= 1e-8 * np.linalg.norm(ex)
    again = gm.build_snapshots_randomized(GRID, PERM, edge, pad=2, n_samples=J, seed=5).vectors
    assert np.array_equal(rnd, again)


def test_randomized_argument_validation():
    edge = _edge(1, 0)
    J = edge.fine_faces.size
    for n in (0, J + 1):
        with pytest.raises(ConfigurationError, match="n_samples"):
            gm.build_snapshots_randomized(GRID, PERM, edge, 1, n, 0)
    with pytest.raises(ConfigurationError, match="pad"):
        gm.build_snapshots_randomized(GRID, PERM, edge, -1, 1, 0)
    boundary = _edge(0, 0)
    with pytest.raises(ConfigurationError, match="boundary"):
        gm.build_snapshots_exhaustive(GRID, PERM, boundary)
    with pytest.raises(ConfigurationError):
        gm.build_spectral_bases(GRID, PERM, variant="magic")


def test_choose_basis_count():
    eigs = np.array([0.0, 0.0, 1.0, 2.0])
    assert gm.choose_basis_count(eigs, 1, 1e-8) == 2
    assert gm.choose_basis_count(eigs, 3, 1e-8) == 3
    assert gm.choose_basis_count(eigs, 10, 1e-8) == 4
    assert gm.choose_basis_count(eigs, 0, 1e-8) == 2


def test_bases_round_trip(tmp_path):
    bases = gm.build_spectral_bases(GRID, PERM, n_keep=2)
    path = tmp_path / "bases.txt"
    gm.write_bases(bases, path)
    back = gm.read_bases(path)
    assert sorted(back) == sorted(bases)
    for k, b in bases.items():
        assert back[k].n_keep == b.n_keep
        assert np.array_equal(back[k].faces, b.faces)
        assert np.array_equal(back[k].eigenvalues, b.eigenvalues)
        assert np.array_equal(back[k].fields, b.fields)


def test_space_dimension_and_divergence_structure():
    bases = gm.build_spectral_bases(GRID, PERM, n_keep=2)
    producer = np.array([GRID.n_fine_faces - 1])
    mesh, space = gm.assemble_multiscale_space(GRID, PERM, bases, (), producer, [2500.0])
    assert mesh.n_cells == GRID.n_coarse
    assert space.n_dofs == sum(b.n_keep for b in bases.values()) + 1
    # every multiscale field has a piecewise-constant divergence on the coarse cells
    div = GRID.fine_divergence @ space.fine_phi
    for c in range(GRID.n_coarse):
        block = div[GRID.fine_cells_of_coarse(c)].toarray()
        ms = [k for k, key in enumerate(space.keys) if key[0] == "ms"]
        assert np.allclose(block[:, ms], block[:1, ms], rtol=1e-9, atol=1e-12)
    mass = space.mass.toarray()
    assert np.allclose(mass, mass.T) and np.all(np.linalg.eigvalsh(mass) > 0)


def test_fine_region_adds_interior_faces():
    bases = gm.build_spectral_bases(GRID, PERM, n_keep=2)
    _, coarse_space = gm.assemble_multiscale_space(GRID, PERM, bases)
    mesh, space = gm.assemble_multiscale_space(GRID, PERM, bases, [0])
    r = GRID.refinement_ratio
    assert space.n_dofs == coarse_space.n_dofs + 2 * r * (r - 1)
    assert mesh.n_cells == GRID.n_coarse - 1 + r * r


def test_diagnostics_of_full_bases():
    for b in gm.build_spectral_bases(GRID, PERM, n_keep=None).values():
        d = gm.spectral_diagnostics(b)
        assert d["ascending"] and d["orthonormality"] < 1e-10 and d["residual"] < 1e-10
        assert b.n_keep == b.eigenvalues.size
