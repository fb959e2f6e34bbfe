import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msblackoil.errors import ConfigurationError
from msblackoil.grid import (SubdomainIndex, X_NORMAL, Y_NORMAL, build_grid, coarse_neighborhood,
                             oversampling_domain)


@st.composite
def grids(draw):
    r = draw(st.integers(1, 4))
    return build_grid(r * draw(st.integers(1, 4)), r * draw(st.integers(1, 4)),
                      draw(st.floats(0.5, 3.0)), draw(st.floats(0.5, 3.0)), r)


def test_sizes_and_counts():
    g = build_grid(60, 20, 1.5, 1.5, 10)
    assert (g.nx_coarse, g.ny_coarse, g.n_coarse) == (6, 2, 12)
    assert g.extent == (90.0, 30.0)
    assert g.n_fine_faces == 61 * 20 + 60 * 21
    assert len(g.coarse_edges) == 7 * 2 + 6 * 3
    assert len(g.interior_coarse_edges) == 5 * 2 + 6 * 1


@pytest.mark.parametrize("args", [(0, 4, 1, 1, 1), (4, 4, -1, 1, 1), (5, 4, 1, 1, 2),
                                  (4, 5, 1, 1, 2), (4, 4, 1, 1, 0)])
def test_invalid_grids(args):
    with pytest.raises(ConfigurationError):
        build_grid(*args)


def test_face_orientation_convention():
    g = build_grid(3, 2, 1.0, 1.0, 1)
    f = int(g.fine_xface(1, 1))
    assert (g.face_left[f], g.face_right[f]) == (g.fine_index(0, 1), g.fine_index(1, 1))
    assert g.face_direction[f] == X_NORMAL
    f = int(g.fine_yface(2, 1))
    assert (g.face_left[f], g.face_right[f]) == (g.fine_index(2, 0), g.fine_index(2, 1))
    assert g.face_direction[f] == Y_NORMAL
    assert g.face_left[int(g.fine_xface(0, 0))] == -1
    assert g.face_right[int(g.fine_yface(0, 2))] == -1


def test_interior_x_edge_has_both_neighbours():
    g = build_grid(8, 4, 1.0, 1.0, 2)
    edge = next(e for e in g.coarse_edges if e.orientation == X_NORMAL and e.i == 2 and e.j == 1)
    assert edge.cells == (int(g.coarse_index(1, 1)), int(g.coarse_index(2, 1)))


def test_boundary_edge_has_one_neighbour():
    g = build_grid(8, 4, 1.0, 1.0, 2)
    edge = next(e for e in g.coarse_edges if e.orientation == X_NORMAL and e.i == 0)
    assert len(edge.cells) == 1 and not edge.is_interior
    assert len(coarse_neighborhood(g, edge)) == 1


def test_two_by_one_middle_edge():
    g = build_grid(4, 2, 1.0, 1.0, 2)
    (edge,) = g.interior_coarse_edges
    nb = coarse_neighborhood(g, edge.id)
    assert nb.kind == "coarse" and nb.cells.tolist() == [0, 1]


def test_oversampling_pad_zero_is_neighbourhood():
    g = build_grid(8, 8, 1.0, 1.0, 2)
    for edge in g.interior_coarse_edges:
        dom = oversampling_domain(g, edge, 0)
        assert np.array_equal(dom.cells, g.fine_cells_of(edge.cells))


def test_oversampling_collar_by_hand():
    g = build_grid(8, 8, 1.0, 1.0, 2)            # 4 x 4 coarse
    edge = next(e for e in g.coarse_edges if e.orientation == X_NORMAL and e.i == 2 and e.j == 1)
    # neighbourhood spans fine columns 2..5, rows 2..3; one coarse collar grows to 0..7, 0..5
    dom = oversampling_domain(g, edge, 2)
    i, j = np.meshgrid(np.arange(0, 8), np.arange(0, 6))
    assert np.array_equal(dom.cells, np.sort(g.fine_index(i.ravel(), j.ravel())))


def test_corner_edge_large_pad_is_whole_domain():
    g = build_grid(8, 8, 1.0, 1.0, 2)
    edge = next(e for e in g.coarse_edges if e.orientation == X_NORMAL and e.i == 1 and e.j == 0)
    assert np.array_equal(oversampling_domain(g, edge, 100).cells, np.arange(g.n_fine))
    with pytest.raises(ConfigurationError):
        oversampling_domain(g, edge, -1)


def test_edge_id_validation():
    g = build_grid(4, 2, 1.0, 1.0, 2)
    with pytest.raises(ConfigurationError):
        g.coarse_edge(len(g.coarse_edges))


def test_subdomain_index():
    s = SubdomainIndex("coarse", [3, 1, 3])
    assert s.cells.tolist() == [1, 3] and len(s) == 2
    assert 3 in s and 2 not in s
    with pytest.raises(ValueError):
        SubdomainIndex("medium", [1])


@settings(max_examples=40, deadline=None)
@given(grids())
def test_partition_property(g):
    counts = np.bincount(np.concatenate([g.fine_cells_of_coarse(c) for c in range(g.n_coarse)]),
                         minlength=g.n_fine)
    assert np.all(counts == 1)
    assert np.array_equal(g.coarse_of_fine[g.fine_cells_of_coarse(0)], np.zeros(g.refinement_ratio ** 2))


@settings(max_examples=40, deadline=None)
@given(grids())
def test_edge_measures_decompose(g):
    for e in g.coarse_edges:
        length = g.dy_coarse if e.orientation == X_NORMAL else g.dx_coarse
        assert e.measure == pytest.approx(length * g.thickness, rel=1e-14)
        assert np.allclose(e.measures, g.face_area[e.fine_faces])


@settings(max_examples=40, deadline=None)
@given(grids())
def test_neighbourhood_symmetry(g):
    """Coarse cell F is in the neighbourhood of edge E exactly when E lies on the boundary of F."""
    for e in g.coarse_edges:
        nb = coarse_neighborhood(g, e)
        for c in range(g.n_coarse):
            i0, i1, j0, j1 = g.coarse_cell_box(c)
            f = e.fine_faces
            if e.orientation == X_NORMAL:
                on_boundary = e.i * g.refinement_ratio in (i0, i1) and j0 <= e.j * g.refinement_ratio < j1
            else:
                on_boundary = e.j * g.refinement_ratio in (j0, j1) and i0 <= e.i * g.refinement_ratio < i1
            assert (c in nb) == on_boundary, (e.id, c, f)


def test_fine_divergence_telescopes():
    g = build_grid(6, 4, 1.0, 2.0, 2)
    flux = np.random.default_rng(0).normal(size=g.n_fine_faces)
    flux[(g.face_left < 0) | (g.face_right < 0)] = 0.0
    assert abs((g.fine_divergence @ flux).sum()) < 1e-12
