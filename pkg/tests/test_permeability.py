import numpy as np
import pytest

from msblackoil.errors import DataError
from msblackoil.permeability import load_permeability, synthetic_permeability, write_permeability


def test_isotropic_file(tmp_path):
    path = tmp_path / "k.txt"
    path.write_text("1 2\n3 4\n")
    k = load_permeability(path, 2, 2)
    assert k.tolist() == [[1, 1], [2, 2], [3, 3], [4, 4]]


def test_anisotropic_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    perm = rng.uniform(1, 500, (24, 2))
    path = tmp_path / "k.txt"
    write_permeability(path, perm)
    assert np.array_equal(load_permeability(path, 6, 4), perm)


def test_extra_values_beyond_two_blocks_are_ignored(tmp_path):
    path = tmp_path / "k.txt"
    path.write_text("1 2 3 4 5")
    assert load_permeability(path, 2, 1).tolist() == [[1, 3], [2, 4]]


def test_file_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_permeability(tmp_path / "none.txt", 2, 2)
    path = tmp_path / "k.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(DataError, match="expected 4 .* found 3"):
        load_permeability(path, 2, 2)
    path.write_text("1 2\n3 x4\n")
    with pytest.raises(DataError, match=":2: token 2"):
        load_permeability(path, 2, 2)
    path.write_text("1 2\n0 4\n")
    with pytest.raises(DataError, match="positive"):
        load_permeability(path, 2, 2)


def test_synthetic_field_is_seeded():
    a = synthetic_permeability(30, 10, seed=4)
    assert a.shape == (300, 2) and np.all(a > 0)
    assert np.array_equal(a, synthetic_permeability(30, 10, seed=4))
    assert not np.array_equal(a, synthetic_permeability(30, 10, seed=5))
    assert np.array_equal(a[:, 0], a[:, 1])
