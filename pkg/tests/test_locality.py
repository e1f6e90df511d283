import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from locsim.grid import StructuredGrid, build_matrix_grid
from locsim.locality import (ActiveSetState, RestrictionOperator, as_index_set, boundary_layer,
                             expand_active, flag_map, outer_halo, subdomain_skip_check, support_set,
                             union)


def grid5():
    return build_matrix_grid(StructuredGrid(5, 5, 1.0, 1.0), 1e-15, 0.2)


@given(st.lists(st.integers(0, 49), max_size=30), st.integers(1, 3))
def test_restriction_extend_roundtrip(idx, block):
    R = RestrictionOperator(np.array(idx, dtype=np.intp), 50, block)
    v = np.arange(50 * block, dtype=float) + 1.0
    ra = R.restrict(v)
    full = R.extend(ra)
    assert np.array_equal(full + R.extend_complement(v), v)
    assert R.restrict(full).tolist() == ra.tolist()


def test_restriction_rejects_out_of_range():
    with pytest.raises(IndexError):
        RestrictionOperator(np.array([0, 5]), 5)


def test_support_set_and_cutoff():
    du = np.array([0.0, 2.0, -3.0, 0.5])
    assert support_set(du, 1.0).tolist() == [1, 2]
    assert support_set(du[[1, 3]], 1.0, cells=np.array([1, 3])).tolist() == [1]
    with pytest.raises(ValueError):
        support_set(du, 0.0)


def test_boundary_and_halo_of_square_block():
    g = grid5()
    block = np.array([6, 7, 8, 11, 12, 13, 16, 17, 18])
    assert boundary_layer(block, g).tolist() == [6, 7, 8, 11, 13, 16, 17, 18]
    assert outer_halo(block, g).tolist() == [1, 2, 3, 5, 9, 10, 14, 15, 19, 21, 22, 23]
    assert boundary_layer(np.arange(25), g).size == 0


def test_expand_active_grows_only_when_flagged():
    g = grid5()
    active = np.array([12])
    du = np.zeros(25)
    new, grew = expand_active(active, [12], du, 1.0, 1, g)
    assert not grew and new.tolist() == [12]
    du[12] = 2.0
    new, grew = expand_active(active, [12], du, 1.0, 1, g)
    assert grew and new.tolist() == [7, 11, 12, 13, 17]


def test_subdomain_skip_check():
    assert subdomain_skip_check(None, np.zeros(3), 1.0)
    assert not subdomain_skip_check(np.array([0.5]), np.array([0.2]), 1.0)
    assert subdomain_skip_check(np.array([0.5]), np.array([1.0]), 1.0)
    assert subdomain_skip_check(np.array([1.5]), np.zeros(0), 1.0)


def test_flag_map_codes():
    f = flag_map(5, [1, 2, 3, 4], [3, 4], np.array([0, 0, 5, 0, 5]), 1.0)
    assert f.tolist() == [0, 1, 3, 2, 4]


def test_set_helpers():
    assert union([3, 1], [1, 2]).tolist() == [1, 2, 3]
    assert as_index_set([[2, 2], [0, 1]]).tolist() == [0, 1, 2]
    s = ActiveSetState.build([12], grid5())
    assert s.boundary.tolist() == [12] and s.halo.tolist() == [7, 11, 13, 17]


def grid10():
    return build_matrix_grid(StructuredGrid(10, 10, 1.0, 1.0), 1e-15, 0.2)


def test_support_threshold_examples():
    assert support_set(np.zeros(4), 0.3).size == 0
    assert support_set(np.array([0.0, 0.5, 0.29]), 0.3).tolist() == [1]
    assert support_set(np.array([0.3]), 0.3).tolist() == [0]


def test_boundary_examples():
    g = grid10()
    assert boundary_layer([44], g).tolist() == [44]
    block = [33, 34, 35, 43, 44, 45, 53, 54, 55]
    assert boundary_layer(block, g).tolist() == [33, 34, 35, 43, 45, 53, 54, 55]


def test_halo_examples():
    g = grid10()
    assert outer_halo(np.arange(100), g).size == 0
    assert outer_halo([44], g).tolist() == [34, 43, 45, 54]
    assert outer_halo([11, 88], g).tolist() == union(outer_halo([11], g), outer_halo([88], g)).tolist()


def test_expand_examples():
    g = grid10()
    active = np.array([44, 45])
    du = np.zeros(100)
    du[45] = 1.0
    new, grew = expand_active(active, [44, 45], du, 0.5, 2, g)
    from locsim.grid import neighbor_set
    assert grew and new.tolist() == union(active, neighbor_set(g, 45, 2)).tolist()
    # flagged cell already surrounded by the active set: unchanged but still expanding
    big = np.arange(100)
    new, grew = expand_active(big, [45], du, 0.5, 1, g)
    assert grew and new.tolist() == big.tolist()
