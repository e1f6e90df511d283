import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp

from locsim.errors import LinearSolverError
from locsim.linsolve import solve


def random_block_system(rng, n, block):
    A = sp.random(n * block, n * block, density=0.05, random_state=rng)
    A = A + sp.diags(np.asarray(abs(A).sum(axis=1)).ravel() + 1.0)
    # strongly varying row scales, as between accumulation and flux rows
    A = sp.diags(10.0 ** rng.uniform(-8, 8, n * block)) @ A
    return A.tocsr(), rng.normal(size=n * block)


@pytest.mark.parametrize("block", [1, 2, 3])
def test_matches_dense_lu(block):
    rng = np.random.default_rng(block)
    for _ in range(5):
        A, F = random_block_system(rng, 40, block)
        du, rep = solve(A, F, block=block, return_report=True)
        ref = la.lu_solve(la.lu_factor(A.toarray()), -F)
        assert np.allclose(du, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())
        assert rep.relative_residual <= 1e-9


def test_zero_rhs_gives_zero_update():
    A = sp.eye(4, format="csr")
    assert np.array_equal(solve(A, np.zeros(4)), np.zeros(4))


def test_empty_row_reports_global_cell():
    A = sp.eye(6, format="lil")
    A[4, 4] = 0.0
    with pytest.raises(LinearSolverError) as info:
        solve(A.tocsr(), np.ones(6), block=2, cells=np.array([10, 11, 12]))
    assert info.value.cell == 12


def test_numerically_singular_matrix():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(LinearSolverError):
        solve(A, np.array([1.0, 1.0]))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        solve(sp.eye(3, format="csr"), np.ones(4))


def test_identity_and_diagonal():
    f = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(solve(sp.eye(3, format="csr"), f), -f)
    d = np.array([2.0, 4.0, 8.0])
    assert np.allclose(solve(sp.diags(d).tocsr(), f), -f / d, rtol=1e-15)


def test_50_by_50_system_against_dense_lu():
    rng = np.random.default_rng(50)
    A = rng.normal(size=(50, 50)) + 20 * np.eye(50)
    F = rng.normal(size=50)
    du = solve(sp.csr_matrix(A), F, block=2)
    assert np.allclose(du, la.solve(A, -F), rtol=1e-10, atol=1e-14)
