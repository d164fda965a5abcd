import numpy as np
import pytest

from elexsim.linsolve import LuFactors, SingularSystemError, lu_factor, lu_solve


def test_identity_no_pivoting():
    f = lu_factor(np.eye(3))
    assert not f.singular
    assert np.array_equal(f.lu, np.eye(3))


def test_permutation_matrix_pivots_cleanly():
    f = lu_factor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert not f.singular
    x = lu_solve(f, np.array([2.0, 3.0]))
    assert np.allclose(x, [3.0, 2.0])


def test_rank_deficient_flagged_singular():
    f = lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))
    assert f.singular


def test_zero_matrix_singular():
    assert lu_factor(np.zeros((3, 3))).singular


def test_solve_identity():
    f = lu_factor(np.eye(2))
    assert np.array_equal(lu_solve(f, np.array([3.0, 4.0])), [3.0, 4.0])


def test_solve_diagonal():
    f = lu_factor(np.diag([2.0, 4.0]))
    assert np.allclose(lu_solve(f, np.array([2.0, 8.0])), [1.0, 2.0])


def test_solve_on_singular_raises():
    f = lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularSystemError):
        lu_solve(f, np.array([1.0, 1.0]))


def test_recovers_known_solution_8x8():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(8, 8)) + 8 * np.eye(8)
    x_true = rng.normal(size=8)
    x = lu_solve(lu_factor(a), a @ x_true)
    assert np.max(np.abs(x - x_true)) <= 1e-9 * max(1.0, np.max(np.abs(x_true)))


def test_residual_on_well_conditioned_ensemble():
    # 500 random matrices with condition number held below 1e6
    rng = np.random.default_rng(42)
    for trial in range(500):
        n = int(rng.integers(2, 12))
        q1, _ = np.linalg.qr(rng.normal(size=(n, n)))
        q2, _ = np.linalg.qr(rng.normal(size=(n, n)))
        spread = rng.uniform(0, 5)  # condition <= 1e5
        sv = 10.0 ** rng.uniform(-spread / 2, spread / 2, size=n)
        a = q1 @ np.diag(sv) @ q2
        f = lu_factor(a)
        assert not f.singular
        b = rng.normal(size=n)
        x = lu_solve(f, b)
        resid = np.max(np.abs(a @ x - b))
        assert resid <= 1e-9 * max(1.0, np.max(np.abs(b)))


def test_factorization_reconstructs_matrix():
    # P A = L U elementwise within 1e-12 * ||A||_inf
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 6))
    f = lu_factor(a)
    lower = np.tril(f.lu, -1) + np.eye(6)
    upper = np.triu(f.lu)
    pa = a.copy()
    for i, p in enumerate(f.piv):
        pa[[i, p]] = pa[[p, i]]
    norm = np.max(np.abs(a).sum(axis=1))
    assert np.max(np.abs(pa - lower @ upper)) <= 1e-12 * norm


def test_factor_once_solve_many_is_deterministic():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(5, 5)) + 5 * np.eye(5)
    f = lu_factor(a)
    b = rng.normal(size=5)
    x1 = lu_solve(f, b)
    x2 = lu_solve(f, b)
    assert np.array_equal(x1, x2)


def test_empty_system():
    f = lu_factor(np.zeros((0, 0)))
    assert not f.singular
    assert lu_solve(f, np.zeros(0)).shape == (0,)


def test_non_square_rejected():
    with pytest.raises(ValueError):
        lu_factor(np.zeros((2, 3)))
