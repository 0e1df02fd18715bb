import numpy as np
import pytest

from numpy.testing import assert_allclose

from ttcme.amen import (
    AmenConfig,
    AmenSolver,
    LocalSystem,
    SolveReport,
    als_sweep,
    amen_solve,
    enrich_basis,
    local_solve,
    operator_gram,
    relative_residual,
)
from ttcme.exceptions import LocalSolveError, ShapeMismatchError
from ttcme.qtt import laplace_like_qtt
from ttcme.tt_core import TTVector, from_dense, rank1_matrix, zeros


def spd(rng, n: int, shift: float = 4.0) -> np.ndarray:
    m = rng.standard_normal((n, n))
    return 0.25 * (m + m.T) + shift * np.eye(n)


def kron_chain(mats):
    res = mats[0]
    for m in mats[1:]:
        res = np.kron(res, m)
    return res


@pytest.fixture
def sum_operator(rng):
    """Well conditioned sum of one-dimensional terms on 4**4 states."""
    mats = [spd(rng, 4) for _ in range(4)]
    A = laplace_like_qtt([rank1_matrix([m]) for m in mats])
    eye = np.eye(4)
    dense = sum(kron_chain([m if j == i else eye for j in range(4)]) for i, m in enumerate(mats))
    return A, dense


def random_train(rng, sizes, ranks):
    return TTVector(
        [rng.standard_normal((ranks[k], n, ranks[k + 1])) for k, n in enumerate(sizes)]
    )


def test_local_system_matvec_matches_dense(rng):
    """Test the contraction of the projected operator against its matrix."""
    system = LocalSystem(
        rng.standard_normal((2, 3, 2)),
        rng.standard_normal((3, 4, 4, 2)),
        rng.standard_normal((3, 2, 3)),
    )
    assert system.shape == (2, 4, 3)
    assert system.out_shape == (2, 4, 3)
    v = rng.standard_normal(system.shape)
    assert_allclose(system.matvec(v).reshape(-1), system.dense() @ v.reshape(-1), atol=1e-12)


def test_local_solve_direct(rng):
    M = spd(rng, 6)
    b = rng.standard_normal(6)
    u = local_solve(LocalSystem.from_matrix(M), b, np.zeros(6), AmenConfig())
    assert_allclose(u.reshape(-1), np.linalg.solve(M, b), rtol=1e-10)


def test_local_solve_iterative(rng):
    """Test that systems above the threshold go through GMRES."""
    M = spd(rng, 30, shift=8.0)
    b = rng.standard_normal(30)
    cfg = AmenConfig(tol=1e-8, local_direct_threshold=10)

    report = SolveReport()
    u = local_solve(LocalSystem.from_matrix(M), b, np.zeros(30), cfg, report=report)
    assert report.iterative_solves == 1
    assert report.direct_solves == 0
    assert_allclose(u.reshape(-1), np.linalg.solve(M, b), rtol=1e-6, atol=1e-8)


def test_local_solve_singular():
    with pytest.raises(LocalSolveError) as exc_info:
        local_solve(LocalSystem.from_matrix(np.zeros((3, 3))), np.ones(3), np.zeros(3), AmenConfig(), bond=2)
    assert exc_info.value.bond == 2
    assert "core 3" in str(exc_info.value)


def test_amen_solves_sum_operator(sum_operator, rng):
    """Test the solution of a separable-sum system against the dense solve."""
    A, dense = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    f, report = amen_solve(A, g, cfg=AmenConfig(tol=1e-9))
    assert report.converged
    assert report.residual <= 1e-9
    assert report.sweeps == len(report.max_rank_history)
    assert report.ranks == f.ranks
    expected = np.linalg.solve(dense, g.to_dense().reshape(-1))
    assert_allclose(f.to_dense().reshape(-1), expected, rtol=1e-6, atol=1e-9)


def test_amen_accepts_initial_guess(sum_operator, rng):
    A, dense = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    exact = from_dense(np.linalg.solve(dense, g.to_dense().reshape(-1)).reshape(4, 4, 4, 4))
    f, report = amen_solve(A, g, f0=exact, cfg=AmenConfig(tol=1e-8))
    assert report.converged
    assert report.sweeps <= 2


def test_zero_right_hand_side(sum_operator):
    A, _ = sum_operator
    f, report = amen_solve(A, zeros((4, 4, 4, 4)))
    assert report.converged
    assert report.residual == 0.0
    assert f.max_rank == 1
    assert np.all(f.to_dense() == 0.0)


def test_shape_mismatch(sum_operator, rng):
    A, _ = sum_operator
    with pytest.raises(ShapeMismatchError):
        amen_solve(A, zeros((4, 4, 4)))
    g = random_train(rng, (4, 4, 4, 4), (1, 1, 1, 1, 1))
    with pytest.raises(ShapeMismatchError):
        amen_solve(A, g, f0=zeros((4, 4, 4, 2)))


def test_rank_cap_is_reported(sum_operator, rng, mocker):
    """Test that a binding rmax stops short and says so."""
    A, _ = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 3, 3, 3, 1))
    logger = mocker.Mock()
    f, report = AmenSolver(AmenConfig(tol=1e-12, rmax=1, max_sweeps=4), logger).solve(A, g)
    assert f.max_rank == 1
    assert report.rank_capped
    assert not report.converged
    logger.warning.assert_called_once()


def test_relative_residual_and_gram(sum_operator, rng):
    """Test residual and ‖Af‖² against dense values."""
    A, dense = sum_operator
    f = random_train(rng, (4, 4, 4, 4), (1, 2, 3, 2, 1))
    g = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    af = dense @ f.to_dense().reshape(-1)
    gd = g.to_dense().reshape(-1)
    assert operator_gram(A, f) == pytest.approx(float(af @ af), rel=1e-10)
    expected = np.linalg.norm(af - gd) / np.linalg.norm(gd)
    assert relative_residual(A, f, g) == pytest.approx(expected, rel=1e-8)
    assert relative_residual(A, f, zeros(g.mode_sizes)) == 0.0


def test_relative_residual_of_exact_solution(sum_operator, rng):
    A, dense = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 1, 1, 1, 1))
    f = from_dense(np.linalg.solve(dense, g.to_dense().reshape(-1)).reshape(4, 4, 4, 4))
    assert relative_residual(A, f, g) < 1e-10


def test_als_sweep_with_full_rank_guess(rng):
    """Test that one ALS pass is exact when the frames span the whole space."""
    M1, M2 = spd(rng, 3), spd(rng, 3)
    A = rank1_matrix([M1, M2])
    g = random_train(rng, (3, 3), (1, 3, 1))
    guess = random_train(rng, (3, 3), (1, 3, 1))
    f = als_sweep(A, g, guess)
    assert f.ranks == (1, 3, 1)
    expected = np.linalg.solve(np.kron(M1, M2), g.to_dense().reshape(-1))
    assert_allclose(f.to_dense().reshape(-1), expected, rtol=1e-8, atol=1e-10)


def test_als_sweep_lowers_energy_error(sum_operator, rng):
    """Test that a pass keeps ranks and reduces the A-norm error."""
    A, dense = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    guess = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    exact = np.linalg.solve(dense, g.to_dense().reshape(-1))

    def energy_error(f):
        e = f.to_dense().reshape(-1) - exact
        return float(e @ dense @ e)

    f = als_sweep(A, g, guess)
    assert f.ranks == guess.ranks
    assert energy_error(f) < energy_error(guess)
    with pytest.raises(ShapeMismatchError):
        als_sweep(A, g, zeros((4, 4, 4)))


def test_enrich_basis_keeps_the_product(rng):
    """Test that new directions enter with zero weight."""
    basis = np.linalg.qr(rng.standard_normal((12, 3)))[0]
    carry = rng.standard_normal((3, 5))
    new_basis, new_carry = enrich_basis(basis, carry, rng.standard_normal((12, 2)))
    assert new_basis.shape == (12, 5)
    assert new_carry.shape == (5, 5)
    assert_allclose(new_basis.T @ new_basis, np.eye(5), atol=1e-12)
    assert_allclose(new_basis @ new_carry, basis @ carry, atol=1e-12)
    # fewer rows than columns caps the rank
    small = np.linalg.qr(rng.standard_normal((4, 3)))[0]
    capped, capped_carry = enrich_basis(small, carry, rng.standard_normal((4, 2)))
    assert capped.shape == (4, 4)
    assert_allclose(capped @ capped_carry, small @ carry, atol=1e-12)


def test_enriched_pass_adds_rank_and_keeps_frames_orthonormal(sum_operator, rng):
    """Test the bond ranks and left frames after one enriched pass from a rank-1 guess."""
    A, _ = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    cfg = AmenConfig(tol=1e-14, max_sweeps=1, truncate=False, enrich_rank=2)
    f, report = AmenSolver(cfg).solve(A, g)
    # every local solution has rank 1, enrichment adds exactly 2
    assert f.ranks == (1, 3, 3, 3, 1)
    assert report.max_rank_history == [3]
    for core in f.cores[:-1]:
        q = core.reshape(-1, core.shape[2])
        assert_allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-10)


def test_backward_pass_leaves_right_frames_orthonormal(sum_operator, rng):
    A, _ = sum_operator
    g = random_train(rng, (4, 4, 4, 4), (1, 2, 2, 2, 1))
    f, _ = AmenSolver(AmenConfig(tol=1e-14, max_sweeps=2)).solve(A, g)
    for core in f.cores[1:]:
        q = core.reshape(core.shape[0], -1)
        assert_allclose(q @ q.T, np.eye(q.shape[0]), atol=1e-10)
