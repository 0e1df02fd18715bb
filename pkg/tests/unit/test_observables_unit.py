import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy import stats

from ttcme.amen import AmenConfig
from ttcme.cme_model import assemble_cme, delta_initial, quantization_map, rank1_state
from ttcme.exceptions import InvalidTensorError
from ttcme.observables import (
    marginal,
    mean_copy_numbers,
    mean_vs_parameter,
    residual_norm,
    time_profiles,
    total_mass,
)
from ttcme.oracle import dense_marginal, dense_means
from ttcme.qtt import QuantizationMap, dequantize, qtt_from_1d, quantize
from ttcme.time_integration import Propagator, TimeGrid
from ttcme.tt_core import from_dense, kron, ones, rank1, zeros


@pytest.fixture
def dense_state(rng):
    P = rng.random((8, 4, 8))
    return P / P.sum()


@pytest.fixture
def qmap():
    return QuantizationMap(bits=(3, 2, 3))


def test_total_mass(dense_state, qmap):
    P = quantize(from_dense(dense_state), qmap)
    assert total_mass(P) == pytest.approx(1.0)
    assert total_mass(ones([2, 3])) == 6.0


def test_means_match_dense(dense_state, qmap):
    """Test means over quantized species against direct sums."""
    P = quantize(from_dense(dense_state), qmap)
    assert_allclose(mean_copy_numbers(P, qmap), dense_means(dense_state, (8, 4, 8)), rtol=1e-10)
    assert_allclose(
        mean_copy_numbers(from_dense(dense_state)), dense_means(dense_state, (8, 4, 8)), rtol=1e-10
    )


def test_means_are_normalized_by_mass(dense_state, qmap):
    P = quantize(from_dense(3.0 * dense_state), qmap)
    assert_allclose(mean_copy_numbers(P, qmap), dense_means(dense_state, (8, 4, 8)), rtol=1e-10)


def test_marginals_match_dense(dense_state, qmap):
    P = quantize(from_dense(dense_state), qmap)
    for i in range(3):
        assert_allclose(
            marginal(P, i, qmap), dense_marginal(dense_state, (8, 4, 8), i), rtol=1e-10
        )
    assert_allclose(marginal(from_dense(dense_state), 1), dense_marginal(dense_state, (8, 4, 8), 1))


def test_zero_mass_and_bad_species(qmap):
    P = quantize(zeros([8, 4, 8]), qmap)
    with pytest.raises(InvalidTensorError):
        mean_copy_numbers(P, qmap)
    with pytest.raises(InvalidTensorError):
        marginal(P, 0, qmap)
    with pytest.raises(InvalidTensorError) as exc_info:
        marginal(quantize(ones([8, 4, 8]), qmap), 3, qmap)
    assert "out of range" in str(exc_info.value)
    with pytest.raises(InvalidTensorError):
        mean_copy_numbers(ones([2, 2]), qmap)


def test_mean_vs_parameter(rng):
    """Test per-slice means of a state with a trailing parameter mode."""
    dense = rng.random((4, 8, 3))
    qmap = QuantizationMap(bits=(2, 3, None))
    P = quantize(from_dense(dense), qmap)
    table = mean_vs_parameter(P, qmap)
    assert table.shape == (3, 2)
    for j in range(3):
        assert_allclose(table[j], dense_means(dense[..., j], (4, 8)), rtol=1e-10)
    # the parameter mode is not a species
    assert mean_copy_numbers(P, qmap).shape == (2,)


def test_mean_vs_parameter_without_parameter(dense_state, qmap):
    P = quantize(from_dense(dense_state), qmap)
    assert_allclose(mean_vs_parameter(P, qmap), mean_copy_numbers(P, qmap)[None, :])


def test_residual_of_stationary_birth_death(make_birth_death):
    """Test that the Poisson stationary state has a residual near zero."""
    system = make_birth_death(bits=6)
    A = assemble_cme(system)
    poisson = stats.poisson.pmf(np.arange(64), 10.0)
    P = rank1_state([poisson], system)
    assert residual_norm(A, P) < 1e-6
    delta = rank1_state([np.eye(64)[0]], system)
    assert residual_norm(A, delta) == pytest.approx(0.7 * np.sqrt(2.0), rel=0.02)
    with pytest.raises(InvalidTensorError):
        residual_norm(A, zeros(P.mode_sizes))


def test_time_profiles(dense_state, qmap):
    """Test per-step masses and means of a separable space-time tensor."""
    weights = np.array([1.0, 0.5, 0.25, 2.0])
    P = quantize(from_dense(dense_state), qmap)
    X = kron(qtt_from_1d(weights), P)
    masses, means = time_profiles(X, qmap, 2)
    assert_allclose(masses, weights, rtol=1e-10)
    expected = dense_means(dense_state, (8, 4, 8))
    assert means.shape == (4, 3)
    for row in means:
        assert_allclose(row, expected, rtol=1e-10)


def test_time_profiles_single_step(dense_state, qmap):
    P = quantize(from_dense(dense_state), qmap)
    X = kron(rank1([np.ones(1)]), P)
    masses, means = time_profiles(X, qmap, 0)
    assert masses.shape == (1,)
    assert_allclose(means[0], mean_copy_numbers(P, qmap), rtol=1e-10)
    assert_allclose(dequantize(P, qmap).to_dense(), dense_state, atol=1e-12)


def test_mass_leaks_monotonically_along_a_trajectory(make_birth_death):
    """Test that the truncated box only loses probability during propagation."""
    system = make_birth_death(bits=3)
    slack = 1e-8
    traj = Propagator(AmenConfig(tol=1e-10)).propagate(
        assemble_cme(system),
        delta_initial(system),
        TimeGrid(T=8.0, T0=2.0, Nt=16),
        quantization_map(system),
        per_step=True,
    )
    for masses in (traj.masses, traj.step_masses):
        assert all(0.0 <= m <= 1.0 + slack for m in masses)
        assert all(m1 <= m0 + slack for m0, m1 in zip(masses, masses[1:]))
    assert traj.masses[0] == pytest.approx(1.0)
    # the mean of 10 does not fit into 8 states
    assert traj.masses[-1] < 0.95
    assert traj.step_masses[-1] == pytest.approx(traj.masses[-1], rel=1e-6)
