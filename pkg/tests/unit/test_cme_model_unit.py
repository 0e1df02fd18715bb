import numpy as np
import pytest

from numpy.testing import assert_allclose
from scipy import stats

from ttcme.cme_model import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    assemble_cascade,
    assemble_cme,
    assemble_heisenberg,
    cascade_parts,
    check_propensities,
    delta_initial,
    exp_uniform_grid,
    extend_parametric,
    multinomial_block,
    multinomial_initial,
    propensity_tt,
    quantization_map,
    rank1_state,
    replicate_parametric,
)
from ttcme.config import bundled_model_path, load_config
from ttcme.exceptions import InvalidTensorError, PatternError, PropensityError
from ttcme.observables import total_mass
from ttcme.oracle import dense_cme, propensity_values
from ttcme.qtt import QuantizationMap, cross_ranks, dequantize, dequantize_matrix
from ttcme.reactions import PropensityFactor, PropensitySpec, Reaction, ReactionSystem, Species
from ttcme.tt_core import Tolerance, fix_matrix_mode, fix_mode


def relative_error(A, B):
    return np.linalg.norm(A - B) / np.linalg.norm(B)


def dense_operator(A, system):
    return dequantize_matrix(A, quantization_map(system)).to_dense()


def test_quantization_map(make_toggle):
    system = make_toggle(bits=4, parameter_values=[1e-6, 1e-4])
    assert quantization_map(system).bits == (4, 4, None)


def test_exp_uniform_grid():
    """Test that endpoints are kept and tracked values are merged in order."""
    grid = exp_uniform_grid(1e-6, 1e-2, 5, tracked=[3e-5])
    assert grid.size == 6
    assert grid[0] == pytest.approx(1e-6)
    assert grid[-1] == pytest.approx(1e-2)
    assert 3e-5 in grid
    assert np.all(np.diff(grid) > 0)
    assert_allclose(np.diff(np.log(exp_uniform_grid(1.0, 16.0, 5))), np.log(2.0))
    with pytest.raises(ValueError):
        exp_uniform_grid(1e-2, 1e-6, 5)


def test_propensity_matches_oracle(cascade3):
    """Test that QTT propensities equal their grid tables and stay rank 1."""
    qmap = quantization_map(cascade3)
    for m in range(len(cascade3.reactions)):
        w = propensity_tt(cascade3.reactions[m], cascade3)
        assert set(cross_ranks(w, qmap)) == {1}
        dense = dequantize(w, qmap).to_dense()
        assert relative_error(dense, propensity_values(cascade3, m)) <= 1e-11


def test_coupled_propensity_matches_table(make_toggle):
    """Test the compressed parameter-coupled propensity against direct tabulation."""
    values = exp_uniform_grid(1e-6, 1e-2, 6)
    system = make_toggle(bits=8, parameter_values=values)
    w = propensity_tt(system.reactions[2], system, Tolerance(eps=1e-10))
    dense = dequantize(w, quantization_map(system)).to_dense()
    _, table = system.coupled_table(system.reactions[2])
    expected = np.broadcast_to(table[:, None, :], dense.shape)
    assert relative_error(dense, expected) <= 2e-10


def test_generic_assembly_matches_oracle(cascade3, toggle_small):
    """Test the QTT generator against the sparse reference assembly."""
    for system in (cascade3, toggle_small):
        A = assemble_cme(system)
        reference = dense_cme(system).toarray()
        assert relative_error(dense_operator(A, system), reference) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_random_small_systems_match_oracle(seed):
    """Test generic assembly on random monomolecular and bimolecular networks."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 4))
    names = [f"s{i}" for i in range(d)]
    reactions = []
    for m in range(4):
        target = names[int(rng.integers(d))]
        other = names[int(rng.integers(d))]
        change = {target: int(rng.choice([-1, 1]))}
        if other != target and rng.random() < 0.5:
            change[other] = int(rng.choice([-1, 1]))
        factors = [
            PropensityFactor(
                kind="saturation", dims=[other], params={"a": rng.uniform(0.1, 2.0), "b": 1.0}
            )
        ]
        if change[target] < 0:
            factors.append(PropensityFactor(kind="linear", dims=[target], params={"c": 0.3}))
        reactions.append(
            Reaction(name=f"r{m}", stoichiometry=change, propensity=PropensitySpec(factors=factors))
        )
    system = ReactionSystem(
        species=[Species(name=n, bits=int(rng.integers(1, 4))) for n in names], reactions=reactions
    )
    A = assemble_cme(system, tol=Tolerance(eps=1e-13))
    assert relative_error(dense_operator(A, system), dense_cme(system).toarray()) <= 1e-10


def test_generator_columns_sum_to_zero_inside(toggle_small):
    """Test conservation: columns away from the upper boundary sum to zero."""
    dense = dense_operator(assemble_cme(toggle_small), toggle_small)
    sums = dense.sum(axis=0).reshape(32, 32)
    assert_allclose(sums[:-1, :-1], 0.0, atol=1e-9)


def test_cascade_assembly_matches_generic(cascade3, make_cascade):
    """Test the explicit cascade construction against generic assembly."""
    for system in (cascade3, make_cascade(4, 3)):
        generic = dense_operator(assemble_cme(system), system)
        explicit = dense_operator(assemble_cascade(system), system)
        assert relative_error(explicit, generic) <= 1e-10


def test_toggle_shape_uses_cascade_pattern(toggle_small):
    explicit = dense_operator(assemble_cascade(toggle_small), toggle_small)
    assert relative_error(explicit, dense_cme(toggle_small).toarray()) <= 1e-12


def test_cascade_rank_five_and_four(make_cascade):
    """Test the exact rank-5 construction and its rank-4 rounding."""
    system = make_cascade(20, 6)
    qmap = quantization_map(system)
    A = assemble_cascade(system)
    exact = cross_ranks(A, qmap)
    assert len(exact) == 19
    assert max(exact) == 5
    rounded = cross_ranks(A.round(Tolerance(eps=1e-12)), qmap)
    assert max(rounded) <= 4


def test_destruction_part_has_rank_two(make_cascade):
    system = make_cascade(20, 6)
    _, laplace = cascade_parts(system)
    assert set(cross_ranks(laplace, quantization_map(system))) == {2}


def test_cascade_pattern_errors(make_cascade, make_toggle):
    """Test that non-neighbour and multi-species reactions are refused."""
    system = make_cascade(3, 2)
    far = Reaction(
        name="far",
        stoichiometry={"S3": 1},
        propensity=PropensitySpec(
            factors=[PropensityFactor(kind="linear", dims=["S1"], params={"c": 1.0})]
        ),
    )
    with pytest.raises(PatternError) as exc_info:
        assemble_cascade(system.model_copy(update={"reactions": [*system.reactions, far]}))
    assert exc_info.value.reaction == "far"
    swap = Reaction(name="swap", stoichiometry={"S1": -1, "S2": 1})
    with pytest.raises(PatternError):
        assemble_cascade(system.model_copy(update={"reactions": [swap]}))
    with pytest.raises(PatternError):
        assemble_cascade(make_toggle(bits=2, parameter_values=[1e-5]))


def test_parametric_operator_slices(make_toggle):
    """Test that each parameter slice is the operator at that parameter value."""
    values = (1e-6, 3e-5, 1e-3, 1e-2)
    system = make_toggle(bits=3, parameter_values=values)
    A = assemble_cme(system)
    plain = QuantizationMap(bits=system.grid_bits)
    for j in range(len(values)):
        block = dequantize_matrix(fix_matrix_mode(A, A.d - 1, j), plain).to_dense()
        assert relative_error(block, dense_cme(system, j).toarray()) <= 1e-10


def test_extend_parametric_matches_coupled_assembly(make_toggle):
    """Test block-diagonal extension from per-value operators."""
    system = make_toggle(bits=3, parameter_values=(1e-6, 1e-4, 1e-2))
    pieces = [assemble_cme(system.at_parameter(j)) for j in range(3)]
    extended = extend_parametric(pieces, system, Tolerance(eps=1e-13))
    coupled = assemble_cme(system)
    assert relative_error(dense_operator(extended, system), dense_operator(coupled, system)) <= 1e-10
    with pytest.raises(InvalidTensorError):
        extend_parametric(pieces[:2], system)


@pytest.mark.parametrize(
    "couplings, bound",
    [((1.0, 0.8, 0.6, 0.3), 7), ((1.0, 0.8, 0.0, 0.3), 6), ((0.0, 0.0, 1.0, 0.3), 5)],
)
def test_heisenberg_ranks(couplings, bound):
    """Test the rank bounds of the Heisenberg, XY and Ising chains."""
    H = assemble_heisenberg(10, *couplings)
    assert H.max_rank <= bound
    assert H.ranks[5] == bound


def test_lphage_operator_rank():
    """Test the rank bound of the bundled lambda-phage operator after rounding."""
    cfg = load_config(bundled_model_path("lphage"))
    system = cfg.system()
    A = assemble_cme(system, tol=Tolerance(eps=1e-10))
    assert max(cross_ranks(A, quantization_map(system))) <= 7


def test_heisenberg_small_chain_is_dense_sum():
    d, (jx, jy, jz, field) = 3, (1.0, 0.5, -0.7, 0.2)
    eye = np.eye(2)

    def site(op, k):
        mats = [op if i == k else eye for i in range(d)]
        return np.kron(np.kron(mats[0], mats[1]), mats[2])

    expected = sum(
        j * site(s, k) @ site(s, k + 1)
        for k in range(d - 1)
        for j, s in ((jx, PAULI_X), (jy, PAULI_Y), (jz, PAULI_Z))
    ) + field * sum(site(PAULI_X, k) for k in range(d))
    H = assemble_heisenberg(d, jx, jy, jz, field).to_dense()
    assert_allclose(H, expected, atol=1e-12)
    assert_allclose(H, H.conj().T, atol=1e-12)
    with pytest.raises(InvalidTensorError):
        assemble_heisenberg(1, 1.0, 1.0, 1.0, 0.0)


def test_delta_initial(cascade3, make_toggle):
    P = delta_initial(cascade3, [1, 0, 2])
    assert P.max_rank == 1
    dense = dequantize(P, quantization_map(cascade3)).to_dense()
    assert dense[1, 0, 2] == 1.0
    assert dense.sum() == 1.0
    parametric = make_toggle(bits=2, parameter_values=[1e-6, 1e-5, 1e-4])
    Q = delta_initial(parametric)
    assert Q.mode_sizes[-1] == 3
    assert total_mass(Q) == pytest.approx(3.0)
    with pytest.raises(InvalidTensorError):
        delta_initial(cascade3, [0, 0])


def test_multinomial_block():
    """Test the pmf against scipy on the simplex and zero outside it."""
    p = np.array([0.05] * 5)
    block = multinomial_block(3, p)
    assert block.shape == (4,) * 5
    assert block.sum() == pytest.approx(1.0)
    expected = stats.multinomial.pmf([1, 0, 2, 0, 0, 0], 3, [*p, 0.75])
    assert block[1, 0, 2, 0, 0] == pytest.approx(expected)
    assert block[3, 1, 0, 0, 0] == 0.0


def test_multinomial_initial():
    """Test the padded, quantized multinomial start of the phage model."""
    names = ["S1", "S2", "S3", "S4", "S5"]
    system = ReactionSystem(
        species=[Species(name=n, bits=b) for n, b in zip(names, (4, 6, 4, 4, 4))],
        reactions=[Reaction(name="r", stoichiometry={"S1": 1})],
    )
    P = multinomial_initial(3, [0.05] * 5, system)
    assert total_mass(P) == pytest.approx(1.0, abs=1e-12)
    assert max(cross_ranks(P, quantization_map(system))) <= 4
    with pytest.raises(InvalidTensorError):
        multinomial_initial(20, [0.05] * 5, system)
    with pytest.raises(InvalidTensorError):
        multinomial_initial(3, [0.5] * 5, system)


def test_replicate_and_rank1_state(make_toggle):
    system = make_toggle(bits=2, parameter_values=[1e-6, 1e-3])
    P = rank1_state([np.full(4, 0.25), np.eye(4)[0]], system)
    assert P.mode_sizes == (2, 2, 2, 2, 2)
    assert total_mass(P) == pytest.approx(2.0)
    assert replicate_parametric(P, make_toggle(bits=2)) is P
    dense = dequantize(P, quantization_map(system)).to_dense()
    assert_allclose(dense[:, 0, 1], 0.25)
    assert_allclose(fix_mode(dequantize(P, quantization_map(system)), 2, 0).to_dense()[:, 1:], 0.0)


def test_check_propensities(make_birth_death):
    system = make_birth_death(bits=2)
    check_propensities(system)
    bad = system.model_copy(
        update={
            "reactions": [
                Reaction(
                    name="bad",
                    stoichiometry={"X": 1},
                    propensity=PropensitySpec(
                        factors=[PropensityFactor(kind="linear", dims=["X"], params={"c": -1.0})]
                    ),
                )
            ]
        }
    )
    with pytest.raises(PropensityError):
        check_propensities(bad)
