"""Structured assembly of chemical master equation operators in QTT.

The generator is ``A = Σ_m (J**z_m - I)·diag(w_m)`` with ``z_m`` the shift
vector of reaction ``m``. The finite state projection is kept leaky: inflow
from outside the box is dropped and mass deficiency is monitored, not
prevented.
"""

from typing import Optional, Sequence

import numpy as np

from scipy import stats

from ttcme.exceptions import InvalidTensorError, PatternError, PropensityError
from ttcme.log import get_default_logger
from ttcme.qtt import (
    QuantizationMap,
    block_chain,
    kron_all,
    laplace_like_qtt,
    qtt_delta,
    qtt_from_1d,
    qtt_identity,
    qtt_shift_power,
    quantize,
)
from ttcme.reactions import Reaction, ReactionSystem
from ttcme.tt_core import (
    EXACT,
    Tolerance,
    TTMatrix,
    TTVector,
    add,
    diag,
    from_dense,
    identity,
    kron,
    matmul,
    ones,
    rank1_matrix,
    scale,
    truncation_rank,
)


logger = get_default_logger("ttcme.cme_model")

PAULI_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
PAULI_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
PAULI_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


def quantization_map(sys: ReactionSystem) -> QuantizationMap:
    """Species bits followed by an unquantized parameter mode when present."""
    bits: list[Optional[int]] = list(sys.grid_bits)
    if sys.parameter is not None:
        bits.append(None)
    return QuantizationMap(bits=tuple(bits))


def exp_uniform_grid(
    lo: float, hi: float, points: int, tracked: Sequence[float] = ()
) -> np.ndarray:
    """Log-uniform grid on ``[lo, hi]`` with both endpoints, plus tracked values."""
    if not 0 < lo < hi:
        raise ValueError(f"exp-uniform grid needs 0 < min < max, got {lo}, {hi}")
    if points < 2:
        raise ValueError("exp-uniform grid needs at least 2 points")
    grid = np.geomspace(lo, hi, points)
    return np.unique(np.concatenate([grid, np.asarray(tracked, dtype=float)]))


def _species_vectors(sys: ReactionSystem, reaction: Reaction) -> list[np.ndarray]:
    tables = sys.univariate_tables(reaction)
    vectors = [tables.get(i, np.ones(n)) for i, n in enumerate(sys.grid_sizes)]
    vectors[0] = vectors[0] * sys.scalar_rate(reaction)
    return vectors


def propensity_tt(
    reaction: Reaction, sys: ReactionSystem, tol: Tolerance = Tolerance(eps=1e-12)
) -> TTVector:
    """Propensity of ``reaction`` on the grid, in QTT over all species bits.

    Univariate factors give a rank-1 product across dimensions. A
    parameter-coupled factor ``(N_i × N_y)`` is compressed by SVD at ``tol``
    and its rank is carried by identity channels up to the trailing
    parameter mode.

    Raises:
        PropensityError: If the propensity is negative or non-finite on the grid
    """
    vectors = _species_vectors(sys, reaction)
    coupled = sys.coupled_table(reaction)
    if coupled is None:
        cores = [v.reshape(1, -1, 1) for v in vectors]
        if sys.parameter is not None:
            cores.append(np.ones((1, sys.parameter.size, 1)))
        return quantize(TTVector(cores), quantization_map(sys), tol)

    dim, table = coupled
    u, s, vt = np.linalg.svd(table, full_matrices=False)
    k = truncation_rank(s, tol.eps * np.linalg.norm(s), None, table.shape)
    left, right = u[:, :k], s[:k, None] * vt[:k]
    cores = []
    for i, v in enumerate(vectors):
        if i < dim:
            cores.append(v.reshape(1, -1, 1))
        elif i == dim:
            cores.append((v[:, None] * left).reshape(1, -1, k))
        else:
            cores.append(np.einsum("x,ab->axb", v, np.eye(k)))
    cores.append(right.reshape(k, -1, 1))
    logger.debug(f"reaction {reaction.name}: parameter coupling rank {k}")
    return quantize(TTVector(cores), quantization_map(sys), tol)


def shift_operator(sys: ReactionSystem, z: np.ndarray) -> TTMatrix:
    """Rank-1 Kronecker chain of per-dimension QTT shifts."""
    parts = [qtt_shift_power(int(zi), bits) for zi, bits in zip(z, sys.grid_bits)]
    return kron_all(parts)


def with_parameter_identity(A: TTMatrix, sys: ReactionSystem) -> TTMatrix:
    """Append an identity on the parameter mode (parameter-independent terms)."""
    if sys.parameter is None:
        return A
    return kron(A, identity([sys.parameter.size]))


def reaction_term(
    reaction: Reaction, sys: ReactionSystem, tol: Tolerance = Tolerance(eps=1e-12)
) -> TTMatrix:
    """``(J**z - I)·diag(w)`` for one reaction."""
    w = diag(propensity_tt(reaction, sys, tol))
    shift = with_parameter_identity(shift_operator(sys, sys.shift(reaction)), sys)
    return add(matmul(shift, w), w, 1.0, -1.0)


def assemble_cme(
    sys: ReactionSystem,
    tol: Optional[Tolerance] = None,
    propensity_tol: Tolerance = Tolerance(eps=1e-12),
) -> TTMatrix:
    """Generic assembly of the CME generator in QTT.

    Before rounding, the bond rank between two dimensions is at most
    ``Σ_m 2·trank(w_m)``. With ``tol`` the sum is rounded after each term.

    Args:
        sys (ReactionSystem): Reaction system
        tol (Optional[Tolerance]): Rounding of the assembled operator
        propensity_tol (Tolerance): Compression accuracy of the propensities

    Returns:
        TTMatrix: Operator over the species bits (and the parameter mode)
    """
    total: Optional[TTMatrix] = None
    for reaction in sys.reactions:
        term = reaction_term(reaction, sys, propensity_tol)
        total = term if total is None else add(total, term)
        if tol is not None:
            total = total.round(tol)
    logger.debug(f"assembled {sys.name}: ranks {total.ranks}")
    return total


def extend_parametric(
    pieces: Sequence[TTMatrix], sys: ReactionSystem, tol: Optional[Tolerance] = None
) -> TTMatrix:
    """Block-diagonal operator acting as ``pieces[j]`` on parameter slice ``j``.

    Raises:
        InvalidTensorError: If no parameter grid is declared or sizes differ
    """
    if sys.parameter is None:
        raise InvalidTensorError("extend_parametric needs a parameter grid")
    n_y = sys.parameter.size
    if len(pieces) != n_y:
        raise InvalidTensorError(f"expected {n_y} parameter slices, got {len(pieces)}")
    if n_y == 1:
        return kron(pieces[0], identity([1]))
    total: Optional[TTMatrix] = None
    for j, piece in enumerate(pieces):
        selector = np.zeros((n_y, n_y))
        selector[j, j] = 1.0
        term = kron(piece, rank1_matrix([selector]))
        total = term if total is None else add(total, term)
        if tol is not None:
            total = total.round(tol)
    return total


def _cascade_pair(
    sys: ReactionSystem, reaction: Reaction
) -> tuple[int, Optional[int], np.ndarray, dict[int, np.ndarray]]:
    """Validate the cascade pattern for one reaction.

    Returns the changed species, the neighbour it reads (or None), the
    change and the univariate tables.
    """
    if sys.parameter is not None:
        raise PatternError("parameter-coupled systems do not have the cascade pattern")
    change = sys.change(reaction)
    changed = np.flatnonzero(change)
    if changed.size != 1 or abs(change[changed[0]]) != 1:
        raise PatternError("must change exactly one species by ±1", reaction.name)
    m = int(changed[0])
    deps = sys.dependencies(reaction) - {m}
    if len(deps) > 1:
        raise PatternError("reads more than one other species", reaction.name)
    neighbour = deps.pop() if deps else None
    if neighbour is not None and abs(neighbour - m) != 1:
        raise PatternError("reads a species that is not a neighbour", reaction.name)
    return m, neighbour, change, sys.univariate_tables(reaction)


def _cascade_blocks(
    sys: ReactionSystem, reaction: Reaction
) -> tuple[int, Optional[int], TTMatrix, Optional[TTMatrix], bool]:
    m, neighbour, change, tables = _cascade_pair(sys, reaction)
    bits = sys.grid_bits
    own = tables.get(m, np.ones(sys.grid_sizes[m])) * sys.scalar_rate(reaction)
    shift = add(qtt_shift_power(int(-change[m]), bits[m]), qtt_identity(bits[m]), 1.0, -1.0)
    acting = matmul(shift, diag(qtt_from_1d(own)))
    other = None
    if neighbour is not None:
        other = diag(qtt_from_1d(tables[neighbour]))
    return m, neighbour, acting, other, bool(change[m] > 0)


def cascade_parts(sys: ReactionSystem) -> tuple[Optional[TTMatrix], Optional[TTMatrix]]:
    """Coupled (creation and neighbour-coupled) part and Laplace-like part.

    The coupled part is an exact nearest-neighbour chain with one pending
    state per coupled reaction crossing a bond; the Laplace-like part holds
    local terms of reactions that lower a copy number.

    Raises:
        PatternError: If a reaction is not nearest-neighbour monomolecular
    """
    d = sys.d
    local: list[Optional[TTMatrix]] = [None] * d
    lap: list[Optional[TTMatrix]] = [None] * d
    pairs: dict[int, list[tuple[TTMatrix, TTMatrix]]] = {}
    coupled_terms = 0
    for reaction in sys.reactions:
        m, neighbour, acting, other, creation = _cascade_blocks(sys, reaction)
        if neighbour is None:
            target = local if creation else lap
            target[m] = acting if target[m] is None else add(target[m], acting)
            coupled_terms += creation
        elif neighbour < m:
            pairs.setdefault(neighbour, []).append((other, acting))
            coupled_terms += 1
        else:
            pairs.setdefault(m, []).append((acting, other))
            coupled_terms += 1
    coupled = None
    if coupled_terms:
        coupled = block_chain(
            [op if op is not None else _zero_like(sys, i) for i, op in enumerate(local)],
            pairs,
        )
    laplace = None
    if any(op is not None for op in lap):
        laplace = laplace_like_qtt(
            [op if op is not None else _zero_like(sys, i) for i, op in enumerate(lap)]
        )
    return coupled, laplace


def _zero_like(sys: ReactionSystem, i: int) -> TTMatrix:
    return scale(qtt_identity(sys.grid_bits[i]), 0.0)


def assemble_cascade(sys: ReactionSystem) -> TTMatrix:
    """Exact low-rank assembly for nearest-neighbour monomolecular networks.

    No SVD is involved. For a cascade (creation of species ``m`` reading
    species ``m - 1``, destruction reading species ``m``) the coupled part
    has bond rank 3 and the Laplace-like part rank 2, so the sum has rank 5
    between dimensions.

    Raises:
        PatternError: If the system does not follow the pattern
    """
    coupled, laplace = cascade_parts(sys)
    if coupled is None:
        return laplace
    if laplace is None:
        return coupled
    return add(coupled, laplace)


def assemble_heisenberg(
    d: int, jx: float, jy: float, jz: float, field: float
) -> TTMatrix:
    """Spin chain ``Σ_k Σ_a j_a σ_a^k σ_a^(k+1) + field·Σ_k σ_x^k`` (complex).

    The pair part has bond rank ``2 + #{j_a != 0}`` and the field part rank 2,
    giving at most 7 for the full model, 6 without ``jz`` and 5 for the
    Ising case.

    Raises:
        InvalidTensorError: If ``d < 2``
    """
    if d < 2:
        raise InvalidTensorError("a spin chain needs at least 2 sites")
    paulis = [(jx, PAULI_X), (jy, PAULI_Y), (jz, PAULI_Z)]
    active = [(j, s) for j, s in paulis if j != 0.0]
    zero = rank1_matrix([np.zeros((2, 2), dtype=complex)])
    parts: list[TTMatrix] = []
    if active:
        pairs = {
            k: [(rank1_matrix([j * s]), rank1_matrix([s])) for j, s in active]
            for k in range(d - 1)
        }
        parts.append(block_chain([zero] * d, pairs))
    if field != 0.0:
        parts.append(laplace_like_qtt([rank1_matrix([field * PAULI_X])] * d))
    if not parts:
        return block_chain([zero] * d)
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


def delta_initial(sys: ReactionSystem, state: Optional[Sequence[int]] = None) -> TTVector:
    """Point mass at ``state`` (the origin by default), rank 1 in QTT."""
    state = [0] * sys.d if state is None else list(state)
    if len(state) != sys.d:
        raise InvalidTensorError(f"state has {len(state)} entries for d={sys.d}")
    parts = [qtt_delta(int(x), bits) for x, bits in zip(state, sys.grid_bits)]
    return replicate_parametric(kron_all(parts), sys)


def replicate_parametric(P: TTVector, sys: ReactionSystem) -> TTVector:
    """Copy a state over every parameter slice."""
    if sys.parameter is None:
        return P
    return kron(P, ones([sys.parameter.size]))


def multinomial_initial(
    n: int, p: Sequence[float], sys: ReactionSystem, tol: Tolerance = EXACT
) -> TTVector:
    """Multinomial distribution of ``n`` molecules over the species.

    The dense ``(n+1)**d`` block is TT-compressed (ranks at most ``n + 1``),
    zero-padded to the grid and quantized.

    Raises:
        InvalidTensorError: If the support exceeds the grid or ``Σp > 1``
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (sys.d,):
        raise InvalidTensorError(f"need {sys.d} probabilities, got {p.shape}")
    if np.any(p < 0) or p.sum() > 1.0 + 1e-14:
        raise InvalidTensorError("probabilities must be nonnegative with sum at most 1")
    for i, size in enumerate(sys.grid_sizes):
        if n + 1 > size:
            raise InvalidTensorError(
                f"multinomial support {n + 1} exceeds grid of species {i + 1} ({size})"
            )
    block = multinomial_block(n, p)
    compact = from_dense(block, Tolerance(eps=1e-14))
    cores = []
    for core, size in zip(compact.cores, sys.grid_sizes):
        padded = np.zeros((core.shape[0], size, core.shape[2]))
        padded[:, : n + 1, :] = core
        cores.append(padded)
    state = quantize(TTVector(cores), QuantizationMap(bits=sys.grid_bits), tol)
    return replicate_parametric(state, sys)


def multinomial_block(n: int, p: np.ndarray) -> np.ndarray:
    """Dense multinomial pmf on ``{0..n}**d`` (zero where counts exceed ``n``)."""
    d = p.shape[0]
    counts = np.indices((n + 1,) * d).reshape(d, -1).T
    rest = n - counts.sum(axis=1)
    valid = rest >= 0
    full = np.column_stack([counts[valid], rest[valid]])
    probs = np.append(p, max(1.0 - p.sum(), 0.0))
    block = np.zeros(counts.shape[0])
    block[valid] = stats.multinomial.pmf(full, n, probs)
    return block.reshape((n + 1,) * d)


def check_propensities(sys: ReactionSystem) -> None:
    """Evaluate every propensity once so that bad rates fail early."""
    for reaction in sys.reactions:
        try:
            sys.univariate_tables(reaction)
            sys.coupled_table(reaction)
        except PropensityError:
            logger.error(f"invalid propensity in {reaction.name}", exc_info=True)
            raise


def rank1_state(vectors: Sequence[np.ndarray], sys: ReactionSystem) -> TTVector:
    """Product state from one distribution per species, in QTT."""
    parts = [qtt_from_1d(v) for v in vectors]
    return replicate_parametric(kron_all(parts), sys)
