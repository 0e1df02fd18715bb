"""Brute-force reference solvers on the full truncated state space.

Nothing here touches the tensor-train code, so results can be compared
against it independently. States are enumerated in C order with the first
species slowest; a trailing parameter axis, when present, is fixed to one
value per call.
"""

from typing import Optional

import numpy as np

from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from ttcme.exceptions import OracleCapError, SolverError
from ttcme.reactions import ReactionSystem
from ttcme.settings import get_settings


EXPM_STATES = 4096
DIRECT_STATES = 2**17


def _check_cap(states: int, cap: Optional[int]) -> None:
    cap = get_settings().oracle_cap if cap is None else cap
    if states > cap:
        raise OracleCapError(states, cap)


def propensity_values(
    sys: ReactionSystem, reaction_index: int, parameter_index: Optional[int] = None
) -> np.ndarray:
    """Propensity of one reaction on every state, shaped like the grid."""
    reaction = sys.reactions[reaction_index]
    grids = np.meshgrid(*[np.arange(n) for n in sys.grid_sizes], indexing="ij", sparse=True)
    values = np.full(sys.grid_sizes, sys.scalar_rate(reaction))
    for i, table in sys.univariate_tables(reaction).items():
        values = values * table[grids[i]]
    coupled = sys.coupled_table(reaction)
    if coupled is not None:
        i, table = coupled
        column = table[:, parameter_index or 0]
        values = values * column[grids[i]]
    return values


def dense_cme(
    sys: ReactionSystem,
    parameter_index: Optional[int] = None,
    cap: Optional[int] = None,
) -> sparse.csr_matrix:
    """Generator of the truncated CME as a sparse matrix.

    For every state ``x`` and reaction with change ``s`` and propensity
    ``w``: ``A[x + s, x] += w(x)`` when ``x + s`` lies in the box, and
    ``A[x, x] -= w(x)`` always. Flow out of the box is lost.

    Raises:
        OracleCapError: If the state count exceeds the cap
    """
    sizes = np.array(sys.grid_sizes)
    n = sys.n_states
    _check_cap(n, cap)
    states = np.array(np.unravel_index(np.arange(n), sys.grid_sizes)).T
    rows, cols, vals = [], [], []
    for m, reaction in enumerate(sys.reactions):
        w = propensity_values(sys, m, parameter_index).reshape(-1)
        target = states + sys.change(reaction)
        inside = np.all((target >= 0) & (target < sizes), axis=1) & (w != 0)
        flat = np.ravel_multi_index(target[inside].T, sys.grid_sizes)
        src = np.flatnonzero(inside)
        rows += [flat, np.arange(n)]
        cols += [src, np.arange(n)]
        vals += [w[inside], -w]
    A = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A.tocsr()


def reference_propagate(
    A: sparse.spmatrix, P0: np.ndarray, t: float, tau: float = 0.01
) -> np.ndarray:
    """``exp(A t) P0``.

    Up to 4096 states the dense matrix exponential is used. Larger systems
    take Crank-Nicolson steps of length at most ``tau``, factorized once
    with a sparse LU up to 2**17 states and solved by GMRES beyond.
    """
    n = A.shape[0]
    _check_cap(n, None)
    P0 = np.asarray(P0, dtype=float).reshape(-1)
    if t == 0.0:
        return P0.copy()
    if n <= EXPM_STATES:
        return linalg.expm(A.toarray() * t) @ P0
    steps = int(np.ceil(t / tau - 1e-9))
    h = t / steps
    eye = sparse.identity(n, format="csc")
    lhs = (eye - h / 2 * A).tocsc()
    rhs_op = (eye + h / 2 * A).tocsr()
    P = P0.copy()
    if n <= DIRECT_STATES:
        lu = splinalg.splu(lhs)
        for _ in range(steps):
            P = lu.solve(rhs_op @ P)
        return P
    for step in range(steps):
        nxt, info = splinalg.gmres(lhs, rhs_op @ P, x0=P, rtol=1e-12, atol=0.0)
        if info != 0:
            raise SolverError("oracle.reference_propagate", step, f"GMRES info {info}")
        P = nxt
    return P


def reference_steady(
    A: sparse.spmatrix, iterations: int = 50, tol: float = 1e-12
) -> np.ndarray:
    """Kernel direction of ``A`` by shifted inverse iteration, unit mass.

    Raises:
        SolverError: If the iteration does not settle within ``iterations``
    """
    n = A.shape[0]
    _check_cap(n, None)
    A = sparse.csc_matrix(A)
    scale = max(abs(A).sum(axis=0).max(), 1.0)
    sigma = 1e-12 * scale
    lu = splinalg.splu((A - sigma * sparse.identity(n, format="csc")).tocsc())
    v = np.full(n, 1.0 / n)
    for _ in range(iterations):
        nxt = lu.solve(v)
        nxt /= nxt.sum()
        change = np.linalg.norm(nxt - v, 1)
        v = nxt
        if change <= tol:
            return v
    residual = np.linalg.norm(A @ v) / np.linalg.norm(v)
    if residual <= tol * scale:
        return v
    raise SolverError("oracle.reference_steady", iterations - 1, f"residual {residual:.3e}")


def unfolding_ranks(t: np.ndarray, cutoff: float = 1e-12) -> tuple[int, ...]:
    """Ranks of the unfoldings ``(n_1⋯n_k) × (n_{k+1}⋯n_d)`` at a relative SVD cutoff."""
    t = np.asarray(t)
    ranks = []
    for k in range(1, t.ndim):
        mat = t.reshape(int(np.prod(t.shape[:k])), -1)
        s = np.linalg.svd(mat, compute_uv=False)
        ranks.append(int(np.count_nonzero(s > cutoff * s[0])) if s.size and s[0] > 0 else 0)
    return tuple(ranks)


def dense_marginal(P: np.ndarray, sizes: tuple[int, ...], i: int) -> np.ndarray:
    P = np.asarray(P).reshape(sizes)
    axes = tuple(k for k in range(len(sizes)) if k != i)
    values = P.sum(axis=axes)
    return values / values.sum()


def dense_means(P: np.ndarray, sizes: tuple[int, ...]) -> np.ndarray:
    P = np.asarray(P).reshape(sizes)
    mass = P.sum()
    means = []
    for i, n in enumerate(sizes):
        axes = tuple(k for k in range(len(sizes)) if k != i)
        means.append(float(P.sum(axis=axes) @ np.arange(n)) / mass)
    return np.array(means)
