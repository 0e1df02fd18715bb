"""Alternating linear solvers in the tensor-train format.

:func:`als_sweep` updates every core once with the ranks frozen.
:class:`AmenSolver` adds, after each local solve, the leading directions of
a low-rank approximation of the global residual to the solution basis, so
ranks adapt and convergence no longer depends on the initial ranks.

Local problems are Galerkin projections onto the orthonormal frames of the
current solution; no normal equations are formed.
"""

import logging
import time

from dataclasses import dataclass
from typing import Optional

import numpy as np

from pydantic import Field
from scipy.sparse.linalg import LinearOperator, gmres

from ttcme.base_model import BaseModel
from ttcme.exceptions import LocalSolveError, ShapeMismatchError, SolverDivergenceError
from ttcme.log import get_default_logger
from ttcme.tt_core import TTMatrix, TTVector, add, matvec, norm, orthogonalize, zeros


class AmenConfig(BaseModel):
    """Settings of the alternating solvers.

    Attributes:
        tol (float): Target relative residual ``‖Af - g‖/‖g‖``
        max_sweeps (int): Upper bound on passes over the train
        enrich_rank (int): Residual directions added to each bond
        resid_rank (int): Rank of the residual approximation
        rmax (Optional[int]): Cap on solution ranks
        truncate (bool): Truncate each local solution before enrichment
        local_direct_threshold (int): Largest local system solved densely
        local_iter_tol (Optional[float]): Relative tolerance of the Krylov
            local solver; ``tol/10`` when None
        local_iter_maxit (int): Iteration cap of the Krylov local solver
        seed (int): Seed of the random residual approximation
    """

    tol: float = Field(default=1e-6, gt=0.0)
    max_sweeps: int = Field(default=20, ge=1)
    enrich_rank: int = Field(default=4, ge=1)
    resid_rank: int = Field(default=4, ge=1)
    rmax: Optional[int] = Field(default=None, ge=1)
    truncate: bool = True
    local_direct_threshold: int = Field(default=1500, ge=1)
    local_iter_tol: Optional[float] = Field(default=None, gt=0.0)
    local_iter_maxit: int = Field(default=200, ge=1)
    seed: int = 0

    @property
    def inner_tol(self) -> float:
        return self.local_iter_tol if self.local_iter_tol is not None else self.tol / 10


class SolveReport(BaseModel):
    """Diagnostics of one solve.

    Attributes:
        sweep_residuals (list[float]): Largest projected residual met in each
            pass, relative to ``‖g‖``
        max_rank_history (list[int]): Largest solution rank after each pass
        ranks (tuple[int, ...]): Final solution ranks
        wall_seconds (float): Elapsed time
        converged (bool): Whether ``residual ≤ tol`` was verified
        residual (float): Exact final relative residual
        direct_solves (int): Local systems solved by dense factorization
        iterative_solves (int): Local systems solved by GMRES
        fallbacks (int): GMRES runs that did not reach their tolerance
        rank_capped (bool): Whether ``rmax`` limited a truncation
    """

    sweep_residuals: list[float] = Field(default_factory=list)
    max_rank_history: list[int] = Field(default_factory=list)
    ranks: tuple[int, ...] = ()
    wall_seconds: float = 0.0
    converged: bool = False
    residual: float = float("nan")
    direct_solves: int = 0
    iterative_solves: int = 0
    fallbacks: int = 0
    rank_capped: bool = False

    @property
    def sweeps(self) -> int:
        return len(self.sweep_residuals)


@dataclass
class LocalSystem:
    """Galerkin projection of an operator core onto left and right frames.

    ``left`` is ``(a, R, c)`` and ``right`` is ``(b, R', e)``; the local
    unknown is shaped ``(c, n, e)`` and the image ``(a, n, b)``.
    """

    left: np.ndarray
    core: np.ndarray
    right: np.ndarray

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "LocalSystem":
        n = matrix.shape[0]
        return cls(np.ones((1, 1, 1)), matrix.reshape(1, n, n, 1), np.ones((1, 1, 1)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.left.shape[2], self.core.shape[2], self.right.shape[2])

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return (self.left.shape[0], self.core.shape[1], self.right.shape[0])

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = v.reshape(self.shape)
        t = np.tensordot(self.left, v, axes=(2, 0))
        t = np.tensordot(t, self.core, axes=([1, 2], [0, 2]))
        t = np.tensordot(t, self.right, axes=([1, 3], [2, 1]))
        return t

    def dense(self) -> np.ndarray:
        mat = np.einsum("aAc,AijB,bBd->aibcjd", self.left, self.core, self.right, optimize=True)
        return mat.reshape(int(np.prod(self.out_shape)), self.size)


def _local_rhs(left: np.ndarray, core: np.ndarray, right: np.ndarray) -> np.ndarray:
    t = np.tensordot(left, core, axes=(1, 0))
    return np.tensordot(t, right, axes=(2, 1))


def _left_op(phi: np.ndarray, test: np.ndarray, A: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = np.tensordot(phi, x, axes=(2, 0))
    t = np.tensordot(t, A, axes=([1, 2], [0, 2]))
    t = np.tensordot(test.conj(), t, axes=([0, 1], [0, 2]))
    return t.transpose(0, 2, 1)


def _right_op(phi: np.ndarray, test: np.ndarray, A: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = np.tensordot(x, phi, axes=(2, 2))
    t = np.tensordot(A, t, axes=([2, 3], [1, 3]))
    return np.tensordot(test.conj(), t, axes=([1, 2], [1, 3]))


def _left_rhs(phi: np.ndarray, test: np.ndarray, y: np.ndarray) -> np.ndarray:
    t = np.tensordot(phi, y, axes=(1, 0))
    return np.tensordot(test.conj(), t, axes=([0, 1], [0, 1]))


def _right_rhs(phi: np.ndarray, test: np.ndarray, y: np.ndarray) -> np.ndarray:
    t = np.tensordot(y, phi, axes=(2, 1))
    return np.tensordot(test.conj(), t, axes=([1, 2], [1, 2]))


def _reverse_vector(cores: list[np.ndarray]) -> list[np.ndarray]:
    return [c.transpose(2, 1, 0) for c in reversed(cores)]


def _reverse_matrix(cores: list[np.ndarray]) -> list[np.ndarray]:
    return [c.transpose(3, 1, 2, 0) for c in reversed(cores)]


def _right_orthogonal(cores: list[np.ndarray]) -> list[np.ndarray]:
    return list(orthogonalize(TTVector(cores), "right").cores)


def local_solve(
    system: LocalSystem,
    rhs: np.ndarray,
    x0: np.ndarray,
    cfg: AmenConfig,
    bond: int = 0,
    report: Optional[SolveReport] = None,
    logger: Optional[logging.Logger] = None,
) -> np.ndarray:
    """Solve one projected system.

    Systems up to ``cfg.local_direct_threshold`` unknowns are factorized
    densely; larger ones go to GMRES started from ``x0``. When GMRES stops
    short of its tolerance, the step from ``x0`` is damped to the length
    that minimizes the local residual.

    Raises:
        LocalSolveError: If the dense system is singular or the result is not finite
    """
    logger = logger or get_default_logger("ttcme.amen")
    report = report if report is not None else SolveReport()
    shape = system.shape
    b = rhs.reshape(-1)
    if system.size <= cfg.local_direct_threshold:
        report.direct_solves += 1
        try:
            u = np.linalg.solve(system.dense(), b)
        except np.linalg.LinAlgError as e:
            raise LocalSolveError(bond, f"singular local system ({e})") from e
    else:
        report.iterative_solves += 1
        dtype = np.result_type(system.core, rhs, x0)
        op = LinearOperator(
            (b.size, system.size), matvec=lambda v: system.matvec(v).reshape(-1), dtype=dtype
        )
        start = x0.reshape(-1).astype(dtype)
        u, info = gmres(
            op, b, x0=start, rtol=cfg.inner_tol, atol=0.0,
            restart=min(40, system.size), maxiter=cfg.local_iter_maxit,
        )
        if info != 0:
            report.fallbacks += 1
            step = u - start
            r0 = b - op.matvec(start)
            a_step = op.matvec(step)
            denom = np.vdot(a_step, a_step)
            omega = np.vdot(a_step, r0) / denom if abs(denom) > 0 else 0.0
            u = start + omega * step
            logger.warning(
                f"GMRES did not converge at core {bond + 1} "
                f"(size {system.size}, info {info}); damped step {abs(omega):.3f}"
            )
    if not np.all(np.isfinite(u)):
        raise LocalSolveError(bond, "local solution is not finite")
    return u.reshape(shape)


def enrich_basis(
    basis: np.ndarray, carry: np.ndarray, directions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Append ``directions`` to an orthonormal ``basis``.

    ``carry`` gets zero rows for the new columns, so ``basis @ carry`` is the
    same before and after. The rank grows by the number of columns of
    ``directions`` unless the row count caps it.
    """
    q, r = np.linalg.qr(np.hstack([basis, directions]))
    pad = np.zeros((directions.shape[1], carry.shape[1]), carry.dtype)
    return q, r @ np.vstack([carry, pad])


def _interfaces_right(A, y, x, z, d):
    phi_a = [np.ones((1, 1, 1))] + [None] * (d - 1) + [np.ones((1, 1, 1))]
    phi_y = [np.ones((1, 1))] + [None] * (d - 1) + [np.ones((1, 1))]
    phi_za = list(phi_a) if z is not None else None
    phi_zy = list(phi_y) if z is not None else None
    for k in range(d - 1, 0, -1):
        phi_a[k] = _right_op(phi_a[k + 1], x[k], A[k], x[k])
        phi_y[k] = _right_rhs(phi_y[k + 1], x[k], y[k])
        if z is not None:
            phi_za[k] = _right_op(phi_za[k + 1], z[k], A[k], x[k])
            phi_zy[k] = _right_rhs(phi_zy[k + 1], z[k], y[k])
    return phi_a, phi_y, phi_za, phi_zy


class AmenSolver:
    """AMEn iteration for ``A f = g`` in the tensor-train format.

    Passes alternate between left-to-right, with truncation and residual
    enrichment, and right-to-left, with truncation only. Progress is judged
    by the largest projected residual of the incoming cores; once that falls
    below ``tol`` the true residual is checked once.

    Args:
        cfg (AmenConfig): Solver settings
        logger (Optional[logging.Logger]): Custom logger instance
    """

    def __init__(self, cfg: Optional[AmenConfig] = None, logger: Optional[logging.Logger] = None):
        self.cfg = cfg or AmenConfig()
        self._logger = logger or get_default_logger("ttcme.amen")
        self._rng = np.random.default_rng(self.cfg.seed)

    def solve(
        self, A: TTMatrix, g: TTVector, f0: Optional[TTVector] = None
    ) -> tuple[TTVector, SolveReport]:
        """Run sweeps until the residual target or ``max_sweeps`` is reached.

        Args:
            A (TTMatrix): Square operator
            g (TTVector): Right-hand side
            f0 (Optional[TTVector]): Initial guess, the normalized all-ones
                rank-1 train when None

        Returns:
            tuple[TTVector, SolveReport]: Solution and diagnostics

        Raises:
            ShapeMismatchError: If sizes do not conform
            SolverDivergenceError: If the residual stays 10× above its best
                for 3 consecutive passes
            LocalSolveError: If a local system breaks down
        """
        cfg = self.cfg
        if A.col_sizes != g.mode_sizes or A.row_sizes != g.mode_sizes:
            raise ShapeMismatchError("amen_solve", A.col_sizes, g.mode_sizes)
        report = SolveReport()
        started = time.perf_counter()
        nrm_g = norm(g)
        if nrm_g == 0.0:
            report.converged, report.residual = True, 0.0
            result = zeros(g.mode_sizes)
            report.ranks = result.ranks
            return result, report
        d = g.d
        if f0 is None:
            cores = [np.ones((1, n, 1)) / np.sqrt(n) for n in g.mode_sizes]
        else:
            if f0.mode_sizes != g.mode_sizes:
                raise ShapeMismatchError("amen_solve", f0.mode_sizes, g.mode_sizes)
            cores = list(f0.cores)
        dtype = np.result_type(A.dtype, g.dtype, *cores)
        x = [c.astype(dtype) for c in cores]
        z = self._random_train(g.mode_sizes, dtype) if d > 1 else None
        A_cores, y_cores = list(A.cores), list(g.cores)
        best, strikes = np.inf, 0
        for sweep in range(1, cfg.max_sweeps + 1):
            if sweep % 2 == 1:
                x, z, estimate = self._pass(A_cores, y_cores, x, z, nrm_g, report)
            else:
                xr, _, estimate = self._pass(
                    _reverse_matrix(A_cores), _reverse_vector(y_cores),
                    _reverse_vector(x), None, nrm_g, report,
                )
                x = _reverse_vector(xr)
            ranks = TTVector(x).ranks
            report.sweep_residuals.append(estimate)
            report.max_rank_history.append(max(ranks))
            self._logger.debug(
                f"sweep {sweep}: projected residual {estimate:.3e}, ranks {ranks}"
            )
            if estimate <= cfg.tol:
                residual = relative_residual(A, TTVector(x), g, nrm_g)
                report.residual = residual
                if residual <= cfg.tol:
                    report.converged = True
                    break
            if estimate < best:
                best, strikes = estimate, 0
            elif estimate > 10 * best:
                strikes += 1
                if strikes >= 3:
                    self._logger.error(
                        f"AMEn diverged at sweep {sweep}: {estimate:.3e} vs best {best:.3e}"
                    )
                    raise SolverDivergenceError(sweep, estimate, best)
            else:
                strikes = 0
        result = TTVector(x)
        if not report.converged:
            report.residual = relative_residual(A, result, g, nrm_g)
            report.converged = report.residual <= cfg.tol
            if not report.converged:
                self._logger.warning(
                    f"AMEn stopped after {report.sweeps} sweeps at residual "
                    f"{report.residual:.3e} (target {cfg.tol:.1e})"
                )
        report.ranks = result.ranks
        report.wall_seconds = time.perf_counter() - started
        return result, report

    def _random_train(self, sizes: tuple[int, ...], dtype) -> list[np.ndarray]:
        rho = self.cfg.resid_rank
        ranks = [1] + [rho] * (len(sizes) - 1) + [1]
        return [
            self._rng.standard_normal((ranks[k], n, ranks[k + 1])).astype(dtype)
            for k, n in enumerate(sizes)
        ]

    def _choose_rank(self, system, rhs, u, s, vt, ra, n, nrm_g) -> int:
        cfg = self.cfg
        full = int(np.count_nonzero(s > s[0] * np.finfo(float).eps * max(u.shape))) or 1
        if not cfg.truncate:
            rank = full
        else:
            def residual(r: int) -> float:
                cand = ((u[:, :r] * s[:r]) @ vt[:r]).reshape(ra, n, -1)
                return float(np.linalg.norm(system.matvec(cand) - rhs))

            target = residual(full) + cfg.tol / 10 * nrm_g
            lo, hi = 1, full
            while lo < hi:
                mid = (lo + hi) // 2
                if residual(mid) <= target:
                    hi = mid
                else:
                    lo = mid + 1
            rank = lo
        return rank

    def _pass(self, A, y, x, z, nrm_g, report, enrich=None):
        """One left-to-right pass; enrichment runs when ``z`` is given."""
        cfg = self.cfg
        enrich = z is not None if enrich is None else enrich
        d = len(x)
        x = _right_orthogonal(x)
        if enrich:
            z = _right_orthogonal(z)
        phi_a, phi_y, phi_za, phi_zy = _interfaces_right(A, y, x, z if enrich else None, d)
        estimate = 0.0
        for k in range(d):
            system = LocalSystem(phi_a[k], A[k], phi_a[k + 1])
            rhs = _local_rhs(phi_y[k], y[k], phi_y[k + 1])
            estimate = max(estimate, float(np.linalg.norm(system.matvec(x[k]) - rhs)) / nrm_g)
            sol = local_solve(system, rhs, x[k], cfg, k, report, self._logger)
            if k == d - 1:
                x[k] = sol
                if enrich:
                    zsys = LocalSystem(phi_za[k], A[k], phi_za[k + 1])
                    z[k] = zsys.matvec(sol) - _local_rhs(phi_zy[k], y[k], phi_zy[k + 1])
                break
            ra, n, rb = sol.shape
            u, s, vt = np.linalg.svd(sol.reshape(ra * n, rb), full_matrices=False)
            rank = self._choose_rank(system, rhs, u, s, vt, ra, n, nrm_g)
            if cfg.rmax is not None and rank > cfg.rmax:
                rank, report.rank_capped = cfg.rmax, True
            basis = u[:, :rank]
            carry = s[:rank, None] * vt[:rank]
            if enrich:
                kept = (basis @ carry).reshape(ra, n, rb)
                zsys = LocalSystem(phi_za[k], A[k], phi_za[k + 1])
                zres = zsys.matvec(kept) - _local_rhs(phi_zy[k], y[k], phi_zy[k + 1])
                rz = zres.shape[0]
                zu = np.linalg.svd(zres.reshape(rz * n, -1), full_matrices=False)[0]
                z[k] = zu[:, : cfg.resid_rank].reshape(rz, n, -1)
                esys = LocalSystem(phi_a[k], A[k], phi_za[k + 1])
                sloc = esys.matvec(kept) - _local_rhs(phi_y[k], y[k], phi_zy[k + 1])
                extra = cfg.enrich_rank
                if cfg.rmax is not None:
                    extra = min(extra, max(cfg.rmax - rank, 0))
                if extra > 0:
                    su = np.linalg.svd(sloc.reshape(ra * n, -1), full_matrices=False)[0]
                    basis, carry = enrich_basis(basis, carry, su[:, :extra])
            x[k] = basis.reshape(ra, n, -1)
            x[k + 1] = np.tensordot(carry, x[k + 1], axes=(1, 0))
            phi_a[k + 1] = _left_op(phi_a[k], x[k], A[k], x[k])
            phi_y[k + 1] = _left_rhs(phi_y[k], x[k], y[k])
            if enrich:
                phi_za[k + 1] = _left_op(phi_za[k], z[k], A[k], x[k])
                phi_zy[k + 1] = _left_rhs(phi_zy[k], z[k], y[k])
        return x, z, estimate


def relative_residual(
    A: TTMatrix, f: TTVector, g: TTVector, nrm_g: Optional[float] = None
) -> float:
    """``‖Af - g‖/‖g‖`` without rounding.

    Uses ``‖Af‖² - 2Re⟨Af, g⟩ + ‖g‖²`` from transfer contractions; when the
    result is within cancellation noise the difference train is formed and
    its norm taken by orthogonalization.
    """
    nrm_g = norm(g) if nrm_g is None else nrm_g
    if nrm_g == 0.0:
        return 0.0
    af_sq = operator_gram(A, f)
    cross = np.real(_dot_matvec(A, f, g))
    sq = af_sq - 2.0 * cross + nrm_g**2
    if sq <= 1e-12 * max(af_sq, nrm_g**2):
        return norm(add(matvec(A, f), g, 1.0, -1.0)) / nrm_g
    return float(np.sqrt(sq)) / nrm_g


def operator_gram(A: TTMatrix, f: TTVector) -> float:
    """``‖Af‖²`` through a four-index transfer, never forming ``Af``."""
    w = np.ones((1, 1, 1, 1))
    for a, x in zip(A.cores, f.cores):
        t = np.tensordot(w, x, axes=(3, 0))
        t = np.tensordot(t, a, axes=([2, 3], [0, 2]))
        t = np.tensordot(t, a.conj(), axes=([1, 3], [0, 1]))
        t = np.tensordot(t, x.conj(), axes=([0, 3], [0, 1]))
        w = t.transpose(3, 2, 1, 0)
    return float(np.real(w[0, 0, 0, 0]))


def _dot_matvec(A: TTMatrix, f: TTVector, g: TTVector) -> complex:
    """``⟨g, Af⟩`` through a three-index transfer."""
    w = np.ones((1, 1, 1))
    for a, x, y in zip(A.cores, f.cores, g.cores):
        w = _left_op(w, y, a, x)
    return w[0, 0, 0]


def als_sweep(A: TTMatrix, g: TTVector, f: TTVector, cfg: Optional[AmenConfig] = None) -> TTVector:
    """One left-to-right ALS pass with the ranks of ``f`` kept fixed.

    Each core is replaced by the solution of its Galerkin system.

    Raises:
        LocalSolveError: If a local system is singular (the bond is reported)
    """
    cfg = (cfg or AmenConfig()).model_copy(update={"truncate": False})
    if A.col_sizes != f.mode_sizes or g.mode_sizes != f.mode_sizes:
        raise ShapeMismatchError("als_sweep", A.col_sizes, f.mode_sizes)
    solver = AmenSolver(cfg)
    nrm_g = norm(g) or 1.0
    x = list(orthogonalize(f, "right").cores)
    ranks = [c.shape[2] for c in x]
    x, _, _ = solver._pass(list(A.cores), list(g.cores), x, None, nrm_g, SolveReport())
    out = TTVector(x)
    for k, r in enumerate(ranks[:-1]):
        if out.ranks[k + 1] != r:
            out = _pad_rank(out, k, r)
    return out


def _pad_rank(f: TTVector, k: int, r: int) -> TTVector:
    """Zero-pad bond ``k`` of ``f`` back to ``r``; the value is unchanged."""
    cores = list(f.cores)
    left, right = cores[k], cores[k + 1]
    extra = r - left.shape[2]
    if extra <= 0:
        return f
    cores[k] = np.concatenate([left, np.zeros((left.shape[0], left.shape[1], extra), left.dtype)], axis=2)
    cores[k + 1] = np.concatenate(
        [right, np.zeros((extra, *right.shape[1:]), right.dtype)], axis=0
    )
    return TTVector(cores)


def amen_solve(
    A: TTMatrix,
    g: TTVector,
    f0: Optional[TTVector] = None,
    cfg: Optional[AmenConfig] = None,
    logger: Optional[logging.Logger] = None,
) -> tuple[TTVector, SolveReport]:
    """Solve ``A f = g`` with :class:`AmenSolver`."""
    return AmenSolver(cfg, logger).solve(A, g, f0)
