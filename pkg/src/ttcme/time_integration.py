"""Crank-Nicolson propagation and implicit Euler steady states.

A restart interval of ``Nt`` Crank-Nicolson steps is solved at once as one
linear system over a QTT time axis placed ahead of the state modes:

    (I - J⁻¹) ⊗ I - τ/2 · (I + J⁻¹) ⊗ A

with right-hand side ``δ_0 ⊗ (P0 + τ/2·A P0)``. Time slice ``k`` of the
solution holds the state at ``(k + 1)·τ`` after the interval start.
"""

import logging
import math
import time

from typing import Literal, Optional

import numpy as np

from pydantic import Field, model_validator

from ttcme.amen import AmenConfig, SolveReport, amen_solve
from ttcme.base_model import BaseModel
from ttcme.exceptions import InvalidTensorError, ShapeMismatchError, SolverError, TTCMEError
from ttcme.log import get_default_logger
from ttcme.observables import mean_copy_numbers, residual_norm, time_profiles, total_mass
from ttcme.qtt import QuantizationMap, qtt_delta, qtt_identity, qtt_shift
from ttcme.tt_core import (
    Tolerance,
    TTMatrix,
    TTVector,
    add,
    fix_mode,
    identity,
    kron,
    matvec,
    ones,
    scale,
)


_TIME_OPERATOR_TOL = Tolerance(eps=1e-14)


def time_bits(Nt: int) -> int:
    """``L_t`` with ``Nt = 2**L_t``.

    Raises:
        InvalidTensorError: If ``Nt`` is not a power of two
    """
    if Nt < 1 or Nt & (Nt - 1):
        raise InvalidTensorError(f"Nt must be a power of two, got {Nt}")
    return Nt.bit_length() - 1


class TimeGrid(BaseModel):
    """Restart intervals of a propagation.

    Attributes:
        T (float): Final time
        T0 (float): Interval length of the constant schedule
        Nt (int): Crank-Nicolson steps per interval, a power of two
        schedule (str): ``constant`` or ``exponential``; the exponential
            schedule ends interval ``q`` at ``exp(rate·q)``
        rate (float): Growth rate of the exponential schedule
    """

    T: float = Field(gt=0.0)
    T0: float = Field(default=1.0, gt=0.0)
    Nt: int = Field(default=1, ge=1)
    schedule: Literal["constant", "exponential"] = "constant"
    rate: float = Field(default=0.05, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "TimeGrid":
        time_bits(self.Nt)
        if self.schedule == "constant" and self.T0 > self.T:
            raise ValueError(f"T0={self.T0} exceeds T={self.T}")
        return self

    @property
    def tau(self) -> float:
        return self.T0 / self.Nt

    def intervals(self) -> list[tuple[float, float]]:
        """``(t_start, t_end)`` of every interval; the last one ends at ``T``."""
        ends: list[float] = []
        q = 1
        while not ends or ends[-1] < self.T:
            if self.schedule == "constant":
                t = q * self.T0
            else:
                t = math.exp(self.rate * q)
            ends.append(min(t, self.T) if self.T - t > 1e-12 * self.T else self.T)
            q += 1
        starts = [0.0] + ends[:-1]
        return list(zip(starts, ends))


class StepSchedule(BaseModel):
    """Step lengths of the implicit Euler iteration.

    ``constant`` repeats ``T0``; ``exponential`` uses ``t_q - t_{q-1}`` with
    ``t_q = exp(rate·q)`` and ``t_0 = 0``.
    """

    kind: Literal["constant", "exponential"] = "constant"
    T0: float = Field(default=1.0, gt=0.0)
    rate: float = Field(default=0.05, gt=0.0)

    def step(self, q: int) -> float:
        if self.kind == "constant":
            return self.T0
        prev = 0.0 if q == 1 else math.exp(self.rate * (q - 1))
        return math.exp(self.rate * q) - prev


def _identity_like(A: TTMatrix) -> TTMatrix:
    return identity(A.row_sizes)


def cn_step(
    A: TTMatrix,
    P: TTVector,
    tau: float,
    cfg: Optional[AmenConfig] = None,
    logger: Optional[logging.Logger] = None,
) -> TTVector:
    """One Crank-Nicolson step ``(I - τ/2·A) P⁺ = (I + τ/2·A) P``.

    Raises:
        ValueError: If ``tau`` is not positive
    """
    if tau <= 0:
        raise ValueError(f"time step must be positive, got {tau}")
    cfg = cfg or AmenConfig()
    lhs = add(_identity_like(A), A, 1.0, -tau / 2)
    rhs = add(P, matvec(A, P), 1.0, tau / 2).round(Tolerance(eps=cfg.tol / 10))
    return amen_solve(lhs, rhs, P, cfg, logger)[0]


def _time_operators(Nt: int) -> tuple[TTMatrix, TTMatrix, TTVector]:
    """``I - J⁻¹``, ``I + J⁻¹`` and ``δ_0`` on the time axis."""
    if Nt == 1:
        one = identity([1])
        return one, one, ones([1])
    bits = time_bits(Nt)
    eye, back = qtt_identity(bits), qtt_shift(-1, bits)
    minus = add(eye, back, 1.0, -1.0).round(_TIME_OPERATOR_TOL)
    plus = add(eye, back).round(_TIME_OPERATOR_TOL)
    return minus, plus, qtt_delta(0, bits)


def build_spacetime(
    A: TTMatrix,
    P0: TTVector,
    tau: float,
    Nt: int,
    tol: Tolerance = Tolerance(eps=1e-14),
) -> tuple[TTMatrix, TTVector]:
    """Global Crank-Nicolson system of one interval, time modes first.

    ``Nt = 1`` keeps a single time mode of size 1, so the system is the
    plain Crank-Nicolson step equation.

    Raises:
        ShapeMismatchError: If ``A`` and ``P0`` do not conform
        InvalidTensorError: If ``Nt`` is not a power of two
    """
    if A.col_sizes != P0.mode_sizes or A.row_sizes != P0.mode_sizes:
        raise ShapeMismatchError("build_spacetime", A.col_sizes, P0.mode_sizes)
    minus, plus, start = _time_operators(Nt)
    B = add(kron(minus, _identity_like(A)), kron(plus, A), 1.0, -tau / 2)
    first = add(P0, matvec(A, P0), 1.0, tau / 2).round(tol)
    return B, kron(start, first)


def time_slice(X: TTVector, Nt: int, k: int) -> TTVector:
    """State at time index ``k`` of a space-time train."""
    bits = time_bits(Nt)
    if not 0 <= k < Nt:
        raise InvalidTensorError(f"time index {k} outside 0..{Nt - 1}")
    if bits == 0:
        return fix_mode(X, 0, 0)
    for level in range(bits):
        X = fix_mode(X, 0, (k >> level) & 1)
    return X


def final_slice(X: TTVector, Nt: int) -> TTVector:
    return time_slice(X, Nt, Nt - 1)


class Trajectory(BaseModel):
    """Observables recorded along a propagation.

    Row 0 is the initial state; row ``q`` is the end of interval ``q``.

    Attributes:
        times (list[float]): Interval end times
        masses (list[float]): Total probability
        means (list[list[float]]): Mean copy numbers per species
        etas (list[float]): ``‖AP‖/‖P‖``
        max_ranks (list[int]): Largest rank of the space-time solution
        wall_seconds (list[float]): Time spent per interval
        reports (list[SolveReport]): Solver diagnostics per interval
        states (list[TTVector]): Interval end states, kept on request
        step_times, step_masses, step_means: Values at every Crank-Nicolson
            step, kept on request
    """

    times: list[float] = Field(default_factory=list)
    masses: list[float] = Field(default_factory=list)
    means: list[list[float]] = Field(default_factory=list)
    etas: list[float] = Field(default_factory=list)
    max_ranks: list[int] = Field(default_factory=list)
    wall_seconds: list[float] = Field(default_factory=list)
    reports: list[SolveReport] = Field(default_factory=list)
    states: list[TTVector] = Field(default_factory=list)
    step_times: list[float] = Field(default_factory=list)
    step_masses: list[float] = Field(default_factory=list)
    step_means: list[list[float]] = Field(default_factory=list)

    def record(self, t, P, A, qmap, max_rank, wall, keep_state) -> None:
        self.times.append(t)
        self.masses.append(total_mass(P))
        self.means.append(mean_copy_numbers(P, qmap).tolist())
        self.etas.append(residual_norm(A, P))
        self.max_ranks.append(max_rank)
        self.wall_seconds.append(wall)
        if keep_state:
            self.states.append(P)


class Propagator:
    """Restarted space-time Crank-Nicolson propagation.

    The final time slice of each interval starts the next one; the first
    interval is warm-started from ``P0`` copied along time, later ones from
    the previous space-time solution.

    Args:
        cfg (AmenConfig): Solver settings; ``cfg.tol`` also rounds the
            restart state
        logger (Optional[logging.Logger]): Custom logger instance
    """

    def __init__(self, cfg: Optional[AmenConfig] = None, logger: Optional[logging.Logger] = None):
        self.cfg = cfg or AmenConfig()
        self._logger = logger or get_default_logger("ttcme.time_integration")

    def propagate(
        self,
        A: TTMatrix,
        P0: TTVector,
        grid: TimeGrid,
        qmap: Optional[QuantizationMap] = None,
        per_step: bool = False,
        keep_states: bool = False,
    ) -> Trajectory:
        """Propagate ``P0`` to ``grid.T``.

        Raises:
            SolverError: If an interval fails; ``partial`` holds the
                trajectory so far
        """
        traj = Trajectory()
        traj.record(0.0, P0, A, qmap, P0.max_rank, 0.0, keep_states)
        intervals = grid.intervals()
        bits = time_bits(grid.Nt)
        P, guess = P0, None
        for q, (t0, t1) in enumerate(intervals):
            started = time.perf_counter()
            tau = (t1 - t0) / grid.Nt
            try:
                B, rhs = build_spacetime(A, P, tau, grid.Nt)
                if guess is None:
                    guess = kron(ones([2] * bits if bits else [1]), P)
                X, report = amen_solve(B, rhs, guess, self.cfg, self._logger)
                P = final_slice(X, grid.Nt).round(Tolerance(eps=self.cfg.tol))
            except TTCMEError as e:
                self._logger.error(f"interval {q + 1} [{t0:g}, {t1:g}] failed", exc_info=True)
                raise SolverError("time_integration.propagate", q, str(e), traj) from e
            guess = X
            wall = time.perf_counter() - started
            traj.reports.append(report)
            traj.record(t1, P, A, qmap, X.max_rank, wall, keep_states)
            if per_step:
                masses, means = time_profiles(X, qmap, bits)
                steps = t0 + tau * np.arange(1, grid.Nt + 1)
                traj.step_times.extend(steps.tolist())
                traj.step_masses.extend(masses.tolist())
                traj.step_means.extend(means.tolist())
            self._logger.info(
                f"interval {q + 1}/{len(intervals)}: t={t1:.6g}, eta={traj.etas[-1]:.3e}, "
                f"mass={traj.masses[-1]:.12f}, rank {X.max_rank}, "
                f"{report.sweeps} sweeps, {wall:.2f}s"
            )
            if not report.converged:
                self._logger.warning(
                    f"interval {q + 1} ended at residual {report.residual:.3e}"
                )
        return traj


def propagate(
    A: TTMatrix,
    P0: TTVector,
    grid: TimeGrid,
    cfg: Optional[AmenConfig] = None,
    qmap: Optional[QuantizationMap] = None,
    per_step: bool = False,
) -> Trajectory:
    return Propagator(cfg).propagate(A, P0, grid, qmap, per_step)


class SteadyReport(BaseModel):
    """History of an implicit Euler run.

    Attributes:
        etas (list[float]): ``‖AP‖/‖P‖`` after each iteration
        tolerances (list[float]): Solver tolerance used in each iteration
        max_ranks (list[int]): Largest rank after each iteration
        wall_seconds (list[float]): Time per iteration
        converged (bool): Whether ``eta ≤ eps_final`` was reached
    """

    etas: list[float] = Field(default_factory=list)
    tolerances: list[float] = Field(default_factory=list)
    max_ranks: list[int] = Field(default_factory=list)
    wall_seconds: list[float] = Field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.etas)

    @property
    def best_etas(self) -> list[float]:
        """Smallest residual reached up to each iteration."""
        return np.minimum.accumulate(self.etas).tolist() if self.etas else []


def steady_state(
    A: TTMatrix,
    P0: TTVector,
    schedule: StepSchedule,
    eps_final: float,
    c: float = 0.1,
    cfg: Optional[AmenConfig] = None,
    max_iterations: int = 200,
    logger: Optional[logging.Logger] = None,
) -> tuple[TTVector, SteadyReport]:
    """Implicit Euler iteration ``(I - T0_q·A) P_q = P_{q-1}`` towards the kernel of ``A``.

    Each solve runs at ``max(eps_final, c·eta)`` with ``eta`` the residual of
    the previous iterate, so early iterations are cheap. Every iterate is
    rescaled to unit mass. Missing the target within ``max_iterations`` is
    reported, not raised.

    Args:
        A (TTMatrix): CME generator
        P0 (TTVector): Initial distribution
        schedule (StepSchedule): Step lengths
        eps_final (float): Target residual
        c (float): Factor of the adaptive tolerance, in (0, 1)
        cfg (Optional[AmenConfig]): Solver settings other than the tolerance
        max_iterations (int): Iteration cap

    Returns:
        tuple[TTVector, SteadyReport]: Unit-mass steady state and history

    Raises:
        SolverError: If a linear solve fails
    """
    if not 0.0 < c < 1.0:
        raise ValueError(f"c must lie in (0, 1), got {c}")
    logger = logger or get_default_logger("ttcme.time_integration")
    cfg = cfg or AmenConfig()
    report = SteadyReport()
    P = scale(P0, 1.0 / total_mass(P0))
    eta = residual_norm(A, P)
    eye = _identity_like(A)
    for q in range(1, max_iterations + 1):
        if eta <= eps_final:
            report.converged = True
            break
        started = time.perf_counter()
        eps = max(eps_final, c * eta)
        step = schedule.step(q)
        try:
            lhs = add(eye, A, 1.0, -step)
            nxt, _ = amen_solve(lhs, P, P, cfg.model_copy(update={"tol": eps}), logger)
            nxt = nxt.round(Tolerance(eps=eps))
            P = scale(nxt, 1.0 / total_mass(nxt))
        except TTCMEError as e:
            logger.error(f"Euler iteration {q} failed", exc_info=True)
            raise SolverError("time_integration.steady_state", q - 1, str(e), P) from e
        eta = residual_norm(A, P)
        report.etas.append(eta)
        report.tolerances.append(eps)
        report.max_ranks.append(P.max_rank)
        report.wall_seconds.append(time.perf_counter() - started)
        logger.info(
            f"Euler iteration {q}: step {step:.4g}, eps {eps:.2e}, eta {eta:.3e}, "
            f"rank {P.max_rank}"
        )
    else:
        report.converged = eta <= eps_final
    if not report.converged:
        logger.warning(
            f"steady state stopped at eta {eta:.3e} after {report.iterations} iterations "
            f"(target {eps_final:.1e})"
        )
    return P, report
