import argparse
import asyncio
import sys

from pathlib import Path
from typing import Optional

import numpy as np

from pydantic import ValidationError

from ttcme.amen import AmenConfig
from ttcme.cme_model import (
    assemble_cascade,
    assemble_cme,
    check_propensities,
    propensity_tt,
    quantization_map,
)
from ttcme.config import ModelConfig, SolverConfig, TimeConfig, load_config, resolve_config_path
from ttcme.exceptions import (
    ConfigError,
    DenseCapError,
    OracleCapError,
    PatternError,
    PropensityError,
    TTCMEError,
)
from ttcme.log import get_default_logger
from ttcme.observables import marginal, mean_copy_numbers, mean_vs_parameter
from ttcme.oracle import dense_cme, reference_propagate, reference_steady
from ttcme.qtt import QuantizationMap, cross_ranks, dequantize
from ttcme.qtt_tucker import tt_to_qtt_tucker
from ttcme.reactions import ReactionSystem
from ttcme.settings import get_settings
from ttcme.time_integration import Propagator, steady_state
from ttcme.tt_core import Tolerance, TTMatrix, TTVector, fix_mode

from .utils import setup_logger, write_csv


logger = get_default_logger("ttcme.cli")

EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_CAP = 3


def apply_overrides(cfg: ModelConfig, args: argparse.Namespace) -> ModelConfig:
    """Command-line flags take precedence over the config file.

    Raises:
        ConfigError: If an override is invalid
    """
    solver = {
        "eps": args.eps,
        "rmax": args.rmax,
        "seed": args.seed,
        "max_sweeps": args.max_sweeps,
    }
    time = {"T": args.T, "T0": args.T0, "Nt": args.Nt, "schedule": args.schedule}
    solver = {k: v for k, v in solver.items() if v is not None}
    time = {k: v for k, v in time.items() if v is not None}
    try:
        return cfg.model_copy(
            update={
                "solver": SolverConfig(**{**cfg.solver.model_dump(), **solver}),
                "time": TimeConfig(**{**cfg.time.model_dump(), **time}),
            }
        )
    except ValidationError as e:
        errors = [(".".join(str(p) for p in err["loc"]), err["msg"]) for err in e.errors()]
        raise ConfigError(errors, "command line") from e


def assemble_operator(system: ReactionSystem) -> tuple[TTMatrix, str]:
    """Cascade assembly when the network allows it, generic assembly otherwise."""
    try:
        return assemble_cascade(system), "cascade"
    except PatternError as e:
        logger.debug(f"generic assembly: {e}")
    return assemble_cme(system, tol=Tolerance(eps=1e-12)), "generic"


def species_columns(system: ReactionSystem) -> list[str]:
    return [f"x{i + 1}" for i in range(system.d)]


def write_marginals(P: TTVector, system: ReactionSystem, qmap, names, out_dir: Path, suffix=""):
    for name in names or system.names:
        values = marginal(P, system.index(name), qmap)
        path = write_csv(
            out_dir / f"marginal_{name}{suffix}.csv", ["x", "p"], enumerate(values.tolist())
        )
        logger.info(f"Wrote {path}")


def write_representation(P: TTVector, qmap: QuantizationMap, fmt: str, eps: float, out_dir: Path):
    """Ranks of a state in the requested format."""
    if fmt == "qtt":
        rows = enumerate(P.ranks[1:-1], start=1)
        write_csv(out_dir / "state_ranks.csv", ["bond", "rank"], rows)
        logger.info(f"QTT state: max rank {P.max_rank}, storage {P.storage}")
        return
    tt = dequantize(P, qmap).round(Tolerance(eps=eps))
    if fmt == "tt":
        write_csv(out_dir / "state_ranks.csv", ["bond", "rank"], enumerate(tt.ranks[1:-1], 1))
        logger.info(f"TT state: max rank {tt.max_rank}, storage {tt.storage}")
        return
    qt = tt_to_qtt_tucker(tt, qmap, Tolerance(eps=eps))
    rows = [
        (i + 1, qt.tucker_ranks[i], qt.core_ranks[i + 1], qt.factor_ranks[i])
        for i in range(qt.d)
    ]
    write_csv(
        out_dir / "tucker_ranks.csv", ["dimension", "tucker_rank", "core_rank", "factor_rank"], rows
    )
    logger.info(f"QTT-Tucker state: {qt}, storage {qt.storage}")


async def simulate(cfg: ModelConfig, args: argparse.Namespace, out_dir: Path) -> None:
    system = cfg.system()
    check_propensities(system)
    qmap = quantization_map(system)
    A, kind = assemble_operator(system)
    logger.info(f"{system.name}: {kind} operator, max rank {A.max_rank}")
    P0 = cfg.initial_state(system)
    times = args.times or cfg.observables.times
    keep = bool(times) or args.format != "qtt"
    propagator = Propagator(cfg.solver.amen(), logger)
    traj = await asyncio.to_thread(
        propagator.propagate, A, P0, cfg.time.grid(), qmap, args.per_step, keep
    )
    cols = species_columns(system)
    write_csv(out_dir / "means.csv", ["t", *cols], ([t, *m] for t, m in zip(traj.times, traj.means)))
    write_csv(
        out_dir / "mass.csv",
        ["t", "mass", "deficiency"],
        ((t, m, 1.0 - m) for t, m in zip(traj.times, traj.masses)),
    )
    write_csv(
        out_dir / "residual.csv",
        ["t", "eta", "max_rank", "wall_seconds"],
        zip(traj.times, traj.etas, traj.max_ranks, traj.wall_seconds),
    )
    if args.per_step:
        rows = ([t, m, *x] for t, m, x in zip(traj.step_times, traj.step_masses, traj.step_means))
        write_csv(out_dir / "steps.csv", ["t", "mass", *cols], rows)
    for t in times:
        k = next((k for k, s in enumerate(traj.times) if s >= t - 1e-12), len(traj.times) - 1)
        write_marginals(
            traj.states[k], system, qmap, cfg.observables.marginals, out_dir, f"_t{traj.times[k]:g}"
        )
    if args.format != "qtt":
        write_representation(traj.states[-1], qmap, args.format, cfg.solver.eps, out_dir)
    logger.info(f"Final means at t={traj.times[-1]:g}: {np.round(traj.means[-1], 6).tolist()}")


async def steady(cfg: ModelConfig, args: argparse.Namespace, out_dir: Path) -> None:
    system = cfg.system()
    check_propensities(system)
    qmap = quantization_map(system)
    A, kind = assemble_operator(system)
    logger.info(f"{system.name}: {kind} operator, max rank {A.max_rank}")
    P, report = await asyncio.to_thread(
        steady_state,
        A,
        cfg.initial_state(system),
        cfg.steady.step_schedule(),
        cfg.steady.eps_final,
        cfg.steady.c,
        cfg.solver.amen(),
        cfg.steady.max_iterations,
        logger,
    )
    schedule = cfg.steady.step_schedule()
    elapsed = sum(schedule.step(q) for q in range(1, report.iterations + 1))
    write_csv(
        out_dir / "residual.csv",
        ["iteration", "eta", "max_rank", "wall_seconds"],
        ((q + 1, e, r, w) for q, (e, r, w) in
         enumerate(zip(report.etas, report.max_ranks, report.wall_seconds))),
    )
    means = mean_copy_numbers(P, qmap)
    write_csv(out_dir / "means.csv", ["t", *species_columns(system)], [[elapsed, *means]])
    write_marginals(P, system, qmap, cfg.observables.marginals, out_dir)
    if system.parameter is not None:
        write_sweep(system, mean_vs_parameter(P, qmap), out_dir)
    if args.format != "qtt":
        write_representation(P, qmap, args.format, cfg.solver.eps, out_dir)
    eta = report.etas[-1] if report.etas else 0.0
    logger.info(
        f"Steady state after {report.iterations} iterations, eta {eta:.3e}, "
        f"means {np.round(means, 6).tolist()}"
    )


def write_sweep(system: ReactionSystem, table: np.ndarray, out_dir: Path) -> None:
    rows = ([y, *row] for y, row in zip(system.parameter.values, table.tolist()))
    path = write_csv(out_dir / "mean_vs_parameter.csv", ["y", *species_columns(system)], rows)
    logger.info(f"Wrote {path}")


def generic_rank_bound(system: ReactionSystem, qmap: QuantizationMap) -> list[int]:
    """``Σ_m 2·trank(w_m)`` at every bond between dimensions."""
    bound = np.zeros(len(qmap.cross_bonds()), dtype=int)
    for reaction in system.reactions:
        bound += 2 * np.array(cross_ranks(propensity_tt(reaction, system), qmap), dtype=int)
    return bound.tolist()


async def ranks(cfg: ModelConfig, args: argparse.Namespace, out_dir: Path) -> None:
    system = cfg.system()
    check_propensities(system)
    qmap = quantization_map(system)
    A, kind = assemble_operator(system)
    exact = cross_ranks(A, qmap)
    rounded = cross_ranks(A.round(Tolerance(eps=1e-12)), qmap)
    if kind == "cascade":
        bound = [5] * len(exact)
    else:
        bound = generic_rank_bound(system, qmap)
    rows = list(zip(range(1, len(exact) + 1), exact, rounded, bound))
    write_csv(out_dir / "ranks.csv", ["bond", "exact", "rounded_1e-12", "bound"], rows)
    logger.info(f"{system.name}: {kind} assembly, QTT max rank {A.max_rank}")
    for bond, e, r, b in rows:
        logger.info(f"  bond {bond}: exact {e}, rounded {r}, bound {b}")
    logger.info(f"max rank {max(exact, default=0)} (exact), {max(rounded, default=0)} (rounded 1e-12)")


def _dense_state(P: TTVector, qmap: QuantizationMap, system: ReactionSystem, j: int) -> np.ndarray:
    tt = dequantize(P, qmap)
    if system.parameter is not None:
        tt = fix_mode(tt, tt.d - 1, j)
    return tt.to_dense(get_settings().oracle_cap).reshape(-1)


async def oracle(cfg: ModelConfig, args: argparse.Namespace, out_dir: Path) -> None:
    system = cfg.system()
    check_propensities(system)
    qmap = quantization_map(system)
    j = args.parameter_index
    A_ref = dense_cme(system, j)
    A, _ = assemble_operator(system)
    P0 = cfg.initial_state(system)
    if args.steady:
        P, _ = steady_state(
            A, P0, cfg.steady.step_schedule(), cfg.steady.eps_final, cfg.steady.c,
            cfg.solver.amen(), cfg.steady.max_iterations, logger,
        )
        ref = reference_steady(A_ref)
        approx = _dense_state(P, qmap, system, j)
        approx = approx / approx.sum()
        error = np.linalg.norm(approx - ref) / np.linalg.norm(ref)
        write_csv(out_dir / "oracle_steady.csv", ["rel_error", "mass_tt", "mass_ref"],
                  [(error, approx.sum(), ref.sum())])
        logger.info(f"steady state relative error {error:.3e}")
        return
    ref0 = _dense_state(P0, qmap, system, j)
    traj = Propagator(cfg.solver.amen(), logger).propagate(
        A, P0, cfg.time.grid(), qmap, keep_states=True
    )
    rows = []
    for t, state in zip(traj.times, traj.states):
        ref = reference_propagate(A_ref, ref0, t)
        approx = _dense_state(state, qmap, system, j)
        error = np.linalg.norm(approx - ref) / np.linalg.norm(ref)
        rows.append((t, error, approx.sum(), ref.sum()))
        logger.info(f"t={t:g}: relative error {error:.3e}")
    write_csv(out_dir / "oracle.csv", ["t", "error", "mass_tt", "mass_ref"], rows)


async def _slice_steady(
    system: ReactionSystem, cfg: ModelConfig, amen: AmenConfig, j: int, limit: asyncio.Semaphore
) -> np.ndarray:
    async with limit:
        fixed = system.at_parameter(j)
        A, _ = assemble_operator(fixed)
        P0 = cfg.initial_state(fixed)
        P, report = await asyncio.to_thread(
            steady_state, A, P0, cfg.steady.step_schedule(), cfg.steady.eps_final,
            cfg.steady.c, amen, cfg.steady.max_iterations, logger,
        )
        logger.info(f"{fixed.name}: {report.iterations} iterations")
        return mean_copy_numbers(P, quantization_map(fixed))


async def sweep(cfg: ModelConfig, args: argparse.Namespace, out_dir: Path) -> None:
    system = cfg.system()
    if system.parameter is None:
        raise ConfigError([("parameter", "sweep needs a parameter axis")])
    check_propensities(system)
    if args.uncoupled:
        limit = asyncio.Semaphore(max(args.threads, 1))
        amen = cfg.solver.amen()
        tasks = [
            _slice_steady(system, cfg, amen, j, limit) for j in range(system.parameter.size)
        ]
        table = np.vstack(await asyncio.gather(*tasks))
    else:
        qmap = quantization_map(system)
        A, _ = assemble_operator(system)
        P, _ = await asyncio.to_thread(
            steady_state, A, cfg.initial_state(system), cfg.steady.step_schedule(),
            cfg.steady.eps_final, cfg.steady.c, cfg.solver.amen(),
            cfg.steady.max_iterations, logger,
        )
        table = mean_vs_parameter(P, qmap)
    write_sweep(system, table, out_dir)


COMMANDS = {
    "simulate": simulate,
    "steady": steady,
    "ranks": ranks,
    "oracle": oracle,
    "sweep": sweep,
}


async def run(args: argparse.Namespace) -> int:
    """Run one command and map failures to exit codes."""
    try:
        cfg = apply_overrides(load_config(resolve_config_path(args.config)), args)
        out_dir = Path(args.out_dir or get_settings().output_dir) / cfg.name
        logger.info(f"Running {args.command} on {cfg.name}, writing to {out_dir}")
        await COMMANDS[args.command](cfg, args, out_dir)
    except (ConfigError, FileNotFoundError, PropensityError) as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except (OracleCapError, DenseCapError) as e:
        logger.error(f"Size cap exceeded: {e}")
        return EXIT_CAP
    except TTCMEError as e:
        logger.error(f"Solver failed: {e}")
        return EXIT_SOLVER
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttcme", description="Tensor-train solvers for chemical master equations"
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("config", help="Config file or bundled model name")
    parser.add_argument("--eps", type=float, help="Solver and rounding tolerance")
    parser.add_argument("--rmax", type=int, help="Solution rank cap")
    parser.add_argument("--max-sweeps", type=int, help="AMEn sweep limit")
    parser.add_argument("--T", type=float, help="Final time")
    parser.add_argument("--T0", type=float, help="Restart interval length")
    parser.add_argument("--Nt", type=int, help="Time steps per interval (power of two)")
    parser.add_argument("--schedule", help="constant or exp:<rate>")
    parser.add_argument(
        "--format", choices=["tt", "qtt", "qtt-tucker"], default="qtt",
        help="Representation reported for the final state",
    )
    parser.add_argument(
        "--threads", type=int, default=1,
        help="Concurrent per-parameter solves of an uncoupled sweep; results do not depend on it",
    )
    parser.add_argument("--seed", type=int, help="Seed of the residual approximation")
    parser.add_argument("--out-dir", help="Output directory (default TTCME_OUTPUT_DIR)")
    parser.add_argument("--times", type=float, nargs="*", default=[], help="Marginal times")
    parser.add_argument("--per-step", action="store_true", help="Record every time step")
    parser.add_argument("--uncoupled", action="store_true", help="Sweep one solve per value")
    parser.add_argument("--steady", action="store_true", help="Oracle: compare steady states")
    parser.add_argument("--parameter-index", type=int, default=0, help="Oracle: parameter slice")
    parser.add_argument("--debug", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logger(args.debug)
    return asyncio.run(run(args))


if __name__ == "__main__":
    sys.exit(main())
