"""Mass, means, marginals and residuals of distributions stored as trains.

Weights are low-rank trains, so nothing here densifies more than a single
marginal. When a :class:`~ttcme.qtt.QuantizationMap` is given, the train is
read as QTT over its dimension groups; without one, every mode is a species.
Pass-through modes (a parameter axis) are summed over.
"""

from typing import Optional

import numpy as np

from ttcme.exceptions import InvalidTensorError
from ttcme.qtt import QuantizationMap, kron_all, qtt_poly, qtt_to_vector
from ttcme.tt_core import (
    Tolerance,
    TTMatrix,
    TTVector,
    contract_modes,
    dot,
    fix_mode,
    matvec,
    norm,
    ones,
    rank1,
)


def _species(qmap: Optional[QuantizationMap], P: TTVector) -> list[int]:
    """Dimensions that carry copy numbers."""
    if qmap is None:
        return list(range(P.d))
    return [i for i, b in enumerate(qmap.bits) if b is not None]


def _groups(qmap: Optional[QuantizationMap], P: TTVector) -> list[list[int]]:
    if qmap is None:
        return [[k] for k in range(P.d)]
    if qmap.total_modes != P.d:
        raise InvalidTensorError(
            f"train has {P.d} modes, quantization map expects {qmap.total_modes}"
        )
    return qmap.mode_groups()


def _copy_number_weight(sizes: tuple[int, ...]) -> TTVector:
    """``x`` over one dimension: QTT rank 2 over binary modes, a table otherwise."""
    if len(sizes) == 1:
        return rank1([np.arange(sizes[0], dtype=float)])
    return qtt_poly(1, len(sizes))


def total_mass(P: TTVector) -> float:
    """``Σ_x P(x)``."""
    return float(np.real(dot(ones(P.mode_sizes), P)))


def _checked_mass(P: TTVector) -> float:
    mass = total_mass(P)
    if mass == 0.0:
        raise InvalidTensorError("distribution has zero total mass")
    return mass


def mean_copy_numbers(P: TTVector, qmap: Optional[QuantizationMap] = None) -> np.ndarray:
    """Mean copy number of every species, normalized by the total mass.

    Raises:
        InvalidTensorError: If the total mass is zero
    """
    mass = _checked_mass(P)
    groups = _groups(qmap, P)
    means = []
    for i in _species(qmap, P):
        parts = []
        for j, group in enumerate(groups):
            sizes = tuple(P.mode_sizes[k] for k in group)
            parts.append(_copy_number_weight(sizes) if j == i else ones(sizes))
        means.append(float(np.real(dot(kron_all(parts), P))) / mass)
    return np.array(means)


def marginal(P: TTVector, i: int, qmap: Optional[QuantizationMap] = None) -> np.ndarray:
    """Distribution of species ``i`` with every other dimension summed out.

    Raises:
        InvalidTensorError: If ``i`` is out of range or the mass is zero
    """
    groups = _groups(qmap, P)
    species = _species(qmap, P)
    if not 0 <= i < len(species):
        raise InvalidTensorError(f"species {i + 1} out of range for {len(species)} species")
    keep = set(groups[species[i]])
    weights = {k: np.ones(n) for k, n in enumerate(P.mode_sizes) if k not in keep}
    part = contract_modes(P, weights)
    values = np.real(qtt_to_vector(part))
    total = values.sum()
    if total == 0.0:
        raise InvalidTensorError("distribution has zero total mass")
    return values / total


def residual_norm(A: TTMatrix, P: TTVector, eps: float = 0.01) -> float:
    """``‖AP‖/‖P‖`` with ``AP`` rounded to relative accuracy ``eps``.

    Raises:
        InvalidTensorError: If ``P`` is zero
    """
    nrm = norm(P)
    if nrm == 0.0:
        raise InvalidTensorError("residual of a zero vector is undefined")
    return norm(matvec(A, P).round(Tolerance(eps=eps))) / nrm


def mean_vs_parameter(P: TTVector, qmap: QuantizationMap) -> np.ndarray:
    """Means per parameter value, one row per slice of the trailing parameter mode."""
    groups = _groups(qmap, P)
    axis = [i for i, b in enumerate(qmap.bits) if b is None]
    if not axis:
        return mean_copy_numbers(P, qmap)[None, :]
    mode = groups[axis[-1]][0]
    sliced = QuantizationMap(bits=tuple(b for j, b in enumerate(qmap.bits) if j != axis[-1]))
    rows = [
        mean_copy_numbers(fix_mode(P, mode, j), sliced) for j in range(P.mode_sizes[mode])
    ]
    return np.vstack(rows)


def time_profiles(
    X: TTVector, qmap: Optional[QuantizationMap], time_modes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Mass and means at every time point of a space-time solution.

    ``X`` carries ``time_modes`` binary time modes (or one mode of size 1)
    ahead of the state modes. The copy number of a quantized species is the
    weighted sum of its bits, so each mean is a sum of rank-1 contractions.

    Returns:
        tuple[np.ndarray, np.ndarray]: Masses ``(Nt,)`` and means ``(Nt, d)``
    """
    n_time = max(time_modes, 1)
    state = ones(X.mode_sizes[n_time:])
    groups = [[k + n_time for k in g] for g in _groups(qmap, state)]
    species = [groups[i] for i in _species(qmap, state)]
    state_modes = range(n_time, X.d)
    ones_w = {k: np.ones(X.mode_sizes[k]) for k in state_modes}
    masses = np.real(qtt_to_vector(contract_modes(X, ones_w)))
    means = []
    for group in species:
        total = np.zeros_like(masses)
        if len(group) == 1:
            w = dict(ones_w)
            w[group[0]] = np.arange(X.mode_sizes[group[0]], dtype=float)
            total += np.real(qtt_to_vector(contract_modes(X, w)))
        else:
            for level, k in enumerate(group):
                w = dict(ones_w)
                w[k] = np.array([0.0, 2.0**level])
                total += np.real(qtt_to_vector(contract_modes(X, w)))
        means.append(total)
    with np.errstate(divide="ignore", invalid="ignore"):
        return masses, np.column_stack(means) / masses[:, None]
