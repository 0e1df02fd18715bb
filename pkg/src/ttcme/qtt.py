"""Quantized tensor trains.

A mode of size ``2**L`` is split into ``L`` binary modes ordered
least-significant bit first: index ``x = Σ_l b_l·2**(l-1)`` maps to modes
``(b_1, ..., b_L)``. Every vector and operator in the package follows this
ordering.
"""

from typing import Optional, Sequence

import numpy as np

from pydantic import Field, field_validator

from ttcme.base_model import BaseModel
from ttcme.exceptions import InvalidTensorError, QuantizationError, ShapeMismatchError
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
    rank1,
    scale,
    truncation_rank,
)


class QuantizationMap(BaseModel):
    """Bit counts per dimension.

    Attributes:
        bits (tuple[Optional[int], ...]): ``L_i`` for a species mode of size
            ``2**L_i``; None marks a mode kept as is (a parameter axis)
    """

    bits: tuple[Optional[int], ...] = Field(min_length=1)

    @field_validator("bits")
    @classmethod
    def _positive(cls, v: tuple[Optional[int], ...]) -> tuple[Optional[int], ...]:
        for b in v:
            if b is not None and b < 1:
                raise ValueError("bit counts must be at least 1")
        return v

    @property
    def total_modes(self) -> int:
        return sum(1 if b is None else b for b in self.bits)

    def mode_groups(self, quantized: bool = True) -> list[list[int]]:
        """Train mode indices belonging to each dimension."""
        groups, start = [], 0
        for b in self.bits:
            width = 1 if (b is None or not quantized) else b
            groups.append(list(range(start, start + width)))
            start += width
        return groups

    def cross_bonds(self, quantized: bool = True) -> list[int]:
        """Bond indices (into ``ranks``) that separate two dimensions."""
        return [g[-1] + 1 for g in self.mode_groups(quantized)[:-1]]


def cross_ranks(f, qmap: QuantizationMap, quantized: bool = True) -> tuple[int, ...]:
    """Ranks of a train at the bonds between dimensions."""
    return tuple(f.ranks[b] for b in qmap.cross_bonds(quantized))


def _bits_of(n: int, mode: int) -> int:
    bits = int(n).bit_length() - 1
    if n < 2 or (1 << bits) != n:
        raise QuantizationError(mode, n)
    return bits


def _split_core(core: np.ndarray, bits: int, unit: int) -> list[np.ndarray]:
    """Exact split of one merged core into ``bits`` cores with ``unit``-sized modes.

    ``core`` is ``(r, unit**bits, r')`` with the merged index most significant
    bit first in C order; the returned cores are least significant first.
    """
    r0, _, r1 = core.shape
    t = core.reshape((r0,) + (unit,) * bits + (r1,))
    t = t.transpose([0, *range(bits, 0, -1), bits + 1])
    cores, left = [], r0
    rest = t.reshape(r0 * unit, -1)
    for _ in range(bits - 1):
        u, s, vt = np.linalg.svd(rest, full_matrices=False)
        k = truncation_rank(s, 0.0, None, rest.shape)
        cores.append(u[:, :k].reshape(left, unit, k))
        rest = (s[:k, None] * vt[:k]).reshape(k * unit, -1)
        left = k
    cores.append(rest.reshape(left, unit, r1))
    return cores


def _check_map(n_modes: int, qmap: QuantizationMap) -> None:
    if n_modes != len(qmap.bits):
        raise QuantizationError(
            n_modes, len(qmap.bits), "modes do not match the quantization map"
        )


def quantize(f: TTVector, qmap: QuantizationMap, tol: Optional[Tolerance] = None) -> TTVector:
    """Split every quantized mode into binary modes, then round at ``tol``.

    Raises:
        QuantizationError: If a quantized mode is not ``2**L_i``
    """
    _check_map(f.d, qmap)
    cores = []
    for i, (core, bits) in enumerate(zip(f.cores, qmap.bits)):
        if bits is None:
            cores.append(core)
            continue
        if core.shape[1] != 2**bits:
            raise QuantizationError(i, core.shape[1])
        cores.extend(_split_core(core, bits, 2))
    res = TTVector(cores)
    return res.round(tol) if tol is not None else res


def dequantize(f: TTVector, qmap: QuantizationMap) -> TTVector:
    """Merge binary modes back into one mode per dimension."""
    if f.d != qmap.total_modes:
        raise QuantizationError(f.d, qmap.total_modes, "modes do not match the map")
    cores, pos = [], 0
    for bits in qmap.bits:
        if bits is None:
            cores.append(f.cores[pos])
            pos += 1
            continue
        acc = f.cores[pos]
        for core in f.cores[pos + 1 : pos + bits]:
            if core.shape[1] != 2:
                raise QuantizationError(pos, core.shape[1], "is not a binary mode")
            merged = np.einsum("aib,bjc->ajic", acc, core)
            acc = merged.reshape(acc.shape[0], -1, core.shape[2])
        cores.append(acc)
        pos += bits
    return TTVector(cores)


def quantize_matrix(
    A: TTMatrix, qmap: QuantizationMap, tol: Optional[Tolerance] = None
) -> TTMatrix:
    _check_map(A.d, qmap)
    cores = []
    for i, (core, bits) in enumerate(zip(A.cores, qmap.bits)):
        if bits is None:
            cores.append(core)
            continue
        r0, n, m, r1 = core.shape
        if n != 2**bits or m != 2**bits:
            raise QuantizationError(i, max(n, m))
        # interleave row and column bits so each merged unit is (row_l, col_l)
        t = core.reshape((r0,) + (2,) * (2 * bits) + (r1,))
        order = [0]
        for level in range(bits):
            order += [1 + level, 1 + bits + level]
        t = t.transpose(order + [2 * bits + 1]).reshape(r0, 4**bits, r1)
        for piece in _split_core(t, bits, 4):
            cores.append(piece.reshape(piece.shape[0], 2, 2, piece.shape[2]))
    res = TTMatrix(cores)
    return res.round(tol) if tol is not None else res


def dequantize_matrix(A: TTMatrix, qmap: QuantizationMap) -> TTMatrix:
    if A.d != qmap.total_modes:
        raise QuantizationError(A.d, qmap.total_modes, "modes do not match the map")
    cores, pos = [], 0
    for bits in qmap.bits:
        if bits is None:
            cores.append(A.cores[pos])
            pos += 1
            continue
        acc = A.cores[pos]
        for core in A.cores[pos + 1 : pos + bits]:
            merged = np.einsum("aikb,bjlc->ajilkc", acc, core)
            a, j, i, l_, k, c = merged.shape
            acc = merged.reshape(a, j * i, l_ * k, c)
        cores.append(acc)
        pos += bits
    return TTMatrix(cores)


def vector_to_qtt_dense(values: np.ndarray) -> np.ndarray:
    """View a length ``2**L`` vector as an ``L``-mode binary tensor."""
    values = np.asarray(values)
    bits = _bits_of(values.shape[0], 0)
    return values.reshape((2,) * bits, order="F")


def qtt_to_vector(f: TTVector) -> np.ndarray:
    return f.to_dense().ravel(order="F")


def qtt_from_1d(values: np.ndarray, tol: Tolerance = EXACT) -> TTVector:
    """QTT compression of a 1-D table of length ``2**L``."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 1:
        return rank1([values])
    return from_dense(vector_to_qtt_dense(values), tol)


def qtt_exp(kappa: float, bits: int) -> TTVector:
    """``exp(kappa·x)`` on ``0..2**bits-1``; rank 1."""
    return rank1([np.array([1.0, np.exp(kappa * 2**level)]) for level in range(bits)])


def qtt_delta(a: int, bits: int) -> TTVector:
    if not 0 <= a < 2**bits:
        raise InvalidTensorError(f"delta position {a} outside 0..{2**bits - 1}")
    return rank1([np.eye(2)[(a >> level) & 1] for level in range(bits)])


def qtt_sin(kappa: float, phi: float, bits: int) -> TTVector:
    """``sin(kappa·x + phi)`` as an exact rank-2 train built from rotations."""

    def rotation(alpha: float) -> np.ndarray:
        return np.array([[np.cos(alpha), np.sin(alpha)], [-np.sin(alpha), np.cos(alpha)]])

    if bits == 1:
        return rank1([np.sin(phi + kappa * np.arange(2))])
    cores = []
    first = np.stack([[np.cos(phi + kappa * b), np.sin(phi + kappa * b)] for b in (0, 1)])
    cores.append(first.reshape(1, 2, 2))
    for level in range(1, bits):
        core = np.stack([rotation(kappa * b * 2**level) for b in (0, 1)], axis=1)
        if level == bits - 1:
            core = core[:, :, 1:]
        cores.append(core)
    return TTVector(cores)


def qtt_poly(power: int, bits: int, tol: Tolerance = EXACT) -> TTVector:
    """Monomial ``x**power``; QTT rank ``power + 1``."""
    return qtt_from_1d(np.arange(2**bits, dtype=float) ** power, tol)


def qtt_identity(bits: int) -> TTMatrix:
    return identity([2] * bits)


def qtt_shift(z: int, bits: int) -> TTMatrix:
    """Shift matrix ``J**z`` for ``z = ±1`` with QTT ranks at most 2.

    ``J**1`` has ones at ``(x, x + 1)``; ``J**-1`` is its transpose. The cores
    propagate the carry of ``x + 1`` from the least significant bit.

    Raises:
        InvalidTensorError: If ``|z| != 1``
    """
    if z not in (1, -1):
        raise InvalidTensorError(f"qtt_shift supports z = ±1, got {z}")
    if bits < 1:
        raise InvalidTensorError("qtt_shift needs at least one bit")
    carry = np.zeros((2, 2, 2, 2))
    carry[0, 0, 0, 0] = carry[0, 1, 1, 0] = 1.0
    carry[1, 0, 1, 0] = 1.0
    carry[1, 1, 0, 1] = 1.0
    if bits == 1:
        cores = [carry[1:2, :, :, 0:1]]
    else:
        cores = [carry[1:2]] + [carry] * (bits - 2) + [carry[..., 0:1]]
    shift = TTMatrix(cores)
    return shift if z == 1 else shift.transpose()


def qtt_shift_power(z: int, bits: int) -> TTMatrix:
    """``J**z`` for any integer ``z`` by repeated products of unit shifts."""
    if z == 0:
        return qtt_identity(bits)
    unit = qtt_shift(1 if z > 0 else -1, bits)
    res = unit
    for _ in range(abs(z) - 1):
        res = matmul(res, unit).round(Tolerance(eps=1e-14))
    return res


def qtt_diag_matrix(w: TTVector) -> TTMatrix:
    return diag(w)


def _embed_entries(
    entries: dict[tuple[int, int], TTMatrix], n_in: int, n_out: int
) -> list[np.ndarray]:
    """Turn a block core with train-valued entries into plain cores.

    ``entries[(s, t)]`` is the operator moving the automaton from state ``s``
    on the left bond to state ``t`` on the right bond. Every entry keeps its
    own internal channels, so the bond ranks inside the dimension are the sum
    of the entry ranks.
    """
    items = list(entries.items())
    n_modes = items[0][1].d
    if n_modes == 1:
        sample = items[0][1].cores[0]
        dtype = np.result_type(*(m.cores[0] for _, m in items))
        core = np.zeros((n_in, sample.shape[1], sample.shape[2], n_out), dtype)
        for (s, t), m in items:
            core[s, :, :, t] += m.cores[0][0, :, :, 0]
        return [core]
    dtype = np.result_type(*(c for _, m in items for c in m.cores))
    cores = []
    for k in range(n_modes):
        widths_in = [m.cores[k].shape[0] for _, m in items]
        widths_out = [m.cores[k].shape[3] for _, m in items]
        rows = n_in if k == 0 else sum(widths_in)
        cols = n_out if k == n_modes - 1 else sum(widths_out)
        n, mm = items[0][1].cores[k].shape[1:3]
        core = np.zeros((rows, n, mm, cols), dtype)
        off_in = np.cumsum([0, *widths_in])
        off_out = np.cumsum([0, *widths_out])
        for e, ((s, t), m) in enumerate(items):
            block = m.cores[k]
            r_sl = slice(s, s + 1) if k == 0 else slice(off_in[e], off_in[e + 1])
            c_sl = slice(t, t + 1) if k == n_modes - 1 else slice(off_out[e], off_out[e + 1])
            core[r_sl, :, :, c_sl] += block
        cores.append(core)
    return cores


def _put(entries: dict, s: int, t: int, op: TTMatrix) -> None:
    entries[(s, t)] = add(entries[(s, t)], op) if (s, t) in entries else op


def _dimension_reference(local, pairs, m: int) -> TTMatrix:
    if local[m] is not None:
        return local[m]
    if pairs.get(m):
        return pairs[m][0][0]
    if pairs.get(m - 1):
        return pairs[m - 1][0][1]
    raise InvalidTensorError(f"dimension {m + 1} has no operator to size it")


def block_chain(
    local: Sequence[Optional[TTMatrix]],
    pairs: Optional[dict[int, Sequence[tuple[TTMatrix, TTMatrix]]]] = None,
) -> TTMatrix:
    """Operator ``Σ_m local_m + Σ_m Σ_k left_k ⊗ right_k`` with neighbour coupling.

    ``local[m]`` acts on dimension ``m`` alone; ``pairs[m]`` lists products
    acting on dimensions ``m`` and ``m + 1``. Each dimension may span several
    train modes (binary modes in QTT). The automaton behind the cores has
    states ``start``, one pending state per pair and ``done``, so the rank at
    the bond after dimension ``m`` is ``2 + len(pairs[m])``.

    Args:
        local (Sequence[Optional[TTMatrix]]): One operator (or None) per dimension
        pairs (Optional[dict]): Nearest-neighbour products keyed by the left dimension

    Returns:
        TTMatrix: The assembled operator, exact, without any SVD
    """
    pairs = pairs or {}
    d = len(local)
    refs = [_dimension_reference(local, pairs, m) for m in range(d)]
    for m, plist in pairs.items():
        if not 0 <= m < d - 1:
            raise InvalidTensorError(f"pair at dimension {m + 1} has no right neighbour")
        for left, right in plist:
            if left.row_sizes != refs[m].row_sizes:
                raise ShapeMismatchError("block_chain", left.row_sizes, refs[m].row_sizes)
            if right.row_sizes != refs[m + 1].row_sizes:
                raise ShapeMismatchError(
                    "block_chain", right.row_sizes, refs[m + 1].row_sizes
                )

    cores: list[np.ndarray] = []
    for m in range(d):
        k_in = len(pairs.get(m - 1, ())) if m > 0 else 0
        k_out = len(pairs.get(m, ())) if m < d - 1 else 0
        # states: 0 = start, 1..k = pending, k + 1 = done
        n_in = 1 if m == 0 else 2 + k_in
        n_out = 1 if m == d - 1 else 2 + k_out
        done_in = k_in + 1
        done_out = 0 if m == d - 1 else k_out + 1
        ident = identity(refs[m].row_sizes)
        entries: dict[tuple[int, int], TTMatrix] = {}
        if m < d - 1:
            _put(entries, 0, 0, ident)
            for k, (left, _) in enumerate(pairs.get(m, ())):
                _put(entries, 0, 1 + k, left)
        if local[m] is not None:
            _put(entries, 0, done_out, local[m])
        if m > 0:
            for k, (_, right) in enumerate(pairs.get(m - 1, ())):
                _put(entries, 1 + k, done_out, right)
            _put(entries, done_in, done_out, ident)
        if not entries:
            _put(entries, 0, done_out, scale(ident, 0.0))
        cores.extend(_embed_entries(entries, n_in, n_out))
    return TTMatrix(cores)


def laplace_like_qtt(ops: Sequence[TTMatrix]) -> TTMatrix:
    """``Σ_m I ⊗ ... ⊗ D_m ⊗ ... ⊗ I``; bond ranks 2 between dimensions."""
    return block_chain(list(ops))


def kron_all(items: Sequence):
    res = items[0]
    for item in items[1:]:
        res = kron(res, item)
    return res
