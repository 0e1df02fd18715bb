"""Tensor trains: vectors with 3-index cores, operators with 4-index cores.

Dense realizations use C order, so the first mode varies slowest and a
rank-1 :class:`TTMatrix` equals ``np.kron`` of its factors. All operations
return new objects; cores are never modified in place.
"""

import hashlib

from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence, Union

import numpy as np

from pydantic import Field

from ttcme.base_model import BaseModel
from ttcme.exceptions import DenseCapError, InvalidTensorError, ShapeMismatchError
from ttcme.settings import get_settings


class Tolerance(BaseModel):
    """Truncation target for rounding and compression.

    Attributes:
        eps (float): Relative Frobenius-norm accuracy in [0, 1)
        rmax (Optional[int]): Hard cap on every bond rank, unlimited when None
    """

    eps: float = Field(default=0.0, ge=0.0, lt=1.0)
    rmax: Optional[int] = Field(default=None, ge=1)


EXACT = Tolerance(eps=0.0)


@dataclass(frozen=True)
class OrthoState:
    """Orthogonality of a train.

    ``kind="left"`` with ``index=i`` means cores ``0..i`` are left-orthogonal,
    ``kind="right"`` with ``index=i`` means cores ``i..d-1`` are
    right-orthogonal.
    """

    kind: Literal["none", "left", "right"] = "none"
    index: int = -1


NO_ORTHO = OrthoState()


def _check_chain(cores: Sequence[np.ndarray], ndim: int) -> None:
    if not cores:
        raise InvalidTensorError("a tensor train needs at least one core")
    for k, core in enumerate(cores):
        if core.ndim != ndim:
            raise InvalidTensorError(
                f"core {k + 1} has {core.ndim} indices, expected {ndim}"
            )
    if cores[0].shape[0] != 1 or cores[-1].shape[-1] != 1:
        raise InvalidTensorError("boundary ranks must be 1")
    for k in range(len(cores) - 1):
        if cores[k].shape[-1] != cores[k + 1].shape[0]:
            raise InvalidTensorError(
                f"rank mismatch between cores {k + 1} and {k + 2}: "
                f"{cores[k].shape[-1]} != {cores[k + 1].shape[0]}"
            )


class _Train:
    """Shared behaviour of vector and matrix trains."""

    _ndim = 0

    def __init__(self, cores: Sequence[np.ndarray], ortho: OrthoState = NO_ORTHO):
        cores = [np.asarray(c) for c in cores]
        _check_chain(cores, self._ndim)
        self._cores = tuple(cores)
        self.ortho_state = ortho

    @property
    def cores(self) -> tuple[np.ndarray, ...]:
        return self._cores

    @property
    def d(self) -> int:
        return len(self._cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1, *(c.shape[-1] for c in self._cores))

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    @property
    def dtype(self) -> np.dtype:
        return np.result_type(*self._cores)

    @property
    def storage(self) -> int:
        """Number of stored entries over all cores."""
        return int(sum(c.size for c in self._cores))

    def describe(self) -> str:
        """Text dump for diagnostics: sizes, ranks and per-core checksums."""
        lines = [f"{type(self).__name__} d={self.d} ranks={self.ranks}"]
        for k, core in enumerate(self._cores):
            digest = hashlib.sha1(np.ascontiguousarray(core).tobytes()).hexdigest()
            lines.append(
                f"  core {k + 1}: shape={core.shape} "
                f"abs_sum={np.abs(core).sum():.12e} sha1={digest[:12]}"
            )
        return "\n".join(lines)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(d={self.d}, ranks={self.ranks})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, other, 1.0, -1.0)

    def __mul__(self, alpha):
        if not np.isscalar(alpha):
            return NotImplemented
        return scale(self, alpha)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class TTVector(_Train):
    """A d-mode tensor stored as a chain of cores shaped ``(r_{k-1}, n_k, r_k)``."""

    _ndim = 3

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self._cores)

    @property
    def size(self) -> int:
        return int(np.prod(self.mode_sizes, dtype=np.int64))

    def to_dense(self, cap: Optional[int] = None) -> np.ndarray:
        return to_dense(self, cap)

    def round(self, tol: Tolerance) -> "TTVector":
        return tt_round(self, tol)

    def norm(self) -> float:
        return norm(self)


class TTMatrix(_Train):
    """A linear operator stored as a chain of cores ``(R_{k-1}, n_k, m_k, R_k)``."""

    _ndim = 4

    @property
    def row_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self._cores)

    @property
    def col_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self._cores)

    def to_dense(self, cap: Optional[int] = None) -> np.ndarray:
        rows = int(np.prod(self.row_sizes, dtype=np.int64))
        cols = int(np.prod(self.col_sizes, dtype=np.int64))
        _check_cap(rows * cols, cap)
        res = self._cores[0][0]
        for core in self._cores[1:]:
            res = np.tensordot(res, core, axes=(-1, 0))
        res = res[..., 0]
        order = [*range(0, 2 * self.d, 2), *range(1, 2 * self.d, 2)]
        return res.transpose(order).reshape(rows, cols)

    def as_vector(self) -> TTVector:
        """Merge row and column index of every core into one mode."""
        return TTVector(
            [c.reshape(c.shape[0], c.shape[1] * c.shape[2], c.shape[3]) for c in self._cores]
        )

    @classmethod
    def from_vector(
        cls, f: TTVector, row_sizes: Sequence[int], col_sizes: Sequence[int]
    ) -> "TTMatrix":
        return cls(
            [
                c.reshape(c.shape[0], n, m, c.shape[2])
                for c, n, m in zip(f.cores, row_sizes, col_sizes)
            ]
        )

    def round(self, tol: Tolerance) -> "TTMatrix":
        return TTMatrix.from_vector(
            tt_round(self.as_vector(), tol), self.row_sizes, self.col_sizes
        )

    def transpose(self) -> "TTMatrix":
        return TTMatrix([c.transpose(0, 2, 1, 3) for c in self._cores])

    @property
    def T(self) -> "TTMatrix":
        return self.transpose()


Train = Union[TTVector, TTMatrix]


def _check_cap(size: int, cap: Optional[int]) -> None:
    cap = get_settings().dense_cap if cap is None else cap
    if size > cap:
        raise DenseCapError(size, cap)


def truncation_rank(
    s: np.ndarray,
    delta: float,
    rmax: Optional[int] = None,
    shape: Optional[tuple[int, int]] = None,
) -> int:
    """Smallest rank whose discarded tail of ``s`` has 2-norm at most ``delta``.

    Singular values at the numerical-rank floor of ``np.linalg.matrix_rank``
    are always discarded; at least one value is kept.
    """
    if s.size == 0 or s[0] == 0.0:
        return 1
    tail = np.sqrt(np.cumsum((s * s)[::-1]))[::-1]
    tail = np.append(tail, 0.0)
    rank = int(np.argmax(tail <= delta))
    dims = max(shape) if shape else s.size
    floor = s[0] * dims * np.finfo(float).eps
    rank = min(rank, int(np.count_nonzero(s > floor)))
    if rmax is not None:
        rank = min(rank, rmax)
    return max(rank, 1)


def from_dense(t: np.ndarray, tol: Tolerance = EXACT) -> TTVector:
    """TT-SVD of a dense tensor.

    Args:
        t (np.ndarray): Dense d-mode tensor
        tol (Tolerance): Accuracy target; with ``eps=0`` each rank equals the
            numerical rank of the matching unfolding matrix

    Returns:
        TTVector: Left-orthogonal train with ``‖dense - t‖ ≤ eps·‖t‖``

    Raises:
        InvalidTensorError: If the tensor is empty or has non-finite entries
    """
    t = np.asarray(t)
    if t.size == 0:
        raise InvalidTensorError("cannot decompose an empty tensor")
    if not np.all(np.isfinite(t)):
        raise InvalidTensorError("tensor has non-finite entries")
    if t.ndim == 0:
        t = t.reshape(1)
    shape = t.shape
    d = len(shape)
    delta = tol.eps / np.sqrt(max(d - 1, 1)) * np.linalg.norm(t)
    cores = []
    rank = 1
    rest = t
    for k in range(d - 1):
        mat = rest.reshape(rank * shape[k], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        new_rank = truncation_rank(s, delta, tol.rmax, mat.shape)
        cores.append(u[:, :new_rank].reshape(rank, shape[k], new_rank))
        rest = s[:new_rank, None] * vt[:new_rank]
        rank = new_rank
    cores.append(rest.reshape(rank, shape[-1], 1))
    return TTVector(cores, OrthoState("left", d - 2))


def to_dense(f: TTVector, cap: Optional[int] = None) -> np.ndarray:
    """Evaluate the full tensor; guarded by the densification cap."""
    _check_cap(f.size, cap)
    res = f.cores[0][0]
    for core in f.cores[1:]:
        res = np.tensordot(res, core, axes=(-1, 0))
    return res[..., 0].reshape(f.mode_sizes)


def rank1(vectors: Sequence[np.ndarray]) -> TTVector:
    if len(vectors) == 0:
        raise InvalidTensorError("rank1 needs at least one factor")
    return TTVector([np.asarray(v).reshape(1, -1, 1) for v in vectors])


def ones(sizes: Sequence[int]) -> TTVector:
    return rank1([np.ones(n) for n in sizes])


def zeros(sizes: Sequence[int]) -> TTVector:
    return rank1([np.zeros(n) for n in sizes])


def identity(sizes: Sequence[int]) -> TTMatrix:
    return TTMatrix([np.eye(n).reshape(1, n, n, 1) for n in sizes])


def rank1_matrix(factors: Sequence[np.ndarray]) -> TTMatrix:
    return TTMatrix([np.asarray(m).reshape(1, *np.shape(m), 1) for m in factors])


def diag(w: TTVector) -> TTMatrix:
    """Diagonal operator with the entries of ``w``; ranks are those of ``w``."""
    return TTMatrix(
        [np.einsum("aib,ij->aijb", c, np.eye(c.shape[1])) for c in w.cores]
    )


def _mode_shapes(f: Train) -> tuple[tuple[int, ...], ...]:
    return tuple(c.shape[1:-1] for c in f.cores)


def add(f: Train, g: Train, alpha: complex = 1.0, beta: complex = 1.0) -> Train:
    """Exact ``alpha·f + beta·g``; ranks add, boundary ranks stay 1."""
    if type(f) is not type(g) or _mode_shapes(f) != _mode_shapes(g):
        raise ShapeMismatchError(
            "add", [np.prod(s) for s in _mode_shapes(f)], [np.prod(s) for s in _mode_shapes(g)]
        )
    fc, gc = list(f.cores), list(g.cores)
    fc[0], gc[0] = alpha * fc[0], beta * gc[0]
    if f.d == 1:
        return type(f)([fc[0] + gc[0]])
    dtype = np.result_type(fc[0], gc[0], *fc[1:], *gc[1:])
    cores = []
    for k, (a, b) in enumerate(zip(fc, gc)):
        mid = a.shape[1:-1]
        if k == 0:
            core = np.concatenate([a, b], axis=-1)
        elif k == f.d - 1:
            core = np.concatenate([a, b], axis=0)
        else:
            core = np.zeros((a.shape[0] + b.shape[0], *mid, a.shape[-1] + b.shape[-1]), dtype)
            core[: a.shape[0], ..., : a.shape[-1]] = a
            core[a.shape[0] :, ..., a.shape[-1] :] = b
        cores.append(core.astype(dtype, copy=False))
    return type(f)(cores)


def scale(f: Train, alpha: complex) -> Train:
    cores = list(f.cores)
    cores[0] = alpha * cores[0]
    return type(f)(cores)


def hadamard(f: TTVector, g: TTVector) -> TTVector:
    """Elementwise product; ranks multiply."""
    if f.mode_sizes != g.mode_sizes:
        raise ShapeMismatchError("hadamard", f.mode_sizes, g.mode_sizes)
    cores = []
    for a, b in zip(f.cores, g.cores):
        core = np.einsum("aic,bie->abice", a, b)
        cores.append(core.reshape(a.shape[0] * b.shape[0], a.shape[1], -1))
    return TTVector(cores)


def dot(f: TTVector, g: TTVector) -> complex:
    """Inner product ``Σ conj(f)·g`` by transfer matrices."""
    if f.mode_sizes != g.mode_sizes:
        raise ShapeMismatchError("dot", f.mode_sizes, g.mode_sizes)
    v = np.ones((1, 1))
    for a, b in zip(f.cores, g.cores):
        v = np.tensordot(v, b, axes=(1, 0))
        v = np.tensordot(a.conj(), v, axes=([0, 1], [0, 1]))
    res = v[0, 0]
    return float(res) if np.isrealobj(res) else complex(res)


def norm(f: TTVector) -> float:
    """Frobenius norm, taken from the last core after left-orthogonalization."""
    g = orthogonalize(f, "left")
    return float(np.linalg.norm(g.cores[-1]))


def matvec(A: TTMatrix, f: TTVector) -> TTVector:
    """Exact operator application; ranks multiply, the caller rounds."""
    if A.col_sizes != f.mode_sizes:
        raise ShapeMismatchError("matvec", A.col_sizes, f.mode_sizes)
    cores = []
    for a, b in zip(A.cores, f.cores):
        core = np.einsum("aijc,bje->abice", a, b)
        cores.append(core.reshape(a.shape[0] * b.shape[0], a.shape[1], -1))
    return TTVector(cores)


def matmul(A: TTMatrix, B: TTMatrix) -> TTMatrix:
    """Operator product ``A·B``; ranks multiply."""
    if A.col_sizes != B.row_sizes:
        raise ShapeMismatchError("matmul", A.col_sizes, B.row_sizes)
    cores = []
    for a, b in zip(A.cores, B.cores):
        core = np.einsum("aijc,bjke->abikce", a, b)
        cores.append(
            core.reshape(a.shape[0] * b.shape[0], a.shape[1], b.shape[2], -1)
        )
    return TTMatrix(cores)


def kron(f: Train, g: Train) -> Train:
    """Kronecker product: the modes of ``f`` followed by the modes of ``g``."""
    if type(f) is not type(g):
        raise TypeError("kron needs two vectors or two matrices")
    return type(f)([*f.cores, *g.cores])


def orthogonalize(f: TTVector, direction: Literal["left", "right"] = "left") -> TTVector:
    """QR sweep leaving all cores but one orthogonal; the value is unchanged."""
    d = f.d
    if d == 1:
        return TTVector(f.cores, OrthoState(direction, 0))
    target = OrthoState("left", d - 2) if direction == "left" else OrthoState("right", 1)
    if f.ortho_state == target:
        return f
    cores = list(f.cores)
    if direction == "left":
        for k in range(d - 1):
            r0, n, r1 = cores[k].shape
            q, r = np.linalg.qr(cores[k].reshape(r0 * n, r1))
            cores[k] = q.reshape(r0, n, -1)
            cores[k + 1] = np.tensordot(r, cores[k + 1], axes=(1, 0))
    else:
        for k in range(d - 1, 0, -1):
            r0, n, r1 = cores[k].shape
            q, r = np.linalg.qr(cores[k].reshape(r0, n * r1).T)
            cores[k] = q.T.reshape(-1, n, r1)
            cores[k - 1] = np.tensordot(cores[k - 1], r.T, axes=(2, 0))
    return TTVector(cores, target)


def round_with_error(f: TTVector, tol: Tolerance) -> tuple[TTVector, float]:
    """Round ``f`` and report the achieved relative error.

    Left-orthogonalizes, then truncates right to left with a per-bond budget
    of ``eps/sqrt(d-1)·‖f‖``. The result is right-orthogonal. When ``rmax``
    binds, the returned error exceeds ``eps``.
    """
    d = f.d
    if d == 1:
        return TTVector(f.cores, OrthoState("right", 0)), 0.0
    g = orthogonalize(f, "left")
    cores = list(g.cores)
    nrm = np.linalg.norm(cores[-1])
    delta = tol.eps / np.sqrt(d - 1) * nrm
    discarded = 0.0
    for k in range(d - 1, 0, -1):
        r0, n, r1 = cores[k].shape
        mat = cores[k].reshape(r0, n * r1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        rank = truncation_rank(s, delta, tol.rmax, mat.shape)
        discarded += float(np.sum(s[rank:] ** 2))
        cores[k] = vt[:rank].reshape(rank, n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], u[:, :rank] * s[:rank], axes=(2, 0))
    err = np.sqrt(discarded) / nrm if nrm > 0 else 0.0
    return TTVector(cores, OrthoState("right", 1)), float(err)


def tt_round(f: TTVector, tol: Tolerance) -> TTVector:
    """Rounding with ``‖result - f‖ ≤ eps·‖f‖`` (unless ``rmax`` binds)."""
    return round_with_error(f, tol)[0]


def contract_modes(f: TTVector, weights: Mapping[int, np.ndarray]) -> TTVector:
    """Contract the given modes against weight vectors.

    Each contracted core becomes a rank-to-rank matrix absorbed into the
    nearest remaining core, so the remaining modes keep their order and the
    ranks never grow. At least one mode must remain.
    """
    for mode, w in weights.items():
        if not 0 <= mode < f.d:
            raise InvalidTensorError(f"mode {mode + 1} out of range for d={f.d}")
        if np.shape(w) != (f.mode_sizes[mode],):
            raise ShapeMismatchError("contract_modes", (f.mode_sizes[mode],), np.shape(w))
    if len(weights) >= f.d:
        raise InvalidTensorError("contract_modes must leave at least one mode")
    kept: list[np.ndarray] = []
    carry: Optional[np.ndarray] = None
    for k, core in enumerate(f.cores):
        if k in weights:
            mat = np.tensordot(core, weights[k], axes=(1, 0))
            if kept:
                kept[-1] = np.tensordot(kept[-1], mat, axes=(2, 0))
            else:
                carry = mat if carry is None else carry @ mat
        else:
            if carry is not None:
                core = np.tensordot(carry, core, axes=(1, 0))
                carry = None
            kept.append(core)
    return TTVector(kept)


def fix_mode(f: TTVector, i: int, k: int) -> TTVector:
    """Slice ``f`` at index ``k`` of mode ``i``; the result has d-1 modes."""
    if not 0 <= i < f.d:
        raise InvalidTensorError(f"mode {i + 1} out of range for d={f.d}")
    n = f.mode_sizes[i]
    if not 0 <= k < n:
        raise InvalidTensorError(f"index {k} out of range for mode {i + 1} of size {n}")
    e = np.zeros(n)
    e[k] = 1.0
    return contract_modes(f, {i: e})


def fix_matrix_mode(A: TTMatrix, i: int, k: int) -> TTMatrix:
    """Diagonal block ``(k, k)`` of mode ``i``, absorbed into a neighbour core."""
    if not 0 <= i < A.d or A.d < 2:
        raise InvalidTensorError(f"mode {i + 1} cannot be fixed for d={A.d}")
    if not 0 <= k < min(A.row_sizes[i], A.col_sizes[i]):
        raise InvalidTensorError(f"index {k} out of range for mode {i + 1}")
    cores = list(A.cores)
    mat = cores.pop(i)[:, k, k, :]
    if i > 0:
        cores[i - 1] = np.tensordot(cores[i - 1], mat, axes=(3, 0))
    else:
        cores[0] = np.tensordot(mat, cores[0], axes=(1, 0))
    return TTMatrix(cores)
