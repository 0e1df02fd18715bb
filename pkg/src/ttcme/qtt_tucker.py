"""QTT-Tucker vectors: a TT Tucker core with QTT-compressed factors.

Dimension ``i`` is represented by a factor ``U_i`` with ``N_i`` rows and
``ρ_i`` orthonormal columns, stored as a train over the ``L_i`` bit modes of
the row index followed by one column mode. The core is a TT over the
column indices.
"""

from typing import Optional

import numpy as np

from ttcme.exceptions import QuantizationError, ShapeMismatchError
from ttcme.qtt import QuantizationMap, _bits_of
from ttcme.tt_core import (
    EXACT,
    Tolerance,
    TTVector,
    add,
    from_dense,
    orthogonalize,
    truncation_rank,
)


_FLOOR = 1e-14


class QttTuckerVector:
    """Tucker core and per-dimension factors.

    Args:
        core (TTVector): Core over the Tucker indices
        factors (list[TTVector]): Factor trains, bit modes then column mode
    """

    def __init__(self, core: TTVector, factors: list[TTVector]):
        if len(factors) != core.d:
            raise ShapeMismatchError("QttTuckerVector", (core.d,), (len(factors),))
        for i, factor in enumerate(factors):
            if factor.mode_sizes[-1] != core.mode_sizes[i]:
                raise ShapeMismatchError(
                    "QttTuckerVector", (core.mode_sizes[i],), (factor.mode_sizes[-1],)
                )
        self.core = core
        self.factors = list(factors)

    @property
    def d(self) -> int:
        return self.core.d

    @property
    def tucker_ranks(self) -> tuple[int, ...]:
        return self.core.mode_sizes

    @property
    def core_ranks(self) -> tuple[int, ...]:
        return self.core.ranks

    @property
    def factor_ranks(self) -> tuple[int, ...]:
        """Largest QTT rank of each factor."""
        return tuple(f.max_rank for f in self.factors)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(f.mode_sizes[:-1])) for f in self.factors)

    @property
    def storage(self) -> int:
        return self.core.storage + sum(f.storage for f in self.factors)

    def factor_matrix(self, i: int) -> np.ndarray:
        """Dense ``N_i × ρ_i`` factor."""
        f = self.factors[i]
        return f.to_dense().reshape((self.mode_sizes[i], f.mode_sizes[-1]), order="F")

    def to_tt(self, tol: Optional[Tolerance] = None) -> TTVector:
        return qtt_tucker_to_tt(self, tol)

    def __repr__(self) -> str:
        return (
            f"QttTuckerVector(modes={self.mode_sizes}, tucker_ranks={self.tucker_ranks}, "
            f"core_ranks={self.core_ranks}, factor_ranks={self.factor_ranks})"
        )


def _split(tol: Tolerance, parts: float) -> Tolerance:
    """Share of an error budget: ``eps/sqrt(parts)`` with the same rank cap."""
    return Tolerance(eps=tol.eps / np.sqrt(parts), rmax=tol.rmax)


def _factor_train(U: np.ndarray, bits: Optional[int], tol: Tolerance) -> TTVector:
    n, rho = U.shape
    if bits is None or bits == 0:
        return from_dense(U, tol)
    return from_dense(U.reshape((2,) * bits + (rho,), order="F"), tol)


def _gram(a: TTVector, b: TTVector) -> np.ndarray:
    """``a^H b`` over the row modes of two factor trains."""
    w = np.ones((1, 1))
    for ca, cb in zip(a.cores[:-1], b.cores[:-1]):
        w = np.einsum("ab,aic,bid->cd", w, ca.conj(), cb)
    return np.einsum("ab,ai,bj->ij", w, a.cores[-1][:, :, 0].conj(), b.cores[-1][:, :, 0])


def _rotate_factor(f: TTVector, M: np.ndarray) -> TTVector:
    """Columns of ``f`` multiplied by ``M`` (``ρ × ρ'``)."""
    cores = list(f.cores)
    cores[-1] = np.einsum("aib,ij->ajb", cores[-1], M)
    return TTVector(cores)


def _rotate_core(core: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Tucker index of a core ``(r, ρ, r')`` multiplied by ``M`` (``ρ' × ρ``)."""
    return np.einsum("ji,aib->ajb", M, core)


def _tucker_sweep(
    cores: list[np.ndarray], tol: Tolerance, norm: float
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Truncate the mode index of every core with the core as orthogonality center.

    Returns the projected cores and the ``n_i × ρ_i`` bases.
    """
    d = len(cores)
    cores = list(orthogonalize(TTVector(cores), "right").cores)
    delta = tol.eps / np.sqrt(d) * norm
    bases = []
    for i in range(d):
        r0, n, r1 = cores[i].shape
        unfolding = cores[i].transpose(1, 0, 2).reshape(n, r0 * r1)
        u, s, _ = np.linalg.svd(unfolding, full_matrices=False)
        rank = truncation_rank(s, delta, tol.rmax, unfolding.shape)
        basis = u[:, :rank]
        bases.append(basis)
        cores[i] = _rotate_core(cores[i], basis.conj().T)
        if i < d - 1:
            r0, rho, r1 = cores[i].shape
            q, r = np.linalg.qr(cores[i].reshape(r0 * rho, r1))
            cores[i] = q.reshape(r0, rho, -1)
            cores[i + 1] = np.tensordot(r, cores[i + 1], axes=(1, 0))
    return cores, bases


def _orthonormalize(
    factor: TTVector, core: np.ndarray, floor: float = _FLOOR
) -> tuple[TTVector, np.ndarray]:
    """Make the factor columns orthonormal and move the inverse into the core.

    Directions with Gram eigenvalues below ``floor`` times the largest are
    dropped, so the Tucker rank shrinks to the numerical rank.
    """
    G = _gram(factor, factor)
    lam, V = np.linalg.eigh(G)
    keep = lam > floor * max(lam.max(), 0.0)
    if not np.any(keep):
        keep[-1] = True
        lam[-1] = max(lam[-1], 1.0)
    lam, V = lam[keep], V[:, keep]
    root = np.sqrt(lam)
    factor = _rotate_factor(factor, V / root)
    core = _rotate_core(core, root[:, None] * V.conj().T)
    return factor, core


def tt_to_qtt_tucker(f: TTVector, qmap: QuantizationMap, tol: Tolerance = EXACT) -> QttTuckerVector:
    """Convert a TT over species modes to QTT-Tucker.

    The Tucker bases come from mode unfoldings of the orthogonality center
    and take half of the squared error budget; the QTT compression of the
    bases and the rounding of the core share the other half.

    Raises:
        QuantizationError: If a quantized mode is not a power of two
    """
    if f.d != len(qmap.bits):
        raise QuantizationError(f.d, len(qmap.bits), "modes do not match the quantization map")
    for i, (n, bits) in enumerate(zip(f.mode_sizes, qmap.bits)):
        if bits is not None and _bits_of(n, i) != bits:
            raise QuantizationError(i, n, f"does not have {bits} bits")
    nrm = f.norm()
    cores, bases = _tucker_sweep(list(f.cores), _split(tol, 2.0), nrm)
    factor_tol = Tolerance(eps=tol.eps / np.sqrt(8.0 * f.d)) if tol.eps else EXACT
    factors = []
    for i, (basis, bits) in enumerate(zip(bases, qmap.bits)):
        factor = _factor_train(basis, bits, factor_tol)
        factor, cores[i] = _orthonormalize(factor, cores[i])
        factors.append(factor)
    core = TTVector(cores)
    if tol.eps:
        core = core.round(_split(tol, 4.0))
    return QttTuckerVector(core, factors)


def qtt_tucker_to_tt(g: QttTuckerVector, tol: Optional[Tolerance] = None) -> TTVector:
    """Contract every factor into the core; rounded at ``tol`` when given."""
    cores = [
        np.einsum("acb,nc->anb", core, g.factor_matrix(i)) for i, core in enumerate(g.core.cores)
    ]
    res = TTVector(cores)
    return res.round(tol) if tol is not None else res


def qt_dot(g: QttTuckerVector, h: QttTuckerVector) -> complex:
    """``⟨g, h⟩`` from factor Gram matrices and a core transfer; conjugates ``g``."""
    if g.mode_sizes != h.mode_sizes:
        raise ShapeMismatchError("qt_dot", g.mode_sizes, h.mode_sizes)
    w = np.ones((1, 1))
    for i, (cg, ch) in enumerate(zip(g.core.cores, h.core.cores)):
        M = _gram(g.factors[i], h.factors[i])
        w = np.einsum("ab,aic,ij,bjd->cd", w, cg.conj(), M, ch, optimize=True)
    value = w[0, 0]
    return float(value.real) if np.isrealobj(value) else complex(value)


def qt_norm(g: QttTuckerVector) -> float:
    return float(np.sqrt(max(np.real(qt_dot(g, g)), 0.0)))


def qt_add(g: QttTuckerVector, h: QttTuckerVector) -> QttTuckerVector:
    """Exact sum; factors are concatenated and re-orthonormalized."""
    if g.mode_sizes != h.mode_sizes:
        raise ShapeMismatchError("qt_add", g.mode_sizes, h.mode_sizes)
    factors, g_cores, h_cores = [], [], []
    for i in range(g.d):
        rg, rh = g.tucker_ranks[i], h.tucker_ranks[i]
        fg = _rotate_factor(g.factors[i], np.eye(rg, rg + rh))
        fh = _rotate_factor(h.factors[i], np.eye(rh, rg + rh, k=rg))
        factors.append(add(fg, fh))
        g_cores.append(_rotate_core(g.core.cores[i], np.eye(rg + rh, rg)))
        h_cores.append(_rotate_core(h.core.cores[i], np.eye(rg + rh, rh, k=-rg)))
    core = add(TTVector(g_cores), TTVector(h_cores))
    cores = list(core.cores)
    for i in range(g.d):
        factors[i], cores[i] = _orthonormalize(factors[i], cores[i])
    return QttTuckerVector(TTVector(cores), factors)


def qt_round(g: QttTuckerVector, tol: Tolerance) -> QttTuckerVector:
    """Truncate Tucker ranks, factor ranks and core ranks to ``tol``."""
    nrm = qt_norm(g)
    cores, bases = _tucker_sweep(list(g.core.cores), _split(tol, 2.0), nrm)
    factor_tol = Tolerance(eps=tol.eps / np.sqrt(8.0 * g.d))
    factors = []
    for i, basis in enumerate(bases):
        factor = _rotate_factor(g.factors[i], basis).round(factor_tol)
        factor, cores[i] = _orthonormalize(factor, cores[i])
        factors.append(factor)
    core = TTVector(cores).round(_split(tol, 4.0))
    return QttTuckerVector(core, factors)
