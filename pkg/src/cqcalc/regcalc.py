"""Finite-dimensional semantics for typed classical/quantum wires.

Registers are typed wires.  A classical register of base dimension n is
an n-dimensional space of (sub)probability vectors.  A quantum register
of base dimension n is represented in *doubled* form: density operators
on an n-dimensional space V are flattened to vectors in V (x) V, so
quantum channels become ordinary matrices acting on the doubled space.
The left tensor factor carries the "straight" index and the right factor
the conjugated one: vec(rho) = sum_ij rho_ij |i>|j>.

A ProcessTensor is a dense complex matrix between tensor products of
registers.  States have no inputs, effects no outputs, and numbers are
1x1 matrices.  Structural properties (causality, trace non-increase,
purity, complete positivity) are checkable predicates of the matrix, not
representation constraints.

All values are immutable after construction; every operation here is a
pure function, so independent calls are safe to run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_TOL = 1e-9

CLASSICAL = "classical"
QUANTUM = "quantum"


@dataclass(frozen=True)
class SymWidth:
    """Symbolic bit width scale*symbol: dimension 2**(scale*value(symbol)).

    Used by rewrite-module proof scripts, whose seed registers have
    widths like N, 2N, 4N...; `subst` turns them into concrete
    dimensions.  Concrete numerics always require substitution first.
    """

    scale: int
    symbol: str

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("SymWidth scale must be >= 1")

    def value(self, values: dict) -> int:
        if self.symbol not in values:
            raise KeyError(f"no value for symbol {self.symbol!r}")
        return 2 ** (self.scale * int(values[self.symbol]))

    def __repr__(self):
        return f"{self.scale}*{self.symbol}" if self.scale != 1 else self.symbol


@dataclass(frozen=True)
class Register:
    """A typed wire: classical dimension-n or quantum doubled space.

    ``total_dim`` is the dimension of the carrier space: n for classical
    registers, n**2 for quantum ones (doubled representation).
    base_dim may be a SymWidth for symbolic diagrams; such registers
    have no carrier dimension until substituted.
    """

    kind: str
    base_dim: int | SymWidth

    def __post_init__(self):
        if self.kind not in (CLASSICAL, QUANTUM):
            raise ValueError(f"unknown register kind {self.kind!r}")
        if isinstance(self.base_dim, SymWidth):
            return
        if not isinstance(self.base_dim, (int, np.integer)) or self.base_dim < 1:
            raise ValueError(f"base_dim must be a positive integer, got {self.base_dim!r}")
        object.__setattr__(self, "base_dim", int(self.base_dim))

    @property
    def symbolic(self) -> bool:
        return isinstance(self.base_dim, SymWidth)

    @property
    def total_dim(self) -> int:
        if self.symbolic:
            raise ValueError(f"register {self!r} is symbolic; substitute first")
        return self.base_dim if self.kind == CLASSICAL else self.base_dim ** 2

    def subst(self, values: dict) -> "Register":
        if not self.symbolic:
            return self
        return Register(self.kind, self.base_dim.value(values))

    def __repr__(self):
        tag = "C" if self.kind == CLASSICAL else "Q"
        return f"{tag}[{self.base_dim!r}]" if self.symbolic else f"{tag}{self.base_dim}"


def C(n: int) -> Register:
    """Classical register of dimension n."""
    return Register(CLASSICAL, n)


def Q(n: int) -> Register:
    """Quantum register with base space of dimension n (carrier n**2)."""
    return Register(QUANTUM, n)


def total_dim(regs: Sequence[Register]) -> int:
    d = 1
    for r in regs:
        d *= r.total_dim
    return d


def base_dim(regs: Sequence[Register]) -> int:
    """Product of base dimensions (the 'lifted' operator-space dimension)."""
    d = 1
    for r in regs:
        d *= r.base_dim
    return d


@dataclass(frozen=True)
class ProcessTensor:
    """A concrete linear map between tensor products of registers."""

    in_regs: tuple[Register, ...]
    out_regs: tuple[Register, ...]
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "in_regs", tuple(self.in_regs))
        object.__setattr__(self, "out_regs", tuple(self.out_regs))
        m = np.asarray(self.matrix, dtype=complex)
        want = (total_dim(self.out_regs), total_dim(self.in_regs))
        if m.shape != want:
            raise ValueError(f"matrix shape {m.shape} inconsistent with registers {want}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    # -- convenience views -------------------------------------------------
    @property
    def is_state(self) -> bool:
        return len(self.in_regs) == 0

    @property
    def is_effect(self) -> bool:
        return len(self.out_regs) == 0

    @property
    def is_number(self) -> bool:
        return self.is_state and self.is_effect

    def number(self) -> complex:
        if not self.is_number:
            raise ValueError("not a number (both register lists must be empty)")
        return complex(self.matrix[0, 0])

    def vector(self) -> np.ndarray:
        if not self.is_state:
            raise ValueError("not a state")
        return self.matrix[:, 0]

    def __repr__(self):
        return f"ProcessTensor({list(self.in_regs)} -> {list(self.out_regs)})"


def state(regs: Sequence[Register], vec: np.ndarray) -> ProcessTensor:
    v = np.asarray(vec, dtype=complex).reshape(-1, 1)
    return ProcessTensor((), tuple(regs), v)


def effect(regs: Sequence[Register], row: np.ndarray) -> ProcessTensor:
    r = np.asarray(row, dtype=complex).reshape(1, -1)
    return ProcessTensor(tuple(regs), (), r)


def number(x: complex) -> ProcessTensor:
    return ProcessTensor((), (), np.array([[x]], dtype=complex))


def identity(regs: Sequence[Register]) -> ProcessTensor:
    d = total_dim(regs)
    return ProcessTensor(tuple(regs), tuple(regs), np.eye(d))


def permutation(regs: Sequence[Register], perm: Sequence[int]) -> ProcessTensor:
    """Process permuting the wire order: output j is input perm[j]."""
    regs = tuple(regs)
    perm = list(perm)
    if sorted(perm) != list(range(len(regs))):
        raise ValueError("perm must be a permutation of the register positions")
    dims = [r.total_dim for r in regs]
    d = total_dim(regs)
    n = len(regs)
    m = np.eye(d).reshape(dims + dims)
    # output axis j reads input axis perm[j]
    m = np.transpose(m, axes=list(perm) + [n + i for i in range(n)])
    m = m.reshape(total_dim([regs[p] for p in perm]), d)
    return ProcessTensor(regs, tuple(regs[p] for p in perm), m)


def swap(r1: Register, r2: Register) -> ProcessTensor:
    return permutation((r1, r2), (1, 0))


# ---------------------------------------------------------------------------
# composition


def compose_seq(f: ProcessTensor, g: ProcessTensor) -> ProcessTensor:
    """Run f first, then g (diagrams read bottom to top)."""
    if f.out_regs != g.in_regs:
        raise TypeError(
            f"sequential composition type mismatch: {list(f.out_regs)} vs {list(g.in_regs)}"
        )
    return ProcessTensor(f.in_regs, g.out_regs, g.matrix @ f.matrix)


def compose_par(f: ProcessTensor, g: ProcessTensor) -> ProcessTensor:
    """Place f beside g (left-factor-major Kronecker product)."""
    return ProcessTensor(
        f.in_regs + g.in_regs,
        f.out_regs + g.out_regs,
        np.kron(f.matrix, g.matrix),
    )


# ---------------------------------------------------------------------------
# generators


def spider(reg: Register, legs: int) -> ProcessTensor:
    """The state sum_i |i>^(x)legs over the register's carrier basis."""
    if legs < 1:
        raise ValueError("spider needs at least one leg")
    d = reg.total_dim
    v = np.zeros(d ** legs, dtype=complex)
    stride = (d ** legs - 1) // (d - 1) if d > 1 else 1
    if d == 1:
        v[0] = 1.0
    else:
        for i in range(d):
            v[i * stride] = 1.0
    return state((reg,) * legs, v)


def spider_map(reg: Register, legs_in: int, legs_out: int) -> ProcessTensor:
    """Spider with legs split into inputs and outputs: sum_i |i..><..i|."""
    if legs_in < 0 or legs_out < 0 or legs_in + legs_out < 1:
        raise ValueError("spider needs at least one leg")
    d = reg.total_dim
    m = np.zeros((d ** legs_out, d ** legs_in), dtype=complex)
    for i in range(d):
        # multi-index |i,i,...,i> over L legs flattens to i*(d^L-1)/(d-1)
        row = i * ((d ** legs_out - 1) // (d - 1)) if d > 1 and legs_out else 0
        col = i * ((d ** legs_in - 1) // (d - 1)) if d > 1 and legs_in else 0
        m[row, col] += 1.0
        if d == 1:
            break
    return ProcessTensor((reg,) * legs_in, (reg,) * legs_out, m)


def uniform(reg: Register, legs: int) -> ProcessTensor:
    """spider(reg, legs) scaled by 1/m where m is the carrier dimension."""
    s = spider(reg, legs)
    return ProcessTensor((), s.out_regs, s.matrix / reg.total_dim)


def discard(reg: Register) -> ProcessTensor:
    """Trace effect: sum of diagonal (quantum) or plain sum (classical)."""
    if reg.kind == CLASSICAL:
        row = np.ones(reg.base_dim, dtype=complex)
    else:
        n = reg.base_dim
        row = np.eye(n, dtype=complex).reshape(-1)
    return effect((reg,), row)


def discard_all(regs: Sequence[Register]) -> ProcessTensor:
    out = number(1.0)
    for r in regs:
        out = compose_par(out, discard(r))
    return out


def dagger_conjugate_transpose(p: ProcessTensor, which: str = "adjoint") -> ProcessTensor:
    if which == "conjugate":
        return ProcessTensor(p.in_regs, p.out_regs, np.conj(p.matrix))
    if which == "transpose":
        return ProcessTensor(p.out_regs, p.in_regs, p.matrix.T)
    if which == "adjoint":
        return ProcessTensor(p.out_regs, p.in_regs, np.conj(p.matrix.T))
    raise ValueError(f"unknown dagger variant {which!r}")


# ---------------------------------------------------------------------------
# operator (density) form
#
# Internally we embed carrier vectors into operators on the product of
# *base* spaces.  The embedding groups all classical factors first and
# all quantum base factors second; this is a fixed unitary relabeling of
# the interleaved order and is used consistently on both arguments of
# every comparison, so distances and spectra are unaffected.


def _axis_split(vec: np.ndarray, regs: Sequence[Register]):
    """Reshape a carrier vector to (K, I, J): classical, row, column."""
    dims = []
    for r in regs:
        if r.kind == CLASSICAL:
            dims.append(r.base_dim)
        else:
            dims.extend([r.base_dim, r.base_dim])
    arr = np.asarray(vec).reshape(dims or [1])
    c_axes, i_axes, j_axes = [], [], []
    a = 0
    for r in regs:
        if r.kind == CLASSICAL:
            c_axes.append(a)
            a += 1
        else:
            i_axes.append(a)
            j_axes.append(a + 1)
            a += 2
    if not regs:
        return arr.reshape(1, 1, 1)
    arr = np.transpose(arr, axes=c_axes + i_axes + j_axes)
    K = int(np.prod([regs[k].base_dim for k in range(len(regs)) if regs[k].kind == CLASSICAL], initial=1))
    I = int(np.prod([r.base_dim for r in regs if r.kind == QUANTUM], initial=1))
    return arr.reshape(K, I, I)


def _axis_merge(arr3: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    """Inverse of _axis_split: (K, I, J) back to the carrier vector."""
    if not regs:
        return arr3.reshape(1)
    c_dims = [r.base_dim for r in regs if r.kind == CLASSICAL]
    q_dims = [r.base_dim for r in regs if r.kind == QUANTUM]
    arr = arr3.reshape(c_dims + q_dims + q_dims)
    # rebuild interleaved axis order
    c_axes, i_axes, j_axes = [], [], []
    a = 0
    for r in regs:
        if r.kind == CLASSICAL:
            c_axes.append(a)
            a += 1
        else:
            i_axes.append(a)
            j_axes.append(a + 1)
            a += 2
    order = c_axes + i_axes + j_axes  # current position of target axis
    inv = [0] * len(order)
    for pos, ax in enumerate(order):
        inv[ax] = pos
    arr = np.transpose(arr, axes=inv)
    return arr.reshape(-1)


def state_operator(vec: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    """Density-operator form of a carrier state vector.

    Classical indices are embedded diagonally; quantum doubled indices
    (i, j) become matrix entries.  Result is (K*I) x (K*I).
    """
    arr3 = _axis_split(vec, regs)
    Kd, Id, _ = arr3.shape
    D = np.zeros((Kd, Id, Kd, Id), dtype=complex)
    D[np.arange(Kd), :, np.arange(Kd), :] = arr3
    return D.reshape(Kd * Id, Kd * Id)


def operator_state(op: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    """Project an operator back to a carrier vector (drops classical
    off-diagonal blocks, i.e. composes with decoherence on classical wires)."""
    Kd = int(np.prod([r.base_dim for r in regs if r.kind == CLASSICAL], initial=1))
    Id = int(np.prod([r.base_dim for r in regs if r.kind == QUANTUM], initial=1))
    D = np.asarray(op).reshape(Kd, Id, Kd, Id)
    arr3 = D[np.arange(Kd), :, np.arange(Kd), :]
    return _axis_merge(arr3.reshape(Kd, Id, Id), regs)


def effect_operator(row: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    """Operator form E of an effect row: value on rho is Tr[E rho]."""
    arr3 = _axis_split(row, regs)
    Kd, Id, _ = arr3.shape
    E = np.zeros((Kd, Id, Kd, Id), dtype=complex)
    E[np.arange(Kd), :, np.arange(Kd), :] = np.transpose(arr3, (0, 2, 1))
    return E.reshape(Kd * Id, Kd * Id)


def operator_effect(op: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    Kd = int(np.prod([r.base_dim for r in regs if r.kind == CLASSICAL], initial=1))
    Id = int(np.prod([r.base_dim for r in regs if r.kind == QUANTUM], initial=1))
    D = np.asarray(op).reshape(Kd, Id, Kd, Id)
    arr3 = np.transpose(D[np.arange(Kd), :, np.arange(Kd), :].reshape(Kd, Id, Id), (0, 2, 1))
    return _axis_merge(arr3, regs)


def apply_to_operator(p: ProcessTensor, rho: np.ndarray) -> np.ndarray:
    """Apply the process to a density operator in operator form."""
    vec = operator_state(rho, p.in_regs)
    return state_operator(p.matrix @ vec, p.out_regs)


def apply_adjoint_to_effect(p: ProcessTensor, E: np.ndarray) -> np.ndarray:
    """Pull an output-effect operator back through the process."""
    row = operator_effect(E, p.out_regs)
    return effect_operator(row @ p.matrix, p.in_regs)


def _interleaved(regs, offset):
    """Dims and (classical, row, column) axis positions; empty lists get
    a placeholder classical dim-1 axis so shapes stay uniform."""
    dims, c_axes, i_axes, j_axes = [], [], [], []
    a = offset
    for r in regs:
        if r.kind == CLASSICAL:
            dims.append(r.base_dim)
            c_axes.append(a)
            a += 1
        else:
            dims.extend([r.base_dim, r.base_dim])
            i_axes.append(a)
            j_axes.append(a + 1)
            a += 2
    if not regs:
        dims, c_axes = [1], [offset]
        a = offset + 1
    return dims, c_axes, i_axes, j_axes, a


def choi_operator(p: ProcessTensor) -> np.ndarray:
    """Unnormalized process (Choi) operator on in_base (x) out_base.

    Classical registers are lifted diagonally (their decoherent Choi
    block structure), so complete positivity of the classical-quantum
    process is exactly positive semidefiniteness of this operator.
    """
    out_dims, co, io, jo, off = _interleaved(p.out_regs, 0)
    in_dims, ci, ii, ji, _ = _interleaved(p.in_regs, off)
    arr = np.asarray(p.matrix).reshape(out_dims + in_dims)
    arr = np.transpose(arr, axes=co + io + jo + ci + ii + ji)
    Ko = int(np.prod([r.base_dim for r in p.out_regs if r.kind == CLASSICAL], initial=1))
    Ao = int(np.prod([r.base_dim for r in p.out_regs if r.kind == QUANTUM], initial=1))
    Ki = int(np.prod([r.base_dim for r in p.in_regs if r.kind == CLASSICAL], initial=1))
    Ai = int(np.prod([r.base_dim for r in p.in_regs if r.kind == QUANTUM], initial=1))
    arr = arr.reshape(Ko, Ao, Ao, Ki, Ai, Ai)
    Cop = np.zeros((Ki, Ai, Ko, Ao, Ki, Ai, Ko, Ao), dtype=complex)
    for ko in range(Ko):
        for ki in range(Ki):
            # entry [ki,i,ko,a ; ki,j,ko,b] = M[ko,(a,b),ki,(i,j)]
            Cop[ki, :, ko, :, ki, :, ko, :] = np.transpose(arr[ko, :, :, ki, :, :], (2, 0, 3, 1))
    d = Ki * Ai * Ko * Ao
    return Cop.reshape(d, d)


# ---------------------------------------------------------------------------
# predicates and distances


def _herm_eigs(op: np.ndarray, tol: float) -> np.ndarray:
    H = 0.5 * (op + np.conj(op.T))
    if np.max(np.abs(op - H)) > max(1e3 * tol, 1e-7):
        # clearly non-Hermitian: fall back to singular values for norms
        return np.linalg.eigvalsh(H)
    return np.linalg.eigvalsh(H)


def structural_predicates(p: ProcessTensor, tol: float = DEFAULT_TOL) -> dict:
    """Flags: causal, stochastic, pure_state, pure_process, completely_positive, effect_valid."""
    d_out = discard_all(p.out_regs).matrix.reshape(1, -1)
    d_in = discard_all(p.in_regs).matrix.reshape(1, -1)
    traced = d_out @ p.matrix
    causal = bool(np.max(np.abs(traced - d_in)) <= tol)

    # dual of discard . p as an operator on the input space
    E = effect_operator(traced.reshape(-1), p.in_regs)
    evals = _herm_eigs(E, tol)
    herm_ok = np.max(np.abs(E - np.conj(E.T))) <= max(1e3 * tol, 1e-6)
    stochastic = bool(herm_ok and evals.min() >= -tol and evals.max() <= 1 + tol)

    # complete positivity via the process operator
    choi = choi_operator(p)
    cp = bool(
        np.max(np.abs(choi - np.conj(choi.T))) <= max(1e3 * tol, 1e-6)
        and np.linalg.eigvalsh(0.5 * (choi + np.conj(choi.T))).min() >= -max(tol, 1e-9) * max(1, np.abs(choi).max())
    )

    pure_state = False
    if p.is_state:
        rho = state_operator(p.vector(), p.out_regs)
        ev = np.sort(np.abs(np.linalg.eigvals(rho)))[::-1]
        pure_state = bool(abs(ev[0] - 1) <= 1e2 * tol and (ev[1:].sum() if len(ev) > 1 else 0) <= 1e2 * tol)

    pure_process = _pure_process(p, tol)

    if p.is_effect:
        Eo = effect_operator(p.matrix.reshape(-1), p.in_regs)
        ev = _herm_eigs(Eo, tol)
        effect_valid = bool(
            np.max(np.abs(Eo - np.conj(Eo.T))) <= max(1e3 * tol, 1e-6)
            and ev.min() >= -tol
            and ev.max() <= 1 + tol
        )
    else:
        effect_valid = stochastic

    return {
        "causal": causal,
        "stochastic": stochastic,
        "pure_state": pure_state,
        "pure_process": pure_process,
        "completely_positive": cp,
        "effect_valid": effect_valid,
    }


def _pure_process(p: ProcessTensor, tol: float) -> bool:
    """True when the map is of the doubled form psi (x) conj(psi).

    Checked by realigning the (classically lifted) doubled matrix into
    R[(out_row,in_row),(out_col,in_col)] and testing PSD rank one.  Maps
    that genuinely decohere a classical wire of dimension > 1 are not of
    this form and report False.
    """
    choi = choi_operator(p)  # realignment of the lifted map, PSD iff CP
    H = 0.5 * (choi + np.conj(choi.T))
    if np.max(np.abs(choi - H)) > max(1e3 * tol, 1e-6):
        return False
    ev = np.sort(np.linalg.eigvalsh(H))[::-1]
    if ev[0] < -tol:
        return False
    rest = np.abs(ev[1:]).sum() if len(ev) > 1 else 0.0
    if rest > 1e2 * tol * max(1.0, ev[0]):
        return False
    # rank-one Choi means Kraus rank one; with classical wires the lift
    # must additionally not mix classical symbols, which rank-one implies.
    return True


def trace_norm(op: np.ndarray) -> float:
    H = 0.5 * (op + np.conj(op.T))
    if np.max(np.abs(op - H)) <= 1e-8 * max(1.0, np.abs(op).max()):
        return float(np.abs(np.linalg.eigvalsh(H)).sum())
    return float(np.linalg.svd(op, compute_uv=False).sum())


def trace_distance_half(s1: ProcessTensor, s2: ProcessTensor) -> float:
    """Half trace-norm distance between two states in operator form."""
    if s1.out_regs != s2.out_regs or s1.in_regs or s2.in_regs:
        raise TypeError("trace_distance_half expects two states on the same registers")
    r1 = state_operator(s1.vector(), s1.out_regs)
    r2 = state_operator(s2.vector(), s2.out_regs)
    return 0.5 * trace_norm(r1 - r2)


class CQState:
    """Classical-quantum state: branch operators M_i indexed by a
    classical symbol, each a PSD operator on the quantum base space.

    sum_i Tr(M_i) <= 1 (subnormalized); equality means normalized.
    The associated carrier state lives on registers [C(k), Q(d)].
    """

    def __init__(self, branch_ops: Sequence[np.ndarray], tol: float = DEFAULT_TOL):
        ops = [np.asarray(m, dtype=complex) for m in branch_ops]
        if not ops:
            raise ValueError("need at least one branch")
        d = ops[0].shape[0]
        for m in ops:
            if m.shape != (d, d):
                raise ValueError("branch operators must share one square shape")
            if np.max(np.abs(m - np.conj(m.T))) > max(1e3 * tol, 1e-7):
                raise ValueError("branch operator is not Hermitian")
            if np.linalg.eigvalsh(0.5 * (m + np.conj(m.T))).min() < -max(tol, 1e-8):
                raise ValueError("branch operator is not PSD within tolerance")
        tr = sum(float(np.trace(m).real) for m in ops)
        if tr > 1 + max(tol, 1e-8):
            raise ValueError(f"total trace {tr} exceeds 1")
        self.branch_ops = tuple(m.copy() for m in ops)
        for m in self.branch_ops:
            m.setflags(write=False)
        self.classical_dim = len(ops)
        self.base_dim = d
        self.total_trace = tr

    @property
    def normalized(self) -> bool:
        return abs(self.total_trace - 1) <= 1e-8

    def registers(self) -> tuple[Register, Register]:
        return (C(self.classical_dim), Q(self.base_dim))

    def to_tensor(self) -> ProcessTensor:
        """Carrier state on [C(k), Q(d)]: entry (i,(a,b)) = M_i[a,b]."""
        k, d = self.classical_dim, self.base_dim
        v = np.zeros(k * d * d, dtype=complex)
        for i, m in enumerate(self.branch_ops):
            v[i * d * d : (i + 1) * d * d] = m.reshape(-1)
        return state(self.registers(), v)

    @staticmethod
    def from_tensor(t: ProcessTensor, tol: float = DEFAULT_TOL) -> "CQState":
        regs = t.out_regs
        if (
            len(regs) != 2
            or regs[0].kind != CLASSICAL
            or regs[1].kind != QUANTUM
            or t.in_regs
        ):
            raise TypeError("expected a state on [classical, quantum]")
        k, d = regs[0].base_dim, regs[1].base_dim
        v = t.vector().reshape(k, d, d)
        return CQState([v[i] for i in range(k)], tol=tol)


@dataclass(frozen=True)
class DistanceInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper + 1e-12:
            raise ValueError("lower bound exceeds upper bound")


def _extend_with_ancilla(p: ProcessTensor, anc: Register) -> ProcessTensor:
    return compose_par(p, identity((anc,)))


def process_distance(
    p1: ProcessTensor,
    p2: ProcessTensor,
    ancilla_dim: int | None = None,
    restarts: int = 32,
    seed: int = 0,
    iters: int = 60,
) -> DistanceInterval:
    """Certified interval around half the diamond-norm distance.

    Lower bound: alternating ascent over pure inputs on input (x)
    ancilla (ancilla base dimension defaults to the lifted input
    dimension), deterministic given the seed.  Inputs along classical
    wires are explored over classical-diagonal states only, which keeps
    the bound sound.  Upper bound: half the trace norm of the
    unnormalized process-operator difference (equivalently, the
    normalized one times the input dimension), clamped to >= lower.
    """
    if p1.in_regs != p2.in_regs or p1.out_regs != p2.out_regs:
        raise TypeError("process_distance expects identically typed processes")
    if p1.is_state:
        t = trace_distance_half(p1, p2)
        return DistanceInterval(t, t)

    diff = ProcessTensor(p1.in_regs, p1.out_regs, p1.matrix - p2.matrix)
    upper = 0.5 * trace_norm(choi_operator(diff))

    in_lift = base_dim(p1.in_regs)
    anc = Register(QUANTUM, int(ancilla_dim) if ancilla_dim else in_lift)
    dext = _extend_with_ancilla(diff, anc)
    din = base_dim(dext.in_regs)

    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(max(1, restarts)):
        psi = rng.normal(size=din) + 1j * rng.normal(size=din)
        psi /= np.linalg.norm(psi)
        prev = -1.0
        for _ in range(iters):
            rho = _pure_input_operator(psi, dext.in_regs)
            X = apply_to_operator(dext, rho)
            X = 0.5 * (X + np.conj(X.T))
            w, V = np.linalg.eigh(X)
            val = 0.5 * float(np.abs(w).sum())
            if val <= prev + 1e-13:
                break
            prev = val
            S = (V * np.sign(w)) @ np.conj(V.T)
            T = apply_adjoint_to_effect(dext, S)
            T = 0.5 * (T + np.conj(T.T))
            T = _classical_decohere(T, dext.in_regs)
            tw, tV = np.linalg.eigh(T)
            psi = tV[:, -1]
        best = max(best, prev)
    lower = min(best, upper)
    return DistanceInterval(lower, max(upper, lower))


def _pure_input_operator(psi: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    """Density operator of |psi><psi| on the lifted input space, with
    classical coordinates decohered (diagonal blocks kept)."""
    rho = np.outer(psi, np.conj(psi))
    return _classical_decohere(rho, regs)


def _classical_decohere(op: np.ndarray, regs: Sequence[Register]) -> np.ndarray:
    Kd = int(np.prod([r.base_dim for r in regs if r.kind == CLASSICAL], initial=1))
    Id = int(np.prod([r.base_dim for r in regs if r.kind == QUANTUM], initial=1))
    D = op.reshape(Kd, Id, Kd, Id)
    out = np.zeros_like(D)
    out[np.arange(Kd), :, np.arange(Kd), :] = D[np.arange(Kd), :, np.arange(Kd), :]
    return out.reshape(Kd * Id, Kd * Id)


# ---------------------------------------------------------------------------
# channel construction helpers


def channel_from_kraus(
    in_regs: Sequence[Register], out_regs: Sequence[Register], kraus: Iterable[np.ndarray]
) -> ProcessTensor:
    """Doubled-form matrix of rho -> sum_e K_e rho K_e^dag.

    Kraus operators act between the *lifted* base spaces (classical
    factors included as plain tensor factors); the result is projected
    back onto the classical-diagonal carrier, so classical coordinates
    of the Kraus operators should be basis-aligned for a faithful
    classical process.
    """
    in_regs, out_regs = tuple(in_regs), tuple(out_regs)
    din, dout = total_dim(in_regs), total_dim(out_regs)
    m = np.zeros((dout, din), dtype=complex)
    basis = np.eye(din)
    for col in range(din):
        rho = state_operator(basis[:, col], in_regs)
        acc = None
        for K in kraus:
            term = K @ rho @ np.conj(K.T)
            acc = term if acc is None else acc + term
        m[:, col] = operator_state(acc, out_regs)
    return ProcessTensor(in_regs, out_regs, m)


def random_channel(
    in_regs: Sequence[Register],
    out_regs: Sequence[Register],
    rng: np.random.Generator,
    causal: bool = True,
) -> ProcessTensor:
    """Random completely positive channel (causal or strictly stochastic).

    Built from a Haar-ish random isometry into an environment; for the
    stochastic variant the isometry is pre-multiplied by a random
    diagonal contraction so the trace strictly decreases on average.
    """
    din = base_dim(in_regs)
    dout = base_dim(out_regs)
    env = max(1, din)  # environment dimension; din*dout columns suffice
    g = rng.normal(size=(dout * env, din)) + 1j * rng.normal(size=(dout * env, din))
    V, _ = np.linalg.qr(g)
    V = V[:, :din]
    if not causal:
        f = np.sqrt(rng.uniform(0.1, 1.0, size=din))
        V = V @ np.diag(f)
    kraus = [V.reshape(dout, env, din)[:, e, :] for e in range(env)]
    ch = channel_from_kraus(in_regs, out_regs, kraus)
    return ch


def random_cq_channel(
    in_regs: Sequence[Register],
    out_regs: Sequence[Register],
    rng: np.random.Generator,
    causal: bool = True,
) -> ProcessTensor:
    """Random channel that treats classical wires classically.

    For every classical input symbol an independent instrument is drawn:
    a random distribution over classical output symbols and, per output
    symbol, a CP map on the quantum part; branches sum to a causal (or
    strictly stochastic) process.
    """
    in_regs, out_regs = tuple(in_regs), tuple(out_regs)
    Ki = int(np.prod([r.base_dim for r in in_regs if r.kind == CLASSICAL], initial=1))
    Ko = int(np.prod([r.base_dim for r in out_regs if r.kind == CLASSICAL], initial=1))
    qin = [r for r in in_regs if r.kind == QUANTUM]
    qout = [r for r in out_regs if r.kind == QUANTUM]
    dqi, dqo = base_dim(qin), base_dim(qout)

    din, dout = total_dim(in_regs), total_dim(out_regs)
    m = np.zeros((dout, din), dtype=complex)

    # carrier <-> grouped (classical, bra, ket) change of basis, built once
    basis = np.eye(din)
    p_in = np.stack(
        [_axis_split(basis[:, col], in_regs) for col in range(din)], axis=-1
    )  # (Ki, dqi, dqi, din)
    cols = []
    for c in range(Ko):
        for i in range(dqo):
            for j in range(dqo):
                g3 = np.zeros((Ko, dqo, dqo), dtype=complex)
                g3[c, i, j] = 1.0
                cols.append(_axis_merge(g3, out_regs))
    p_out = np.array(cols).T  # (dout, Ko*dqo*dqo)

    env = max(1, dqi)
    for ci in range(Ki):
        # draw an instrument: for each classical output, Kraus ops on Q
        g = rng.normal(size=(Ko * dqo * env, dqi)) + 1j * rng.normal(size=(Ko * dqo * env, dqi))
        V, _ = np.linalg.qr(g)
        V = V[:, :dqi]
        if not causal:
            V = V @ np.diag(np.sqrt(rng.uniform(0.1, 1.0, size=dqi)))
        branches = V.reshape(Ko, dqo, env, dqi)
        # grouped doubled action summed over Kraus branches, then mapped
        # back to the carrier layout in one matrix product
        doubled = np.einsum("cpea,cqeb->cpqab", branches, np.conj(branches))
        contrib = doubled.reshape(Ko * dqo * dqo, dqi * dqi) @ p_in[ci].reshape(
            dqi * dqi, din
        )
        m += p_out @ contrib
    return ProcessTensor(in_regs, out_regs, m)


# ---------------------------------------------------------------------------
# JSON dumps


def tensor_to_json(p: ProcessTensor) -> dict:
    from . import FORMAT_VERSION

    def reg(r):
        return {"kind": r.kind, "base_dim": int(r.base_dim)}

    return {
        "format_version": FORMAT_VERSION,
        "in_regs": [reg(r) for r in p.in_regs],
        "out_regs": [reg(r) for r in p.out_regs],
        "matrix": [[[float(z.real), float(z.imag)] for z in row] for row in p.matrix],
    }


def tensor_from_json(d: dict) -> ProcessTensor:
    def reg(r):
        return Register(r["kind"], int(r["base_dim"]))

    m = np.array([[complex(a, b) for a, b in row] for row in d["matrix"]], dtype=complex)
    return ProcessTensor(
        tuple(reg(r) for r in d["in_regs"]),
        tuple(reg(r) for r in d["out_regs"]),
        m,
    )
