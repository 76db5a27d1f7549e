"""Device-independent protocols at desk scale.

Covers the two-player CHSH game with exact value computation, the
biased test/generation input distribution for spot-checking, its
dyadic-rational approximation, a seeded spot-checking simulator,
conditional min-entropy certification for classical-quantum states,
and a small grammar of device-independent protocol steps with both a
diagram and a process-tensor representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np

from . import diagram as dg
from . import regcalc as rc
from .regcalc import CQState, ProcessTensor

BIT = rc.C(2)


# ---------------------------------------------------------------------------
# games and strategies


@dataclass(frozen=True)
class Game:
    """Two-player nonlocal game with classical inputs and outputs.

    input_distribution is a joint probability vector over input pairs
    (x, y) in row-major order; predicate(x, y, a, b) scores a round."""

    input_regs: tuple
    output_regs: tuple
    input_distribution: np.ndarray
    predicate: object

    def __post_init__(self):
        p = np.asarray(self.input_distribution, dtype=float)
        if abs(p.sum() - 1.0) > 1e-12 or (p < -1e-15).any():
            raise ValueError("input distribution must be a probability vector")
        object.__setattr__(self, "input_distribution", p)


def chsh_game() -> Game:
    """Uniform inputs x, y; win iff a XOR b = x AND y."""
    return Game(
        (BIT, BIT),
        (BIT, BIT),
        np.full(4, 0.25),
        lambda x, y, a, b: (a ^ b) == (x & y),
    )


@dataclass
class DeviceStrategy:
    """A bipartite quantum strategy: a shared state plus, per player and
    per input symbol, a POVM over that player's outputs.

    shared_state is a state ProcessTensor on two quantum registers;
    povms[player][input] is a list of PSD effects summing to identity.
    mode "iid" replays the same round behaviour every round; mode
    "scripted" uses povms[player] as a per-round list of input-indexed
    POVM tables (no post-measurement back-action is modelled)."""

    shared_state: ProcessTensor
    povms: list
    mode: str = "iid"

    def dims(self) -> tuple:
        da = self.shared_state.out_regs[0].base_dim
        db = self.shared_state.out_regs[1].base_dim
        return da, db

    def validate(self, tol: float = 1e-9):
        if self.mode == "iid":
            tables = self.povms
        else:
            tables = [t for per_round in self.povms for t in per_round]
        for table in tables:
            for effects in table:
                total = sum(effects)
                d = total.shape[0]
                if np.abs(total - np.eye(d)).max() > tol:
                    raise ValueError("POVM effects must sum to identity")
                for e in effects:
                    if np.linalg.eigvalsh((e + e.conj().T) / 2).min() < -tol:
                        raise ValueError("POVM effect is not PSD")

    def round_povms(self, player: int, round_index: int):
        if self.mode == "iid":
            return self.povms[player]
        return self.povms[player][round_index]

    def density(self) -> np.ndarray:
        """Shared state as a density matrix on the joint base space."""
        da, db = self.dims()
        v = self.shared_state.vector().reshape(da, da, db, db)
        return v.transpose(0, 2, 1, 3).reshape(da * db, da * db)


def bipartite_state(rho: np.ndarray, da: int, db: int) -> ProcessTensor:
    """Lift a joint density matrix into the doubled two-register form."""
    v = rho.reshape(da, db, da, db).transpose(0, 2, 1, 3)
    return rc.state((rc.Q(da), rc.Q(db)), v.reshape(-1))


def optimal_chsh_strategy() -> DeviceStrategy:
    """Bell state with the standard optimal measurement angles."""
    bell = np.zeros(4, dtype=complex)
    bell[0] = bell[3] = 1 / math.sqrt(2)
    rho = np.outer(bell, bell.conj())
    z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
    x = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
    alice = [z, x]
    bob = [(z + x) / math.sqrt(2), (z - x) / math.sqrt(2)]

    def povm(obs):
        return [(np.eye(2) + s * obs) / 2 for s in (1.0, -1.0)]

    return DeviceStrategy(
        bipartite_state(rho, 2, 2), [[povm(o) for o in alice], [povm(o) for o in bob]]
    )


def deterministic_strategy(fa, fb) -> DeviceStrategy:
    """Classical strategy answering a = fa(x), b = fb(y)."""
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = 1.0

    def povm_for(bit):
        e = [np.zeros((2, 2), dtype=complex) for _ in range(2)]
        e[bit] = np.eye(2, dtype=complex)
        return e

    return DeviceStrategy(
        bipartite_state(rho, 2, 2),
        [[povm_for(fa(x)) for x in range(2)], [povm_for(fb(y)) for y in range(2)]],
    )


def conditional_distribution(s: DeviceStrategy, round_index: int = 0) -> np.ndarray:
    """p[x, y, a, b] = Tr((A^x_a (x) B^y_b) rho), computed exactly."""
    rho = s.density()
    da, db = s.dims()
    pa = s.round_povms(0, round_index)
    pb = s.round_povms(1, round_index)
    nx, ny = len(pa), len(pb)
    na, nb = len(pa[0]), len(pb[0])
    p = np.zeros((nx, ny, na, nb))
    for xx, yy, aa, bb in product(range(nx), range(ny), range(na), range(nb)):
        p[xx, yy, aa, bb] = np.trace(np.kron(pa[xx][aa], pb[yy][bb]) @ rho).real
    return p


def game_value(g: Game, s: DeviceStrategy) -> float:
    """Exact expected winning probability by tensor contraction."""
    s.validate()
    p = conditional_distribution(s)
    pin = g.input_distribution.reshape(p.shape[0], p.shape[1])
    value = 0.0
    for xx, yy, aa, bb in product(*map(range, p.shape)):
        if g.predicate(xx, yy, aa, bb):
            value += pin[xx, yy] * p[xx, yy, aa, bb]
    return float(value)


def classical_game_value(g: Game) -> float:
    """Best deterministic value by exhaustive strategy enumeration."""
    nx = g.input_regs[0].base_dim
    ny = g.input_regs[1].base_dim
    na = g.output_regs[0].base_dim
    nb = g.output_regs[1].base_dim
    pin = g.input_distribution.reshape(nx, ny)
    best = 0.0
    for fa in product(range(na), repeat=nx):
        for fb in product(range(nb), repeat=ny):
            v = sum(
                pin[xx, yy]
                for xx in range(nx)
                for yy in range(ny)
                if g.predicate(xx, yy, fa[xx], fb[yy])
            )
            best = max(best, v)
    return float(best)


def measurement_tensor(povms, d: int) -> ProcessTensor:
    """Input-conditioned measurement as a process (C_in, Q(d)) -> C_out."""
    nx, na = len(povms), len(povms[0])
    m = np.zeros((na, nx, d, d), dtype=complex)
    for xx, effects in enumerate(povms):
        for aa, e in enumerate(effects):
            m[aa, xx] = e.T
    return ProcessTensor((rc.C(nx), rc.Q(d)), (rc.C(na),), m.reshape(na, nx * d * d))


def chsh_scoring_diagram():
    """The CHSH game as a scalar diagram plus its optimal binding.

    Copied uniform inputs feed the two measurement holes and the scoring
    effect; evaluating the diagram under the returned binding yields the
    optimal quantum value 1/2 + sqrt(2)/4."""
    score = np.zeros(16)
    g = chsh_game()
    for xx, aa, bb, yy in product(range(2), repeat=4):
        if g.predicate(xx, yy, aa, bb):
            score[xx * 8 + aa * 4 + bb * 2 + yy] = 1.0
    q2 = rc.Q(2)
    nodes = {
        0: dg.uniform_gen(BIT, 2),  # X
        1: dg.uniform_gen(BIT, 2),  # Y
        2: dg.hole("shared_state", (), (q2, q2)),
        3: dg.hole("measure_A", (BIT, q2), (BIT,)),
        4: dg.hole("measure_B", (BIT, q2), (BIT,)),
        5: dg.box(
            "chsh_score",
            (BIT, BIT, BIT, BIT),
            (),
            payload=ProcessTensor((BIT,) * 4, (), score.reshape(1, 16)),
        ),
    }
    wires = [
        (("n", 0, 0), ("n", 5, 0)),
        (("n", 0, 1), ("n", 3, 0)),
        (("n", 1, 0), ("n", 5, 3)),
        (("n", 1, 1), ("n", 4, 0)),
        (("n", 2, 0), ("n", 3, 1)),
        (("n", 2, 1), ("n", 4, 1)),
        (("n", 3, 0), ("n", 5, 1)),
        (("n", 4, 0), ("n", 5, 2)),
    ]
    d = dg.Diagram(nodes, wires, (), ())
    s = optimal_chsh_strategy()
    binding = {
        "shared_state": s.shared_state,
        "measure_A": measurement_tensor(s.povms[0], 2),
        "measure_B": measurement_tensor(s.povms[1], 2),
    }
    return d, binding


# ---------------------------------------------------------------------------
# the biased round-input distribution and its dyadic approximation


def b_q_distribution(q: float) -> np.ndarray:
    """Round-input distribution on (t, a1, a2): generation rounds
    (t=0, a1=a2=0) with mass 1-q, test rounds spread q over the four
    input pairs."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    p = np.zeros(8)
    p[0] = 1.0 - q
    p[4:] = q / 4.0
    return p


def rational_approx(q: float, M: int) -> dict:
    """Dyadic approximation of the M-round input distribution.

    Two steps: drop all sequences with more than 2qM test rounds, then
    floor the remaining masses to the 2^-t grid with
    t = ceil(qM + log2 |support|).  All retained masses depend only on
    the number k of test rounds, so the result is reported per level:
    exact Fraction masses, sequence counts, the truncation and grid
    bounds, and (for M <= 5) the enumerated exact distance."""
    if not 0.0 < q < 0.25:
        raise ValueError("q must lie in (0, 1/4)")
    if M < 1:
        raise ValueError("M must be >= 1")
    qf = Fraction(q)  # binary floats convert exactly
    k_max = math.floor(2 * q * M)
    support = sum(math.comb(M, k) * 4**k for k in range(k_max + 1))
    ell = math.ceil(q * M + math.log2(support))
    levels = {}
    kept_mass = Fraction(0)
    approx_mass = Fraction(0)
    for k in range(k_max + 1):
        pk = (qf / 4) ** k * (1 - qf) ** (M - k)
        ak = Fraction(math.floor(pk * 2**ell), 2**ell)
        count = math.comb(M, k) * 4**k
        levels[k] = {"count": count, "exact": pk, "approx": ak}
        kept_mass += count * pk
        approx_mass += count * ak
    truncation_mass = 1 - kept_mass
    grid_mass = kept_mass - approx_mass
    bound = float(truncation_mass) + 2.0 ** -(q * M)
    distance = float(truncation_mass + grid_mass)
    enumerated = None
    if M <= 5:
        approx_by_k = {k: levels[k]["approx"] for k in levels}
        total = Fraction(0)
        for seq in product(range(8), repeat=M):
            k = sum(1 for sym in seq if sym >= 4)
            ok = all(sym == 0 or sym >= 4 for sym in seq)
            p_exact = (qf / 4) ** k * (1 - qf) ** (M - k) if ok else Fraction(0)
            p_apx = approx_by_k.get(k, Fraction(0)) if ok and k <= k_max else Fraction(0)
            total += p_exact - p_apx  # approximation never exceeds the target
        enumerated = float(total)
    return {
        "ell": ell,
        "levels": levels,
        "k_max": k_max,
        "support": support,
        "truncation_mass": float(truncation_mass),
        "grid_mass": float(grid_mass),
        "distance": distance,
        "distance_enumerated": enumerated,
        "bound": bound,
    }


# ---------------------------------------------------------------------------
# spot-checking simulation


@dataclass
class RunReport:
    aborted: bool
    classical_transcript: list
    test_round_count: int
    pass_count: int
    output_bits: list
    rng_seed: int

    def __post_init__(self):
        if self.pass_count > self.test_round_count:
            raise ValueError("pass_count cannot exceed test_round_count")

    def to_json(self) -> dict:
        return {
            "aborted": self.aborted,
            "classical_transcript": [list(map(int, r)) for r in self.classical_transcript],
            "test_round_count": self.test_round_count,
            "pass_count": self.pass_count,
            "output_bits": [int(b) for b in self.output_bits],
            "rng_seed": self.rng_seed,
        }


def spotcheck_run(M: int, q: float, chi: float, s: DeviceStrategy, seed: int) -> RunReport:
    """Seeded spot-checking loop: each round draws (t, a1, a2) from the
    biased input distribution; test rounds (t=1) play the game on inputs
    (a1, a2) and are scored, generation rounds use inputs (0, 0).  The
    run aborts when no round was tested or the pass rate falls below
    chi.  Bit-exact reproducible from (seed, parameters, strategy)."""
    if M < 1 or not 0.0 < q < 1.0 or not 0.5 <= chi <= 1.0:
        raise ValueError("invalid spot-check parameters")
    s.validate()
    g = chsh_game()
    rng = np.random.Generator(np.random.Philox(seed))
    bq = b_q_distribution(q)
    transcript = []
    outputs = []
    tests = passes = 0
    p_iid = conditional_distribution(s) if s.mode == "iid" else None
    for r in range(M):
        sym = int(rng.choice(8, p=bq))
        t, a1, a2 = sym >> 2, (sym >> 1) & 1, sym & 1
        xx, yy = (a1, a2) if t else (0, 0)
        p = p_iid if p_iid is not None else conditional_distribution(s, r)
        flat = p[xx, yy].reshape(-1)
        ab = int(rng.choice(flat.size, p=flat / flat.sum()))
        aa, bb = divmod(ab, p.shape[3])
        if t:
            tests += 1
            passes += bool(g.predicate(xx, yy, aa, bb))
        transcript.append((t, a1, a2, aa, bb))
        outputs += [aa, bb]
    aborted = tests == 0 or passes / tests < chi
    return RunReport(aborted, transcript, tests, passes, outputs, seed)


# ---------------------------------------------------------------------------
# conditional min-entropy


def _tn(h: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvalsh((h + h.conj().T) / 2)).sum())


def _psd_part(h: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((h + h.conj().T) / 2)
    return (v * np.clip(w, 0.0, None)) @ v.conj().T


def min_entropy_cq(psi: CQState, tol: float = 1e-6, max_iter: int = 10**4):
    """Min-entropy of the classical register given the quantum side.

    -log2 of the optimal guessing probability min_{sigma >= M_i} Tr
    sigma.  Two branches use the exact binary discrimination closed
    form; more branches run a fixed-point POVM iteration with a feasible
    dual certificate, asserting primal/dual gap <= tol when converged.
    Returns (H_min, certificate dict with sigma, gap, p_guess bounds)."""
    ms = [np.asarray(m, dtype=complex) for m in psi.branch_ops]
    d = ms[0].shape[0]
    if len(ms) == 1:
        p = float(np.trace(ms[0]).real)
        sigma = ms[0]
        cert = {"sigma": sigma, "gap": 0.0, "iterations": 0, "p_lower": p, "p_upper": p,
                "converged": True}
        return -math.log2(p), cert
    if len(ms) == 2:
        diff = ms[1] - ms[0]
        sigma = ms[0] + _psd_part(diff)
        p = 0.5 * (float(np.trace(ms[0] + ms[1]).real) + _tn(diff))
        cert = {"sigma": sigma, "gap": 0.0, "iterations": 0, "p_lower": p, "p_upper": p,
                "converged": True}
        return -math.log2(p), cert

    # commuting branches: simultaneously diagonalize and pick the
    # largest branch weight per joint eigenvector (exact, no iteration)
    scale = max(float(np.abs(m).max()) for m in ms) or 1.0
    if all(
        float(np.abs(a @ b - b @ a).max()) <= 1e-12 * scale * scale
        for i, a in enumerate(ms)
        for b in ms[i + 1 :]
    ):
        rng = np.random.default_rng(0)
        mix = sum(float(c) * m for c, m in zip(rng.uniform(1.0, 2.0, len(ms)), ms))
        _, v = np.linalg.eigh((mix + mix.conj().T) / 2)
        diag = np.array([np.diag(v.conj().T @ m @ v).real for m in ms])
        p = float(diag.max(axis=0).sum())
        sigma = v @ np.diag(diag.max(axis=0)) @ v.conj().T
        cert = {"sigma": sigma, "gap": 0.0, "iterations": 0, "p_lower": p,
                "p_upper": p, "converged": True}
        return -math.log2(p), cert

    # fixed-point discrimination iteration with dual certificate
    povm = [np.eye(d, dtype=complex) / len(ms) for _ in ms]
    p_lower = p_upper = 0.0
    gap = math.inf
    it = 0
    sigma_feas = sum(ms)
    for it in range(1, max_iter + 1):
        lam = sum(m @ e @ m for m, e in zip(ms, povm))
        w, v = np.linalg.eigh((lam + lam.conj().T) / 2)
        inv_sqrt = (v * (np.clip(w, 1e-300, None) ** -0.5)) @ v.conj().T
        povm = [inv_sqrt @ m @ e @ m @ inv_sqrt for m, e in zip(ms, povm)]
        total = sum(povm)
        # renormalize to a strict POVM against numerical drift
        wt, vt = np.linalg.eigh((total + total.conj().T) / 2)
        fix = (vt * (np.clip(wt, 1e-300, None) ** -0.5)) @ vt.conj().T
        povm = [fix @ e @ fix for e in povm]
        # the primal bound must come from a certified sub-POVM: clip to
        # PSD and scale so the effects sum to at most identity
        povm_eval = [_psd_part(e) for e in povm]
        tot = sum(povm_eval)
        lam = np.linalg.eigvalsh((tot + tot.conj().T) / 2).max()
        if lam > 1.0:
            povm_eval = [e / lam for e in povm_eval]
        p_lower = sum(float(np.trace(e @ m).real) for e, m in zip(povm_eval, ms))
        cand = sum(m @ e for m, e in zip(ms, povm))
        cand = (cand + cand.conj().T) / 2
        shift = max(
            0.0, max(np.linalg.eigvalsh((m - cand + (m - cand).conj().T) / 2).max() for m in ms)
        )
        sigma_feas = cand + (shift + 1e-12) * np.eye(d)
        p_upper = float(np.trace(sigma_feas).real)
        gap = p_upper - p_lower
        if gap <= tol:
            break
    converged = gap <= tol
    cert = {
        "sigma": sigma_feas,
        "gap": float(gap),
        "iterations": it,
        "p_lower": float(p_lower),
        "p_upper": float(p_upper),
        "converged": converged,
    }
    if converged:
        assert all(
            np.linalg.eigvalsh(sigma_feas - m).min() >= -1e-8 for m in ms
        ), "certificate must dominate every branch"
    return -math.log2(p_upper), cert


# ---------------------------------------------------------------------------
# protocol grammar


def fn_matrix(f, din: int, dout: int) -> np.ndarray:
    t = np.zeros((dout, din))
    for i in range(din):
        j = f(i)
        if not 0 <= j < dout:
            raise ValueError(f"function value {j} outside register of dimension {dout}")
        t[j, i] = 1.0
    return t


def failure_filter_tensor(c_dim: int, subset) -> ProcessTensor:
    """Projector keeping only classical values in the subset; the lost
    mass is the abort probability (stochastic, not causal)."""
    keep = np.zeros(c_dim)
    for i in subset:
        keep[int(i)] = 1.0
    return ProcessTensor((rc.C(c_dim),), (rc.C(c_dim),), np.diag(keep))


@dataclass
class DIProtocol:
    """A device-independent protocol over wires [C, Q1, Q2].

    Holds the step list and the assembled diagram with one untrusted
    hole per device action; as_tensor(binding) gives the process-tensor
    representation once every device hole is bound."""

    steps: list
    diagram: dg.Diagram
    c_dim: int
    q_dim: int
    msg_dim: int
    hole_specs: dict = field(default_factory=dict)

    def as_tensor(self, binding=None) -> ProcessTensor:
        return self.diagram.evaluate(binding or {})

    def then(self, other: "DIProtocol") -> "DIProtocol":
        if (self.c_dim, self.q_dim, self.msg_dim) != (
            other.c_dim,
            other.q_dim,
            other.msg_dim,
        ):
            raise ValueError("protocols must share register dimensions")
        if set(self.hole_specs) & set(other.hole_specs):
            raise ValueError("device hole labels collide; rebuild with distinct tags")
        merged = dict(self.hole_specs)
        merged.update(other.hole_specs)
        return DIProtocol(
            self.steps + other.steps,
            self.diagram >> other.diagram,
            self.c_dim,
            self.q_dim,
            self.msg_dim,
            merged,
        )


def build_di_protocol(steps, c_dim: int = 2, q_dim: int = 2, msg_dim: int = 2, tag: str = "p") -> DIProtocol:
    """Assemble a protocol from the five admissible step kinds:
    ("device_comm", i, j), ("classical_fn", f), ("failure_filter", S),
    ("give_input", g, j), ("receive_output", h, i) where f, g, h are
    deterministic functions on classical values and i, j name devices
    1 or 2.  With no steps the protocol is the identity."""
    C, Q, Msg = rc.C(c_dim), rc.Q(q_dim), rc.C(msg_dim)
    wires_now = dg.Diagram.id_wires([C, Q, Q])
    holes = {}
    diagram = wires_now
    for idx, step in enumerate(steps):
        kind = step[0]
        label = f"{tag}{idx}"
        if kind == "device_comm":
            _, i, j = step
            if {i, j} != {1, 2}:
                raise ValueError("device_comm must name devices 1 and 2")
            send = dg.hole(f"{label}_send_d{i}", (Q,), (Q, rc.Q(msg_dim)), ("causal",))
            recv = dg.hole(f"{label}_recv_d{j}", (rc.Q(msg_dim), Q), (Q,), ("causal",))
            nodes = {0: send, 1: recv}
            qi, qj = i, j  # boundary slots 1 and 2
            wires = [
                (("in", 0), ("out", 0)),
                (("in", qi), ("n", 0, 0)),
                (("n", 0, 0), ("out", qi)),
                (("n", 0, 1), ("n", 1, 0)),
                (("in", qj), ("n", 1, 1)),
                (("n", 1, 0), ("out", qj)),
            ]
            layer = dg.Diagram(nodes, wires, (C, Q, Q), (C, Q, Q))
            holes[send.label] = send
            holes[recv.label] = recv
        elif kind == "classical_fn":
            _, f = step
            box = dg.box(
                f"{label}_fn",
                (C,),
                (C,),
                payload=ProcessTensor((C,), (C,), fn_matrix(f, c_dim, c_dim)),
                flags=("causal", "stochastic"),
            )
            layer = dg.Diagram(
                {0: box},
                [
                    (("in", 0), ("n", 0, 0)),
                    (("n", 0, 0), ("out", 0)),
                    (("in", 1), ("out", 1)),
                    (("in", 2), ("out", 2)),
                ],
                (C, Q, Q),
                (C, Q, Q),
            )
        elif kind == "failure_filter":
            _, subset = step
            box = dg.box(
                f"{label}_filter",
                (C,),
                (C,),
                payload=failure_filter_tensor(c_dim, subset),
                flags=("stochastic",),
            )
            layer = dg.Diagram(
                {0: box},
                [
                    (("in", 0), ("n", 0, 0)),
                    (("n", 0, 0), ("out", 0)),
                    (("in", 1), ("out", 1)),
                    (("in", 2), ("out", 2)),
                ],
                (C, Q, Q),
                (C, Q, Q),
            )
        elif kind == "give_input":
            _, g, j = step
            if j not in (1, 2):
                raise ValueError("give_input must name device 1 or 2")
            copy = np.zeros((c_dim * msg_dim, c_dim))
            for i in range(c_dim):
                copy[i * msg_dim + (g(i) % msg_dim), i] = 1.0
            gbox = dg.box(
                f"{label}_g",
                (C,),
                (C, Msg),
                payload=ProcessTensor((C,), (C, Msg), copy),
                flags=("causal", "stochastic"),
            )
            dev = dg.hole(f"{label}_dev{j}", (Msg, Q), (Q,), ("causal",))
            layer = dg.Diagram(
                {0: gbox, 1: dev},
                [
                    (("in", 0), ("n", 0, 0)),
                    (("n", 0, 0), ("out", 0)),
                    (("n", 0, 1), ("n", 1, 0)),
                    (("in", j), ("n", 1, 1)),
                    (("n", 1, 0), ("out", j)),
                    (("in", 3 - j), ("out", 3 - j)),
                ],
                (C, Q, Q),
                (C, Q, Q),
            )
            holes[dev.label] = dev
        elif kind == "receive_output":
            _, h, i = step
            if i not in (1, 2):
                raise ValueError("receive_output must name device 1 or 2")
            dev = dg.hole(f"{label}_dev{i}", (Q,), (Q, Msg), ("causal",))
            hm = np.zeros((c_dim, c_dim * msg_dim))
            for c in range(c_dim):
                for m in range(msg_dim):
                    hm[h(c, m) % c_dim, c * msg_dim + m] = 1.0
            hbox = dg.box(
                f"{label}_h",
                (C, Msg),
                (C,),
                payload=ProcessTensor((C, Msg), (C,), hm),
                flags=("causal", "stochastic"),
            )
            layer = dg.Diagram(
                {0: dev, 1: hbox},
                [
                    (("in", 0), ("n", 1, 0)),
                    (("in", i), ("n", 0, 0)),
                    (("n", 0, 0), ("out", i)),
                    (("n", 0, 1), ("n", 1, 1)),
                    (("n", 1, 0), ("out", 0)),
                    (("in", 3 - i), ("out", 3 - i)),
                ],
                (C, Q, Q),
                (C, Q, Q),
            )
            holes[dev.label] = dev
        else:
            raise ValueError(f"inadmissible protocol step kind {kind!r}")
        diagram = diagram >> layer
    return DIProtocol(list(steps), diagram, c_dim, q_dim, msg_dim, holes)


def honest_expansion_round() -> ProcessTensor:
    """A concrete honest single-round process (seed bit, qubit device)
    -> (two output bits, qubit device): the seed bit picks a measurement
    basis (Z or X), the outcome and the seed form the two output bits,
    and the device is re-prepared in the post-measurement basis state."""
    z = [np.array([1.0, 0.0], dtype=complex), np.array([0.0, 1.0], dtype=complex)]
    x = [np.array([1.0, 1.0], dtype=complex) / math.sqrt(2),
         np.array([1.0, -1.0], dtype=complex) / math.sqrt(2)]
    bases = [z, x]
    din = 2 * 4  # seed bit, doubled qubit
    dout = 4 * 4  # two bits, doubled qubit
    m = np.zeros((4, 2, 2, 2, 2, 2), dtype=complex)
    # m[out_bits, q_out i', j', seed, q_in i, j]
    for s in range(2):
        for a in range(2):
            vec = bases[s][a]
            out_sym = a * 2 + s  # outcome bit, then the seed bit
            for i2, j2, i1, j1 in product(range(2), repeat=4):
                # Kraus |v><v| doubled: K[i2,i1] * conj(K[j2,j1])
                m[out_sym, i2, j2, s, i1, j1] = (
                    vec[i2] * vec[i1].conjugate() * vec[j2].conjugate() * vec[j1]
                )
    return ProcessTensor(
        (rc.C(2), rc.Q(2)), (rc.C(4), rc.Q(2)), m.reshape(dout, din)
    )


# ---------------------------------------------------------------------------
# strategy (de)serialization


def _mat_to_json(m: np.ndarray):
    a = np.asarray(m, dtype=complex)
    return [[[float(x.real), float(x.imag)] for x in row] for row in a]


def _mat_from_json(j) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in j])


def strategy_to_json(s: DeviceStrategy) -> dict:
    if s.mode != "iid":
        raise ValueError("only iid strategies serialize")
    return {
        "format_version": 1,
        "state": _mat_to_json(s.density()),
        "povms": [
            [[_mat_to_json(e) for e in effects] for effects in player]
            for player in s.povms
        ],
    }


def strategy_from_json(j: dict) -> DeviceStrategy:
    rho = _mat_from_json(j["state"])
    povms = [
        [[_mat_from_json(e) for e in effects] for effects in player]
        for player in j["povms"]
    ]
    da = povms[0][0][0].shape[0]
    db = povms[1][0][0].shape[0]
    return DeviceStrategy(bipartite_state(rho, da, db), povms)
