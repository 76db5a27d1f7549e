"""Seeded randomness extraction and the expansion pipeline.

A two-universal Toeplitz hash plays the extractor role: source bits
plus a short uniform seed map to near-uniform output bits, with the
seed preserved.  On top of it sit exact small-instance distance
computation, subnormalized-state handling with a certified bound, the
seed-doubling composed protocol, and the unbounded expansion pipeline
that chains doublings across alternating device pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import protocol as pr
from . import rewrite as rw
from .regcalc import CQState


@dataclass(frozen=True)
class ExtractorParams:
    """Sizes and rate parameters for one extraction call.

    n source bits hash down to m output bits using a seed of
    n + m - 1 bits; a..e are per-round rate parameters used by the
    subnormalized contract (e sets the small-trace cutoff 2^-e)."""

    n: int
    m: int
    eps_target: float = 0.0
    a: int = 1
    b: int = 1
    c: int = 2
    d: int = 1
    e: int = 10

    def __post_init__(self):
        if not 1 <= self.m <= self.n:
            raise ValueError("need 1 <= m <= n")
        if self.c - self.d <= 0:
            raise ValueError("rate margin c - d must be positive")

    @property
    def seed_len(self) -> int:
        return self.n + self.m - 1


def toeplitz_matrix(seed, m: int) -> np.ndarray:
    """Toeplitz matrix over GF(2): first column seed[0:m], first row
    seed[m-1:]."""
    seed = np.asarray(seed, dtype=np.uint8)
    n = seed.size - m + 1
    if n < 1:
        raise ValueError("seed too short for requested output length")
    t = np.empty((m, n), dtype=np.uint8)
    for i in range(m):
        for j in range(n):
            # diagonal-constant: entry (i, j) = seed[m - 1 + j - i]
            t[i, j] = seed[m - 1 + j - i]
    return t


def toeplitz_extract(source, seed, m: int) -> np.ndarray:
    """Hash n source bits to m output bits: T(seed) . source over GF(2)."""
    x = np.asarray(source, dtype=np.uint8)
    seed = np.asarray(seed, dtype=np.uint8)
    if seed.size != x.size + m - 1:
        raise ValueError(
            f"seed must have {x.size + m - 1} bits for n={x.size}, m={m}"
        )
    t = toeplitz_matrix(seed, m)
    return (t @ x) % 2


def min_entropy_dist(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    return -math.log2(p.max())


def leftover_hash_bound(h_min: float, m: int) -> float:
    """Two-universal hashing bound on the average distance to uniform."""
    return min(1.0, 0.5 * 2.0 ** (-(h_min - m) / 2))


def extractor_distance_exact(source_dist, m: int) -> float:
    """Average-over-seeds statistical distance of (seed, output) from
    (seed, uniform), by full enumeration.  Capped at n <= 12, m <= 4."""
    p = np.asarray(source_dist, dtype=float)
    n = p.size.bit_length() - 1
    if 2**n != p.size:
        raise ValueError("source distribution length must be a power of two")
    if n > 12 or m > 4:
        raise ValueError("enumeration cap: n <= 12, m <= 4")
    xs = ((np.arange(2**n)[:, None] >> np.arange(n)[::-1]) & 1).astype(np.uint8)
    pow2 = 1 << np.arange(m)[::-1]
    total = 0.0
    n_seeds = 2 ** (n + m - 1)
    for s in range(n_seeds):
        seed = np.array([(s >> k) & 1 for k in range(n + m - 1)][::-1], dtype=np.uint8)
        t = toeplitz_matrix(seed, m)
        z = ((xs @ t.T) % 2) @ pow2
        out = np.bincount(z, weights=p, minlength=2**m)
        total += 0.5 * np.abs(out - 2.0**-m).sum()
    return total / n_seeds


def extract_subnormalized(y: CQState, params: ExtractorParams, seed=None):
    """Extraction from a subnormalized classical-quantum source.

    Below the trace cutoff 2^-e both sides of the extraction contract
    are negligible and the cutoff itself is the certified bound; above
    it the state is normalized, the hashing bound applies at the
    normalized min-entropy, and the bound scales back by the trace.
    Returns (output CQState hashed under the given or all-zero seed,
    report with both branch bounds and the certified one)."""
    if len(y.branch_ops) != 2**params.n:
        raise ValueError("classical part must index n-bit strings")
    trace = float(sum(np.trace(b).real for b in y.branch_ops))
    cutoff = 2.0**-params.e
    if seed is None:
        seed = np.zeros(params.seed_len, dtype=np.uint8)
    d = y.branch_ops[0].shape[0]
    branches = [np.zeros((d, d), dtype=complex) for _ in range(2**params.m)]
    for x, op in enumerate(y.branch_ops):
        bits = [(x >> k) & 1 for k in range(params.n)][::-1]
        z_bits = toeplitz_extract(bits, seed, params.m)
        z = int("".join(map(str, z_bits)), 2)
        branches[z] += op
    out = CQState(branches)
    small_branch = cutoff
    if trace < cutoff:
        report = {
            "case": "small-trace",
            "trace": trace,
            "bound_small": small_branch,
            "bound_normalized": None,
            "bound": small_branch,
        }
        return out, report
    h_min, _ = pr.min_entropy_cq(
        CQState([b / trace for b in y.branch_ops if np.trace(b).real > 0])
    )
    normalized_branch = trace * leftover_hash_bound(h_min, params.m)
    report = {
        "case": "normalized",
        "trace": trace,
        "h_min_normalized": h_min,
        "bound_small": small_branch,
        "bound_normalized": normalized_branch,
        "bound": normalized_branch,
    }
    return out, report


# ---------------------------------------------------------------------------
# the seed-doubling composed protocol


def _expand_seed_bits(seed_bits, length: int) -> np.ndarray:
    """Deterministically stretch a short bit string into a hash seed."""
    key = int("".join(str(int(b)) for b in seed_bits), 2) if len(seed_bits) else 0
    rng = np.random.Generator(np.random.Philox(key))
    return rng.integers(0, 2, size=length, dtype=np.uint8)


@dataclass
class DoublingStage:
    """One seed-doubling stage: M seed bits in, 2M near-uniform bits out.

    The seed splits floor(M/2) + ceil(M/2); the second half drives the
    spot-checking protocol whose raw outputs feed a Toeplitz hash seeded
    from the first half; the input seed is copied alongside (first half
    and second half swapped back to original order)."""

    m_bits: int
    ratio: int = 4
    allow_single_bit: bool = False

    def __post_init__(self):
        if self.m_bits < 2 and not self.allow_single_bit:
            raise ValueError(
                "M=1 leaves an empty hash-seed half; use allow_single_bit"
            )
        if self.ratio * math.ceil(self.m_bits / 2) < 2 * self.m_bits:
            raise ValueError("expansion ratio too small for the output width")

    @property
    def raw_bits(self) -> int:
        return self.ratio * math.ceil(self.m_bits / 2)

    @property
    def rounds(self) -> int:
        return self.raw_bits // 2

    @property
    def out_bits(self) -> int:
        return 2 * self.m_bits

    def run(self, strategy, seed_bits, q: float, chi: float, run_seed: int):
        """Execute the stage; returns a per-stage report dict."""
        seed_bits = list(map(int, seed_bits))
        if len(seed_bits) != self.m_bits:
            raise ValueError(f"expected {self.m_bits} seed bits")
        half = self.m_bits // 2
        hash_half, proto_half = seed_bits[:half], seed_bits[half:]
        proto_key = int("".join(map(str, proto_half)), 2)
        rep = pr.spotcheck_run(
            self.rounds, q, chi, strategy, seed=run_seed * 65537 + proto_key
        )
        raw = list(rep.output_bits)
        hash_seed = _expand_seed_bits(
            hash_half if hash_half else proto_half, self.raw_bits + self.out_bits - 1
        )
        out = toeplitz_extract(raw, hash_seed, self.out_bits)
        return {
            "aborted": rep.aborted,
            "test_round_count": rep.test_round_count,
            "pass_count": rep.pass_count,
            "raw_bits": raw,
            "output_bits": [int(b) for b in out],
            "seed_copy": seed_bits,
        }


def compose_R(M: int, ratio: int = 4, allow_single_bit: bool = False) -> DoublingStage:
    """Doubling protocol taking M seed bits to 2M output bits."""
    return DoublingStage(M, ratio, allow_single_bit)


# ---------------------------------------------------------------------------
# unbounded expansion pipeline


@dataclass(frozen=True)
class ExpansionPlan:
    """k levels of two successive doublings each: level i consumes
    width 4^i * N and produces 4^(i+1) * N, alternating device pairs."""

    N: int
    k: int
    ratio: int = 4

    def __post_init__(self):
        if self.N < 1 or self.k < 1:
            raise ValueError("need N >= 1 and k >= 1")

    def widths(self) -> list:
        return [self.N * 4**i for i in range(self.k + 1)]


def _level_budget_atoms(plan: ExpansionPlan, level: int, base: str = "N"):
    scale = 4**level
    return [rw.eps(scale, base), rw.eps(2 * scale, base)]


def _exact_stage_distribution(stage: DoublingStage, strategy, q: float):
    """Output distribution of one stage given each seed value, by exact
    enumeration over round symbols and device outcomes."""
    bq = pr.b_q_distribution(q)
    p_cond = pr.conditional_distribution(strategy)
    g = pr.chsh_game()
    per_seed = {}
    round_options = []
    for sym in range(8):
        if bq[sym] == 0:
            continue
        t, a1, a2 = sym >> 2, (sym >> 1) & 1, sym & 1
        xx, yy = (a1, a2) if t else (0, 0)
        for aa in range(2):
            for bb in range(2):
                w = bq[sym] * p_cond[xx, yy, aa, bb]
                if w > 0:
                    passed = bool(g.predicate(xx, yy, aa, bb)) if t else None
                    round_options.append((w, t, passed, aa, bb))
    for seed_val in range(2**stage.m_bits):
        seed_bits = [(seed_val >> j) & 1 for j in range(stage.m_bits)][::-1]
        half = stage.m_bits // 2
        hash_half = seed_bits[:half] if half else seed_bits[half:]
        hash_seed = _expand_seed_bits(hash_half, stage.raw_bits + stage.out_bits - 1)
        t_mat = toeplitz_matrix(hash_seed, stage.out_bits)
        dist = np.zeros(2**stage.out_bits)
        abort_mass = 0.0
        for combo in product(round_options, repeat=stage.rounds):
            wgt = 1.0
            raw = []
            tests = passes = 0
            for w, t, passed, aa, bb in combo:
                wgt *= w
                raw += [aa, bb]
                if t:
                    tests += 1
                    passes += bool(passed)
            if tests == 0 or passes / tests < 0.85:
                abort_mass += wgt
                continue
            z = (t_mat @ np.array(raw, dtype=np.uint8)) % 2
            dist[int("".join(map(str, z)), 2)] += wgt
        per_seed[seed_val] = (dist, abort_mass)
    return per_seed


def unbounded_pipeline(plan: ExpansionPlan, strategies, seed: int, q: float = 0.2, chi: float = 0.85) -> dict:
    """Run the k-level expansion at toy widths.

    Each level performs two doublings on alternating device pairs,
    consuming the previous level's output as its seed.  The report
    carries per-level abort flags, widths, and symbolic budget atoms;
    when the first level is small enough, the exact distance of the
    final output distribution from uniform is enumerated."""
    if len(strategies) != 2:
        raise ValueError("supply exactly two device-pair strategies")
    for s in strategies:
        s.validate()
    rng = np.random.Generator(np.random.Philox(seed))
    current = [int(b) for b in rng.integers(0, 2, size=plan.N)]
    levels = []
    aborted = False
    for level in range(plan.k):
        width = plan.N * 4**level
        pair = strategies[level % 2]
        stage1 = compose_R(width, plan.ratio, allow_single_bit=True)
        stage2 = compose_R(2 * width, plan.ratio, allow_single_bit=True)
        rec = {
            "level": level,
            "input_width": width,
            "output_width": 4 * width,
            "device_pair": level % 2,
            "budget_atoms": [str(a) for a in _level_budget_atoms(plan, level)],
            "aborted": False,
        }
        if not aborted:
            r1 = stage1.run(pair, current, q, chi, run_seed=seed * 1000 + 2 * level)
            if r1["aborted"]:
                rec["aborted"] = True
                aborted = True
            else:
                r2 = stage2.run(
                    pair, r1["output_bits"], q, chi, run_seed=seed * 1000 + 2 * level + 1
                )
                if r2["aborted"]:
                    rec["aborted"] = True
                    aborted = True
                else:
                    current = r2["output_bits"]
        else:
            rec["aborted"] = None  # never reached
        levels.append(rec)
    total = rw.EpsExpr.zero()
    for level in range(plan.k):
        for atom in _level_budget_atoms(plan, level):
            total = total + atom
    report = {
        "format_version": 1,
        "plan": {"N": plan.N, "k": plan.k, "ratio": plan.ratio},
        "seed": seed,
        "aborted": aborted,
        "levels": levels,
        "output_width": plan.N * 4**plan.k,
        "output_bits": None if aborted else [int(b) for b in current],
        "budget": str(total),
        "budget_atoms": [str(rw.EpsExpr((a,))) for a in total.atoms()],
    }
    first = compose_R(plan.N, plan.ratio, allow_single_bit=True)
    second = compose_R(2 * plan.N, plan.ratio, allow_single_bit=True)
    if (
        plan.k == 1
        and plan.N * 4 <= 12
        and first.rounds <= 2
        and second.rounds <= 2
        and all(s.mode == "iid" for s in strategies)
    ):
        report["uniform_distance_exact"] = _pipeline_exact_distance(
            plan, strategies, q, chi
        )
    return report


def _pipeline_exact_distance(plan: ExpansionPlan, strategies, q: float, chi: float) -> float:
    """Exact distance of the k=1 final output from uniform, averaged
    over the initial seed and enumerated over all protocol randomness."""
    pair = strategies[0]
    stage1 = compose_R(plan.N, plan.ratio, allow_single_bit=True)
    stage2 = compose_R(2 * plan.N, plan.ratio, allow_single_bit=True)
    d1 = _exact_stage_distribution(stage1, pair, q)
    d2 = _exact_stage_distribution(stage2, pair, q)
    w_out = 2**stage2.out_bits
    final = np.zeros(w_out)
    for s1 in d1:
        dist1, _ = d1[s1]
        for mid, w1 in enumerate(dist1):
            if w1 == 0:
                continue
            dist2, _ = d2[mid]
            final += w1 * dist2 / 2**plan.N
    mass = final.sum()
    if mass == 0:
        return 1.0
    final /= mass
    return float(0.5 * np.abs(final - 1.0 / w_out).sum())
