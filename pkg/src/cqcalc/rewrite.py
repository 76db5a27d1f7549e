"""Error-budgeted diagram rewriting.

A rewrite rule replaces a matched subdiagram by another with the same
boundary typing, adding the rule's cost to a symbolic error budget
(multiset of atoms, summed by the triangle inequality).  Exact
structural rules cost nothing; axiom schemas (the spot-check step and
its relatives) carry symbolic costs like eps(2N) whose concrete
constants are never fixed, so numeric validation records measured
distances for them instead of asserting bounds.

Proof scripts replay a fixed step list from an initial diagram.  The
shipped scripts rebuild the seeded-expansion chain: a single expansion
stage costs eps(M) + eps(2M); k chained stages cost the sum of
eps(2^i N) for i < 2k; and the full soundness script ends in a uniform
state of width 4^k N next to a residual subnormalized state.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import diagram as dg
from . import regcalc as rc
from .regcalc import SymWidth

DEV = rc.Q(2)  # toy device-state register used by the shipped scripts
SIDE = rc.Q(2)  # adversary side-information register


# ---------------------------------------------------------------------------
# budget algebra


def _atom_key(a):
    if a[0] == "sqrt2eps":
        return (a[0], tuple(_atom_key(x) for x in a[1]))
    return a


@dataclass(frozen=True)
class EpsExpr:
    """Multiset of error atoms: const(c), eps-style function applications
    fn(scale * base), sqrt2eps(inner) = sqrt(2 * inner), and the infinite
    sum lam(scale * base) = sum_i fn(2^i * scale * base)."""

    terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(sorted(self.terms, key=_atom_key)))

    @staticmethod
    def zero() -> "EpsExpr":
        return EpsExpr(())

    def __add__(self, other: "EpsExpr") -> "EpsExpr":
        return EpsExpr(self.terms + other.terms)

    def __bool__(self):
        return bool(self.terms)

    def __str__(self):
        if not self.terms:
            return "0"
        return " + ".join(_atom_str(a) for a in self.terms)

    def atoms(self):
        return self.terms


def const(c: float) -> EpsExpr:
    return EpsExpr((("const", float(c)),))


def eps(scale: int, base: str, fn: str = "eps") -> EpsExpr:
    return EpsExpr((("eps", fn, int(scale), str(base)),))


def lam(scale: int, base: str, fn: str = "eps") -> EpsExpr:
    return EpsExpr((("lam", fn, int(scale), str(base)),))


def sqrt2eps(inner: EpsExpr) -> EpsExpr:
    return EpsExpr((("sqrt2eps", inner.terms),))


def _atom_str(a):
    if a[0] == "const":
        return repr(a[1])
    if a[0] == "eps":
        return f"{a[1]}({a[2]}*{a[3]})"
    if a[0] == "lam":
        return f"lam[{a[1]}]({a[2]}*{a[3]})"
    return "sqrt(2*(" + str(EpsExpr(a[1])) + "))"


class ExpDecay:
    """Concrete error function c * 2^(-a*n); admits a geometric tail
    bound for the infinite lam sums."""

    def __init__(self, c: float = 1.0, a: float = 1.0):
        self.c, self.a = float(c), float(a)

    def __call__(self, n):
        return self.c * 2.0 ** (-self.a * n)


def _resolve_fn(eps_fn, name):
    if isinstance(eps_fn, dict):
        return eps_fn[name]
    return eps_fn  # single callable serves every function symbol


def budget_eval(e: EpsExpr, eps_fn, N: int, k_max: int = 30) -> dict:
    """Numeric value of a budget at base value N.

    Every base symbol is set to N.  Infinite lam sums take k_max partial
    terms; when the function is an ExpDecay a geometric tail bound is
    added, otherwise the result carries a divergence flag."""
    value = 0.0
    tail = 0.0
    divergent = False
    for a in e.terms:
        kind = a[0]
        if kind == "const":
            value += a[1]
        elif kind == "eps":
            value += _resolve_fn(eps_fn, a[1])(a[2] * N)
        elif kind == "sqrt2eps":
            inner = budget_eval(EpsExpr(a[1]), eps_fn, N, k_max)
            divergent = divergent or inner["divergent"]
            tail += inner["tail_bound"]
            value += math.sqrt(2.0 * inner["value"])
        elif kind == "lam":
            f = _resolve_fn(eps_fn, a[1])
            n0 = a[2] * N
            value += sum(f(2**i * n0) for i in range(k_max + 1))
            if isinstance(f, ExpDecay) and f.a > 0:
                first_omitted = f(2 ** (k_max + 1) * n0)
                ratio = 2.0 ** (-f.a * n0)
                if ratio < 1.0:
                    tail += first_omitted / (1.0 - ratio)
                else:
                    divergent = True
            else:
                divergent = True
    return {"value": value + tail, "partial": value, "tail_bound": tail, "divergent": divergent}


def eps_expr_to_json(e: EpsExpr):
    def atom(a):
        if a[0] == "sqrt2eps":
            return ["sqrt2eps", [atom(x) for x in a[1]]]
        return list(a)

    return [atom(a) for a in e.terms]


def eps_expr_from_json(j) -> EpsExpr:
    def atom(a):
        if a[0] == "sqrt2eps":
            return ("sqrt2eps", tuple(atom(x) for x in a[1]))
        if a[0] == "const":
            return ("const", float(a[1]))
        return (a[0], a[1], int(a[2]), str(a[3]))

    return EpsExpr(tuple(atom(a) for a in j))


# ---------------------------------------------------------------------------
# rules and matching


class RewriteError(Exception):
    pass


@dataclass(frozen=True)
class RewriteRule:
    """A named replacement lhs -> rhs with identical boundary typing.

    validation_mode "exact" rules are numeric identities; "axiom" rules
    carry an unproven cost and are only probed numerically.  Holes with
    the same label on both sides denote the same process.  binding_mode
    controls how numeric self-tests bind holes: "fresh" draws every hole
    independently; "derive_lhs" (single-hole lhs) defines the lhs hole
    as the evaluated rhs, for definition-unfolding rules."""

    name: str
    lhs: dg.Diagram
    rhs: dg.Diagram
    cost: EpsExpr = EpsExpr.zero()
    direction: str = "ltr"  # or "bi"
    validation_mode: str = "exact"
    binding_mode: str = "fresh"

    def __post_init__(self):
        if self.lhs.in_types != self.rhs.in_types or self.lhs.out_types != self.rhs.out_types:
            raise ValueError(f"rule {self.name}: boundary typing differs between sides")


@dataclass(frozen=True)
class Match:
    node_map: tuple  # (pattern id, host id) pairs
    port_maps: tuple  # (pattern id, (host port per pattern out-port)) for uniforms
    in_att: tuple  # host source endpoint per pattern input
    out_att: tuple  # host target endpoint per pattern output

    @property
    def loc(self):
        return tuple(sorted(h for _, h in self.node_map))


def _node_compatible(pg: dg.Generator, hg: dg.Generator) -> bool:
    if pg.kind != hg.kind or pg.flags != hg.flags:
        return False
    if pg.kind in (dg.HOLE, dg.BOX) and pg.label != hg.label:
        return False
    if pg.kind == dg.UNIFORM:
        return len(pg.out_ports) == len(hg.out_ports) and pg.out_ports[0] == hg.out_ports[0]
    if pg.kind == dg.SCALAR:
        return pg.payload == hg.payload
    return pg.in_ports == hg.in_ports and pg.out_ports == hg.out_ports


def find_matches(host: dg.Diagram, pattern: dg.Diagram) -> list[Match]:
    """All embeddings of the pattern into the host.

    Node identity is matched on kind/label/flags/port types; uniform
    legs are matched up to permutation.  Pattern boundary wires record
    host attachment endpoints, which must lie outside the matched nodes.
    Boundary-to-boundary pattern wires are not supported."""
    by_src = {s: (s, t) for s, t in host.wires}
    by_dst = {t: (s, t) for s, t in host.wires}
    pids = sorted(pattern.nodes)
    out: list[Match] = []
    seen = set()

    def wires_ok(nmap, perms):
        matched = set(nmap.values())
        in_att = [None] * len(pattern.in_types)
        out_att = [None] * len(pattern.out_types)

        def h_out(pid, port):
            return ("n", nmap[pid], perms[pid][port] if pid in perms else port)

        for ps, pd in pattern.wires:
            if ps[0] == "in" and pd[0] == "out":
                raise RewriteError("pattern pass-through wires are not supported")
            hs = h_out(ps[1], ps[2]) if ps[0] == "n" else None
            hd = ("n", nmap[pd[1]], pd[2]) if pd[0] == "n" else None
            if hs is not None and hd is not None:
                if by_src.get(hs) != (hs, hd):
                    return None
            elif hs is None:  # pattern boundary input
                w = by_dst.get(hd)
                if w is None:
                    return None
                src = w[0]
                if src[0] == "n" and src[1] in matched:
                    return None
                in_att[ps[1]] = src
            else:  # pattern boundary output
                w = by_src.get(hs)
                if w is None:
                    return None
                dst = w[1]
                if dst[0] == "n" and dst[1] in matched:
                    return None
                out_att[pd[1]] = dst
        return Match(
            tuple(sorted(nmap.items())),
            tuple(sorted((p, tuple(v)) for p, v in perms.items())),
            tuple(in_att),
            tuple(out_att),
        )

    def backtrack(i, nmap, perms):
        if i == len(pids):
            m = wires_ok(nmap, perms)
            if m is not None:
                key = (m.node_map, m.in_att, m.out_att)
                if key not in seen:
                    seen.add(key)
                    out.append(m)
            return
        pid = pids[i]
        pg = pattern.nodes[pid]
        for hid, hg in host.nodes.items():
            if hid in nmap.values() or not _node_compatible(pg, hg):
                continue
            nmap[pid] = hid
            if pg.kind == dg.UNIFORM and len(pg.out_ports) > 1:
                for perm in itertools.permutations(range(len(pg.out_ports))):
                    perms[pid] = perm
                    backtrack(i + 1, nmap, perms)
                del perms[pid]
            else:
                backtrack(i + 1, nmap, perms)
            del nmap[pid]

    backtrack(0, {}, {})
    return out


def _apply_match(host: dg.Diagram, rhs: dg.Diagram, m: Match) -> dg.Diagram:
    removed = set(h for _, h in m.node_map)
    nodes = {nid: g for nid, g in host.nodes.items() if nid not in removed}
    off = max(host.nodes, default=-1) + 1
    idmap = {}
    for rid in sorted(rhs.nodes):
        idmap[rid] = off
        off += 1
        nodes[idmap[rid]] = rhs.nodes[rid]

    def incident(w):
        return (w[0][0] == "n" and w[0][1] in removed) or (w[1][0] == "n" and w[1][1] in removed)

    wires = [w for w in host.wires if not incident(w)]
    for rs, rd in rhs.wires:
        s = m.in_att[rs[1]] if rs[0] == "in" else ("n", idmap[rs[1]], rs[2])
        d = m.out_att[rd[1]] if rd[0] == "out" else ("n", idmap[rd[1]], rd[2])
        wires.append((s, d))
    return dg.Diagram(nodes, wires, host.in_types, host.out_types)


@dataclass(frozen=True)
class RewriteState:
    diagram: dg.Diagram
    budget: EpsExpr = EpsExpr.zero()


def apply_rule(state: RewriteState, rule: RewriteRule, loc=None):
    """Apply a rule; returns (new state, loc used).  loc is the sorted
    tuple of matched host node ids; omit it when the match is unique."""
    matches = find_matches(state.diagram, rule.lhs)
    if loc is not None:
        loc = tuple(sorted(loc))
        matches = [m for m in matches if m.loc == loc]
    if not matches:
        cands = sorted({m.loc for m in find_matches(state.diagram, rule.lhs)})
        raise RewriteError(
            f"rule {rule.name!r} does not match at {loc}; candidate locations: {cands}"
        )
    m = matches[0]
    newdiag = _apply_match(state.diagram, rule.rhs, m)
    return RewriteState(newdiag, state.budget + rule.cost), m.loc


# ---------------------------------------------------------------------------
# surgical (parametric) steps


def cut_subdiagram(d: dg.Diagram, loc):
    """Extract the nodes at loc as a standalone diagram.

    Boundary order follows the host wire list; returns (sub, incoming
    attachment endpoints, outgoing attachment endpoints)."""
    loc = set(loc)
    idmap = {nid: i for i, nid in enumerate(sorted(loc))}
    in_types, out_types, in_atts, out_atts, wires = [], [], [], [], []
    for s, t in d.wires:
        s_in = s[0] == "n" and s[1] in loc
        t_in = t[0] == "n" and t[1] in loc
        if s_in and t_in:
            wires.append((("n", idmap[s[1]], s[2]), ("n", idmap[t[1]], t[2])))
        elif t_in:
            k = len(in_types)
            in_types.append(d.wire_type((s, t)))
            in_atts.append(s)
            wires.append((("in", k), ("n", idmap[t[1]], t[2])))
        elif s_in:
            k = len(out_types)
            out_types.append(d.wire_type((s, t)))
            out_atts.append(t)
            wires.append((("n", idmap[s[1]], s[2]), ("out", k)))
    sub = dg.Diagram(
        {idmap[n]: d.nodes[n] for n in loc}, wires, tuple(in_types), tuple(out_types)
    )
    return sub, in_atts, out_atts


def _node_is_causal(g: dg.Generator) -> bool:
    if g.kind in (dg.UNIFORM, dg.DISCARD):
        return True
    if g.kind == dg.SCALAR:
        return float(g.payload) == 1.0
    if g.kind in (dg.HOLE, dg.BOX):
        return "causal" in g.flags
    return False


def _node_is_stochastic(g: dg.Generator) -> bool:
    if g.kind in (dg.UNIFORM, dg.DISCARD, dg.SCALAR):
        return True
    if g.kind in (dg.HOLE, dg.BOX):
        return "causal" in g.flags or "stochastic" in g.flags
    return False


def merge_step(d: dg.Diagram, loc, name: str):
    """Fuse the nodes at loc into a single opaque hole.

    The hole keeps the cut's boundary order and inherits the strongest
    flag set shared by the parts (causal things compose causally;
    stochastic likewise).  Returns (new diagram, local lhs, local rhs)."""
    sub, in_atts, out_atts = cut_subdiagram(d, loc)
    parts = list(sub.nodes.values())
    if all(_node_is_causal(g) for g in parts):
        flags = frozenset({"causal", "stochastic"})
    elif all(_node_is_stochastic(g) for g in parts):
        flags = frozenset({"stochastic"})
    else:
        flags = frozenset()
    h = dg.hole(name, sub.in_types, sub.out_types, flags)
    nid = max(d.nodes) + 1
    nodes = {k: g for k, g in d.nodes.items() if k not in set(loc)}
    nodes[nid] = h

    def incident(w):
        return (w[0][0] == "n" and w[0][1] in set(loc)) or (
            w[1][0] == "n" and w[1][1] in set(loc)
        )

    wires = [w for w in d.wires if not incident(w)]
    wires += [(in_atts[k], ("n", nid, k)) for k in range(len(sub.in_types))]
    wires += [(("n", nid, k), out_atts[k]) for k in range(len(sub.out_types))]
    return dg.Diagram(nodes, wires, d.in_types, d.out_types), sub, dg.Diagram.from_generator(h)


def causality_step(d: dg.Diagram, loc):
    """Discard a causal node: loc = (node, discards consuming every one
    of its outputs); replaced by discards on each of its inputs."""
    loc = tuple(loc)
    target, discards = loc[0], set(loc[1:])
    g = d.nodes[target]
    if "causal" not in g.flags:
        raise RewriteError(f"node {target} is not flagged causal")
    consumers = set()
    for s, t in d.wires:
        if s[0] == "n" and s[1] == target:
            if t[0] != "n" or d.nodes[t[1]].kind != dg.DISCARD:
                raise RewriteError(f"output {s[2]} of node {target} is not discarded")
            consumers.add(t[1])
    if consumers != discards:
        raise RewriteError(f"loc discards {sorted(discards)} != consumers {sorted(consumers)}")
    sub, in_atts, _ = cut_subdiagram(d, loc)
    nodes = {k: v for k, v in d.nodes.items() if k not in set(loc)}
    wires = [
        w
        for w in d.wires
        if not (
            (w[0][0] == "n" and w[0][1] in set(loc)) or (w[1][0] == "n" and w[1][1] in set(loc))
        )
    ]
    nid = max(d.nodes) + 1
    rhs_nodes, rhs_wires = {}, []
    for k, reg in enumerate(sub.in_types):
        nodes[nid + k] = dg.discard_gen(reg)
        wires.append((in_atts[k], ("n", nid + k, 0)))
        rhs_nodes[k] = dg.discard_gen(reg)
        rhs_wires.append((("in", k), ("n", k, 0)))
    rhs = dg.Diagram(rhs_nodes, rhs_wires, sub.in_types, ())
    return dg.Diagram(nodes, wires, d.in_types, d.out_types), sub, rhs


def _uniform_check(g: dg.Generator, nid):
    if g.kind != dg.UNIFORM:
        raise RewriteError(f"node {nid} is not a uniform state")
    if g.out_ports[0].kind != rc.CLASSICAL:
        raise RewriteError("leg-count rules for uniform states hold on classical wires only")


def absorb_discard_step(d: dg.Diagram, loc):
    """uniform with k >= 2 legs, one consumed by a discard -> k-1 legs."""
    uid, did = loc
    g = d.nodes[uid]
    _uniform_check(g, uid)
    k = len(g.out_ports)
    if k < 2:
        raise RewriteError("need at least two legs to absorb a discard")
    if d.nodes.get(did, dg.scalar_gen(1)).kind != dg.DISCARD:
        raise RewriteError(f"node {did} is not a discard")
    leg = None
    for s, t in d.wires:
        if s[0] == "n" and s[1] == uid and t == ("n", did, 0):
            leg = s[2]
    if leg is None:
        raise RewriteError(f"discard {did} is not attached to uniform {uid}")
    sub, _, out_atts = cut_subdiagram(d, (uid, did))
    reg = g.out_ports[0]
    nodes = {n: v for n, v in d.nodes.items() if n not in (uid, did)}
    nid = max(d.nodes) + 1
    nodes[nid] = dg.uniform_gen(reg, k - 1)
    wires = [
        w
        for w in d.wires
        if not ((w[0][0] == "n" and w[0][1] in (uid, did)) or (w[1][0] == "n" and w[1][1] in (uid, did)))
    ]
    kept = [p for p in range(k) if p != leg]
    old_dst = {}
    for s, t in d.wires:
        if s[0] == "n" and s[1] == uid:
            old_dst[s[2]] = t
    for i, p in enumerate(kept):
        wires.append((("n", nid, i), old_dst[p]))
    rhs = dg.Diagram.from_generator(dg.uniform_gen(reg, k - 1))
    return dg.Diagram(nodes, wires, d.in_types, d.out_types), sub, rhs


def widen_uniform_step(d: dg.Diagram, loc):
    """uniform with k legs -> k+1 legs with the fresh leg discarded."""
    (uid,) = loc
    g = d.nodes[uid]
    _uniform_check(g, uid)
    k = len(g.out_ports)
    reg = g.out_ports[0]
    sub, _, out_atts = cut_subdiagram(d, (uid,))
    nodes = {n: v for n, v in d.nodes.items() if n != uid}
    nid = max(d.nodes) + 1
    did = nid + 1
    nodes[nid] = dg.uniform_gen(reg, k + 1)
    nodes[did] = dg.discard_gen(reg)
    wires = [
        w
        for w in d.wires
        if not ((w[0][0] == "n" and w[0][1] == uid) or (w[1][0] == "n" and w[1][1] == uid))
    ]
    old_dst = {}
    for s, t in d.wires:
        if s[0] == "n" and s[1] == uid:
            old_dst[s[2]] = t
    for p in range(k):
        wires.append((("n", nid, p), old_dst[p]))
    wires.append((("n", nid, k), ("n", did, 0)))
    rhs = dg.Diagram(
        {0: dg.uniform_gen(reg, k + 1), 1: dg.discard_gen(reg)},
        [(("n", 0, p), ("out", p)) for p in range(k)] + [(("n", 0, k), ("n", 1, 0))],
        (),
        tuple([reg] * k),
    )
    return dg.Diagram(nodes, wires, d.in_types, d.out_types), sub, rhs


SURGICAL = {"merge", "causality", "absorb_discard", "widen_uniform"}


def apply_surgical(d: dg.Diagram, name: str, loc, params):
    if name == "merge":
        return merge_step(d, loc, params["name"])
    if name == "causality":
        return causality_step(d, loc)
    if name == "absorb_discard":
        return absorb_discard_step(d, loc)
    if name == "widen_uniform":
        return widen_uniform_step(d, loc)
    raise RewriteError(f"unknown surgical step {name!r}")


# ---------------------------------------------------------------------------
# rule library


def _cw(scale, base):
    """Classical register of width scale*base bits (symbolic) or of the
    given concrete dimension when base is an int."""
    if isinstance(base, str):
        return rc.C(SymWidth(scale, base))
    return rc.C(base)


STOCH = frozenset({"stochastic"})
CAUSAL = frozenset({"causal"})


def rule_expand_S(scale: int, base) -> RewriteRule:
    """Definition unfolding: one expansion stage S(w) is a width-w
    round feeding a width-2w round on a second device pair."""
    w = _cw(scale, base)
    w2 = _cw(2 * scale, base if isinstance(base, str) else base * base)
    w4 = _cw(4 * scale, base if isinstance(base, str) else base**4)
    S = dg.hole(f"S@{scale}", (w, DEV, DEV), (w4, DEV, DEV), STOCH)
    lhs = dg.Diagram.from_generator(S)
    R1 = dg.hole(f"R@{scale}", (w, DEV), (w2, DEV), STOCH)
    R2 = dg.hole(f"R@{2 * scale}", (w2, DEV), (w4, DEV), STOCH)
    rhs = dg.Diagram(
        {0: R1, 1: R2},
        [
            (("in", 0), ("n", 0, 0)),
            (("in", 1), ("n", 0, 1)),
            (("in", 2), ("n", 1, 1)),
            (("n", 0, 0), ("n", 1, 0)),  # width-2w output seeds the second round
            (("n", 1, 0), ("out", 0)),
            (("n", 0, 1), ("out", 1)),
            (("n", 1, 1), ("out", 2)),
        ],
        (w, DEV, DEV),
        (w4, DEV, DEV),
    )
    return RewriteRule(f"expand_S@{scale}", lhs, rhs, binding_mode="derive_lhs")


def _spot_lhs(scale, base, hole_label):
    w = _cw(scale, base)
    w2 = _cw(2 * scale, base if isinstance(base, str) else base * base)
    R = dg.hole(hole_label, (w, DEV), (w2, DEV), STOCH)
    lhs = dg.Diagram(
        {0: dg.uniform_gen(w, 2), 1: R},
        [
            (("n", 0, 0), ("out", 0)),
            (("n", 0, 1), ("n", 1, 0)),
            (("in", 0), ("n", 1, 1)),
            (("n", 1, 0), ("out", 1)),
            (("n", 1, 1), ("out", 2)),
        ],
        (DEV,),
        (w, w2, DEV),
    )
    return lhs, w, w2


def _spot_rhs(scale, base):
    w = _cw(scale, base)
    w2 = _cw(2 * scale, base if isinstance(base, str) else base * base)
    B = dg.hole(f"B@{scale}", (w, DEV), (w, DEV), STOCH)
    A = dg.hole(f"A@{scale}", (w2, w, DEV), (DEV,), CAUSAL)
    return dg.Diagram(
        {0: dg.uniform_gen(w, 2), 1: B, 2: dg.uniform_gen(w2, 2), 3: A},
        [
            (("n", 0, 0), ("out", 0)),
            (("n", 0, 1), ("n", 1, 0)),
            (("in", 0), ("n", 1, 1)),
            (("n", 2, 0), ("out", 1)),
            (("n", 2, 1), ("n", 3, 0)),
            (("n", 1, 0), ("n", 3, 1)),
            (("n", 1, 1), ("n", 3, 2)),
            (("n", 3, 0), ("out", 2)),
        ],
        (DEV,),
        (w, w2, DEV),
    )


def rule_spot_check(scale: int, base) -> RewriteRule:
    """Axiom: a protocol round seeded by a copied uniform seed is
    within eps(scale*base) of a fresh doubled-width uniform output next
    to a stochastic correlator and a causal completion."""
    lhs, _, _ = _spot_lhs(scale, base, f"R@{scale}")
    rhs = _spot_rhs(scale, base)
    b = base if isinstance(base, str) else "N"
    return RewriteRule(
        f"spot_check@{scale}", lhs, rhs, cost=eps(scale, b), validation_mode="axiom"
    )


def rule_starting_soundness(scale: int, base) -> RewriteRule:
    """Axiom (cost delta): the round's classical output can be replaced
    by a fresh uniform state when the original output is discarded."""
    lhs, w, w2 = _spot_lhs(scale, base, f"R@{scale}")
    R = dg.hole(f"R@{scale}", (w, DEV), (w2, DEV), STOCH)
    rhs = dg.Diagram(
        {0: dg.uniform_gen(w, 2), 1: R, 2: dg.discard_gen(w2), 3: dg.uniform_gen(w2, 1)},
        [
            (("n", 0, 0), ("out", 0)),
            (("n", 0, 1), ("n", 1, 0)),
            (("in", 0), ("n", 1, 1)),
            (("n", 1, 0), ("n", 2, 0)),
            (("n", 3, 0), ("out", 1)),
            (("n", 1, 1), ("out", 2)),
        ],
        (DEV,),
        (w, w2, DEV),
    )
    b = base if isinstance(base, str) else "N"
    return RewriteRule(
        f"starting_soundness@{scale}",
        lhs,
        rhs,
        cost=eps(scale, b, fn="delta"),
        validation_mode="axiom",
    )


def rule_dup_corollary(scale: int, base) -> RewriteRule:
    """Axiom (cost sqrt(2*delta)): replace the discarded-output form by
    the duplicated form with a causal completion."""
    sound = rule_starting_soundness(scale, base)
    rhs = _spot_rhs(scale, base)
    b = base if isinstance(base, str) else "N"
    return RewriteRule(
        f"dup_corollary@{scale}",
        sound.rhs,
        rhs,
        cost=sqrt2eps(eps(scale, b, fn="delta")),
        validation_mode="axiom",
    )


def rule_adjustment_completeness(scale: int, base) -> RewriteRule:
    """Axiom (cost 2*delta): the uniform doubled-width state is within
    the closure of honest protocol outputs."""
    w = _cw(scale, base)
    w2 = _cw(2 * scale, base if isinstance(base, str) else base * base)
    lhs = dg.Diagram(
        {0: dg.uniform_gen(w2, 1)}, [(("n", 0, 0), ("out", 0))], (), (w2,)
    )
    R = dg.hole(f"R@{scale}", (w, DEV), (w2, DEV), STOCH)
    G = dg.hole("honest_state", (), (DEV,), frozenset({"causal", "stochastic"}))
    rhs = dg.Diagram(
        {0: dg.uniform_gen(w, 1), 1: G, 2: R, 3: dg.discard_gen(DEV)},
        [
            (("n", 0, 0), ("n", 2, 0)),
            (("n", 1, 0), ("n", 2, 1)),
            (("n", 2, 0), ("out", 0)),
            (("n", 2, 1), ("n", 3, 0)),
        ],
        (),
        (w2,),
    )
    b = base if isinstance(base, str) else "N"
    cost = eps(scale, b, fn="delta") + eps(scale, b, fn="delta")
    return RewriteRule(
        f"adjustment_completeness@{scale}", lhs, rhs, cost=cost, validation_mode="axiom"
    )


def rule_uniform_absorbs_discard(reg) -> RewriteRule:
    lhs = dg.Diagram(
        {0: dg.uniform_gen(reg, 2), 1: dg.discard_gen(reg)},
        [(("n", 0, 0), ("out", 0)), (("n", 0, 1), ("n", 1, 0))],
        (),
        (reg,),
    )
    rhs = dg.Diagram.from_generator(dg.uniform_gen(reg, 1))
    return RewriteRule("uniform_absorbs_discard", lhs, rhs, direction="bi")


def rule_widen_uniform(reg) -> RewriteRule:
    r = rule_uniform_absorbs_discard(reg)
    return RewriteRule("widen_uniform", r.rhs, r.lhs, direction="bi")


def rule_spider_fusion(reg) -> RewriteRule:
    lhs = dg.Diagram(
        {0: dg.spider_gen(reg, 0, 3), 1: dg.spider_gen(reg, 1, 2)},
        [
            (("n", 0, 0), ("out", 0)),
            (("n", 0, 1), ("out", 1)),
            (("n", 0, 2), ("n", 1, 0)),
            (("n", 1, 0), ("out", 2)),
            (("n", 1, 1), ("out", 3)),
        ],
        (),
        (reg,) * 4,
    )
    rhs = dg.Diagram.from_generator(dg.spider_gen(reg, 0, 4))
    return RewriteRule("spider_fusion", lhs, rhs, direction="bi")


def rule_causality(reg) -> RewriteRule:
    h = dg.hole("h", (reg,), (reg,), CAUSAL)
    lhs = dg.Diagram(
        {0: h, 1: dg.discard_gen(reg)},
        [(("in", 0), ("n", 0, 0)), (("n", 0, 0), ("n", 1, 0))],
        (reg,),
        (),
    )
    rhs = dg.Diagram(
        {0: dg.discard_gen(reg)}, [(("in", 0), ("n", 0, 0))], (reg,), ()
    )
    return RewriteRule("causality", lhs, rhs)


def rule_uniform_is_scaled_spider(reg) -> RewriteRule:
    lhs = dg.Diagram.from_generator(dg.uniform_gen(reg, 2))
    rhs = dg.Diagram(
        {0: dg.spider_gen(reg, 0, 2), 1: dg.scalar_gen(1.0 / reg.total_dim)},
        [(("n", 0, 0), ("out", 0)), (("n", 0, 1), ("out", 1))],
        (),
        (reg, reg),
    )
    return RewriteRule("uniform_is_scaled_spider", lhs, rhs, direction="bi")


def builtin_rules(dim: int = 2) -> list[RewriteRule]:
    """Exact structural rules at a concrete classical width."""
    reg = rc.C(dim)
    return [
        rule_uniform_absorbs_discard(reg),
        rule_widen_uniform(reg),
        rule_spider_fusion(reg),
        rule_causality(reg),
        rule_uniform_is_scaled_spider(reg),
        rule_expand_S(1, dim),
    ]


def axiom_rules() -> list[RewriteRule]:
    return [
        rule_spot_check(1, "N"),
        rule_starting_soundness(1, "N"),
        rule_dup_corollary(1, "N"),
        rule_adjustment_completeness(1, "N"),
    ]


RULE_FACTORIES = {
    "expand_S": lambda p: rule_expand_S(p["scale"], p["base"]),
    "spot_check": lambda p: rule_spot_check(p["scale"], p["base"]),
    "starting_soundness": lambda p: rule_starting_soundness(p["scale"], p["base"]),
    "dup_corollary": lambda p: rule_dup_corollary(p["scale"], p["base"]),
    "adjustment_completeness": lambda p: rule_adjustment_completeness(p["scale"], p["base"]),
}


def _hole_specs(d: dg.Diagram):
    return {
        g.label: g for g in d.nodes.values() if g.kind == dg.HOLE
    }


def sample_hole(g: dg.Generator, rng) -> rc.ProcessTensor:
    """Flag-respecting random instantiation of a hole."""
    causal = "causal" in g.flags
    return rc.random_cq_channel(g.in_ports, g.out_ports, rng, causal=causal)


def validate_rule(rule: RewriteRule, rng, dims=None) -> float:
    """Numeric self-test: evaluate both sides under one random binding
    and return the maximum matrix-entry discrepancy."""
    lhs, rhs = rule.lhs, rule.rhs
    if dims:
        lhs, rhs = lhs.subst(dims), rhs.subst(dims)
    binding = {}
    lhs_holes, rhs_holes = _hole_specs(lhs), _hole_specs(rhs)
    for label, g in rhs_holes.items():
        binding[label] = sample_hole(g, rng)
    if rule.binding_mode == "derive_lhs":
        (label,) = lhs_holes.keys()
        binding[label] = rhs.evaluate(binding)
    else:
        for label, g in lhs_holes.items():
            if label not in binding:
                binding[label] = sample_hole(g, rng)
    m1 = lhs.evaluate(binding).matrix
    m2 = rhs.evaluate(binding).matrix
    return float(np.abs(m1 - m2).max())


# ---------------------------------------------------------------------------
# proof scripts


@dataclass
class ProofScript:
    """A replayable derivation: an initial diagram plus a fixed list of
    rule applications and surgical steps, with the budget the script
    claims to accumulate."""

    name: str
    initial: dg.Diagram
    steps: list
    claimed_total: EpsExpr


SCRIPT_FORMAT_VERSION = 1


def script_to_json(s: ProofScript) -> dict:
    return {
        "format_version": SCRIPT_FORMAT_VERSION,
        "name": s.name,
        "initial": dg.diagram_to_json(s.initial),
        "steps": [
            {"rule": st["rule"], "loc": list(st["loc"]), "params": dict(st.get("params", {}))}
            for st in s.steps
        ],
        "claimed_total": eps_expr_to_json(s.claimed_total),
    }


def script_from_json(j: dict) -> ProofScript:
    if j.get("format_version") != SCRIPT_FORMAT_VERSION:
        raise ValueError(f"unsupported script format {j.get('format_version')!r}")
    return ProofScript(
        j["name"],
        dg.diagram_from_json(j["initial"]),
        [
            {"rule": st["rule"], "loc": tuple(st["loc"]), "params": dict(st.get("params", {}))}
            for st in j["steps"]
        ],
        eps_expr_from_json(j["claimed_total"]),
    )


def _w(scale: int, base: str) -> rc.Register:
    return rc.C(SymWidth(scale, base))


class _Builder:
    """Records a script by actually applying each step, so the recorded
    locations are guaranteed to replay."""

    def __init__(self, name: str, initial: dg.Diagram, base: str):
        self.name = name
        self.initial = initial
        self.base = base
        self.state = RewriteState(initial)
        self.steps: list = []

    def rule(self, fname: str, loc, **params):
        r = RULE_FACTORIES[fname](params)
        self.state, used = apply_rule(self.state, r, loc)
        self.steps.append({"rule": fname, "loc": used, "params": params})

    def surgical(self, sname: str, loc, **params):
        d, _, _ = apply_surgical(self.state.diagram, sname, loc, params)
        self.state = RewriteState(d, self.state.budget)
        self.steps.append({"rule": sname, "loc": tuple(loc), "params": params})

    # -- node lookup on the current diagram --------------------------------
    def _only(self, pred, what):
        ids = [nid for nid, g in self.state.diagram.nodes.items() if pred(g)]
        if len(ids) != 1:
            raise RewriteError(f"expected exactly one {what}, found {ids}")
        return ids[0]

    def hole_id(self, label: str) -> int:
        return self._only(
            lambda g: g.kind == dg.HOLE and g.label == label, f"hole {label!r}"
        )

    def uniform_id(self, scale: int, legs: int) -> int:
        reg = _w(scale, self.base)
        return self._only(
            lambda g: g.kind == dg.UNIFORM
            and len(g.out_ports) == legs
            and g.out_ports[0] == reg,
            f"uniform {scale}*{self.base} with {legs} legs",
        )

    def discard_consuming(self, nid: int, port: int) -> int:
        d = self.state.diagram
        for s, t in d.wires:
            if s == ("n", nid, port) and t[0] == "n" and d.nodes[t[1]].kind == dg.DISCARD:
                return t[1]
        raise RewriteError(f"output {port} of node {nid} is not discarded")

    def discard_on_uniform(self, uid: int) -> int:
        d = self.state.diagram
        for s, t in d.wires:
            if s[0] == "n" and s[1] == uid and t[0] == "n" and d.nodes[t[1]].kind == dg.DISCARD:
                return t[1]
        raise RewriteError(f"no discard attached to uniform {uid}")

    def finish(self) -> ProofScript:
        return ProofScript(self.name, self.initial, self.steps, self.state.budget)


# -- shipped derivations -----------------------------------------------------


def _single_stage_initial(base: str) -> dg.Diagram:
    """A copied width-1 seed feeding one expansion stage."""
    w1, w4 = _w(1, base), _w(4, base)
    S = dg.hole("S@1", (w1, DEV, DEV), (w4, DEV, DEV), STOCH)
    return dg.Diagram(
        {0: dg.uniform_gen(w1, 2), 1: S},
        [
            (("n", 0, 0), ("out", 0)),
            (("n", 0, 1), ("n", 1, 0)),
            (("in", 0), ("n", 1, 1)),
            (("in", 1), ("n", 1, 2)),
            (("n", 1, 0), ("out", 1)),
            (("n", 1, 1), ("out", 2)),
            (("n", 1, 2), ("out", 3)),
        ],
        (DEV, DEV),
        (w1, w4, DEV, DEV),
    )


def _chain_initial(k: int, base: str) -> dg.Diagram:
    """A copied seed feeding k chained expansion stages S@1, S@4, ..."""
    nodes = {0: dg.uniform_gen(_w(1, base), 2)}
    wires = [(("n", 0, 0), ("out", 0))]
    prev = None
    for j in range(k):
        s = 4**j
        nid = j + 1
        nodes[nid] = dg.hole(
            f"S@{s}", (_w(s, base), DEV, DEV), (_w(4 * s, base), DEV, DEV), STOCH
        )
        if j == 0:
            wires += [
                (("n", 0, 1), ("n", nid, 0)),
                (("in", 0), ("n", nid, 1)),
                (("in", 1), ("n", nid, 2)),
            ]
        else:
            wires += [(("n", prev, p), ("n", nid, p)) for p in range(3)]
        prev = nid
    wires += [(("n", prev, 0), ("out", 1)), (("n", prev, 1), ("out", 2)), (("n", prev, 2), ("out", 3))]
    return dg.Diagram(nodes, wires, (DEV, DEV), (_w(1, base), _w(4**k, base), DEV, DEV))


def _apply_stage(bld: _Builder, level: int):
    """Unfold stage `level` and contract it into the running summary
    process T{level+1}: expand, spot-check both rounds, merge."""
    s = 4**level
    b = bld.base
    bld.rule("expand_S", (bld.hole_id(f"S@{s}"),), scale=s, base=b)
    bld.rule(
        "spot_check",
        (bld.uniform_id(s, 2), bld.hole_id(f"R@{s}")),
        scale=s,
        base=b,
    )
    bld.rule(
        "spot_check",
        (bld.uniform_id(2 * s, 2), bld.hole_id(f"R@{2 * s}")),
        scale=2 * s,
        base=b,
    )
    if level == 0:
        ids = [
            bld.hole_id("B@1"),
            bld.hole_id("A@1"),
            bld.uniform_id(2, 2),
            bld.hole_id("B@2"),
        ]
    else:
        ids = [
            bld.hole_id(f"T{level}"),
            bld.hole_id(f"A@{s // 2}"),
            bld.uniform_id(s, 2),
            bld.hole_id(f"B@{s}"),
            bld.hole_id(f"A@{s}"),
            bld.uniform_id(2 * s, 2),
            bld.hole_id(f"B@{2 * s}"),
        ]
    bld.surgical("merge", tuple(sorted(ids)), name=f"T{level + 1}")


def script_single_stage(base: str = "M") -> ProofScript:
    """One expansion stage under a copied seed collapses to fresh
    uniforms plus a summary process, at cost eps(M) + eps(2M)."""
    bld = _Builder("single_stage", _single_stage_initial(base), base)
    _apply_stage(bld, 0)
    return bld.finish()


def script_chain(k: int, base: str = "N") -> ProofScript:
    """k chained stages collapse level by level; total cost is the sum
    of eps(2^i N) for i < 2k."""
    bld = _Builder(f"chain_k{k}", _chain_initial(k, base), base)
    for j in range(k):
        _apply_stage(bld, j)
    return bld.finish()


def _soundness_initial(base: str) -> dg.Diagram:
    """Adversarial two-stage run: an adversary prepares both device
    states plus side information; the final seed is published and the
    device outputs are discarded."""
    w16 = _w(16, base)
    adv = dg.hole("adv", (), (DEV, DEV, SIDE), frozenset({"causal", "stochastic"}))
    nodes = {
        0: dg.uniform_gen(_w(1, base), 1),
        1: adv,
        2: dg.hole("S@1", (_w(1, base), DEV, DEV), (_w(4, base), DEV, DEV), STOCH),
        3: dg.hole("S@4", (_w(4, base), DEV, DEV), (w16, DEV, DEV), STOCH),
        4: dg.discard_gen(DEV),
        5: dg.discard_gen(DEV),
    }
    wires = [
        (("n", 0, 0), ("n", 2, 0)),
        (("n", 1, 0), ("n", 2, 1)),
        (("n", 1, 1), ("n", 2, 2)),
        (("n", 1, 2), ("out", 1)),
        (("n", 2, 0), ("n", 3, 0)),
        (("n", 2, 1), ("n", 3, 1)),
        (("n", 2, 2), ("n", 3, 2)),
        (("n", 3, 0), ("out", 0)),
        (("n", 3, 1), ("n", 4, 0)),
        (("n", 3, 2), ("n", 5, 0)),
    ]
    return dg.Diagram(nodes, wires, (), (w16, SIDE))


def ure_final_form(base: str = "N") -> dg.Diagram:
    """Target shape: a fresh width-16N uniform seed in tensor with a
    leftover subnormalized side-information state."""
    w16 = _w(16, base)
    return dg.Diagram(
        {0: dg.uniform_gen(w16, 1), 1: dg.hole("residual", (), (SIDE,), STOCH)},
        [(("n", 0, 0), ("out", 0)), (("n", 1, 0), ("out", 1))],
        (),
        (w16, SIDE),
    )


def script_soundness_k2(base: str = "N") -> ProofScript:
    """Two-stage soundness: the published seed is within
    eps(N)+eps(2N)+eps(4N)+eps(8N) of a fresh uniform seed in tensor
    with a residual adversary state."""
    bld = _Builder("soundness_k2", _soundness_initial(base), base)
    bld.surgical("widen_uniform", (bld.uniform_id(1, 1),))
    for j in range(2):
        _apply_stage(bld, j)
    a8 = bld.hole_id("A@8")
    bld.surgical("causality", (a8, bld.discard_consuming(a8, 0)))
    u16 = bld.uniform_id(16, 2)
    bld.surgical("absorb_discard", (u16, bld.discard_on_uniform(u16)))
    keep = bld.uniform_id(16, 1)
    rest = tuple(sorted(n for n in bld.state.diagram.nodes if n != keep))
    bld.surgical("merge", rest, name="residual")
    return bld.finish()


def script_spot_check_lemma(base: str = "N") -> ProofScript:
    """The spot-check axiom decomposed into its two half-steps: replace
    the published seed (cost delta), then duplicate it back into the
    round (cost sqrt(2*delta))."""
    initial, _, _ = _spot_lhs(1, base, "R@1")
    bld = _Builder("spot_check_lemma", initial, base)
    bld.rule(
        "starting_soundness",
        (bld.uniform_id(1, 2), bld.hole_id("R@1")),
        scale=1,
        base=base,
    )
    loc = tuple(sorted(bld.state.diagram.nodes))  # the whole diagram
    bld.rule("dup_corollary", loc, scale=1, base=base)
    return bld.finish()


def shipped_scripts() -> dict:
    out = {
        "single_stage": script_single_stage(),
        "soundness_k2": script_soundness_k2(),
        "spot_check_lemma": script_spot_check_lemma(),
    }
    for k in (1, 2, 3):
        s = script_chain(k)
        out[s.name] = s
    return out


# ---------------------------------------------------------------------------
# replay and validation


def _step_apply(state: RewriteState, step):
    name, loc = step["rule"], tuple(step["loc"])
    params = dict(step.get("params", {}))
    if name in SURGICAL:
        d, sub, rhs = apply_surgical(state.diagram, name, loc, params)
        return RewriteState(d, state.budget), sub, rhs, None
    if name not in RULE_FACTORIES:
        raise RewriteError(f"unknown rule {name!r}")
    rule = RULE_FACTORIES[name](params)
    new, _ = apply_rule(state, rule, loc)
    return new, rule.lhs, rule.rhs, rule


def replay_script(script: ProofScript):
    """Symbolic replay; returns (final state, per-step records)."""
    state = RewriteState(script.initial)
    records = []
    for step in script.steps:
        before = state.budget
        state, lhs, rhs, rule = _step_apply(state, step)
        records.append(
            {
                "step": step,
                "lhs": lhs,
                "rhs": rhs,
                "rule": rule,
                "cost": EpsExpr(state.budget.terms[len(before.terms):])
                if len(state.budget.terms) > len(before.terms)
                else EpsExpr.zero(),
            }
        )
    return state, records


def _gen_size(g: dg.Generator) -> int:
    n = 1
    for r in g.in_ports + g.out_ports:
        n *= r.total_dim
    return n


def _tractable(d: dg.Diagram, cap2: int) -> bool:
    if any(_gen_size(g) > cap2 for g in d.nodes.values()):
        return False
    n = 1
    for r in d.in_types + d.out_types:
        n *= r.total_dim
    return n <= cap2


def _holes_sorted(d: dg.Diagram):
    return [d.nodes[nid] for nid in sorted(d.nodes) if d.nodes[nid].kind == dg.HOLE]


def _ensure_bindings(d: dg.Diagram, binding: dict, rng, cap2: int) -> bool:
    """Draw flag-respecting processes for unbound holes; skip any too
    large to represent.  True iff every hole ends up bound."""
    ok = True
    for g in _holes_sorted(d):
        if g.label in binding:
            continue
        if _gen_size(g) <= cap2:
            binding[g.label] = sample_hole(g, rng)
        else:
            ok = False
    return ok


def run_script(
    script: ProofScript,
    eps_fns=None,
    N: int = 1,
    dims=None,
    seed: int = 0,
    dim_cap: int = 2**7,
    tol: float = 1e-9,
) -> dict:
    """Replay a proof script and report on it.

    Always performs the symbolic replay (checking that the accumulated
    budget matches the script's claim).  With `dims` (e.g. {"N": 1})
    each step is additionally validated numerically in isolation under
    a seeded random binding: exact steps must agree to `tol`; axiom
    steps have their measured deviation recorded but not asserted;
    steps whose instantiated carriers exceed `dim_cap`**2 entries are
    skipped.  With `eps_fns` (a callable or a {name: callable} dict)
    the budget is also evaluated at base value N."""
    state, records = replay_script(script)
    cap2 = dim_cap * dim_cap
    rng = np.random.default_rng(seed)
    binding: dict = {}
    verified = True
    steps_out = []
    for rec in records:
        step, rule = rec["step"], rec["rule"]
        entry = {
            "rule": step["rule"],
            "loc": list(step["loc"]),
            "cost": str(rec["cost"]),
            "status": "symbolic",
            "distance": None,
        }
        if dims is not None:
            lhs_c = rec["lhs"].subst(dims)
            rhs_c = rec["rhs"].subst(dims)
            tract = _tractable(lhs_c, cap2) and _tractable(rhs_c, cap2)
            if rule is not None and rule.binding_mode == "derive_lhs":
                have = _ensure_bindings(rhs_c, binding, rng, cap2)
                (label,) = [g.label for g in _holes_sorted(rec["lhs"])]
                if have and _tractable(rhs_c, cap2) and label not in binding:
                    binding[label] = rhs_c.evaluate(binding)
            elif step["rule"] == "merge":
                have = _ensure_bindings(lhs_c, binding, rng, cap2)
                name = step["params"]["name"]
                if have and _tractable(lhs_c, cap2) and name not in binding:
                    binding[name] = lhs_c.evaluate(binding)
            else:
                _ensure_bindings(lhs_c, binding, rng, cap2)
                _ensure_bindings(rhs_c, binding, rng, cap2)
            bound = all(
                g.label in binding for g in _holes_sorted(lhs_c) + _holes_sorted(rhs_c)
            )
            if not (tract and bound):
                entry["status"] = "skipped"
            else:
                m1 = lhs_c.evaluate(binding).matrix
                m2 = rhs_c.evaluate(binding).matrix
                dist = float(np.abs(m1 - m2).max())
                entry["distance"] = dist
                exact = rule is None or rule.validation_mode == "exact"
                if exact:
                    entry["status"] = "exact-ok" if dist <= tol else "exact-failed"
                    if dist > tol:
                        verified = False
                else:
                    entry["status"] = "axiom"
        steps_out.append(entry)
    claimed_matches = state.budget == script.claimed_total
    verified = verified and claimed_matches
    report = {
        "format_version": 1,
        "script": script.name,
        "verified": verified,
        "claimed_total_matches": claimed_matches,
        "budget": str(state.budget),
        "budget_atoms": eps_expr_to_json(state.budget),
        "budget_numeric": None,
        "steps": steps_out,
        "final": dg.diagram_to_json(state.diagram),
    }
    if eps_fns is not None:
        report["budget_numeric"] = budget_eval(state.budget, eps_fns, N)
    return report
