"""Typed string-diagram IR, textual front end, typing, and evaluation.

A Diagram is an open acyclic port graph.  Nodes are generators (boxes,
spiders, uniforms, discards, scalars, holes); wires connect an output
port of one node (or a boundary input) to an input port of another node
(or a boundary output).  Identity and swap "generators" are pure wiring
and are dissolved on construction, so diagrams that differ only by
sliding wires around (planar isotopy, interchange) share one
representation; `canonical_form` additionally fixes a deterministic node
numbering so such diagrams compare equal structurally.

Diagrams are read bottom to top: `a >> b` runs a first.  `a @ b` places
a to the left of b.  Holes are named placeholders; a diagram with holes
denotes the set of processes obtained by binding each hole to a process
of its declared type, and `evaluate` picks the member selected by a
HoleBinding.

Registers may carry symbolic widths (SymWidth); such diagrams support
everything structural but must be substituted to concrete dimensions
before evaluation.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import FORMAT_VERSION
from . import regcalc as rc
from .regcalc import Register, SymWidth, ProcessTensor

BOX = "box"
SPIDER = "spider"
UNIFORM = "uniform"
DISCARD = "discard"
SCALAR = "scalar"
HOLE = "hole"
SWAP = "swap"
IDENTITY = "identity"

GENERATOR_KINDS = {BOX, SPIDER, UNIFORM, DISCARD, SCALAR, HOLE, SWAP, IDENTITY}


@dataclass(frozen=True)
class Generator:
    """A diagram node: a concrete or opaque process with typed ports."""

    kind: str
    label: str | None = None
    in_ports: tuple[Register, ...] = ()
    out_ports: tuple[Register, ...] = ()
    payload: object = None  # ProcessTensor for boxes, float for scalars
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        object.__setattr__(self, "in_ports", tuple(self.in_ports))
        object.__setattr__(self, "out_ports", tuple(self.out_ports))
        object.__setattr__(self, "flags", frozenset(self.flags))
        if self.kind in (SPIDER, UNIFORM):
            regs = set(self.in_ports) | set(self.out_ports)
            if len(regs) != 1:
                raise ValueError(f"{self.kind} ports must share one register type")
        if self.kind == SCALAR:
            x = float(self.payload)
            if not (0.0 <= x <= 1.0):
                raise ValueError("scalar payload must lie in [0, 1]")

    @property
    def symbolic(self) -> bool:
        return any(r.symbolic for r in self.in_ports + self.out_ports)

    def subst(self, values: Mapping[str, int]) -> "Generator":
        return replace(
            self,
            in_ports=tuple(r.subst(values) for r in self.in_ports),
            out_ports=tuple(r.subst(values) for r in self.out_ports),
        )

    def semantics(self, binding: Mapping[str, ProcessTensor] | None = None) -> ProcessTensor:
        """Concrete ProcessTensor of this generator (holes via binding)."""
        if self.kind == BOX:
            if isinstance(self.payload, ProcessTensor):
                return self.payload
            if binding and self.label in binding:
                return binding[self.label]
            raise KeyError(f"box {self.label!r} has no payload and no binding")
        if self.kind == HOLE:
            if not binding or self.label not in binding:
                raise KeyError(f"unbound hole {self.label!r}")
            return binding[self.label]
        if self.kind == SPIDER:
            reg = (self.in_ports + self.out_ports)[0]
            return rc.spider_map(reg, len(self.in_ports), len(self.out_ports))
        if self.kind == UNIFORM:
            reg = self.out_ports[0]
            return rc.uniform(reg, len(self.out_ports))
        if self.kind == DISCARD:
            return rc.discard(self.in_ports[0])
        if self.kind == SCALAR:
            return rc.number(float(self.payload))
        raise ValueError(f"generator kind {self.kind} has no direct semantics")


def box(label, in_ports, out_ports, payload=None, flags=()):
    return Generator(BOX, label, tuple(in_ports), tuple(out_ports), payload, frozenset(flags))


def hole(label, in_ports, out_ports, flags=()):
    return Generator(HOLE, label, tuple(in_ports), tuple(out_ports), None, frozenset(flags))


def spider_gen(reg, legs_in, legs_out):
    return Generator(SPIDER, None, (reg,) * legs_in, (reg,) * legs_out)


def uniform_gen(reg, legs):
    return Generator(UNIFORM, None, (), (reg,) * legs)


def discard_gen(reg):
    return Generator(DISCARD, None, (reg,), ())


def scalar_gen(x):
    return Generator(SCALAR, None, (), (), float(x))


# endpoint encodings: ("in", k) / ("out", k) boundary; ("n", nid, port) node
Src = tuple
Dst = tuple


@dataclass
class Diagram:
    """Open port graph.  Nodes keyed by integer ids; wires are
    (source endpoint, target endpoint) pairs.  Sources are boundary
    inputs ("in", k) or node output ports ("n", nid, i); targets are
    boundary outputs ("out", k) or node input ports ("n", nid, i)."""

    nodes: dict[int, Generator] = field(default_factory=dict)
    wires: list[tuple[Src, Dst]] = field(default_factory=list)
    in_types: tuple[Register, ...] = ()
    out_types: tuple[Register, ...] = ()

    # -- construction ------------------------------------------------------
    @staticmethod
    def id_wires(types: Sequence[Register]) -> "Diagram":
        types = tuple(types)
        return Diagram(
            {},
            [(("in", k), ("out", k)) for k in range(len(types))],
            types,
            types,
        )

    @staticmethod
    def from_generator(g: Generator) -> "Diagram":
        if g.kind == IDENTITY:
            return Diagram.id_wires(g.in_ports)
        if g.kind == SWAP:
            a, b = g.in_ports
            return Diagram(
                {},
                [(("in", 0), ("out", 1)), (("in", 1), ("out", 0))],
                (a, b),
                (b, a),
            )
        wires = [(("in", k), ("n", 0, k)) for k in range(len(g.in_ports))]
        wires += [(("n", 0, k), ("out", k)) for k in range(len(g.out_ports))]
        return Diagram({0: g}, wires, g.in_ports, g.out_ports)

    def _fresh(self) -> int:
        return max(self.nodes, default=-1) + 1

    def copy(self) -> "Diagram":
        return Diagram(dict(self.nodes), list(self.wires), self.in_types, self.out_types)

    def then(self, other: "Diagram") -> "Diagram":
        if self.out_types != other.in_types:
            raise TypeError(
                f"sequential composition type mismatch: {list(self.out_types)} vs {list(other.in_types)}"
            )
        off = self._fresh()
        nodes = dict(self.nodes)
        for nid, g in other.nodes.items():
            nodes[nid + off] = g

        def shift(ep):
            return ("n", ep[1] + off, ep[2]) if ep[0] == "n" else ep

        # producers of my outputs / consumers of other's inputs
        produced = {}
        for s, t in self.wires:
            if t[0] == "out":
                produced[t[1]] = s
        consumed = {}
        for s, t in other.wires:
            if s[0] == "in":
                consumed[s[1]] = shift(t)
        wires = [(s, t) for s, t in self.wires if t[0] != "out"]
        wires += [(produced[k], consumed[k]) for k in range(len(self.out_types))]
        wires += [(shift(s), shift(t)) for s, t in other.wires if s[0] != "in"]
        return Diagram(nodes, wires, self.in_types, other.out_types)

    def beside(self, other: "Diagram") -> "Diagram":
        off = self._fresh()
        n_in, n_out = len(self.in_types), len(self.out_types)
        nodes = dict(self.nodes)
        for nid, g in other.nodes.items():
            nodes[nid + off] = g

        def shift(ep, is_src):
            if ep[0] == "n":
                return ("n", ep[1] + off, ep[2])
            if ep[0] == "in":
                return ("in", ep[1] + n_in)
            return ("out", ep[1] + n_out)

        wires = list(self.wires)
        wires += [(shift(s, True), shift(t, False)) for s, t in other.wires]
        return Diagram(
            nodes, wires, self.in_types + other.in_types, self.out_types + other.out_types
        )

    def __rshift__(self, other):
        return self.then(other)

    def __matmul__(self, other):
        return self.beside(other)

    # -- structure accessors ----------------------------------------------
    @property
    def symbolic(self) -> bool:
        return any(g.symbolic for g in self.nodes.values()) or any(
            r.symbolic for r in self.in_types + self.out_types
        )

    def subst(self, values: Mapping[str, int]) -> "Diagram":
        return Diagram(
            {nid: g.subst(values) for nid, g in self.nodes.items()},
            list(self.wires),
            tuple(r.subst(values) for r in self.in_types),
            tuple(r.subst(values) for r in self.out_types),
        )

    def wire_type(self, wire: tuple[Src, Dst]) -> Register:
        s, t = wire
        if s[0] == "n":
            return self.nodes[s[1]].out_ports[s[2]]
        return self.in_types[s[1]]

    def successors(self, nid: int) -> set[int]:
        return {t[1] for s, t in self.wires if s[0] == "n" and s[1] == nid and t[0] == "n"}

    def topo_order(self) -> list[int]:
        preds = {nid: 0 for nid in self.nodes}
        seen_pairs = set()
        for s, t in self.wires:
            # parallel wires between one node pair count once, matching
            # the successor sets used to decrement below
            if s[0] == "n" and t[0] == "n" and (s[1], t[1]) not in seen_pairs:
                seen_pairs.add((s[1], t[1]))
                preds[t[1]] += 1
        ready = sorted(nid for nid, c in preds.items() if c == 0)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for m in sorted(self.successors(nid)):
                preds[m] -= 1
                if preds[m] == 0:
                    ready.append(m)
            ready.sort()
        if len(order) != len(self.nodes):
            raise ValueError("diagram contains a cycle")
        return order

    # -- typing ------------------------------------------------------------
    def typecheck(self) -> list[str]:
        """Return all violations (empty list when well-typed)."""
        errors = []
        seen_src, seen_dst = {}, {}
        for w in self.wires:
            s, t = w
            if s[0] not in ("in", "n") or t[0] not in ("out", "n"):
                errors.append(f"malformed wire {w}")
                continue
            seen_src[s] = seen_src.get(s, 0) + 1
            seen_dst[t] = seen_dst.get(t, 0) + 1
            try:
                ts = self.in_types[s[1]] if s[0] == "in" else self.nodes[s[1]].out_ports[s[2]]
                tt = self.out_types[t[1]] if t[0] == "out" else self.nodes[t[1]].in_ports[t[2]]
            except (KeyError, IndexError):
                errors.append(f"wire {w} references a missing node or port")
                continue
            if ts != tt:
                errors.append(f"wire {w} connects {ts!r} to {tt!r}")
        for ep, c in list(seen_src.items()) + list(seen_dst.items()):
            if c > 1:
                errors.append(f"port {ep} used {c} times")
        for k in range(len(self.in_types)):
            if ("in", k) not in seen_src:
                errors.append(f"boundary input {k} not connected")
        for k in range(len(self.out_types)):
            if ("out", k) not in seen_dst:
                errors.append(f"boundary output {k} not connected")
        for nid, g in self.nodes.items():
            for i in range(len(g.in_ports)):
                if ("n", nid, i) not in seen_dst:
                    errors.append(f"node {nid} input port {i} dangling")
            for i in range(len(g.out_ports)):
                if ("n", nid, i) not in seen_src:
                    errors.append(f"node {nid} output port {i} dangling")
        try:
            self.topo_order()
        except ValueError as e:
            errors.append(str(e))
        return errors

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, binding: Mapping[str, ProcessTensor] | None = None) -> ProcessTensor:
        """Contract the diagram to a ProcessTensor (topological sweep)."""
        errs = self.typecheck()
        if errs:
            raise ValueError("ill-typed diagram: " + "; ".join(errs))
        if self.symbolic:
            raise ValueError("symbolic diagram: substitute widths before evaluating")
        binding = binding or {}
        # check binding types up front for clearer errors
        for nid, g in self.nodes.items():
            if g.kind == HOLE:
                if g.label not in binding:
                    raise KeyError(f"unbound hole {g.label!r}")
                b = binding[g.label]
                if tuple(b.in_regs) != g.in_ports or tuple(b.out_regs) != g.out_ports:
                    raise TypeError(
                        f"binding for hole {g.label!r} has type "
                        f"{list(b.in_regs)}->{list(b.out_regs)}, expected "
                        f"{list(g.in_ports)}->{list(g.out_ports)}"
                    )

        wire_id = {id(w): i for i, w in enumerate(self.wires)}
        by_src, by_dst = {}, {}
        for i, (s, t) in enumerate(self.wires):
            by_src[s] = i
            by_dst[t] = i

        current = np.array(1.0, dtype=complex)
        axes: list = []  # wire indices of open axes

        for nid in self.topo_order():
            g = self.nodes[nid]
            sem = g.semantics(binding)
            out_w = [by_src[("n", nid, i)] for i in range(len(g.out_ports))]
            in_w = [by_dst[("n", nid, i)] for i in range(len(g.in_ports))]
            dims = [r.total_dim for r in g.out_ports] + [r.total_dim for r in g.in_ports]
            t = np.asarray(sem.matrix).reshape(dims) if dims else np.asarray(sem.matrix).reshape(())
            node_axes = out_w + in_w
            shared = [w for w in in_w if w in axes]
            c_pos = [axes.index(w) for w in shared]
            n_pos = [node_axes.index(w) for w in shared]
            current = np.tensordot(current, t, axes=(c_pos, n_pos)) if shared else np.multiply.outer(current, t)
            axes = [w for w in axes if w not in shared] + [w for w in node_axes if w not in shared]

        # pass-through wires (boundary input straight to boundary output)
        pass_through = [
            i for i, (s, t) in enumerate(self.wires) if s[0] == "in" and t[0] == "out"
        ]
        pt_axes = {}
        for i in pass_through:
            d = self.in_types[self.wires[i][0][1]].total_dim
            current = np.multiply.outer(current, np.eye(d, dtype=complex))
            pt_axes[i] = (len(axes), len(axes) + 1)  # (out-side, in-side)
            axes += [("pto", i), ("pti", i)]

        # assemble boundary axis order
        out_axis, in_axis = [], []
        for k in range(len(self.out_types)):
            i = by_dst[("out", k)]
            out_axis.append(pt_axes[i][0] if i in pt_axes else axes.index(i))
        for k in range(len(self.in_types)):
            i = by_src[("in", k)]
            in_axis.append(pt_axes[i][1] if i in pt_axes else axes.index(i))
        perm = out_axis + in_axis
        if sorted(perm) != list(range(len(axes))):
            raise AssertionError("internal contraction bookkeeping error")
        current = np.transpose(current, axes=perm) if perm else current
        d_out = rc.total_dim(self.out_types)
        d_in = rc.total_dim(self.in_types)
        return ProcessTensor(self.in_types, self.out_types, current.reshape(d_out, d_in))

    def dagger(self) -> "Diagram":
        """Mirror the diagram top-to-bottom (adjoint of the denotation).

        Concrete generators become boxes carrying the adjoint payload;
        holes stay holes (a binding for the mirror should supply the
        adjoint processes).
        """
        nodes = {}
        for nid, g in self.nodes.items():
            if g.kind == HOLE or (g.kind == BOX and not isinstance(g.payload, ProcessTensor)):
                nodes[nid] = Generator(g.kind, g.label, g.out_ports, g.in_ports, None, g.flags)
            else:
                sem = g.semantics({})
                nodes[nid] = box(
                    g.label, g.out_ports, g.in_ports, rc.dagger_conjugate_transpose(sem)
                )

        def flip(ep):
            if ep[0] == "in":
                return ("out", ep[1])
            if ep[0] == "out":
                return ("in", ep[1])
            return ep

        wires = [(flip(t), flip(s)) for s, t in self.wires]
        return Diagram(nodes, wires, self.out_types, self.in_types)


# ---------------------------------------------------------------------------
# canonical form


def _payload_digest(g: Generator) -> str:
    if g.kind == BOX and isinstance(g.payload, ProcessTensor):
        h = hashlib.sha256()
        h.update(np.round(np.asarray(g.payload.matrix), 10).tobytes())
        return h.hexdigest()[:16]
    if g.kind == SCALAR:
        return repr(round(float(g.payload), 12))
    return ""


def _reg_key(r: Register):
    if r.symbolic:
        return (r.kind, "sym", r.base_dim.scale, r.base_dim.symbol)
    return (r.kind, "dim", r.base_dim)


def _node_key(g: Generator, anonymize_holes: bool) -> tuple:
    label = "" if (anonymize_holes and g.kind == HOLE) else (g.label or "")
    return (
        g.kind,
        label,
        tuple(sorted(g.flags)),
        tuple(_reg_key(r) for r in g.in_ports),
        tuple(_reg_key(r) for r in g.out_ports),
        _payload_digest(g),
    )


def canonical_form(d: Diagram, anonymize_holes: bool = False) -> Diagram:
    """Deterministic relabeling: nodes renumbered 0..n-1 by a canonical
    order (color refinement anchored at the boundary, with backtracking
    on residual ties), wires sorted.  Diagrams equal up to planar
    isotopy/interchange share node structure already; this makes them
    compare equal with `==` on (nodes, wires, boundary)."""
    nids = sorted(d.nodes)
    base = {nid: _node_key(d.nodes[nid], anonymize_holes) for nid in nids}

    # adjacency with port and boundary info
    in_adj = {nid: [] for nid in nids}   # (port, neighbor kind, neighbor id or boundary pos, their port)
    out_adj = {nid: [] for nid in nids}
    for s, t in d.wires:
        if t[0] == "n":
            if s[0] == "in":
                in_adj[t[1]].append((t[2], "b", s[1], -1))
            else:
                in_adj[t[1]].append((t[2], "n", s[1], s[2]))
        if s[0] == "n":
            if t[0] == "out":
                out_adj[s[1]].append((s[2], "b", t[1], -1))
            else:
                out_adj[s[1]].append((s[2], "n", t[1], t[2]))

    def refine(colors):
        while True:
            sig = {}
            for nid in nids:
                ins = tuple(
                    sorted(
                        (p, k, pos if k == "b" else colors[other], op)
                        for (p, k, other, op) in in_adj[nid]
                        for pos in [other]
                    )
                )
                outs = tuple(
                    sorted(
                        (p, k, pos if k == "b" else colors[other], op)
                        for (p, k, other, op) in out_adj[nid]
                        for pos in [other]
                    )
                )
                sig[nid] = (colors[nid], ins, outs)
            ranked = {s: i for i, s in enumerate(sorted(set(sig.values())))}
            new = {nid: ranked[sig[nid]] for nid in nids}
            if new == colors:
                return colors
            colors = new

    ranked_keys = {k: i for i, k in enumerate(sorted(set(base.values())))}
    colors = refine({nid: ranked_keys[base[nid]] for nid in nids})

    def order_from(colors):
        # individualize remaining ties deterministically by smallest color,
        # then smallest (refined) signature; recurse
        classes = {}
        for nid in nids:
            classes.setdefault(colors[nid], []).append(nid)
        tie = next((c for c in sorted(classes) if len(classes[c]) > 1), None)
        if tie is None:
            return sorted(nids, key=lambda n: colors[n])
        best = None
        for cand in classes[tie]:
            c2 = dict(colors)
            c2[cand] = -1  # individualize
            ranked = refine({n: c for n, c in c2.items()})
            order = order_from(ranked)
            cert = _certificate(d, order, anonymize_holes)
            if best is None or cert < best[0]:
                best = (cert, order)
        return best[1]

    order = order_from(colors)
    renum = {nid: i for i, nid in enumerate(order)}

    nodes = {renum[nid]: d.nodes[nid] for nid in nids}

    def rename(ep):
        return ("n", renum[ep[1]], ep[2]) if ep[0] == "n" else ep

    wires = sorted((rename(s), rename(t)) for s, t in d.wires)
    return Diagram(nodes, wires, d.in_types, d.out_types)


def _certificate(d: Diagram, order, anonymize_holes) -> tuple:
    renum = {nid: i for i, nid in enumerate(order)}

    def rename(ep):
        return ("n", renum[ep[1]], ep[2]) if ep[0] == "n" else ep

    return (
        tuple(_node_key(d.nodes[nid], anonymize_holes) for nid in order),
        tuple(sorted((rename(s), rename(t)) for s, t in d.wires)),
    )


def diagrams_equal(a: Diagram, b: Diagram, anonymize_holes: bool = False) -> bool:
    if a.in_types != b.in_types or a.out_types != b.out_types:
        return False
    ca = canonical_form(a, anonymize_holes)
    cb = canonical_form(b, anonymize_holes)
    ka = {n: _node_key(g, anonymize_holes) for n, g in ca.nodes.items()}
    kb = {n: _node_key(g, anonymize_holes) for n, g in cb.nodes.items()}
    return ka == kb and sorted(ca.wires) == sorted(cb.wires)


# ---------------------------------------------------------------------------
# DSL front end


class DiagramParseError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{ln}:{col}: {msg}" for ln, col, msg in self.errors))


_TOKEN = re.compile(r"\s*(->|[;*():=]|[A-Za-z_][A-Za-z_0-9]*|[0-9]+(?:\.[0-9]+)?|\S)")


def _tokenize(line: str, lineno: int):
    out, pos = [], 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if not m:
            break
        tok = m.group(1)
        out.append((tok, lineno, m.start(1) + 1))
        pos = m.end()
    return out


_AUTO_REG = re.compile(r"^([CQ])([0-9]+)$")


class _Env:
    def __init__(self):
        self.regs: dict[str, Register] = {}
        self.decls: dict[str, Generator] = {}

    def reg(self, name, lineno, col):
        if name in self.regs:
            return self.regs[name]
        m = _AUTO_REG.match(name)
        if m:
            kind = rc.CLASSICAL if m.group(1) == "C" else rc.QUANTUM
            r = Register(kind, int(m.group(2)))
            self.regs[name] = r
            return r
        raise DiagramParseError([(lineno, col, f"unknown register {name!r}")])


def _parse_type(tokens, i, env):
    # 'I' or reg ('*' reg)*
    regs = []
    tok, ln, col = tokens[i]
    if tok == "I":
        return (), i + 1
    while True:
        tok, ln, col = tokens[i]
        regs.append(env.reg(tok, ln, col))
        i += 1
        if i < len(tokens) and tokens[i][0] == "*":
            i += 1
            continue
        return tuple(regs), i


def parse_diagram(text: str, extra_decls: Mapping[str, Generator] | None = None) -> Diagram:
    """Parse the line-oriented DSL into a Diagram.

    Declarations: `reg NAME = classical N` / `reg NAME = quantum N`,
    `box NAME : T1*T2 -> T3`, `hole NAME : T -> T` (append `causal` or
    `stochastic` after the type to set flags).  Every remaining
    non-comment line is part of one diagram expression over `;`
    (run first ; run second), `*` (side by side), `id R`, `swap R S`,
    `spider R k_in k_out`, `uniform R k`, `discard R`, `scalar X`.
    Names C<n> and Q<n> are implicitly declared registers.
    """
    env = _Env()
    if extra_decls:
        env.decls.update(extra_decls)
    expr_tokens = []
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = _tokenize(line, lineno)
        head = toks[0][0]
        try:
            if head == "reg":
                # reg NAME = classical N | quantum N
                if len(toks) < 5 or toks[2][0] != "=" or toks[3][0] not in ("classical", "quantum"):
                    raise DiagramParseError([(lineno, 1, "expected `reg NAME = classical N | quantum N`")])
                name = toks[1][0]
                kind = toks[3][0]
                dim_tok = toks[4][0]
                if dim_tok.isdigit():
                    dim: int | SymWidth = int(dim_tok)
                else:
                    dim = SymWidth(1, dim_tok)
                env.regs[name] = Register(kind, dim)
            elif head in ("box", "hole"):
                name = toks[1][0]
                if toks[2][0] != ":":
                    raise DiagramParseError([(lineno, toks[2][2], "expected `:`")])
                tin, i = _parse_type(toks, 3, env)
                if toks[i][0] != "->":
                    raise DiagramParseError([(lineno, toks[i][2], "expected `->`")])
                tout, i = _parse_type(toks, i + 1, env)
                flags = frozenset(t[0] for t in toks[i:] if t[0] in ("causal", "stochastic"))
                if head == "box":
                    env.decls[name] = box(name, tin, tout)
                else:
                    env.decls[name] = hole(name, tin, tout, flags)
            else:
                expr_tokens.extend(toks)
        except DiagramParseError as e:
            errors.extend(e.errors)
    if errors:
        raise DiagramParseError(errors)
    if not expr_tokens:
        raise DiagramParseError([(0, 0, "no diagram expression")])
    d, i = _parse_expr(expr_tokens, 0, env)
    if i != len(expr_tokens):
        tok, ln, col = expr_tokens[i]
        raise DiagramParseError([(ln, col, f"unexpected token {tok!r}")])
    return d


def _parse_expr(tokens, i, env):
    d, i = _parse_par(tokens, i, env)
    while i < len(tokens) and tokens[i][0] == ";":
        e, i = _parse_par(tokens, i + 1, env)
        try:
            d = d.then(e)
        except TypeError as err:
            tok, ln, col = tokens[i - 1] if i - 1 < len(tokens) else ("", 0, 0)
            raise DiagramParseError([(ln, col, str(err))])
    return d, i


def _parse_par(tokens, i, env):
    d, i = _parse_atom(tokens, i, env)
    while i < len(tokens) and tokens[i][0] == "*":
        e, i = _parse_atom(tokens, i + 1, env)
        d = d.beside(e)
    return d, i


def _expect_int(tokens, i):
    tok, ln, col = tokens[i]
    if not tok.isdigit():
        raise DiagramParseError([(ln, col, f"expected integer, got {tok!r}")])
    return int(tok), i + 1


def _parse_atom(tokens, i, env):
    if i >= len(tokens):
        raise DiagramParseError([(0, 0, "unexpected end of expression")])
    tok, ln, col = tokens[i]
    if tok == "(":
        d, i = _parse_expr(tokens, i + 1, env)
        if i >= len(tokens) or tokens[i][0] != ")":
            raise DiagramParseError([(ln, col, "unbalanced parenthesis")])
        return d, i + 1
    if tok == "id":
        r = env.reg(*tokens[i + 1])
        return Diagram.id_wires([r]), i + 2
    if tok == "swap":
        r1 = env.reg(*tokens[i + 1])
        r2 = env.reg(*tokens[i + 2])
        return Diagram.from_generator(Generator(SWAP, None, (r1, r2), (r2, r1))), i + 3
    if tok == "spider":
        r = env.reg(*tokens[i + 1])
        k_in, j = _expect_int(tokens, i + 2)
        k_out, j = _expect_int(tokens, j)
        if k_in + k_out < 1:
            raise DiagramParseError([(ln, col, "spider needs at least one leg")])
        return Diagram.from_generator(spider_gen(r, k_in, k_out)), j
    if tok == "uniform":
        r = env.reg(*tokens[i + 1])
        k, j = _expect_int(tokens, i + 2)
        if k < 1:
            raise DiagramParseError([(ln, col, "uniform needs at least one leg")])
        return Diagram.from_generator(uniform_gen(r, k)), j
    if tok == "discard":
        r = env.reg(*tokens[i + 1])
        return Diagram.from_generator(discard_gen(r)), i + 2
    if tok == "scalar":
        val, j = tokens[i + 1][0], i + 2
        try:
            x = float(val)
        except ValueError:
            raise DiagramParseError([(ln, col, f"bad scalar {val!r}")])
        return Diagram.from_generator(scalar_gen(x)), j
    if tok in env.decls:
        return Diagram.from_generator(env.decls[tok]), i + 1
    raise DiagramParseError([(ln, col, f"unknown name {tok!r}")])


# ---------------------------------------------------------------------------
# printing


def _reg_name(r: Register, regnames: dict) -> str:
    if r in regnames:
        return regnames[r]
    if not r.symbolic:
        name = ("C" if r.kind == rc.CLASSICAL else "Q") + str(r.base_dim)
        m = _AUTO_REG.match(name)
        if m:
            regnames[r] = name
            return name
    name = f"r{len(regnames)}"
    regnames[r] = name
    return name


def print_diagram(d: Diagram) -> str:
    """Emit DSL source whose parse is canonically equal to d.

    Layered emission: nodes are grouped by topological layer; explicit
    swaps route open wires so that each node's inputs are adjacent.
    """
    d = canonical_form(d)
    regnames: dict[Register, str] = {}
    lines = []
    decls = {}
    gensym = 0
    for nid, g in sorted(d.nodes.items()):
        if g.kind in (BOX, HOLE):
            label = g.label
            if label is None:
                label = f"f{gensym}"
                gensym += 1
                d.nodes[nid] = replace(g, label=label)
                g = d.nodes[nid]
            if label not in decls:
                decls[label] = g

    for r in set(d.in_types) | set(d.out_types) | {
        p for g in d.nodes.values() for p in g.in_ports + g.out_ports
    }:
        nm = _reg_name(r, regnames)
        if not _AUTO_REG.match(nm):
            dim = r.base_dim if not r.symbolic else r.base_dim.symbol
            if r.symbolic and r.base_dim.scale != 1:
                raise ValueError("cannot print scaled symbolic widths as DSL")
            lines.append(f"reg {nm} = {r.kind} {dim}")

    for label, g in sorted(decls.items()):
        tin = "*".join(_reg_name(r, regnames) for r in g.in_ports) or "I"
        tout = "*".join(_reg_name(r, regnames) for r in g.out_ports) or "I"
        flag = ""
        for f in ("causal", "stochastic"):
            if f in g.flags:
                flag += f" {f}"
        lines.append(f"{'box' if g.kind == BOX else 'hole'} {label} : {tin} -> {tout}{flag}")

    by_src = {s: i for i, (s, t) in enumerate(d.wires)}
    by_dst = {t: i for i, (s, t) in enumerate(d.wires)}

    # layering by longest path
    layer = {}
    for nid in d.topo_order():
        g = d.nodes[nid]
        lmax = 0
        for i in range(len(g.in_ports)):
            w = d.wires[by_dst[("n", nid, i)]]
            if w[0][0] == "n":
                lmax = max(lmax, layer[w[0][1]])
        layer[nid] = lmax + 1
    layers: dict[int, list[int]] = {}
    for nid, l in layer.items():
        layers.setdefault(l, []).append(nid)

    def wname(i):
        return i  # wire index

    open_wires = [by_src[("in", k)] for k in range(len(d.in_types))]
    terms = []

    def wire_reg(i):
        return d.wire_type(d.wires[i])

    def emit_permutation(target):
        nonlocal open_wires
        # bubble target order into place with adjacent swaps
        cur = list(open_wires)
        while cur != target:
            for j in range(len(cur) - 1):
                if target.index(cur[j]) > target.index(cur[j + 1]):
                    parts = []
                    for k2, w in enumerate(cur):
                        if k2 == j:
                            r1, r2 = wire_reg(cur[j]), wire_reg(cur[j + 1])
                            parts.append(
                                f"swap {_reg_name(r1, regnames)} {_reg_name(r2, regnames)}"
                            )
                        elif k2 == j + 1:
                            continue
                        else:
                            parts.append(f"id {_reg_name(wire_reg(w), regnames)}")
                    terms.append(" * ".join(parts))
                    cur[j], cur[j + 1] = cur[j + 1], cur[j]
                    break
        open_wires = cur

    for l in sorted(layers):
        nids = sorted(layers[l])
        needed = []
        for nid in nids:
            g = d.nodes[nid]
            needed.extend(by_dst[("n", nid, i)] for i in range(len(g.in_ports)))
        rest = [w for w in open_wires if w not in needed]
        emit_permutation(needed + rest)
        parts = []
        new_open = []
        for nid in nids:
            g = d.nodes[nid]
            parts.append(_atom_text(g, regnames))
            new_open.extend(by_src[("n", nid, i)] for i in range(len(g.out_ports)))
        for w in rest:
            parts.append(f"id {_reg_name(wire_reg(w), regnames)}")
        new_open.extend(rest)
        if parts:
            terms.append(" * ".join(parts))
        open_wires = new_open

    target = [by_dst[("out", k)] for k in range(len(d.out_types))]
    emit_permutation(target)
    if not terms:
        if d.in_types:
            terms.append(" * ".join(f"id {_reg_name(r, regnames)}" for r in d.in_types))
        else:
            terms.append("scalar 1")

    # register declarations may have been added lazily by _reg_name
    expr = " ;\n".join(terms)
    return "\n".join(lines + [expr]) + "\n"


def _atom_text(g: Generator, regnames) -> str:
    if g.kind in (BOX, HOLE):
        return g.label
    if g.kind == SPIDER:
        r = (g.in_ports + g.out_ports)[0]
        return f"spider {_reg_name(r, regnames)} {len(g.in_ports)} {len(g.out_ports)}"
    if g.kind == UNIFORM:
        return f"uniform {_reg_name(g.out_ports[0], regnames)} {len(g.out_ports)}"
    if g.kind == DISCARD:
        return f"discard {_reg_name(g.in_ports[0], regnames)}"
    if g.kind == SCALAR:
        x = float(g.payload)
        s = f"{x:g}"
        if "e" in s or "E" in s:
            s = f"{x:.12f}"
        return f"scalar {s}"
    raise ValueError(f"cannot print generator kind {g.kind}")


# ---------------------------------------------------------------------------
# JSON port-graph export


def _reg_json(r: Register):
    if r.symbolic:
        return {"kind": r.kind, "sym": {"scale": r.base_dim.scale, "symbol": r.base_dim.symbol}}
    return {"kind": r.kind, "base_dim": r.base_dim}


def _reg_from_json(j):
    if "sym" in j:
        return Register(j["kind"], SymWidth(j["sym"]["scale"], j["sym"]["symbol"]))
    return Register(j["kind"], j["base_dim"])


def diagram_to_json(d: Diagram) -> dict:
    nodes = []
    for nid, g in sorted(d.nodes.items()):
        nd = {
            "id": nid,
            "kind": g.kind,
            "label": g.label,
            "in_ports": [_reg_json(r) for r in g.in_ports],
            "out_ports": [_reg_json(r) for r in g.out_ports],
            "flags": sorted(g.flags),
        }
        if g.kind == SCALAR:
            nd["payload"] = float(g.payload)
        elif g.kind == BOX and isinstance(g.payload, ProcessTensor):
            nd["payload"] = rc.tensor_to_json(g.payload)
        nodes.append(nd)
    return {
        "format_version": FORMAT_VERSION,
        "nodes": nodes,
        "wires": [[list(s), list(t)] for s, t in d.wires],
        "in_types": [_reg_json(r) for r in d.in_types],
        "out_types": [_reg_json(r) for r in d.out_types],
    }


def diagram_from_json(j: dict) -> Diagram:
    nodes = {}
    for nd in j["nodes"]:
        payload = nd.get("payload")
        if isinstance(payload, dict):
            payload = rc.tensor_from_json(payload)
        nodes[int(nd["id"])] = Generator(
            nd["kind"],
            nd.get("label"),
            tuple(_reg_from_json(r) for r in nd["in_ports"]),
            tuple(_reg_from_json(r) for r in nd["out_ports"]),
            payload,
            frozenset(nd.get("flags", [])),
        )
    wires = [(tuple(s), tuple(t)) for s, t in j["wires"]]
    return Diagram(
        nodes,
        wires,
        tuple(_reg_from_json(r) for r in j["in_types"]),
        tuple(_reg_from_json(r) for r in j["out_types"]),
    )
