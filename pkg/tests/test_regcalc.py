"""Tests for the finite-dimensional wire semantics."""

import numpy as np
import pytest

from cqcalc import regcalc as rc


C2 = rc.C(2)
C3 = rc.C(3)
Q2 = rc.Q(2)
Q3 = rc.Q(3)


def random_tensor(rng, in_regs, out_regs):
    m = rng.normal(size=(rc.total_dim(out_regs), rc.total_dim(in_regs)))
    m = m + 1j * rng.normal(size=m.shape)
    return rc.ProcessTensor(tuple(in_regs), tuple(out_regs), m)


class TestComposition:
    def test_identity_compose(self):
        idc = rc.identity([C2])
        out = rc.compose_seq(idc, idc)
        assert np.allclose(out.matrix, np.eye(2))

    def test_state_then_discard_is_trace(self):
        s = rc.state([C2], [1.0, 0.0])
        assert rc.compose_seq(s, rc.discard(C2)).number() == pytest.approx(1.0)

    def test_seq_matches_matrix_product(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            f = random_tensor(rng, [C2], [C2])
            g = random_tensor(rng, [C2], [C2])
            assert np.allclose(rc.compose_seq(f, g).matrix, g.matrix @ f.matrix)

    def test_seq_type_mismatch(self):
        f = rc.identity([C2])
        g = rc.identity([C3])
        with pytest.raises(TypeError):
            rc.compose_seq(f, g)

    def test_par_is_kronecker(self):
        rng = np.random.default_rng(12)
        f = random_tensor(rng, [C2], [C3])
        g = random_tensor(rng, [Q2], [C2])
        fg = rc.compose_par(f, g)
        assert fg.in_regs == (C2, Q2)
        assert fg.out_regs == (C3, C2)
        assert np.allclose(fg.matrix, np.kron(f.matrix, g.matrix))

    def test_par_unit(self):
        rng = np.random.default_rng(13)
        f = random_tensor(rng, [C2], [Q2])
        assert np.allclose(rc.compose_par(rc.number(1.0), f).matrix, f.matrix)

    def test_par_of_states(self):
        s0 = rc.state([C2], [1, 0])
        s1 = rc.state([C2], [0, 1])
        assert np.allclose(rc.compose_par(s0, s1).vector(), [0, 1, 0, 0])

    def test_associativity(self):
        rng = np.random.default_rng(14)
        f = random_tensor(rng, [C2], [C3])
        g = random_tensor(rng, [C3], [Q2])
        h = random_tensor(rng, [Q2], [C2])
        a = rc.compose_seq(rc.compose_seq(f, g), h)
        b = rc.compose_seq(f, rc.compose_seq(g, h))
        assert np.allclose(a.matrix, b.matrix)


class TestGenerators:
    def test_spider_one_leg(self):
        assert np.allclose(rc.spider(C2, 1).vector(), [1, 1])

    def test_spider_two_legs(self):
        assert np.allclose(rc.spider(C2, 2).vector(), [1, 0, 0, 1])

    def test_spider_three_legs_dim3(self):
        v = rc.spider(C3, 3).vector()
        expect = np.zeros(27)
        for i in range(3):
            expect[i * 9 + i * 3 + i] = 1
        assert np.allclose(v, expect)

    def test_spider_rejects_zero_legs(self):
        with pytest.raises(ValueError):
            rc.spider(C2, 0)

    def test_uniform_values(self):
        assert np.allclose(rc.uniform(C2, 1).vector(), [0.5, 0.5])
        assert np.allclose(rc.uniform(C2, 2).vector(), [0.5, 0, 0, 0.5])
        assert np.allclose(rc.uniform(rc.C(4), 1).vector(), [0.25] * 4)

    def test_uniform_absorbs_discard(self):
        # One discarded leg drops the leg exactly.  This is a classical-wire
        # identity: on quantum wires the trace effect is not the all-ones
        # carrier effect that the carrier-basis spider family absorbs.
        for reg in (C2, C3, rc.C(4)):
            for k in (2, 3):
                u = rc.uniform(reg, k)
                dis = rc.compose_par(rc.identity([reg] * (k - 1)), rc.discard(reg))
                lhs = rc.compose_seq(u, dis)
                rhs = rc.uniform(reg, k - 1)
                assert np.allclose(lhs.matrix, rhs.matrix)

    def test_discard_values(self):
        assert rc.compose_seq(rc.state([Q2], [1, 0, 0, 0]), rc.discard(Q2)).number() == pytest.approx(1)
        half_i = rc.state([Q2], [0.5, 0, 0, 0.5])
        assert rc.compose_seq(half_i, rc.discard(Q2)).number() == pytest.approx(1)
        sub = rc.state([Q2], [0, 0, 0, 0.3])
        assert rc.compose_seq(sub, rc.discard(Q2)).number() == pytest.approx(0.3)

    def test_spider_map_matches_spider(self):
        # all-legs-out spider map equals the spider state
        sm = rc.spider_map(C3, 0, 2)
        assert np.allclose(sm.matrix.reshape(-1), rc.spider(C3, 2).vector())


class TestDagger:
    def test_involution(self):
        rng = np.random.default_rng(15)
        p = random_tensor(rng, [C2], [Q2])
        q = rc.dagger_conjugate_transpose(rc.dagger_conjugate_transpose(p))
        assert q.in_regs == p.in_regs and np.allclose(q.matrix, p.matrix)

    def test_conjugate_of_real(self):
        p = rc.identity([C3])
        assert np.allclose(rc.dagger_conjugate_transpose(p, "conjugate").matrix, p.matrix)

    def test_adjoint_of_state_is_effect(self):
        s = rc.state([C2], [1, 0])
        e = rc.dagger_conjugate_transpose(s)
        assert e.is_effect and np.allclose(e.matrix, [[1, 0]])


class TestPredicates:
    def test_identity_flags(self):
        flags = rc.structural_predicates(rc.identity([Q2]))
        assert flags["causal"] and flags["stochastic"] and flags["completely_positive"]

    def test_filter_stochastic_not_causal(self):
        filt = rc.ProcessTensor((C2,), (C2,), np.diag([1.0, 0.0]))
        flags = rc.structural_predicates(filt)
        assert not flags["causal"]
        assert flags["stochastic"]

    def test_scaled_identity_neither(self):
        p = rc.ProcessTensor((C2,), (C2,), 1.5 * np.eye(2))
        flags = rc.structural_predicates(p)
        assert not flags["causal"] and not flags["stochastic"]

    def test_causal_implies_stochastic_random(self):
        rng = np.random.default_rng(16)
        for regs in ([Q2], [C2, Q2], [C3]):
            for _ in range(10):
                ch = rc.random_cq_channel(regs, regs, rng, causal=True)
                flags = rc.structural_predicates(ch)
                assert flags["causal"]
                assert flags["stochastic"]
                assert flags["completely_positive"]

    def test_pure_state_flags(self):
        pure = rc.state([Q2], [1, 0, 0, 0])
        assert rc.structural_predicates(pure)["pure_state"]
        mixed = rc.state([Q2], [0.5, 0, 0, 0.5])
        assert not rc.structural_predicates(mixed)["pure_state"]

    def test_pure_process_preserves_rank_one(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            g = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
            u, _ = np.linalg.qr(g)
            ch = rc.channel_from_kraus([Q2], [Q2], [u])
            assert rc.structural_predicates(ch)["pure_process"]
            v = rng.normal(size=2) + 1j * rng.normal(size=2)
            v /= np.linalg.norm(v)
            inp = rc.state([Q2], np.kron(v, np.conj(v)))
            out = rc.compose_seq(inp, ch)
            assert rc.structural_predicates(out)["pure_state"]

    def test_mixing_channel_not_pure(self):
        Z = np.diag([1.0, -1.0])
        dep = rc.channel_from_kraus([Q2], [Q2], [np.eye(2) / np.sqrt(2), Z / np.sqrt(2)])
        assert not rc.structural_predicates(dep)["pure_process"]


class TestDistances:
    def test_zero_distance(self):
        rng = np.random.default_rng(18)
        s = random_tensor(rng, [], [Q2])
        assert rc.trace_distance_half(s, s) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pure_states(self):
        s0 = rc.state([Q2], [1, 0, 0, 0])
        s1 = rc.state([Q2], [0, 0, 0, 1])
        assert rc.trace_distance_half(s0, s1) == pytest.approx(1.0)

    def test_matches_eigensolver_oracle(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            a = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
            b = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
            rho1 = a @ np.conj(a.T)
            rho1 /= np.trace(rho1).real
            rho2 = b @ np.conj(b.T)
            rho2 /= np.trace(rho2).real
            s1 = rc.state([Q2], rho1.reshape(-1))
            s2 = rc.state([Q2], rho2.reshape(-1))
            oracle = 0.5 * np.abs(np.linalg.eigvalsh(rho1 - rho2)).sum()
            assert rc.trace_distance_half(s1, s2) == pytest.approx(oracle, abs=1e-12)

    def test_triangle_inequality_and_monotonicity(self):
        rng = np.random.default_rng(20)
        regs = [C2, Q2]
        for _ in range(10):
            states = []
            for _ in range(3):
                ch = rc.random_cq_channel([], regs, rng)
                states.append(ch if ch.is_state else rc.state(regs, ch.matrix[:, 0]))
            a, b, c = states
            dab = rc.trace_distance_half(a, b)
            dbc = rc.trace_distance_half(b, c)
            dac = rc.trace_distance_half(a, c)
            assert dac <= dab + dbc + 1e-10
            post = rc.random_cq_channel(regs, [C2], rng)
            da = rc.compose_seq(a, post)
            db = rc.compose_seq(b, post)
            assert rc.trace_distance_half(da, db) <= dab + 1e-10

    def test_process_distance_same(self):
        p = rc.identity([Q2])
        d = rc.process_distance(p, p, restarts=2, seed=0)
        assert d.lower == pytest.approx(0, abs=1e-9)
        assert d.upper == pytest.approx(0, abs=1e-9)

    def test_process_distance_states_collapse(self):
        rng = np.random.default_rng(21)
        a = rc.random_cq_channel([], [Q2], rng)
        b = rc.random_cq_channel([], [Q2], rng)
        t = rc.trace_distance_half(a, b)
        d = rc.process_distance(a, b)
        assert d.lower == pytest.approx(t, abs=1e-9)
        assert d.upper == pytest.approx(t, abs=1e-9)

    def test_identity_vs_z_conjugation(self):
        Z = np.diag([1.0, -1.0])
        zch = rc.channel_from_kraus([Q2], [Q2], [Z])
        d = rc.process_distance(rc.identity([Q2]), zch, restarts=8, seed=3)
        assert d.lower == pytest.approx(1.0, abs=1e-6)
        assert d.lower <= d.upper + 1e-12

    def test_lower_at_most_upper_random(self):
        rng = np.random.default_rng(22)
        for _ in range(5):
            p1 = rc.random_cq_channel([Q2], [Q2], rng)
            p2 = rc.random_cq_channel([Q2], [Q2], rng)
            d = rc.process_distance(p1, p2, restarts=4, seed=5)
            assert d.lower <= d.upper + 1e-12


class TestJson:
    def test_round_trip(self):
        rng = np.random.default_rng(23)
        p = random_tensor(rng, [C2, Q2], [C3])
        d = rc.tensor_to_json(p)
        q = rc.tensor_from_json(d)
        assert q.in_regs == p.in_regs and q.out_regs == p.out_regs
        assert np.allclose(q.matrix, p.matrix)
