"""Tests for games, spot-checking, min-entropy, and the protocol grammar."""

import json
import math

import numpy as np
import pytest

from cqcalc import diagram as dg
from cqcalc import protocol as pr
from cqcalc import regcalc as rc
from cqcalc import rewrite as rw
from cqcalc.regcalc import CQState


class TestChsh:
    def test_classical_value_exact(self):
        assert pr.classical_game_value(pr.chsh_game()) == 0.75

    def test_optimal_quantum_value(self):
        v = pr.game_value(pr.chsh_game(), pr.optimal_chsh_strategy())
        assert v == pytest.approx(0.5 + math.sqrt(2) / 4, abs=1e-9)

    def test_all_zero_strategy_scores_classically(self):
        z = pr.deterministic_strategy(lambda x: 0, lambda y: 0)
        assert pr.game_value(pr.chsh_game(), z) == pytest.approx(0.75, abs=1e-12)

    def test_deterministic_strategies_never_beat_classical(self):
        g = pr.chsh_game()
        from itertools import product

        for fa in product(range(2), repeat=2):
            for fb in product(range(2), repeat=2):
                s = pr.deterministic_strategy(lambda x: fa[x], lambda y: fb[y])
                assert pr.game_value(g, s) <= 0.75 + 1e-12

    def test_scoring_diagram_matches_direct_value(self):
        d, binding = pr.chsh_scoring_diagram()
        assert d.typecheck() == []
        v = d.evaluate(binding).number().real
        assert v == pytest.approx(0.5 + math.sqrt(2) / 4, abs=1e-9)

    def test_input_distribution_must_normalize(self):
        with pytest.raises(ValueError):
            pr.Game((pr.BIT, pr.BIT), (pr.BIT, pr.BIT), np.full(4, 0.3), lambda *a: True)

    def test_strategy_json_round_trip(self):
        s = pr.optimal_chsh_strategy()
        s2 = pr.strategy_from_json(pr.strategy_to_json(s))
        v = pr.game_value(pr.chsh_game(), s2)
        assert v == pytest.approx(0.5 + math.sqrt(2) / 4, abs=1e-9)


class TestBiasedInputs:
    def test_b_q_entries(self):
        p = pr.b_q_distribution(0.2)
        assert p[0] == pytest.approx(0.8)
        assert np.allclose(p[4:], 0.05)
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    def test_b_q_range_check(self):
        with pytest.raises(ValueError):
            pr.b_q_distribution(1.5)

    def test_rational_approx_entries_are_dyadic(self):
        for M in (1, 2, 3, 4, 7):
            rep = pr.rational_approx(0.2, M)
            for level in rep["levels"].values():
                assert (level["approx"] * 2 ** rep["ell"]).denominator == 1

    def test_m1_truncates_test_rounds(self):
        rep = pr.rational_approx(0.2, 1)
        # only the all-generation sequence survives; the dropped test
        # rounds carry exactly mass q
        assert rep["k_max"] == 0
        assert rep["support"] == 1
        assert rep["truncation_mass"] == pytest.approx(0.2, abs=1e-15)

    @pytest.mark.parametrize("M", [1, 2, 3, 4])
    def test_enumerated_distance_below_bound(self, M):
        rep = pr.rational_approx(0.2, M)
        assert rep["distance_enumerated"] is not None
        assert rep["distance_enumerated"] == pytest.approx(rep["distance"], abs=1e-15)
        assert rep["distance_enumerated"] <= rep["bound"] + 1e-15

    def test_parameter_range(self):
        with pytest.raises(ValueError):
            pr.rational_approx(0.3, 4)
        with pytest.raises(ValueError):
            pr.rational_approx(0.1, 0)


class TestSpotcheck:
    def test_reproducible_bit_exact(self):
        s = pr.optimal_chsh_strategy()
        r1 = pr.spotcheck_run(60, 0.2, 0.85, s, seed=11)
        r2 = pr.spotcheck_run(60, 0.2, 0.85, s, seed=11)
        assert json.dumps(r1.to_json()) == json.dumps(r2.to_json())

    def test_report_shape(self):
        s = pr.optimal_chsh_strategy()
        r = pr.spotcheck_run(40, 0.2, 0.85, s, seed=3)
        assert len(r.classical_transcript) == 40
        assert len(r.output_bits) == 80
        assert r.pass_count <= r.test_round_count

    def test_q_one_makes_every_round_a_test(self):
        s = pr.optimal_chsh_strategy()
        r = pr.spotcheck_run(25, 0.999999, 0.85, s, seed=0)
        assert r.test_round_count == 25

    def test_pass_count_cannot_exceed_tests(self):
        with pytest.raises(ValueError):
            pr.RunReport(False, [], 3, 5, [], 0)

    def test_all_zero_devices_mostly_abort(self):
        z = pr.deterministic_strategy(lambda x: 0, lambda y: 0)
        aborts = sum(
            pr.spotcheck_run(200, 0.2, 0.85, z, seed=s).aborted for s in range(20)
        )
        assert aborts >= 18


class TestMinEntropy:
    def test_diagonal_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 5))
            d = int(rng.integers(2, 5))
            diags = rng.random((n, d))
            diags /= diags.sum()
            psi = CQState([np.diag(row).astype(complex) for row in diags])
            oracle = -math.log2(diags.max(axis=0).sum())
            h, cert = pr.min_entropy_cq(psi, tol=1e-10)
            assert h == pytest.approx(oracle, abs=1e-9)

    def test_helstrom_binary_closed_form(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            d = 3
            raw = []
            for _ in range(2):
                a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
                raw.append(a @ a.conj().T)
            tr = sum(np.trace(m).real for m in raw)
            m0, m1 = raw[0] / tr, raw[1] / tr
            h, cert = pr.min_entropy_cq(CQState([m0, m1]))
            p = 0.5 * (
                np.trace(m0 + m1).real + np.abs(np.linalg.eigvalsh(m0 - m1)).sum()
            )
            assert h == pytest.approx(-math.log2(p), abs=1e-9)
            assert cert["gap"] == 0.0

    def test_iterative_gap_and_certificate(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            d = 4
            raw = []
            for _ in range(4):
                a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
                raw.append(a @ a.conj().T)
            tr = sum(np.trace(m).real for m in raw)
            psi = CQState([m / tr for m in raw])
            h, cert = pr.min_entropy_cq(psi, tol=1e-6)
            assert cert["converged"]
            assert cert["gap"] <= 1e-6
            for m in psi.branch_ops:
                assert np.linalg.eigvalsh(cert["sigma"] - m).min() >= -1e-8
            assert -math.log2(cert["p_upper"]) <= -math.log2(cert["p_lower"]) + 1e-6

    def test_pure_single_branch(self):
        psi = CQState([np.diag([0.5, 0.5]).astype(complex)])
        h, _ = pr.min_entropy_cq(psi)
        assert h == pytest.approx(0.0, abs=1e-12)


class TestProtocolGrammar:
    def test_empty_protocol_is_identity(self):
        p = pr.build_di_protocol([])
        ident = rc.identity((rc.C(2), rc.Q(2), rc.Q(2)))
        assert np.allclose(p.as_tensor().matrix, ident.matrix)

    def full_steps(self):
        return [
            ("give_input", lambda c: c, 1),
            ("device_comm", 1, 2),
            ("receive_output", lambda c, m: c ^ m, 2),
            ("classical_fn", lambda c: 1 - c),
            ("failure_filter", {0}),
        ]

    def test_all_step_kinds_typecheck(self):
        p = pr.build_di_protocol(self.full_steps())
        assert p.diagram.typecheck() == []
        assert len(p.hole_specs) == 4

    def test_bound_protocol_is_a_channel_up_to_filtering(self):
        rng = np.random.default_rng(5)
        p = pr.build_di_protocol(self.full_steps())
        binding = {
            lbl: rc.random_cq_channel(g.in_ports, g.out_ports, rng, causal=True)
            for lbl, g in p.hole_specs.items()
        }
        preds = rc.structural_predicates(p.as_tensor(binding))
        assert preds["stochastic"] and preds["completely_positive"]
        assert not preds["causal"]  # the filter drops mass

    def test_failure_filter_is_stochastic_not_causal(self):
        t = pr.failure_filter_tensor(3, {0, 2})
        preds = rc.structural_predicates(t)
        assert preds["stochastic"] and not preds["causal"]

    def test_filterless_protocol_is_causal(self):
        rng = np.random.default_rng(9)
        p = pr.build_di_protocol(self.full_steps()[:4])
        binding = {
            lbl: rc.random_cq_channel(g.in_ports, g.out_ports, rng, causal=True)
            for lbl, g in p.hole_specs.items()
        }
        assert rc.structural_predicates(p.as_tensor(binding))["causal"]

    def test_composition_reuses_device_wires(self):
        rng = np.random.default_rng(4)
        p1 = pr.build_di_protocol([("give_input", lambda c: c, 1)], tag="x")
        p2 = pr.build_di_protocol([("receive_output", lambda c, m: m, 1)], tag="y")
        pc = p1.then(p2)
        binding = {
            lbl: rc.random_cq_channel(g.in_ports, g.out_ports, rng, causal=True)
            for lbl, g in pc.hole_specs.items()
        }
        seq = rc.compose_seq(
            p1.as_tensor({k: binding[k] for k in p1.hole_specs}),
            p2.as_tensor({k: binding[k] for k in p2.hole_specs}),
        )
        assert np.allclose(pc.as_tensor(binding).matrix, seq.matrix, atol=1e-12)

    def test_bad_step_kind_rejected(self):
        with pytest.raises(ValueError):
            pr.build_di_protocol([("teleport", 1, 2)])


class TestHonestDevices:
    def test_honest_round_is_a_channel(self):
        t = pr.honest_expansion_round()
        preds = rc.structural_predicates(t)
        assert preds["causal"] and preds["completely_positive"]

    def test_spot_check_axiom_distance_recorded(self):
        # instantiating the axiom's round hole with the honest device
        # gives a finite measured deviation; it is recorded, not asserted
        rule = rw.rule_spot_check(1, "N")
        rng = np.random.default_rng(0)
        honest = pr.honest_expansion_round()
        sub = rule.lhs.subst({"N": 1})
        binding = {}
        for g in sub.nodes.values():
            if g.kind == dg.HOLE:
                binding[g.label] = honest if g.label == "R@1" else rw.sample_hole(g, rng)
        lhs_val = sub.evaluate(binding)
        rhs = rule.rhs.subst({"N": 1})
        for g in rhs.nodes.values():
            if g.kind == dg.HOLE and g.label not in binding:
                binding[g.label] = rw.sample_hole(g, rng)
        rhs_val = rhs.evaluate(binding)
        dist = np.abs(lhs_val.matrix - rhs_val.matrix).max()
        assert np.isfinite(dist)
