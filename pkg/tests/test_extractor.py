"""Tests for Toeplitz extraction and the expansion pipeline."""

import json

import numpy as np
import pytest

from cqcalc import extractor as ex
from cqcalc import protocol as pr
from cqcalc import rewrite as rw
from cqcalc.regcalc import CQState


class TestToeplitz:
    def test_all_zero_seed_gives_zero(self):
        out = ex.toeplitz_extract([1, 0, 1, 1], np.zeros(6, dtype=int), 3)
        assert np.array_equal(out, [0, 0, 0])

    def test_hand_fixture_m1(self):
        # T = [seed[0], seed[1]] = [1 0]; output = 1*1 + 0*1 = 1
        assert np.array_equal(ex.toeplitz_extract([1, 1], [1, 0], 1), [1])

    def test_hand_fixture_m2(self):
        # seed (s0,s1,s2,s3) -> T = [[s1, s2, s3], [s0, s1, s2]]
        seed = [1, 0, 1, 1]
        x = [1, 1, 0]
        # row0 = [0,1,1] -> 0*1+1*1+1*0 = 1; row1 = [1,0,1] -> 1
        assert np.array_equal(ex.toeplitz_extract(x, seed, 2), [1, 1])

    def test_gf2_linearity_in_source(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, m = 7, 3
            seed = rng.integers(0, 2, n + m - 1)
            x, y = rng.integers(0, 2, n), rng.integers(0, 2, n)
            lhs = ex.toeplitz_extract(x ^ y, seed, m)
            rhs = ex.toeplitz_extract(x, seed, m) ^ ex.toeplitz_extract(y, seed, m)
            assert np.array_equal(lhs, rhs)

    def test_gf2_linearity_in_seed(self):
        rng = np.random.default_rng(1)
        n, m = 5, 2
        x = rng.integers(0, 2, n)
        s, t = rng.integers(0, 2, n + m - 1), rng.integers(0, 2, n + m - 1)
        lhs = ex.toeplitz_extract(x, s ^ t, m)
        rhs = ex.toeplitz_extract(x, s, m) ^ ex.toeplitz_extract(x, t, m)
        assert np.array_equal(lhs, rhs)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ex.toeplitz_extract([1, 0], [1, 0], 2)


class TestDistance:
    def test_uniform_source_distance_is_rank_defect_only(self):
        # with m=1 the only non-surjective hash seed is all-zero, which
        # maps everything to 0 at distance 1/2
        n, m = 3, 1
        p = np.full(2**n, 2.0**-n)
        d = ex.extractor_distance_exact(p, m)
        assert d == pytest.approx(2.0 ** -(n + m - 1) * 0.5, abs=1e-15)

    def test_point_mass_below_bound(self):
        p = np.zeros(2**4)
        p[3] = 1.0
        d = ex.extractor_distance_exact(p, 1)
        assert d == pytest.approx(0.5, abs=1e-12)
        assert d <= ex.leftover_hash_bound(0, 1) + 1e-12

    @pytest.mark.parametrize("n,m,k", [(5, 2, 3), (6, 3, 4), (4, 1, 2), (6, 2, 2)])
    def test_flat_source_distance_below_hash_bound(self, n, m, k):
        p = np.zeros(2**n)
        p[: 2**k] = 2.0**-k
        d = ex.extractor_distance_exact(p, m)
        assert d <= ex.leftover_hash_bound(k, m) + 1e-12

    def test_size_cap(self):
        with pytest.raises(ValueError):
            ex.extractor_distance_exact(np.full(2**13, 2.0**-13), 1)


class TestSubnormalized:
    def params(self):
        return ex.ExtractorParams(n=2, m=1, e=10)

    def test_zero_state(self):
        y = CQState([np.zeros((2, 2), dtype=complex)] * 4)
        out, rep = ex.extract_subnormalized(y, self.params())
        assert rep["case"] == "small-trace"
        assert rep["bound"] == 2.0**-10
        assert all(np.allclose(b, 0) for b in out.branch_ops)

    def test_normalized_reduces_to_plain_contract(self):
        y = CQState([0.25 * np.eye(2, dtype=complex) / 2 for _ in range(4)])
        out, rep = ex.extract_subnormalized(y, self.params())
        assert rep["case"] == "normalized"
        assert rep["trace"] == pytest.approx(1.0, abs=1e-12)
        assert rep["bound"] == pytest.approx(
            ex.leftover_hash_bound(rep["h_min_normalized"], 1), abs=1e-12
        )

    def test_half_trace_branch_bounds(self):
        y = CQState(
            [0.2 * np.eye(2, dtype=complex) / 2] * 2
            + [0.05 * np.eye(2, dtype=complex) / 2] * 2
        )
        out, rep = ex.extract_subnormalized(y, self.params())
        assert rep["case"] == "normalized"
        assert rep["trace"] == pytest.approx(0.5, abs=1e-12)
        # both branch bounds computed; the applicable one is certified
        assert rep["bound_small"] == 2.0**-10
        assert rep["bound"] == rep["bound_normalized"]
        assert rep["bound"] == pytest.approx(
            0.5 * ex.leftover_hash_bound(rep["h_min_normalized"], 1), abs=1e-12
        )

    def test_output_preserves_trace(self):
        y = CQState(
            [0.2 * np.eye(2, dtype=complex) / 2] * 2
            + [0.05 * np.eye(2, dtype=complex) / 2] * 2
        )
        out, _ = ex.extract_subnormalized(y, self.params())
        total = sum(np.trace(b).real for b in out.branch_ops)
        assert total == pytest.approx(0.5, abs=1e-12)


class TestDoublingStage:
    def test_width_accounting(self):
        for m in (2, 3, 4, 6):
            st = ex.compose_R(m)
            assert st.out_bits == 2 * m

    def test_single_bit_rejected_by_default(self):
        with pytest.raises(ValueError):
            ex.compose_R(1)
        assert ex.compose_R(1, allow_single_bit=True).out_bits == 2

    def test_end_to_end_toy_run(self):
        st = ex.compose_R(4)
        rep = st.run(pr.optimal_chsh_strategy(), [0, 1, 1, 0], 0.2, 0.85, 7)
        assert len(rep["output_bits"]) == 8
        assert rep["seed_copy"] == [0, 1, 1, 0]

    def test_run_is_deterministic(self):
        st = ex.compose_R(4)
        s = pr.optimal_chsh_strategy()
        r1 = st.run(s, [1, 0, 0, 1], 0.2, 0.85, 3)
        r2 = st.run(s, [1, 0, 0, 1], 0.2, 0.85, 3)
        assert r1 == r2


class TestPipeline:
    honest = pr.optimal_chsh_strategy()

    @pytest.mark.parametrize("N,k", [(1, 1), (1, 2), (2, 2)])
    def test_output_width_on_success(self, N, k):
        plan = ex.ExpansionPlan(N, k)
        succeeded = False
        for seed in range(40):
            rep = ex.unbounded_pipeline(
                plan, [self.honest, self.honest], seed, q=0.9, chi=0.75
            )
            assert rep["output_width"] == N * 4**k
            if not rep["aborted"]:
                succeeded = True
                assert len(rep["output_bits"]) == N * 4**k
                break
        assert succeeded

    @pytest.mark.parametrize("N,k", [(1, 1), (1, 2), (2, 2)])
    def test_budget_atoms_match_chain_scripts(self, N, k):
        rep = ex.unbounded_pipeline(
            ex.ExpansionPlan(N, k), [self.honest, self.honest], seed=0
        )
        assert rep["budget"] == str(rw.script_chain(k).claimed_total)
        for i, level in enumerate(rep["levels"]):
            assert level["budget_atoms"] == [
                str(rw.eps(4**i, "N")),
                str(rw.eps(2 * 4**i, "N")),
            ]

    def test_levels_alternate_device_pairs(self):
        rep = ex.unbounded_pipeline(
            ex.ExpansionPlan(1, 3), [self.honest, self.honest], seed=0
        )
        assert [lv["device_pair"] for lv in rep["levels"]] == [0, 1, 0]

    def test_exact_distance_reported_at_smallest_size(self):
        rep = ex.unbounded_pipeline(
            ex.ExpansionPlan(1, 1), [self.honest, self.honest], seed=0, q=0.9, chi=0.75
        )
        assert 0.0 <= rep["uniform_distance_exact"] <= 1.0

    def test_cheating_devices_abort(self):
        zero = pr.deterministic_strategy(lambda x: 0, lambda y: 0)
        aborts = sum(
            ex.unbounded_pipeline(ex.ExpansionPlan(1, 1), [zero, zero], s)["aborted"]
            for s in range(30)
        )
        assert aborts >= 25

    def test_report_deterministic_json(self):
        r1 = ex.unbounded_pipeline(ex.ExpansionPlan(1, 2), [self.honest, self.honest], 9)
        r2 = ex.unbounded_pipeline(ex.ExpansionPlan(1, 2), [self.honest, self.honest], 9)
        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)
