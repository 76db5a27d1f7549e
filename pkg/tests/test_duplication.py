"""Tests for CQ-state duplication, universality, and stability."""

import numpy as np
import pytest

from cqcalc import duplication as dup
from cqcalc import regcalc as rc
from cqcalc.regcalc import CQState


def random_extension(rng, k, dq, dr, kd):
    """Random normalized state on [C(k), Q(dq), Q(dr), C(kd)]."""
    regs = (rc.C(k), rc.Q(dq), rc.Q(dr), rc.C(kd))
    v = np.zeros((k, dq * dq, dr * dr, kd), dtype=complex)
    blocks = []
    tr = 0.0
    for i in range(k):
        for dcl in range(kd):
            g = rng.normal(size=(dq * dr, dq * dr)) + 1j * rng.normal(
                size=(dq * dr, dq * dr)
            )
            w = g @ np.conj(g.T)
            blocks.append((i, dcl, w))
            tr += np.trace(w).real
    for i, dcl, w in blocks:
        w = w / tr
        v[i, :, :, dcl] = (
            w.reshape(dq, dr, dq, dr).transpose(0, 2, 1, 3).reshape(dq * dq, dr * dr)
        )
    return rc.state(regs, v.reshape(-1))


def as_extension(d: dup.DuplicateState):
    """Reinterpret a duplicate on [C,Q,Q,C] as an extension on [C,Q,R,D]."""
    return rc.ProcessTensor((), d.state.out_regs, d.state.matrix)


class TestCQState:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        psi = dup.random_cq_state(rng, 3, 2)
        back = CQState.from_tensor(psi.to_tensor())
        for a, b in zip(psi.branch_ops, back.branch_ops):
            assert np.allclose(a, b)

    def test_rejects_non_psd(self):
        with pytest.raises(ValueError):
            CQState([np.array([[1.0, 0.0], [0.0, -0.5]])])

    def test_rejects_supernormalized(self):
        with pytest.raises(ValueError):
            CQState([np.eye(2)])


class TestCanonicalDuplicate:
    def test_marginal_exact(self):
        rng = np.random.default_rng(1)
        for k, d in [(1, 2), (2, 2), (2, 3), (3, 2)]:
            psi = dup.random_cq_state(rng, k, d)
            assert dup.verify_marginal(dup.canonical_duplicate(psi)) <= 1e-9

    def test_marginal_rank_deficient(self):
        psi = CQState(
            [
                np.array([[0.6, 0.0], [0.0, 0.0]]),
                np.array([[0.2, 0.1], [0.1, 0.2]]),
            ]
        )
        assert dup.verify_marginal(dup.canonical_duplicate(psi)) <= 1e-9

    def test_pure_source_gives_doubled_pure(self):
        # a pure quantum-only source duplicates to (an embedding of) the
        # doubled pure state vec(|p><p|)
        p = np.array([0.6, 0.8], dtype=complex)
        psi = CQState([np.outer(p, np.conj(p))])
        d = dup.canonical_duplicate(psi)
        v = d.state.vector().reshape(4, 4)
        expect = np.einsum(
            "ac,bd->abcd",
            np.outer(p, np.conj(p)),
            np.conj(np.outer(p, np.conj(p))),
        ).reshape(4, 4)
        assert np.allclose(v, expect)

    def test_small_negative_eigenvalues_clamped(self):
        m = np.eye(2) * 0.5
        m[0, 0] -= 5e-11  # inside the clamp window
        psi = CQState([m / np.trace(m).real])
        dup.canonical_duplicate(psi)
        with pytest.raises(ValueError):
            dup._psd_sqrt(np.array([[1.0, 0.0], [0.0, -1e-6]]))

    def test_duplicate_is_valid_state(self):
        rng = np.random.default_rng(2)
        psi = dup.random_cq_state(rng, 2, 2)
        preds = rc.structural_predicates(dup.canonical_duplicate(psi).state)
        assert preds["causal"] and preds["completely_positive"]


class TestUniversality:
    @pytest.mark.parametrize("shape", [(1, 2, 2, 1), (2, 2, 3, 2), (2, 3, 2, 1)])
    def test_reconstructs_random_extensions(self, shape):
        rng = np.random.default_rng(sum(shape))
        k, dq, dr, kd = shape
        phi = random_extension(rng, k, dq, dr, kd)
        d = dup.canonical_duplicate(dup.cq_marginal(phi))
        alpha = dup.universality_alpha(phi, d)
        preds = rc.structural_predicates(alpha)
        assert preds["causal"] and preds["completely_positive"]
        assert rc.trace_distance_half(dup.apply_alpha(d, alpha), phi) <= 1e-6

    def test_reconstructs_rotated_duplicate(self):
        # uniqueness: a rotated duplicate is itself an extension, and a
        # causal map on the right half carries the canonical one onto it
        rng = np.random.default_rng(11)
        psi = dup.random_cq_state(rng, 2, 2)
        d = dup.canonical_duplicate(psi)
        th = 0.7
        u = np.array(
            [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]], dtype=complex
        )
        rot = dup.rotate_duplicate(d, [u, u @ u])
        assert rc.trace_distance_half(rot.state, d.state) > 1e-3
        phi = as_extension(rot)
        alpha = dup.universality_alpha(phi, d)
        assert rc.trace_distance_half(dup.apply_alpha(d, alpha), phi) <= 1e-6

    def test_rejects_mismatched_marginal(self):
        rng = np.random.default_rng(12)
        phi = random_extension(rng, 2, 2, 2, 1)
        other = dup.canonical_duplicate(dup.random_cq_state(rng, 2, 2))
        with pytest.raises(ValueError):
            dup.universality_alpha(phi, other)


class TestStability:
    @pytest.mark.parametrize("shape", [(1, 2), (2, 2), (2, 3)])
    def test_bound_over_trials(self, shape):
        k, d = shape
        rng = np.random.default_rng(100 * k + d)
        for _ in range(100):
            psi, phi = dup.perturbed_pair(rng, k, d, float(rng.uniform(0.0, 0.3)))
            report = dup.check_duplicate_stability(psi, phi)
            assert report["holds_raw_units"]
            # empirically the tighter half-unit bound holds as well
            assert report["holds_half_units"]

    def test_identical_sources(self):
        rng = np.random.default_rng(13)
        psi = dup.random_cq_state(rng, 2, 2)
        report = dup.check_duplicate_stability(psi, psi)
        assert report["dup_eps"] <= 1e-9

    def test_corollary_bound(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            psi, phi_src = dup.perturbed_pair(rng, 2, 2, 0.05)
            phi = as_extension(dup.canonical_duplicate(phi_src))
            alpha, measured = dup.corollary_alpha(phi, dup.canonical_duplicate(psi))
            eps = rc.trace_distance_half(psi.to_tensor(), phi_src.to_tensor())
            assert measured <= np.sqrt(2 * eps) + 1e-6
            assert rc.structural_predicates(alpha)["causal"]
