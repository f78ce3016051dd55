"""Solver updates, normalization, precoder assembly and the ZF baseline."""

import numpy as np
import pytest

from conftest import make_instance
from slp import ci, precoders as pc
from slp.channel import ChannelConfig, block_from_h, gen_block
from slp.constellation import make_spec

# Hand-checked 4x4 coupling: one negative entry of V @ 1 at index 0.
V4 = np.array(
    [
        [1.0, -0.6, -0.6, 0.0],
        [-0.6, 1.0, 0.0, 0.0],
        [-0.6, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)
ALL4 = np.arange(4)
NONE4 = np.array([], dtype=int)


class TestCfSolve:
    def test_hand_example_single_update(self):
        st = pc.cf_solve(V4, ALL4, 5)
        np.testing.assert_allclose(st.factors, [1.2, 1.0, 1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(st.qvec, [0.0, 0.28, 0.28, 1.0], atol=1e-12)
        assert st.iterations_used == 1

    def test_nonnegative_start_does_nothing(self):
        st = pc.cf_solve(0.5 * np.eye(2), np.arange(2), 5)
        np.testing.assert_array_equal(st.factors, [1.0, 1.0])
        assert st.iterations_used == 0

    def test_empty_exploit_set_returns_ones(self):
        st = pc.cf_solve(V4, NONE4, 5)
        np.testing.assert_array_equal(st.factors, np.ones(4))
        assert st.iterations_used == 0

    def test_iteration_cap_respected(self):
        st = pc.cf_solve(V4, ALL4, 0)
        np.testing.assert_array_equal(st.factors, np.ones(4))
        assert st.iterations_used == 0

    def test_nonpositive_diagonal_at_selected_index_rejected(self):
        v = np.array([[-1.0, 0.0], [0.0, 1.0]])  # q = [-1, 1] selects index 0
        with pytest.raises(pc.DegenerateSlotError):
            pc.cf_solve(v, np.arange(2), 5)

    def test_trace_matches_fast_path(self, rng):
        # Iteration counts may differ between the two paths when a freshly
        # recomputed q entry lands within one ulp of zero (the strict < 0
        # stopping rule then admits no-op updates), so the comparison is on
        # the solved factors, which agree to rounding error.
        for mod, k in [("qpsk", 4), ("16qam", 4)]:
            for _ in range(10):
                _, _, slot, vmat = make_instance(mod, k, rng)
                st = pc.cf_solve(vmat, slot.exploit_idx, 12)
                steps = pc.cf_solve_trace(vmat, slot.exploit_idx, 12)
                final = steps[-1]["factors"] if steps else np.ones(2 * k)
                np.testing.assert_allclose(final, st.factors, atol=1e-9)

    @pytest.mark.parametrize("mod,k", [("qpsk", 4), ("8psk", 3), ("16qam", 4)])
    def test_update_invariants(self, mod, k, rng):
        # every executed update zeroes its coordinate, keeps factors >= 1
        # and never lowers the normalized margin
        for _ in range(25):
            _, _, slot, vmat = make_instance(mod, k, rng)
            steps = pc.cf_solve_trace(vmat, slot.exploit_idx, 15)
            prev_margin = None
            for step in steps:
                f = step["factors"]
                assert abs((vmat @ f)[step["index"]]) < 1e-10
                assert f.min() >= 1.0
                margin = f.min() / np.sqrt(f @ vmat @ f)
                if prev_margin is not None:
                    assert margin >= prev_margin - 1e-12
                prev_margin = margin


class TestSubSolve:
    def test_hand_example_all_clipped(self):
        st = pc.sub_solve(V4, NONE4)
        np.testing.assert_array_equal(st.factors, np.ones(4))

    def test_strong_negative_survives_clip(self):
        v = np.array([[1.0, -3.0, 0, 0], [-3.0, 10.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]])
        st = pc.sub_solve(v, NONE4)
        assert st.factors[0] == pytest.approx(1.5, abs=1e-12)

    def test_fixed_indices_forced_to_one(self):
        v = np.array([[1.0, -3.0, 0, 0], [-3.0, 10.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]])
        st = pc.sub_solve(v, np.arange(4))
        np.testing.assert_array_equal(st.factors, np.ones(4))

    @pytest.mark.parametrize("mod,k", [("qpsk", 4), ("16qam", 4)])
    def test_bounds(self, mod, k, rng):
        for _ in range(20):
            _, _, slot, vmat = make_instance(mod, k, rng)
            st = pc.sub_solve(vmat, slot.fixed_idx)
            assert st.factors.min() >= 1.0
            np.testing.assert_array_equal(st.factors[slot.fixed_idx], 1.0)

    def test_nonpositive_diagonal_rejected(self):
        with pytest.raises(pc.DegenerateSlotError):
            pc.sub_solve(np.diag([1.0, 0.0]), NONE4)


class TestNormalize:
    def test_identity_coupling(self):
        f_nor, fn = pc.normalize(0.5 * np.eye(2), np.ones(2), 1.0)
        assert f_nor == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(fn, [1.0, 1.0], atol=1e-15)

    def test_hand_example(self):
        f_nor, fn = pc.normalize(V4, np.array([1.2, 1.0, 1.0, 1.0]), 1.0)
        assert f_nor == pytest.approx(np.sqrt(1.56), abs=1e-12)
        np.testing.assert_allclose(fn, [0.96077, 0.80064, 0.80064, 0.80064], atol=1e-5)

    @pytest.mark.parametrize("p0", [0.25, 1.0, 7.5])
    def test_power_postcondition(self, p0, rng):
        for _ in range(15):
            _, _, slot, vmat = make_instance("qpsk", 3, rng)
            f = rng.uniform(1.0, 2.0, 6)
            _, fn = pc.normalize(vmat, f, p0)
            assert fn @ vmat @ fn == pytest.approx(p0, abs=1e-9)

    def test_zero_quadratic_form_rejected(self):
        with pytest.raises(pc.DegenerateSlotError):
            pc.normalize(np.zeros((2, 2)), np.ones(2), 1.0)


class TestAssembleAndZf:
    def test_single_user_identity_channel(self):
        spec = make_spec("qpsk")
        block = block_from_h(np.array([[1.0 + 0j]]))
        slot = ci.build_slot(spec, np.array([np.exp(1j * np.pi / 4)]))
        prec = pc.assemble_precoder(block, ci.merge_matrix(1), slot, np.ones(2))
        np.testing.assert_allclose(prec.w, [[1.0]], atol=1e-12)
        y = block.h[0] @ prec.w @ slot.symbols
        assert y == pytest.approx(slot.symbols[0], abs=1e-12)

    def test_zf_identity_channel(self):
        spec = make_spec("qpsk")
        s = spec.points[[0, 2]]
        block = block_from_h(np.eye(2, dtype=complex))
        prec = pc.zf_precoder(block, s, 1.0)
        np.testing.assert_allclose(prec.w, np.eye(2) / np.sqrt(2), atol=1e-12)
        np.testing.assert_allclose(block.h @ prec.w @ s, s / np.sqrt(2), atol=1e-12)

    @pytest.mark.parametrize("mod", ["qpsk", "16qam"])
    def test_zf_power_and_noiseless_recovery(self, mod, rng):
        spec = make_spec(mod)
        for _ in range(10):
            block, _ = gen_block(ChannelConfig(k=4), rng=rng)
            s = spec.points[rng.integers(0, spec.order, 4)]
            prec = pc.zf_precoder(block, s, 1.0)
            x = prec.w @ s
            assert np.linalg.norm(x) ** 2 == pytest.approx(1.0, abs=1e-10)
            y = block.h @ x
            np.testing.assert_allclose(y, y[0] / s[0] * s, atol=1e-9)  # common positive scaling

    def test_all_ones_factors_collapse_to_zf_direction(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=4), rng=rng)
        slot = ci.build_slot(spec, spec.points[rng.integers(0, 4, 4)])
        vmat = ci.extrapolate_coupling_qam(block.pair_gram, slot)
        _, fn = pc.normalize(vmat, np.ones(8), 1.0)
        x_sle = pc.assemble_precoder(block, ci.merge_matrix(4), slot, fn).w @ slot.symbols
        x_zf = pc.zf_precoder(block, slot.symbols, 1.0).w @ slot.symbols
        cos = np.abs(np.vdot(x_sle, x_zf)) / (np.linalg.norm(x_sle) * np.linalg.norm(x_zf))
        assert cos >= 1.0 - 1e-10


class TestPrecodeBlock:
    @pytest.mark.parametrize("method", ["zf", "cf", "sub", "opt"])
    @pytest.mark.parametrize("mod", ["qpsk", "16qam"])
    def test_contracts_per_method(self, method, mod, rng):
        spec = make_spec(mod)
        block, _ = gen_block(ChannelConfig(k=4), rng=rng)
        slots = [ci.build_slot(spec, spec.points[rng.integers(0, spec.order, 4)]) for _ in range(10)]
        precs, states = pc.precode_block(block, spec, slots, method, r_max=5, p0=1.0, return_states=True)
        for prec, state, slot in zip(precs, states, slots):
            x = prec.w @ slot.symbols
            assert np.linalg.norm(x) ** 2 == pytest.approx(1.0, abs=1e-9)
            rx = block.h @ x
            pairs = (state.factors_norm * slot.comps).reshape(4, 2).sum(axis=1)
            np.testing.assert_allclose(rx, pairs, atol=1e-9)

    def test_identical_slots_identical_precoders(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=3), rng=rng)
        slot = ci.build_slot(spec, spec.points[rng.integers(0, 4, 3)])
        precs = pc.precode_block(block, spec, [slot, slot, slot], "cf")
        np.testing.assert_array_equal(precs[0].w, precs[1].w)
        np.testing.assert_array_equal(precs[0].w, precs[2].w)

    def test_zf_method_matches_direct_call(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=3), rng=rng)
        slots = [ci.build_slot(spec, spec.points[rng.integers(0, 4, 3)]) for _ in range(4)]
        precs = pc.precode_block(block, spec, slots, "zf")
        for prec, slot in zip(precs, slots):
            np.testing.assert_array_equal(prec.w, pc.zf_precoder(block, slot.symbols, 1.0).w)

    def test_cf_dominates_sub_on_seeded_block(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=4), rng=rng)
        slots = [ci.build_slot(spec, spec.points[rng.integers(0, 4, 4)]) for _ in range(50)]
        _, st_cf = pc.precode_block(block, spec, slots, "cf", r_max=5, return_states=True)
        _, st_sub = pc.precode_block(block, spec, slots, "sub", return_states=True)
        for a, b in zip(st_cf, st_sub):
            assert a.factors_norm.min() >= b.factors_norm.min() - 1e-9

    def test_unknown_method_rejected(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=2), rng=rng)
        with pytest.raises(ValueError, match="unknown method"):
            pc.precode_block(block, spec, [], "mmse")

    def test_net_requires_params(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=2), rng=rng)
        slot = ci.build_slot(spec, spec.points[[0, 1]])
        with pytest.raises(ValueError, match="parameters"):
            pc.precode_block(block, spec, [slot], "net")


class TestBlockSlotMismatch:
    def test_wrong_user_count_rejected(self, rng):
        spec = make_spec("qpsk")
        block, _ = gen_block(ChannelConfig(k=3), rng=rng)
        slot = ci.build_slot(spec, spec.points[rng.integers(0, 4, 2)])
        with pytest.raises(ValueError, match="does not match"):
            pc.precode_block(block, spec, [slot], "zf")
