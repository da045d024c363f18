"""Optimizer and schedule contracts, pinned to hand-computed values."""

import numpy as np
import pytest

from lalign import autodiff as ad
from lalign.optim import AdamW, AdamWState, LrSchedule, adamw_step, clip_global_norm, schedule_lr


class TestAdamW:
    def test_single_step_hand_value(self):
        # m_hat = 1, v_hat = 1 after one step, so w moves by -lr.
        w = ad.parameter([1.0], dtype=np.float64)
        state = AdamWState(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        adamw_step({"w": w}, {"w": np.array([1.0])}, state, lr=0.1)
        assert np.allclose(w.data, [0.9], atol=1e-8)
        assert state.step_count == 1

    def test_zero_lr_updates_moments_only(self):
        w = ad.parameter([1.0, 2.0], dtype=np.float64)
        state = AdamWState()
        adamw_step({"w": w}, {"w": np.array([0.5, -0.5])}, state, lr=0.0)
        assert np.array_equal(w.data, [1.0, 2.0])
        assert state.m["w"].any() and state.v["w"].any()

    def test_decay_only_step(self):
        # zero gradient: moments stay zero, only lr * wd * w applies
        w = ad.parameter([1.0], dtype=np.float64)
        state = AdamWState(weight_decay=0.1)
        adamw_step({"w": w}, {"w": np.array([0.0])}, state, lr=0.1)
        assert np.allclose(w.data, [0.99], atol=1e-12)

    def test_shape_mismatch_rejected(self):
        w = ad.parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            adamw_step({"w": w}, {"w": np.zeros(3)}, AdamWState(), lr=0.1)

    def test_deterministic_given_state(self):
        def run():
            w = ad.parameter([0.3, -0.7], dtype=np.float64)
            state = AdamWState(weight_decay=0.0)
            for _ in range(5):
                adamw_step({"w": w}, {"w": np.array([0.1, 0.2])}, state, lr=0.01)
            return w.data.copy()

        assert np.array_equal(run(), run())

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            AdamWState(beta1=1.0)
        with pytest.raises(ValueError):
            AdamWState(eps=0.0)
        with pytest.raises(ValueError):
            AdamWState(weight_decay=-0.1)

    def test_wrapper_reads_grads(self):
        w = ad.parameter([1.0], dtype=np.float64)
        opt = AdamW({"w": w}, weight_decay=0.0)
        loss = (w * w).sum()
        loss.backward()
        opt.step(lr=0.1)
        assert w.data[0] < 1.0
        opt.zero_grad()
        assert w.grad is None


class TestSchedule:
    def setup_method(self):
        self.sched = LrSchedule(max_lr=1e-3, min_lr=1e-4, warmup_steps=10, total_steps=110)

    def test_warmup_endpoint(self):
        assert schedule_lr(self.sched, 10) == pytest.approx(1e-3)

    def test_decay_endpoint(self):
        assert schedule_lr(self.sched, 110) == pytest.approx(1e-4)

    def test_decay_midpoint(self):
        assert schedule_lr(self.sched, 60) == pytest.approx((1e-3 + 1e-4) / 2)

    def test_warmup_is_linear_from_zero(self):
        assert schedule_lr(self.sched, 0) == 0.0
        assert schedule_lr(self.sched, 5) == pytest.approx(5e-4)

    def test_continuity_at_boundary(self):
        before = schedule_lr(self.sched, 9)
        at = schedule_lr(self.sched, 10)
        after = schedule_lr(self.sched, 11)
        assert abs(at - before) < 1.2e-4 and abs(after - at) < 1.2e-4

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            schedule_lr(self.sched, -1)
        with pytest.raises(ValueError):
            schedule_lr(self.sched, 111)

    def test_pure_cosine_kind(self):
        sched = LrSchedule(max_lr=1.0, min_lr=0.0, warmup_steps=0, total_steps=100,
                           kind="cosine-decay")
        assert schedule_lr(sched, 0) == pytest.approx(1.0)
        assert schedule_lr(sched, 100) == pytest.approx(0.0)

    def test_cosine_kind_rejects_warmup(self):
        with pytest.raises(ValueError):
            LrSchedule(max_lr=1.0, min_lr=0.0, warmup_steps=5, total_steps=10, kind="cosine-decay")

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            LrSchedule(max_lr=1e-4, min_lr=1e-3, total_steps=10)
        with pytest.raises(ValueError):
            LrSchedule(max_lr=1e-3, warmup_steps=11, total_steps=10)


class TestClipGlobalNorm:
    def test_under_threshold_unchanged(self):
        grads = {"a": np.array([0.3, 0.4])}  # norm 0.5
        norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(0.5)
        assert np.allclose(grads["a"], [0.3, 0.4])

    def test_scales_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}  # norm 5
        clip_global_norm(grads, 1.0)
        assert np.allclose(grads["a"], [0.6]) and np.allclose(grads["b"], [0.8])

    def test_zero_grads_unchanged(self):
        grads = {"a": np.zeros(4)}
        assert clip_global_norm(grads, 1.0) == 0.0
        assert np.array_equal(grads["a"], np.zeros(4))

    def test_invalid_max_norm(self):
        with pytest.raises(ValueError):
            clip_global_norm({"a": np.ones(1)}, 0.0)
