"""Adapter and optimizer tests against hand-unrolled references."""

import numpy as np
import pytest

from stitchgen import tensor as T
from stitchgen.nn import AdamW, LowRankAdapter, cosine_warmup_lr, glorot


def make_adapter(rng, n=3, m=4, rank=2, alpha=16.0, base=None):
    if base is None:
        base = T.tensor(rng.normal(size=(n, m)))
    bias = T.tensor(rng.normal(size=(m,)))
    return LowRankAdapter(base, bias, rank=rank, alpha=alpha, rng=rng)


class TestLowRankAdapter:
    def test_zero_up_is_identity_bitwise(self):
        rng = np.random.default_rng(0)
        w = T.tensor(rng.normal(size=(5, 7)))
        b = T.tensor(rng.normal(size=(7,)))
        ad = LowRankAdapter(w, b, rank=3, alpha=16.0, rng=rng)
        x = T.tensor(rng.normal(size=(4, 5)))
        plain = T.affine(x, w, b)
        assert np.array_equal(ad.apply(x).data, plain.data)

    def test_rank_one_hand_example(self):
        rng = np.random.default_rng(1)
        ad = LowRankAdapter(T.tensor(np.zeros((2, 1))), None, rank=1, alpha=1.0, rng=rng)
        ad.down.data[:] = np.array([[1.0, 0.0]])
        ad.up.data[:] = np.array([[1.0]])
        out = ad.apply(T.tensor([[5.0, 7.0]]))
        assert np.allclose(out.data, [[5.0]])

    def test_base_frozen_through_step(self):
        rng = np.random.default_rng(2)
        ad = make_adapter(rng)
        base_before = ad.base.copy()
        x = T.tensor(rng.normal(size=(6, 3)))
        target = T.tensor(rng.normal(size=(6, 4)))
        opt = AdamW(ad.params("blk"), lr=1e-2)
        loss = T.l2(ad.apply(x), target)
        T.backward(loss)
        opt.step()
        assert np.array_equal(ad.base, base_before)
        assert ad._w_right.grad_buffer is None
        assert not np.allclose(ad.up.data, 0.0)

    def test_merge_identity(self):
        # applying the adapter equals multiplying by the merged weight
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            ad = make_adapter(rng, n=4, m=5, rank=2, alpha=8.0)
            ad.up.data[:] = rng.normal(size=ad.up.shape)
            ad.down.data[:] = rng.normal(size=ad.down.shape)
            x = rng.normal(size=(7, 4))
            merged = x @ ad.effective_weight().T + ad.bias.data
            assert np.allclose(ad.apply(T.tensor(x)).data, merged, atol=1e-12, rtol=0)

    def test_bad_rank_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match="rank"):
            LowRankAdapter(T.tensor(np.zeros((3, 4))), None, rank=5, alpha=1.0, rng=rng)


def reference_adamw(p, g_steps, lr, b1, b2, eps, wd, clip):
    """Straight transcription of the update rule for one parameter."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(g_steps, start=1):
        norm = np.sqrt((g * g).sum())
        if clip is not None and norm > clip:
            g = g * (clip / norm)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * wd * p
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


class TestAdamW:
    def test_matches_hand_unrolled(self):
        rng = np.random.default_rng(4)
        p0 = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(5)]
        p = T.tensor(p0.copy(), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-2, betas=(0.9, 0.999), eps=1e-8,
                    weight_decay=0.01, clip_norm=1.0)
        for g in grads:
            p.grad_buffer = g.copy()
            opt.step()
        expect = reference_adamw(p0, grads, 1e-2, 0.9, 0.999, 1e-8, 0.01, 1.0)
        assert np.allclose(p.data, expect, atol=1e-12, rtol=0)

    def test_zero_grad_zero_decay_fixed_point(self):
        p = T.tensor(np.ones((2, 2)), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-2, weight_decay=0.0)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_clip_scales_to_exact_norm(self):
        p = T.tensor(np.zeros(4), requires_grad=True)
        opt = AdamW({"p": p}, lr=0.0, clip_norm=0.1)
        p.grad_buffer = np.full(4, 10.0)
        opt.step()
        g = opt.m["p"] / (1 - 0.9)  # first step: m = (1-b1) * clipped grad
        norm = np.sqrt((g * g).sum())
        assert abs(norm - 0.1) <= 1e-12 * 0.1 + 1e-15

    def test_nan_grad_names_parameter(self):
        p = T.tensor(np.zeros(3), requires_grad=True)
        q = T.tensor(np.zeros(3), requires_grad=True)
        opt = AdamW({"good": p, "bad": q}, lr=1e-3)
        p.grad_buffer = np.zeros(3)
        q.grad_buffer = np.array([0.0, np.nan, 0.0])
        with pytest.raises(FloatingPointError, match="bad"):
            opt.step()

    def test_step_counter_and_state_roundtrip(self):
        rng = np.random.default_rng(5)
        p = T.tensor(rng.normal(size=(2,)), requires_grad=True)
        opt = AdamW({"p": p}, lr=1e-2)
        for _ in range(3):
            p.grad_buffer = rng.normal(size=(2,))
            opt.step()
        state = {k: v.copy() for k, v in opt.state_arrays().items()}
        p2 = T.tensor(p.data.copy(), requires_grad=True)
        opt2 = AdamW({"p": p2}, lr=1e-2)
        opt2.load_state_arrays(state)
        assert opt2.step_count == 3
        g = rng.normal(size=(2,))
        p.grad_buffer = g.copy()
        p2.grad_buffer = g.copy()
        opt.step()
        opt2.step()
        assert np.array_equal(p.data, p2.data)

    def test_frozen_param_untouched_by_backward(self):
        rng = np.random.default_rng(6)
        w = glorot(rng, 3, 3)
        w.requires_grad = False
        x = T.tensor(rng.normal(size=(2, 3)))
        out = T.tmean(T.matmul(x, w))
        T.backward(out)
        assert w.grad_buffer is None


class TestSchedule:
    def test_warmup_then_cosine(self):
        lrs = [cosine_warmup_lr(1.0, s, total_steps=100, warmup_steps=10) for s in range(100)]
        assert lrs[0] == pytest.approx(0.1)
        assert lrs[9] == pytest.approx(1.0)
        assert max(lrs) == pytest.approx(1.0)
        assert lrs[99] < 1e-3
        assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
