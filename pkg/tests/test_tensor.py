"""Autodiff engine tests: finite-difference oracle, op semantics, tape rules."""

import numpy as np
import pytest

from stitchgen import tensor as T


def fd_check(build, leaves, rel=1e-5, abs_floor=1e-7, h=1e-5):
    """Central-difference check of d(build())/d(leaf) for every leaf element.

    ``build`` must rebuild the graph from the leaves' current data and
    return a scalar Tensor.
    """
    out = build()
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(out)
    for leaf in leaves:
        analytic = leaf.grad.copy()
        flat = leaf.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build().item()
            flat[i] = orig - h
            lo = build().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * h)
        numeric = numeric.reshape(leaf.shape)
        err = np.abs(analytic - numeric)
        tol = np.maximum(abs_floor, rel * np.maximum(np.abs(analytic), np.abs(numeric)))
        assert (err <= tol).all(), f"fd mismatch: max err {err.max():.3e}"


def rand_leaf(rng, shape, lo=-2.0, hi=2.0):
    return T.tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestBackwardBasics:
    def test_square_gradient(self):
        x = T.tensor(3.0, requires_grad=True)
        T.backward(x * x)
        assert np.allclose(x.grad, 6.0)

    def test_unreachable_leaf_reads_zero(self):
        x = T.tensor(3.0, requires_grad=True)
        y = T.tensor(2.0, requires_grad=True)
        T.backward(y * y)
        assert np.allclose(x.grad, 0.0)
        assert x.grad_buffer is None
        assert np.allclose(y.grad, 4.0)

    def test_non_scalar_root_rejected(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x + x)

    def test_fanout_accumulates(self):
        x = T.tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0
        T.backward(y)
        assert np.allclose(x.grad, 2 * 2.0 + 3.0)

    def test_three_layer_mlp_matches_fd(self):
        rng = np.random.default_rng(0)
        x = T.tensor(rng.normal(size=(4, 5)))
        ws = [rand_leaf(rng, (5, 6)), rand_leaf(rng, (6, 6)), rand_leaf(rng, (6, 2))]
        bs = [rand_leaf(rng, (6,)), rand_leaf(rng, (6,)), rand_leaf(rng, (2,))]

        def build():
            h = T.tanh(T.affine(x, ws[0], bs[0]))
            h = T.gelu(T.affine(h, ws[1], bs[1]))
            return T.tmean(T.affine(h, ws[2], bs[2]))

        fd_check(build, ws + bs)

    def test_repeat_backward_accumulates(self):
        x = T.tensor(2.0, requires_grad=True)
        y = x * x
        T.backward(y)
        T.backward(y)
        assert np.allclose(x.grad, 8.0)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            a = rand_leaf(rng, (3, 4))
            b = rand_leaf(rng, (4, 3))
            out = T.tmean(T.gelu(T.matmul(a, b)))
            T.backward(out)
            return out.data.copy(), a.grad.copy(), b.grad.copy()

        o1, ga1, gb1 = run()
        o2, ga2, gb2 = run()
        assert o1.tobytes() == o2.tobytes()
        assert ga1.tobytes() == ga2.tobytes()
        assert gb1.tobytes() == gb2.tobytes()


class TestNoGradAndStopGrad:
    def test_stop_grad_severs_one_path(self):
        x = T.tensor(3.0, requires_grad=True)
        y = T.stop_grad(x) * x
        T.backward(y)
        assert np.allclose(x.grad, 3.0)

        x.zero_grad()
        z = T.stop_grad(x) * T.stop_grad(x)
        T.backward(z)
        assert np.allclose(x.grad, 0.0)

    def test_stop_grad_value_bit_identical(self):
        rng = np.random.default_rng(1)
        x = rand_leaf(rng, (5, 7))
        y = T.stop_grad(x)
        assert y.data.tobytes() == x.data.tobytes()
        assert y.node is None and not y.requires_grad

    def test_stop_grad_copies(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        y = T.stop_grad(x)
        x.data[0] = 99.0
        assert y.data[0] == 1.0

    def test_no_grad_scope_records_nothing(self):
        x = T.tensor(2.0, requires_grad=True)
        with T.no_grad():
            y = x * x
        assert y.node is None and not y.requires_grad
        z = x * x
        assert z.node is not None


class TestOpSemantics:
    def test_matmul_identity(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 4))
        out = T.matmul(T.tensor(a), T.tensor(np.eye(4)))
        assert np.allclose(out.data, a)

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError, match="add"):
            T.add(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 2))))

    def test_scalar_with_tensor_allowed(self):
        x = T.tensor([[1.0, 2.0]], requires_grad=True)
        y = T.tsum(x * 3.0 + 1.0)
        T.backward(y)
        assert np.allclose(y.data, 11.0)
        assert np.allclose(x.grad, 3.0)

    def test_l1_example(self):
        a = T.tensor([1.0, 2.0])
        b = T.tensor([2.0, 4.0])
        assert np.allclose(T.l1(a, b).data, 1.5)

    def test_l2_value(self):
        a = T.tensor([1.0, 2.0])
        b = T.tensor([2.0, 4.0])
        assert np.allclose(T.l2(a, b).data, (1.0 + 4.0) / 2.0)

    def test_resample_nearest_upscale_replicates(self):
        x = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        y = T.resample(x, (4, 4), mode="nearest")
        expect = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
        assert np.array_equal(y.data, expect)

    def test_resample_identity_same_shape(self):
        x = T.tensor(np.arange(12.0).reshape(3, 4))
        y = T.resample(x, (3, 4), mode="bilinear")
        assert np.array_equal(y.data, x.data)

    def test_resample_zero_target_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            T.resample(T.tensor(np.zeros((2, 2))), (0, 2))

    def test_resample_bilinear_mean_preserving_downscale(self):
        x = T.tensor(np.arange(16.0).reshape(4, 4))
        y = T.resample(x, (2, 2), mode="bilinear")
        expect = x.data.reshape(2, 2, 2, 2).mean(axis=(1, 3))
        assert np.allclose(y.data, expect)

    def test_softmax_ce_matches_manual(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        out = T.softmax_ce(T.tensor(logits), labels)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        assert np.allclose(out.data, -logp[np.arange(5), labels].mean())

    def test_log_softmax_rows_normalize(self):
        rng = np.random.default_rng(4)
        lp = T.log_softmax(T.tensor(rng.normal(size=(6, 3))))
        assert np.allclose(np.exp(lp.data).sum(axis=1), 1.0)

    def test_concat_and_getitem_roundtrip(self):
        a = T.tensor(np.arange(6.0).reshape(2, 3))
        b = T.tensor(np.arange(6.0, 12.0).reshape(2, 3))
        c = T.concat([a, b], axis=0)
        assert np.array_equal(c.data[2:], b.data)
        assert np.array_equal(T.getitem(c, slice(0, 2)).data, a.data)

    def test_scatter_rows(self):
        base = T.tensor(np.zeros((4, 2)))
        rows = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.scatter_rows(base, np.array([1, 3]), rows)
        assert np.allclose(out.data[1], [1.0, 2.0])
        assert np.allclose(out.data[3], [3.0, 4.0])
        assert np.allclose(out.data[0], 0.0)

    def test_scatter_rows_duplicate_index_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            T.scatter_rows(T.tensor(np.zeros((4, 2))), np.array([1, 1]),
                           T.tensor(np.zeros((2, 2))))

    def test_broadcast_to_grad_sums(self):
        x = T.tensor([[1.0, 2.0]], requires_grad=True)
        y = T.broadcast_to(x, (3, 2))
        T.backward(T.tsum(y))
        assert np.allclose(x.grad, [[3.0, 3.0]])

    def test_forward_op_dispatch(self):
        out = T.forward_op("add", T.tensor(1.0), T.tensor(2.0))
        assert np.allclose(out.data, 3.0)
        with pytest.raises(ValueError, match="unknown op"):
            T.forward_op("conv", T.tensor(1.0))

    def test_clip_zero_grad_outside(self):
        x = T.tensor([-2.0, 0.5, 2.0], requires_grad=True)
        T.backward(T.tsum(T.clip(x, -1.0, 1.0)))
        assert np.allclose(x.grad, [0.0, 1.0, 0.0])


def _shapes(rng, max_dim=6, ndim=2):
    return tuple(int(rng.integers(1, max_dim + 1)) for _ in range(ndim))


class TestFiniteDifferenceSuite:
    """Every differentiable op against central differences, >= 20 graphs each."""

    N = 20

    def test_elementwise_binary(self):
        for op in (T.add, T.sub, T.mul, T.div):
            for trial in range(self.N):
                rng = np.random.default_rng(1000 + trial)
                shape = _shapes(rng)
                a = rand_leaf(rng, shape)
                b = rand_leaf(rng, shape, lo=0.5, hi=2.0)  # keep div away from 0
                fd_check(lambda: T.tmean(op(a, b)), [a, b])

    def test_elementwise_unary(self):
        cases = [
            (T.tanh, -2.0, 2.0),
            (T.gelu, -3.0, 3.0),
            (T.sigmoid, -3.0, 3.0),
            (T.softplus, -3.0, 3.0),
            (T.sin, -3.0, 3.0),
            (T.cos, -3.0, 3.0),
            (T.exp, -1.0, 1.0),
            (T.log, 0.2, 3.0),
            (T.sqrt, 0.2, 3.0),
            (T.arccos, -0.9, 0.9),
            (T.neg, -2.0, 2.0),
        ]
        for op, lo, hi in cases:
            for trial in range(self.N):
                rng = np.random.default_rng(2000 + trial)
                x = rand_leaf(rng, _shapes(rng), lo=lo, hi=hi)
                fd_check(lambda: T.tmean(op(x)), [x])

    def test_matmul_and_affine(self):
        for trial in range(self.N):
            rng = np.random.default_rng(3000 + trial)
            n, k, m = (int(rng.integers(1, 6)) for _ in range(3))
            a = rand_leaf(rng, (n, k))
            b = rand_leaf(rng, (k, m))
            fd_check(lambda: T.tmean(T.matmul(a, b)), [a, b])
            x = rand_leaf(rng, (n, k))
            w = rand_leaf(rng, (k, m))
            bias = rand_leaf(rng, (m,))
            fd_check(lambda: T.tmean(T.gelu(T.affine(x, w, bias))), [x, w, bias])

    def test_reductions_and_shapes(self):
        for trial in range(self.N):
            rng = np.random.default_rng(4000 + trial)
            shape = _shapes(rng, ndim=3)
            x = rand_leaf(rng, shape)
            axis = int(rng.integers(0, 3))
            fd_check(lambda: T.tsum(T.tmean(x, axis=axis)) * 0.5, [x])
            fd_check(lambda: T.tmean(T.tsum(x, axis=axis, keepdims=True)), [x])
            fd_check(lambda: T.tmean(T.reshape(x, (shape[0], -1 if False else shape[1] * shape[2]))), [x])
            perm = tuple(rng.permutation(3))
            fd_check(lambda: T.tmean(T.mul(T.transpose(x, perm), T.transpose(x, perm))), [x])
            fd_check(lambda: T.tmean(T.broadcast_to(T.tmean(x, axis=0, keepdims=True), shape)), [x])

    def test_concat_getitem_scatter(self):
        for trial in range(self.N):
            rng = np.random.default_rng(5000 + trial)
            rows = int(rng.integers(2, 6))
            cols = int(rng.integers(1, 5))
            a = rand_leaf(rng, (rows, cols))
            b = rand_leaf(rng, (rows, cols))
            fd_check(lambda: T.tmean(T.concat([a, b], axis=0)), [a, b])
            idx = np.sort(rng.choice(rows, size=max(1, rows // 2), replace=False))
            fd_check(lambda: T.tmean(T.mul(T.getitem(a, idx), T.getitem(a, idx))), [a])
            base = rand_leaf(rng, (rows + 2, cols))
            rows_t = rand_leaf(rng, (2, cols))
            sidx = np.array([0, rows + 1])
            fd_check(lambda: T.tmean(T.scatter_rows(base, sidx, rows_t)), [base, rows_t])

    def test_resample_both_modes(self):
        for trial in range(self.N):
            rng = np.random.default_rng(6000 + trial)
            h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            oh, ow = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            x = rand_leaf(rng, (2, h, w))
            for mode in ("nearest", "bilinear"):
                fd_check(lambda: T.tmean(T.mul(T.resample(x, (oh, ow), mode=mode),
                                               T.resample(x, (oh, ow), mode=mode))), [x])

    def test_losses(self):
        for trial in range(self.N):
            rng = np.random.default_rng(7000 + trial)
            shape = _shapes(rng)
            a = rand_leaf(rng, shape, lo=0.0, hi=1.0)
            # keep |a-b| away from the l1 kink so the fd stencil is valid
            b = T.tensor(a.data + rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape),
                         requires_grad=True)
            fd_check(lambda: T.l1(a, b), [a, b])
            fd_check(lambda: T.l2(a, b), [a, b])
            n, c = int(rng.integers(2, 6)), int(rng.integers(2, 5))
            logits = rand_leaf(rng, (n, c))
            labels = rng.integers(0, c, size=n)
            fd_check(lambda: T.softmax_ce(logits, labels), [logits])
            fd_check(lambda: T.tmean(T.mul(T.log_softmax(logits), T.log_softmax(logits))), [logits])

    def test_clip_interior(self):
        for trial in range(self.N):
            rng = np.random.default_rng(8000 + trial)
            x = rand_leaf(rng, _shapes(rng), lo=-0.8, hi=0.8)
            fd_check(lambda: T.tmean(T.clip(x, -1.0, 1.0) * T.clip(x, -1.0, 1.0)), [x])
