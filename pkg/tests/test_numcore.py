"""Kernel-level checks: naive-reference agreement and gradient correctness."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glowmatch import numcore as nc
from glowmatch.errors import ContractViolation
from glowmatch.numcore import Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 5))
        out = nc.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_case(self):
        out = nc.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])),
                        Tensor(np.array([[1.0], [1.0]])))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        out = nc.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(ContractViolation):
            nc.matmul(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3))))

    def test_flop_count_exact(self, rng):
        nc.flops.reset()
        with nc.flops.counting(), nc.flops.phase("self_attention"):
            nc.matmul(Tensor(rng.normal(size=(5, 7))), Tensor(rng.normal(size=(7, 3))))
        assert nc.flops.get("self_attention") == 5 * 7 * 3

    def test_batched_flop_count(self, rng):
        nc.flops.reset()
        with nc.flops.counting(), nc.flops.phase("cross_attention"):
            nc.matmul(Tensor(rng.normal(size=(2, 5, 7))), Tensor(rng.normal(size=(2, 7, 3))))
        assert nc.flops.get("cross_attention") == 2 * 5 * 7 * 3


class TestSoftmax:
    def test_uniform_row(self):
        out = nc.softmax_rows(Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_overflow_stability(self):
        out = nc.softmax_rows(Tensor(np.array([[1000.0, 0.0]])))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)

    def test_matches_direct_formula(self):
        row = np.array([[1.0, 2.0, 3.0]])
        out = nc.softmax_rows(Tensor(row))
        direct = np.exp(row) / np.exp(row).sum()
        np.testing.assert_allclose(out.data, direct, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        m = rng.normal(size=(6, 9)) * 10
        out = nc.softmax_rows(Tensor(m))
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-6)

    def test_empty_rows(self):
        out = nc.softmax_rows(Tensor(np.zeros((0, 4))))
        assert out.data.shape == (0, 4)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_nonneg_and_normalized(self, seed):
        m = np.random.default_rng(seed).normal(size=(4, 7)) * 5
        out = nc.softmax_rows(Tensor(m)).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def _mlp_params(rng, d_in, d_hidden, d_out, dtype=np.float64):
    from glowmatch.backbone import MlpParams

    def t(shape):
        return Tensor(rng.normal(size=shape).astype(dtype), requires_grad=True)

    p = MlpParams(w1=t((d_in, d_hidden)), b1=t((d_hidden,)),
                  ln_gamma=t((d_hidden,)), ln_beta=t((d_hidden,)),
                  w2=t((d_hidden, d_out)), b2=t((d_out,)))
    return p


class TestMlpBlock:
    def test_zero_weights_zero_output(self, rng):
        p = _mlp_params(rng, 4, 8, 3)
        for t in (p.w1, p.b1, p.ln_beta, p.w2, p.b2):
            t.data = np.zeros_like(t.data)
        out = nc.mlp_block(Tensor(rng.normal(size=(5, 4))), p)
        np.testing.assert_array_equal(out.data, np.zeros((5, 3)))

    def test_matches_scalar_composition(self, rng):
        p = _mlp_params(rng, 2, 4, 2)
        x = rng.normal(size=(3, 2))
        out = nc.mlp_block(Tensor(x), p).data
        # step-by-step scalar recomputation
        h = x @ p.w1.data + p.b1.data
        mu = h.mean(axis=-1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
        hn = (h - mu) / np.sqrt(var + nc.LAYERNORM_EPS) * p.ln_gamma.data + p.ln_beta.data
        act = hn * 0.5 * (1.0 + np.array([[math.erf(v / math.sqrt(2)) for v in row] for row in hn]))
        ref = act @ p.w2.data + p.b2.data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_width_mismatch_raises(self, rng):
        p = _mlp_params(rng, 4, 8, 3)
        with pytest.raises(ContractViolation):
            nc.mlp_block(Tensor(rng.normal(size=(5, 5))), p)

    def test_gradients_vs_finite_differences(self, rng):
        p = _mlp_params(rng, 3, 6, 2)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        params = [x, p.w1, p.b1, p.ln_gamma, p.ln_beta, p.w2, p.b2]
        with Tape() as tape:
            loss = nc.sum_all(nc.mlp_block(x, p))
            tape.backward(loss)
        analytic = [t.grad.copy() for t in params]

        def f():
            return float(nc.sum_all(nc.mlp_block(x, p)).data)

        numeric = nc.numeric_gradient(f, [t.data for t in params])
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.abs(n), 1e-4)
            assert np.max(np.abs(a - n) / denom) < 1e-4


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            y = nc.mul(x, x)
            tape.backward(y)
        assert float(x.grad) == pytest.approx(6.0, abs=1e-12)

    def test_softmax_sum_conservation(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        with Tape() as tape:
            loss = nc.sum_all(nc.softmax_rows(x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.zeros_like(x.data), atol=1e-12)

    def test_unused_inputs_zero_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        unused = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = nc.sum_all(nc.mul(x, 2.0))
            tape.backward(loss)
        assert unused.grad is None  # exactly zero contribution

    def test_output_not_on_tape_raises(self, rng):
        x = Tensor(rng.normal(size=(2,)), requires_grad=True)
        y = nc.sum_all(x)  # created outside any tape
        with Tape() as tape:
            with pytest.raises(ContractViolation):
                tape.backward(y)

    def test_backward_requires_scalar(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with Tape() as tape:
            y = nc.mul(x, 1.5)
            with pytest.raises(ContractViolation):
                tape.backward(y)

    def test_each_node_visited_once(self, rng):
        # A diamond graph: y = (x*2) + (x*3); gradient must be exactly 5.
        x = Tensor(np.array(1.0), requires_grad=True)
        with Tape() as tape:
            y = nc.add(nc.mul(x, 2.0), nc.mul(x, 3.0))
            tape.backward(y)
        assert float(x.grad) == pytest.approx(5.0, abs=0)


OPS = {
    "add": lambda a, b: nc.add(a, b),
    "sub": lambda a, b: nc.sub(a, b),
    "mul": lambda a, b: nc.mul(a, b),
    "matmul": lambda a, b: nc.matmul(a, b),
    "softmax": lambda a, b: nc.softmax(a, axis=-1),
    "softmax_axis0": lambda a, b: nc.softmax(a, axis=0),
    "log_softmax": lambda a, b: nc.log_softmax(a, axis=-1),
    "log_softmax_axis0": lambda a, b: nc.log_softmax(a, axis=0),
    "sigmoid": lambda a, b: nc.sigmoid(a),
    "log_sigmoid": lambda a, b: nc.log_sigmoid(a),
    "gelu": lambda a, b: nc.gelu(a),
    "concat": lambda a, b: nc.concat([a, b], axis=-1),
    "transpose": lambda a, b: nc.transpose(a, (1, 0)),
    "reshape": lambda a, b: nc.reshape(a, (-1,)),
    "attn_apply": lambda a, b: nc.attn_apply(nc.softmax(a, axis=-1), b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    """Central-difference check over 100 seeds per op, 64-bit, rel err < 1e-4."""
    op = OPS[name]
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        a = Tensor(r.normal(size=(4, 6)), requires_grad=True)
        b_shape = (6, 3) if name in ("matmul", "attn_apply") else (4, 6)
        b = Tensor(r.normal(size=b_shape), requires_grad=True)
        weight = r.normal(size=op(a, b).shape)  # random linear functional

        with Tape() as tape:
            loss = nc.sum_all(nc.mul(op(a, b), weight))
            tape.backward(loss)
        grads = [a.grad.copy(), None if b.grad is None else b.grad.copy()]
        a.grad = b.grad = None

        def f():
            return float(nc.sum_all(nc.mul(op(a, b), weight)).data)

        numeric = nc.numeric_gradient(f, [a.data, b.data])
        for g, n in zip(grads, numeric):
            if g is None:
                assert np.allclose(n, 0, atol=1e-7)
                continue
            denom = np.maximum(np.abs(n), 1e-3)
            worst = max(worst, float(np.max(np.abs(g - n) / denom)))
    assert worst < 1e-4, f"{name}: worst relative error {worst}"


def test_rotate_pairs_gradients():
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(2, 5, 6)), requires_grad=True)
        theta = Tensor(r.normal(size=(5, 3)), requires_grad=True)
        weight = r.normal(size=(2, 5, 6))
        with Tape() as tape:
            loss = nc.sum_all(nc.mul(nc.rotate_pairs(x, theta), weight))
            tape.backward(loss)
        gx, gt = x.grad.copy(), theta.grad.copy()
        x.grad = theta.grad = None

        def f():
            return float(nc.sum_all(nc.mul(nc.rotate_pairs(x, theta), weight)).data)

        nx, nt = nc.numeric_gradient(f, [x.data, theta.data])
        assert np.max(np.abs(gx - nx) / np.maximum(np.abs(nx), 1e-3)) < 1e-4
        assert np.max(np.abs(gt - nt) / np.maximum(np.abs(nt), 1e-3)) < 1e-4


def test_layer_norm_gradients():
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(4, 6)), requires_grad=True)
        gamma = Tensor(r.normal(size=(6,)), requires_grad=True)
        beta = Tensor(r.normal(size=(6,)), requires_grad=True)
        weight = r.normal(size=(4, 6))
        with Tape() as tape:
            loss = nc.sum_all(nc.mul(nc.layer_norm(x, gamma, beta), weight))
            tape.backward(loss)
        grads = [x.grad.copy(), gamma.grad.copy(), beta.grad.copy()]
        x.grad = gamma.grad = beta.grad = None

        def f():
            return float(nc.sum_all(nc.mul(nc.layer_norm(x, gamma, beta), weight)).data)

        numeric = nc.numeric_gradient(f, [x.data, gamma.data, beta.data])
        for g, n in zip(grads, numeric):
            assert np.max(np.abs(g - n) / np.maximum(np.abs(n), 1e-3)) < 1e-4


def test_take_ops_gradients():
    r = np.random.default_rng(0)
    m = Tensor(r.normal(size=(5, 7)), requires_grad=True)
    rows = np.array([0, 2, 2, 4])
    cols = np.array([1, 3, 3, 6])
    with Tape() as tape:
        loss = nc.sum_all(nc.take_pairs(m, rows, cols))
        tape.backward(loss)
    expected = np.zeros((5, 7))
    np.add.at(expected, (rows, cols), 1.0)
    np.testing.assert_array_equal(m.grad, expected)


def test_exact_reductions_matches_default_closely(rng):
    x = Tensor(rng.normal(size=(3, 64)) * 3)
    default = nc.softmax_rows(x).data
    with nc.exact_reductions():
        exact = nc.softmax_rows(x).data
    np.testing.assert_allclose(default, exact, rtol=1e-12, atol=1e-15)


def test_flop_counter_monotone_and_resettable(rng):
    nc.flops.reset()
    with nc.flops.counting():
        with nc.flops.phase("head"):
            nc.matmul(Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))))
        first = nc.flops.total()
        with nc.flops.phase("head"):
            nc.matmul(Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))))
        assert nc.flops.total() > first
    nc.flops.reset()
    assert nc.flops.total() == 0


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(ContractViolation):
            with Tape():
                pass
