"""Tests for the network building blocks against direct-formula oracles."""

import math

import numpy as np
import pytest

from fullsleepnet import tensor as T
from fullsleepnet.layers import (
    AttentionParams,
    ConvBlockParams,
    HeadParams,
    LSTMParams,
    attention_forward,
    bilstm_forward,
    conv_block_forward,
    segmentation_heads_forward,
)


def param(arr, scale=1.0):
    return T.Tensor(np.asarray(arr, dtype=np.float64) * scale, requires_grad=True)


def make_block(rng, cin, cf, k1=5, k2=3, zero_bias=False):
    bias = np.zeros if zero_bias else (lambda n: rng.normal(size=n) * 0.1)
    return ConvBlockParams(
        kernels_large=param(rng.normal(size=(k1, cin, cf)), 0.3),
        bias_large=param(bias(cf)),
        kernels_small=param(rng.normal(size=(k2, cf, cf)), 0.3),
        bias_small=param(bias(cf)),
    )


def make_lstm(rng, d, h):
    return LSTMParams(
        w_x=param(rng.normal(size=(d, 4 * h)), 0.4),
        w_h=param(rng.normal(size=(h, 4 * h)), 0.4),
        b=param(rng.normal(size=4 * h), 0.1),
    )


class TestConvBlock:
    def test_shape_contract(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(256, 1)))
        out = conv_block_forward(x, make_block(rng, 1, 32))
        assert out.shape == (128, 32)

    def test_zero_input_zero_bias(self):
        rng = np.random.default_rng(1)
        out = conv_block_forward(T.Tensor(np.zeros((16, 2))), make_block(rng, 2, 3, zero_bias=True))
        np.testing.assert_allclose(out.data, np.zeros((8, 3)))

    def test_eight_blocks_divide_by_256(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.normal(size=(2 ** 14, 1)))
        cin = 1
        for _ in range(8):
            x = conv_block_forward(x, make_block(rng, cin, 2))
            cin = 2
        assert x.shape == (2 ** 6, 2)

    def test_odd_length_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            conv_block_forward(T.Tensor(np.zeros((15, 1))), make_block(rng, 1, 2))

    def test_kernel_order_validated(self):
        with pytest.raises(ValueError):
            ConvBlockParams(
                kernels_large=param(np.zeros((3, 1, 2))),
                bias_large=param(np.zeros(2)),
                kernels_small=param(np.zeros((5, 2, 2))),
                bias_small=param(np.zeros(2)),
            )


class TestBiLstm:
    def test_zero_fixed_point(self):
        d, h = 3, 4
        zero = LSTMParams(
            w_x=param(np.zeros((d, 4 * h))),
            w_h=param(np.zeros((h, 4 * h))),
            b=param(np.zeros(4 * h)),
        )
        out = bilstm_forward(T.Tensor(np.zeros((6, d))), zero, zero)
        np.testing.assert_allclose(out.data, np.zeros((6, 2 * h)))

    def test_single_step_width(self):
        rng = np.random.default_rng(4)
        fwd, bwd = make_lstm(rng, 3, 5), make_lstm(rng, 3, 5)
        out = bilstm_forward(T.Tensor(rng.normal(size=(1, 3))), fwd, bwd)
        assert out.shape == (1, 10)
        # with one step both directions see the same (empty) context
        same = bilstm_forward(T.Tensor(out.data[:, :3].copy()), fwd, fwd)
        np.testing.assert_allclose(same.data[:, :5], same.data[:, 5:], atol=1e-15)

    def test_matches_scalar_oracle_three_steps(self):
        rng = np.random.default_rng(5)
        d, h = 2, 2
        fwd, bwd = make_lstm(rng, d, h), make_lstm(rng, d, h)
        x = rng.normal(size=(3, d))

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        def run_dir(xs, p):
            hid = [0.0] * h
            cell = [0.0] * h
            outs = []
            for t in range(xs.shape[0]):
                z = [
                    sum(xs[t, a] * p.w_x.data[a, j] for a in range(d))
                    + sum(hid[u] * p.w_h.data[u, j] for u in range(h))
                    + p.b.data[j]
                    for j in range(4 * h)
                ]
                nh, nc = [0.0] * h, [0.0] * h
                for u in range(h):
                    nc[u] = sig(z[h + u]) * cell[u] + sig(z[u]) * math.tanh(z[3 * h + u])
                    nh[u] = sig(z[2 * h + u]) * math.tanh(nc[u])
                hid, cell = nh, nc
                outs.append(hid)
            return np.array(outs)

        expected = np.concatenate([run_dir(x, fwd), run_dir(x[::-1], bwd)[::-1]], axis=1)
        out = bilstm_forward(T.Tensor(x), fwd, bwd)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_time_reversal_equivariance(self):
        rng = np.random.default_rng(6)
        fwd, bwd = make_lstm(rng, 3, 4), make_lstm(rng, 3, 4)
        x = rng.normal(size=(9, 3))
        base = bilstm_forward(T.Tensor(x), fwd, bwd).data
        swapped = bilstm_forward(T.Tensor(x[::-1].copy()), bwd, fwd).data
        reference = np.concatenate([base[:, 4:], base[:, :4]], axis=1)[::-1]
        np.testing.assert_array_equal(swapped, reference)

    def test_input_width_mismatch(self):
        rng = np.random.default_rng(7)
        p = make_lstm(rng, 3, 4)
        with pytest.raises(ValueError):
            bilstm_forward(T.Tensor(np.zeros((5, 2))), p, p)


class TestAttention:
    def test_constant_hidden_states_uniform_alpha(self):
        rng = np.random.default_rng(8)
        d, steps = 4, 6
        h = T.Tensor(np.tile(rng.normal(size=d), (steps, 1)))
        p = AttentionParams(w=param(rng.normal(size=(d, 1))), b=param(rng.normal(size=1)))
        h_tilde, alpha = attention_forward(h, p)
        np.testing.assert_allclose(alpha.data, np.full(steps, 1.0 / steps), atol=1e-12)
        np.testing.assert_allclose(h_tilde.data, 2.0 * h.data, atol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(9)
        d, steps = 3, 3
        hmat = rng.normal(size=(steps, d))
        w = rng.normal(size=(d, 1))
        b = rng.normal(size=1)
        s = np.tanh(hmat @ w + b)[:, 0]
        e = np.exp(s - s.max())
        alpha = e / e.sum()
        context = (alpha[:, None] * hmat).sum(axis=0)
        expected = hmat + context

        h_tilde, got_alpha = attention_forward(
            T.Tensor(hmat), AttentionParams(w=param(w), b=param(b))
        )
        np.testing.assert_allclose(got_alpha.data, alpha, atol=1e-12)
        np.testing.assert_allclose(h_tilde.data, expected, atol=1e-12)

    def test_alpha_sums_to_one(self):
        rng = np.random.default_rng(10)
        h = T.Tensor(rng.normal(size=(17, 5)))
        p = AttentionParams(w=param(rng.normal(size=(5, 1))), b=param(np.zeros(1)))
        _, alpha = attention_forward(h, p)
        assert abs(alpha.data.sum() - 1.0) <= 1e-6


class TestHeads:
    def make_heads(self, rng, d, zero=False):
        gen = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s) * 0.3)
        return HeadParams(
            arousal_kernels=param(gen(1, d, 1)),
            arousal_bias=param(gen(1)),
            stage_kernels=param(gen(1, d, 5)),
            stage_bias=param(gen(5)),
        )

    def test_zero_everything_symmetric(self):
        rng = np.random.default_rng(11)
        arousal, stage = segmentation_heads_forward(
            T.Tensor(np.zeros((8, 4))), self.make_heads(rng, 4, zero=True)
        )
        np.testing.assert_allclose(arousal.data, np.full((8, 1), 0.5))
        np.testing.assert_allclose(stage.data, np.full((8, 5), 0.2))

    def test_stage_rows_sum_to_one(self):
        rng = np.random.default_rng(12)
        _, stage = segmentation_heads_forward(T.Tensor(rng.normal(size=(10, 4))), self.make_heads(rng, 4))
        np.testing.assert_allclose(stage.data.sum(axis=1), np.ones(10), atol=1e-6)

    def test_output_shapes(self):
        rng = np.random.default_rng(13)
        arousal, stage = segmentation_heads_forward(T.Tensor(rng.normal(size=(64, 6))), self.make_heads(rng, 6))
        assert arousal.shape == (64, 1)
        assert stage.shape == (64, 5)
        assert np.all(arousal.data > 0) and np.all(arousal.data < 1)


class TestLayerGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_conv_block_grad_check(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = make_block(rng, 2, 3)
        x = T.Tensor(rng.normal(size=(8, 2)))
        probe = T.Tensor(rng.normal(size=(4, 3)))

        def f():
            return T.reduce_sum(T.mul(conv_block_forward(x, p), probe))

        params = [p.kernels_large, p.bias_large, p.kernels_small, p.bias_small]
        assert T.grad_check(f, params, rng=rng) <= 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_bilstm_grad_check(self, seed):
        rng = np.random.default_rng(200 + seed)
        fwd, bwd = make_lstm(rng, 2, 3), make_lstm(rng, 2, 3)
        x = T.Tensor(rng.normal(size=(5, 2)))
        probe = T.Tensor(rng.normal(size=(5, 6)))

        def f():
            return T.reduce_sum(T.mul(bilstm_forward(x, fwd, bwd), probe))

        params = [fwd.w_x, fwd.w_h, fwd.b, bwd.w_x, bwd.w_h, bwd.b]
        assert T.grad_check(f, params, rng=rng) <= 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_grad_check(self, seed):
        rng = np.random.default_rng(300 + seed)
        p = AttentionParams(w=param(rng.normal(size=(4, 1))), b=param(rng.normal(size=1)))
        h = T.Tensor(rng.normal(size=(6, 4)))
        probe = T.Tensor(rng.normal(size=(6, 4)))

        def f():
            h_tilde, _ = attention_forward(h, p)
            return T.reduce_sum(T.mul(h_tilde, probe))

        assert T.grad_check(f, [p.w, p.b], rng=rng) <= 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_heads_grad_check(self, seed):
        rng = np.random.default_rng(400 + seed)
        heads = TestHeads().make_heads(rng, 3)
        h = T.Tensor(rng.normal(size=(6, 3)))
        pa = T.Tensor(rng.normal(size=(6, 1)))
        ps = T.Tensor(rng.normal(size=(6, 5)))

        def f():
            arousal, stage = segmentation_heads_forward(h, heads)
            return T.add(
                T.reduce_sum(T.mul(arousal, pa)),
                T.reduce_sum(T.mul(stage, ps)),
            )

        params = [heads.arousal_kernels, heads.arousal_bias, heads.stage_kernels, heads.stage_bias]
        assert T.grad_check(f, params, rng=rng) <= 1e-4
