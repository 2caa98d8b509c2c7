"""Forward semantics of the tensor-engine operators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import voxelseg.kernel.ops as ops
from voxelseg.errors import ShapeError
from voxelseg.kernel import (
    Tape,
    add,
    backward,
    channel_dropout,
    concat_channels,
    conv3d,
    conv3d_transpose,
    elu,
    instance_norm,
    make_rng,
    mul,
    softmax_channels,
    split_rng,
    tensor,
    tsum,
    using_dtype,
)

from oracles import conv3d_as_matrix, conv3d_loops


def rand(shape, seed=0, scale=1.0):
    return (np.random.default_rng(seed).standard_normal(shape) * scale).astype(np.float32)


class TestConv3d:
    def test_delta_kernel_is_channel_sum_plus_bias(self):
        x = tensor(rand((2, 3, 4, 4, 4), seed=1))
        w = np.zeros((2, 3, 3, 3, 3), dtype=np.float32)
        w[:, :, 1, 1, 1] = 1.0
        b = tensor(np.array([0.5, -1.0], dtype=np.float32))
        out = conv3d(x, tensor(w), b, stride=1, pad=1)
        want = x.data.sum(axis=1, keepdims=True) + b.data[None, :, None, None, None]
        np.testing.assert_allclose(out.data, np.broadcast_to(want, out.shape), rtol=1e-5)

    def test_all_ones_center_tap_is_27(self):
        x = tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
        w = tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
        b = tensor(np.zeros(1, dtype=np.float32))
        out = conv3d(x, w, b, stride=1, pad=1)
        oracle = conv3d_loops(x.data, w.data, b.data, stride=1, pad=1)
        assert out.data[0, 0, 1, 1, 1] == pytest.approx(27.0)
        np.testing.assert_allclose(out.data, oracle, rtol=1e-5)

    def test_stride2_halves_even_dims(self):
        x = tensor(rand((1, 2, 6, 6, 6), seed=2))
        w = tensor(rand((3, 2, 3, 3, 3), seed=3, scale=0.2))
        b = tensor(np.zeros(3, dtype=np.float32))
        out = conv3d(x, w, b, stride=2, pad=1)
        assert out.shape == (1, 3, 3, 3, 3)
        np.testing.assert_allclose(out.data, conv3d_loops(x.data, w.data, b.data, 2, 1), rtol=1e-4, atol=1e-5)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv3d(tensor(rand((1, 2, 4, 4, 4))), tensor(rand((1, 3, 3, 3, 3))), None)

    def test_nonpositive_output_raises(self):
        with pytest.raises(ShapeError):
            conv3d(tensor(rand((1, 1, 2, 2, 2))), tensor(rand((1, 1, 3, 3, 3))), None, stride=1, pad=0)

    @settings(max_examples=15, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        c=st.integers(1, 3),
        f=st.integers(1, 3),
        d=st.integers(3, 6),
        stride=st.sampled_from([1, 2]),
    )
    def test_matches_loop_oracle(self, seed, c, f, d, stride):
        x = rand((1, c, d, d, d), seed=seed)
        w = rand((f, c, 3, 3, 3), seed=seed + 1, scale=0.3)
        b = rand((f,), seed=seed + 2)
        out = conv3d(tensor(x), tensor(w), tensor(b), stride=stride, pad=1)
        np.testing.assert_allclose(out.data, conv3d_loops(x, w, b, stride, 1), rtol=1e-4, atol=1e-5)

    def test_im2col_and_direct_paths_agree(self, monkeypatch):
        x = rand((2, 3, 6, 6, 6), seed=5)
        w = rand((4, 3, 3, 3, 3), seed=6, scale=0.3)
        b = rand((4,), seed=7)
        fast = conv3d(tensor(x), tensor(w), tensor(b), stride=1, pad=1).data
        monkeypatch.setattr(ops, "_IM2COL_BYTE_LIMIT", 0)
        direct = conv3d(tensor(x), tensor(w), tensor(b), stride=1, pad=1).data
        np.testing.assert_allclose(fast, direct, rtol=1e-5, atol=1e-6)


class TestConv3dTranspose:
    def test_doubles_spatial_dims(self):
        x = tensor(rand((1, 1, 2, 2, 2)))
        w = tensor(rand((1, 1, 3, 3, 3)))
        out = conv3d_transpose(x, w, None, stride=2)
        assert out.shape == (1, 1, 4, 4, 4)

    def test_is_matrix_adjoint_of_conv(self):
        with using_dtype(np.float64):
            w = np.random.default_rng(0).standard_normal((2, 1, 3, 3, 3))
            m = conv3d_as_matrix(w, (4, 4, 4), stride=2, pad=1)  # maps C*4^3 -> F*2^3
            x = np.random.default_rng(1).standard_normal((1, 2, 2, 2, 2))
            out = conv3d_transpose(tensor(x), tensor(w), None, stride=2)
            want = (m.T @ x.ravel()).reshape(out.shape)
            np.testing.assert_allclose(out.data, want, rtol=1e-10, atol=1e-12)

    def test_compose_with_conv_restores_dims(self):
        x = tensor(rand((1, 2, 8, 8, 8), seed=9))
        w_dn = tensor(rand((4, 2, 3, 3, 3), seed=10, scale=0.2))
        w_up = tensor(rand((4, 2, 3, 3, 3), seed=11, scale=0.2))
        down = conv3d(x, w_dn, None, stride=2, pad=1)
        up = conv3d_transpose(down, w_up, None, stride=2)
        assert up.shape == x.shape

    def test_bias_added_per_output_channel(self):
        x = tensor(np.zeros((1, 1, 2, 2, 2), dtype=np.float32))
        w = tensor(np.zeros((1, 3, 3, 3, 3), dtype=np.float32))
        b = tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32))
        out = conv3d_transpose(x, w, b, stride=2)
        for c in range(3):
            np.testing.assert_allclose(out.data[0, c], b.data[c])


class TestInstanceNorm:
    def test_constant_channel_maps_to_zero(self):
        x = tensor(np.full((1, 2, 3, 3, 3), 7.0, dtype=np.float32))
        out = instance_norm(x, tensor(np.ones(2)), tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_normalizes_stats(self):
        x = tensor(rand((2, 3, 4, 4, 4), seed=12, scale=5.0))
        out = instance_norm(x, tensor(np.ones(3)), tensor(np.zeros(3)))
        for n in range(2):
            for c in range(3):
                ch = out.data[n, c]
                assert abs(ch.mean()) < 1e-5
                assert abs(ch.var() - 1.0) < 1e-3

    def test_gamma_beta_affine(self):
        x = tensor(rand((1, 1, 3, 3, 3), seed=13))
        out = instance_norm(x, tensor(np.array([2.0])), tensor(np.array([0.5])))
        base = instance_norm(x, tensor(np.ones(1)), tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, 2.0 * base.data + 0.5, rtol=1e-5, atol=1e-6)


class TestPointwise:
    def test_elu_endpoints(self):
        x = tensor(np.array([0.0, 1.0, -50.0, -1.0], dtype=np.float32))
        y = elu(x)
        assert y.data[0] == 0.0
        assert y.data[1] == 1.0
        assert y.data[2] == pytest.approx(-1.0, abs=1e-6)
        assert y.data[3] == pytest.approx(np.expm1(-1.0), rel=1e-6)

    def test_softmax_uniform_on_equal_logits(self):
        x = tensor(np.zeros((1, 4, 2, 2, 2), dtype=np.float32))
        s = softmax_channels(x)
        np.testing.assert_allclose(s.data, 0.25, rtol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_softmax_sums_to_one(self, seed):
        x = tensor(rand((1, 4, 3, 3, 3), seed=seed, scale=10.0))
        s = softmax_channels(x)
        assert (s.data >= 0).all()
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-6)

    def test_concat_channels(self):
        a = tensor(rand((1, 2, 2, 2, 2), seed=1))
        b = tensor(rand((1, 3, 2, 2, 2), seed=2))
        out = concat_channels(a, b)
        assert out.shape == (1, 5, 2, 2, 2)
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)


class TestChannelDropout:
    def test_p_zero_is_identity(self):
        x = tensor(rand((2, 4, 2, 2, 2)))
        assert channel_dropout(x, 0.0, None) is x

    def test_zero_rate_and_scaling(self):
        rng = make_rng(42)
        x = tensor(np.ones((100, 100, 1, 1, 1), dtype=np.float32))
        out = channel_dropout(x, 0.5, rng)
        zero_rate = (out.data == 0).mean()
        assert 0.48 <= zero_rate <= 0.52
        survivors = out.data[out.data != 0]
        np.testing.assert_allclose(survivors, 2.0, rtol=1e-6)

    def test_same_stream_reproduces(self):
        x = tensor(rand((4, 8, 2, 2, 2)))
        a = channel_dropout(x, 0.5, split_rng(7, 0)).data
        b = channel_dropout(x, 0.5, split_rng(7, 0)).data
        np.testing.assert_array_equal(a, b)


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        x = tensor(rand((3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(x)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 1.0)

    def test_sum_of_squares_gradient(self):
        x = tensor(rand((5,), seed=3), requires_grad=True)
        with Tape() as tape:
            loss = tsum(mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_unreached_parameter_gets_zero_grad(self):
        x = tensor(rand((2, 2)), requires_grad=True)
        y = tensor(rand((2, 2), seed=4), requires_grad=True)
        with Tape() as tape:
            dead = add(y, y)  # recorded but not feeding the loss
            loss = tsum(x)
        backward(loss, tape)
        assert dead is not None
        np.testing.assert_allclose(y.grad, 0.0)

    def test_loss_must_be_scalar(self):
        x = tensor(rand((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = add(x, x)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_loss_off_tape_raises(self):
        from voxelseg.errors import GraphError

        x = tensor(rand((2, 2)), requires_grad=True)
        with Tape() as tape:
            add(x, x)
        orphan = tsum(x)  # built outside the tape context
        with pytest.raises(GraphError):
            backward(orphan, tape)
