import math

import numpy as np
import pytest

from app.core import ops
from app.core.container import decode_tensor, encode_tensor, load_tensor, save_tensor
from app.core.errors import ContractError, DimensionError, FormatError, GeometryError, NumericError
from app.core.gradcheck import grad_check, relative_error
from app.core.parallel import get_num_threads, parallel_map, set_num_threads
from app.core.rng import Rng
from app.core.tensor import Tape, Tensor


def weighted(y, seed=0):
    return ops.sum(ops.mul(y, Tensor(Rng(seed).normal(y.shape))))


def naive_conv(x, w, b, stride, pad):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for i in range(n):
        for o in range(c_out):
            for y in range(oh):
                for x_ in range(ow):
                    patch = xp[i, :, y * stride:y * stride + kh, x_ * stride:x_ * stride + kw]
                    out[i, o, y, x_] = (patch * w[o]).sum() + b[o]
    return out


class TestTape:
    def test_gradient_accumulates_for_reused_input(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            y = ops.sum(ops.mul(x, x))
        tape.backward(y)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_backward_twice_is_contract_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.sum(x)
        tape.backward(y)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ops.sum(x)
        assert not y.requires_grad

    def test_op_outputs_are_read_only(self):
        y = ops.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        with pytest.raises(ValueError):
            y.data[0] = 5.0


class TestElementwise:
    def test_broadcast_add_gradient_is_unbroadcast(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.sum(ops.add(a, b))
        tape.backward(y)
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_mismatched_shapes_raise(self):
        with pytest.raises(DimensionError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_nan_input_raises_numeric_error(self):
        with pytest.raises(NumericError):
            ops.softmax_lastaxis(Tensor(np.array([1.0, np.nan])))

    def test_reshape_and_permute_round_trips_are_exact(self, random_tensor):
        x = random_tensor(2, 3, 4)
        back = ops.reshape(ops.reshape(x, (6, 4)), (2, 3, 4))
        assert np.array_equal(back.data, x.data)
        perm = ops.permute(ops.permute(x, (1, 2, 0)), (2, 0, 1))
        assert np.array_equal(perm.data, x.data)


class TestGradCheck:
    def test_matmul_is_linear_to_machine_precision(self, random_tensor):
        m = random_tensor(4, 3)
        assert grad_check(lambda t: ops.sum(ops.matmul(t, m)), random_tensor(2, 4)) < 1e-8

    def test_softmax_constant_sum_has_zero_gradient(self, random_tensor):
        x = random_tensor(1, 5)
        with Tape() as tape:
            probe = Tensor(x.data, requires_grad=True)
            y = ops.sum(ops.softmax_lastaxis(probe))
        tape.backward(y)
        assert np.abs(probe.grad).max() < 1e-12
        assert grad_check(lambda t: ops.sum(ops.softmax_lastaxis(t)), x) < 1e-2

    @pytest.mark.parametrize("name", ["softmax", "layer_norm", "gelu", "mean", "pool", "scale"])
    def test_ops_pass_gradient_check(self, name, random_tensor):
        gamma, beta = random_tensor(4), random_tensor(4)
        fns = {
            "softmax": (lambda t: weighted(ops.softmax_lastaxis(t)), (3, 4)),
            "layer_norm": (lambda t: weighted(ops.layer_norm(t, gamma, beta)), (3, 4)),
            "gelu": (lambda t: weighted(ops.gelu(t)), (3, 4)),
            "mean": (lambda t: weighted(ops.mean(t, axis=(0, 2))), (2, 3, 4)),
            "pool": (lambda t: weighted(ops.global_avg_pool(t)), (2, 3, 3, 4)),
            "scale": (lambda t: weighted(ops.sub(ops.scale(t, 3.0), t)), (2, 4)),
        }
        fn, shape = fns[name]
        assert grad_check(fn, random_tensor(*shape)) < 1e-4

    def test_grad_check_requires_float64(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: ops.sum(t), Tensor(np.ones(3, dtype=np.float32)))

    def test_grad_check_requires_scalar_function(self, random_tensor):
        with pytest.raises(ContractError):
            grad_check(lambda t: ops.scale(t, 2.0), random_tensor(3))

    def test_relative_error_uses_denominator_floor(self):
        err = relative_error(np.array([0.0]), np.array([1e-10]))
        assert err[0] == pytest.approx(1e-2)


class TestLayerNormGelu:
    def test_layer_norm_normalizes_rows(self, random_tensor):
        x = random_tensor(3, 16, std=5.0)
        y = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-3)

    def test_gelu_reference_points(self):
        y = ops.gelu(Tensor(np.array([0.0, 1.0, 10.0]))).data
        assert y[0] == 0.0
        assert y[1] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))))
        assert y[2] == pytest.approx(10.0)


class TestCrossEntropy:
    def test_matches_manual_value(self):
        logits = np.array([[2.0, 1.0, 0.1]])
        expected = -np.log(np.exp(2.0) / np.exp(logits).sum())
        assert ops.cross_entropy(Tensor(logits), [0]).item() == pytest.approx(expected)

    def test_stable_for_large_logits(self):
        loss = ops.cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0]).item()
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_gradient_check(self, random_tensor):
        assert grad_check(lambda t: ops.cross_entropy(t, [1, 0, 2]), random_tensor(3, 4)) < 1e-4

    def test_label_out_of_range(self, random_tensor):
        with pytest.raises(ContractError):
            ops.cross_entropy(random_tensor(2, 3), [0, 3])


class TestConv2d:
    def test_matches_naive_loop(self, rng):
        x = rng.normal((2, 3, 7, 7))
        w = rng.normal((4, 3, 3, 3))
        b = rng.normal(4)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
        np.testing.assert_allclose(out, naive_conv(x, w, b, 2, 1), atol=1e-10)

    def test_depthwise_matches_per_channel_conv(self, rng):
        x = rng.normal((1, 3, 5, 5))
        w = rng.normal((3, 1, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1, groups=3).data
        for c in range(3):
            ref = naive_conv(x[:, c:c + 1], w[c:c + 1], np.zeros(1), 1, 1)
            np.testing.assert_allclose(out[:, c:c + 1], ref, atol=1e-10)

    def test_stem_output_size(self):
        assert ops.conv_output_size(224, 7, 4, 3) == 56
        assert ops.conv_output_size(56, 2, 2, 0) == 28

    def test_empty_output_is_geometry_error(self):
        with pytest.raises(GeometryError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    @pytest.mark.parametrize("groups", [1, 2])
    def test_gradient_check(self, groups, random_tensor):
        w = random_tensor(3, 2, 3, 3) if groups == 1 else random_tensor(2, 1, 3, 3)
        fn = lambda t: weighted(ops.conv2d(t, w, None, stride=2 if groups == 1 else 1, pad=1,  # noqa: E731
                                           groups=groups))
        assert grad_check(fn, random_tensor(1, 2, 5, 5)) < 1e-4

    def test_threaded_result_is_identical(self, rng):
        x = Tensor(rng.normal((4, 2, 6, 6)))
        w = Tensor(rng.normal((3, 2, 3, 3)))
        previous = get_num_threads()
        try:
            set_num_threads(1)
            serial = ops.conv2d(x, w, pad=1).data
            set_num_threads(4)
            threaded = ops.conv2d(x, w, pad=1).data
        finally:
            set_num_threads(previous)
        assert np.array_equal(serial, threaded)


class TestContainer:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, dtype, tmp_path, rng):
        data = rng.normal((2, 3, 4), dtype=dtype)
        save_tensor(Tensor(data), tmp_path / "t.davt")
        loaded = load_tensor(tmp_path / "t.davt")
        assert loaded.dtype == dtype
        assert np.array_equal(loaded.data, data)

    def test_header_layout(self):
        blob = encode_tensor(np.zeros((2, 5), dtype=np.float64))
        assert blob[:4] == b"DAVT"
        assert blob[6] == 1 and blob[7] == 2
        assert len(blob) == 8 + 16 + 80

    def test_bad_magic(self):
        blob = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            decode_tensor(bytes(blob))

    def test_truncated_payload(self):
        blob = encode_tensor(np.zeros(3, dtype=np.float32))
        with pytest.raises(FormatError):
            decode_tensor(blob[:-1])

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.davt"
        path.write_bytes(encode_tensor(np.zeros(3, dtype=np.float32)) + b"\0")
        with pytest.raises(FormatError):
            load_tensor(path)


class TestRngAndParallel:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(7).normal(10), Rng(7).normal(10))
        assert not np.array_equal(Rng(7).normal(10), Rng(8).normal(10))

    def test_truncated_normal_bounds(self):
        draws = Rng(0).truncated_normal(10000, std=0.02)
        assert np.abs(draws).max() <= 0.04

    def test_parallel_map_preserves_order(self):
        previous = get_num_threads()
        try:
            set_num_threads(3)
            assert parallel_map(lambda i: i * i, list(range(10))) == [i * i for i in range(10)]
        finally:
            set_num_threads(previous)
