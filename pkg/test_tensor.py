"""
Tests for the tensor tape: elementwise ops, reductions, shape ops, matrix
products, gradient checking, MAC counting and the tensor blob format.
"""
import threading

import numpy as np
import pytest

from tensor import (DiGError, EvaluationError, IndexRangeError, ShapeError, Tensor, concat,
                    count_macs, cumsum, einsum, elu, exp, flip, gelu, grad_check,
                    grad_check_params, grad_enabled, layer_norm, load_tensors, log, log_sigmoid,
                    masked_fill, matmul, maximum, mean, no_grad, pad_axis, save_tensors, sigmoid,
                    softmax, stack, swish, take, tanh, tsum, where)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestForward:
    def test_broadcast_add_matches_numpy(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
        np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)

    def test_scalars_are_lifted_on_both_sides(self):
        x = Tensor([1.0, 2.0])
        np.testing.assert_array_equal((2.0 - x).data, [1.0, 0.0])
        np.testing.assert_array_equal((x / 2.0).data, [0.5, 1.0])
        np.testing.assert_array_equal((1.0 / x).data, [1.0, 0.5])

    def test_float32_is_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert (x * 2.0 + 1.0).dtype == np.float32
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_log_sigmoid_is_finite_for_large_inputs(self):
        out = log_sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        assert np.all(np.isfinite(out))
        assert out[1] == pytest.approx(np.log(0.5))
        assert out[2] == 0.0

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.standard_normal((4, 7)) * 30)).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)

    def test_layer_norm_zero_mean_unit_variance(self, rng):
        out = layer_norm(Tensor(rng.standard_normal((5, 16)) * 3 + 2)).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-5)

    def test_masked_fill_and_where(self):
        x = Tensor([1.0, 2.0, 3.0])
        mask = np.array([True, False, True])
        np.testing.assert_array_equal(masked_fill(x, mask, 0.0).data, [0.0, 2.0, 0.0])
        np.testing.assert_array_equal(where(mask, x, -x).data, [1.0, -2.0, 3.0])

    def test_cumsum_and_pad(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(cumsum(x, -1).data, [[0, 1, 3], [3, 7, 12]])
        assert pad_axis(x, -1, 2).shape == (2, 5)
        assert pad_axis(x, 0, 0) is x


class TestErrors:
    def test_matmul_inner_dimension(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_matmul_needs_rank_two(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_take_out_of_range(self):
        with pytest.raises(IndexRangeError):
            take(Tensor(np.ones((3, 2))), [0, 3])

    def test_backward_needs_scalar_or_seed(self, rng):
        with pytest.raises(ShapeError):
            (_leaf(rng, 3) * 2.0).backward()

    def test_backward_without_tape(self):
        with pytest.raises(DiGError):
            Tensor([1.0]).backward()

    def test_einsum_rejects_ellipsis(self):
        with pytest.raises(ShapeError):
            einsum("...i,i->...", Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_nan_propagates(self):
        out = exp(Tensor([np.nan, 0.0])) * 2.0
        assert np.isnan(out.data[0]) and out.data[1] == 2.0


class TestBackward:
    @pytest.mark.parametrize("op", [exp, tanh, sigmoid, log_sigmoid, swish, gelu, elu,
                                    lambda x: softmax(x, -1), lambda x: layer_norm(x),
                                    lambda x: flip(x, -1), lambda x: cumsum(x, -1),
                                    lambda x: x.transpose(1, 0), lambda x: x[1:, ::2]])
    def test_unary_ops(self, rng, op):
        weights = Tensor(rng.standard_normal(op(Tensor(np.zeros((3, 4)))).shape))
        report = grad_check(lambda x: tsum(op(x) * weights), rng.standard_normal((3, 4)))
        assert report.passed, report

    def test_log_and_power(self, rng):
        x = rng.uniform(0.5, 2.0, (3, 3))
        assert grad_check(lambda t: tsum(log(t) * t ** 1.5), x).passed

    def test_matmul_broadcast_batch(self, rng):
        b = Tensor(rng.standard_normal((4, 2)))
        assert grad_check(lambda a: tsum(exp(a @ b)), rng.standard_normal((2, 3, 4))).passed

    def test_einsum_contracting(self, rng):
        w = Tensor(rng.standard_normal((5, 9)))
        report = grad_check(lambda a: tsum(tanh(einsum("npd,dp->nd", a, w))),
                            rng.standard_normal((2, 9, 5)))
        assert report.passed

    def test_advanced_index_accumulates_repeats(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        tsum(x[np.array([0, 0, 2])]).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_concat_stack(self, rng):
        other = Tensor(rng.standard_normal((2, 3)))
        report = grad_check(lambda a: tsum(stack([a, other], 0) * 2.0)
                            + tsum(concat([a, a * a], -1)), rng.standard_normal((2, 3)))
        assert report.passed

    def test_maximum_passes_gradient_above_floor(self):
        x = Tensor([0.5, 2.0], requires_grad=True)
        tsum(maximum(x, 1.0)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_shared_subexpression_gets_both_paths(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y).backward()
        assert x.grad[0] == 12.0

    def test_mean_reduction_axes(self, rng):
        assert grad_check(lambda a: tsum(mean(a, axis=(0, 2)) ** 2),
                          rng.standard_normal((2, 3, 4))).passed


class TestGradCheck:
    def test_zero_adjoint_is_flagged(self):
        report = grad_check(lambda x: tsum(x) * 0.0, np.ones(3))
        assert report.zero_adjoint and report.passed

    def test_nan_function_raises(self):
        with pytest.raises(EvaluationError):
            grad_check(lambda x: tsum(log(x)), -np.ones(2))

    def test_wrong_gradient_is_caught(self):
        def bad_square(x):
            out = x * x
            out._backward = lambda g: x._accumulate(g * x.data)
            return tsum(out)
        assert not grad_check(bad_square, np.array([1.0, 2.0])).passed

    def test_params_are_restored(self, rng):
        w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        before = w.data.copy()
        x = Tensor(rng.standard_normal((4, 3)))
        reports = grad_check_params(lambda: tsum(tanh(x @ w)), {"w": w})
        assert reports["w"].passed and reports["w"].checked == 6
        np.testing.assert_array_equal(w.data, before)


class TestModes:
    def test_no_grad_records_nothing(self, rng):
        x = _leaf(rng, 3)
        with no_grad():
            y = exp(x)
        assert not y.requires_grad and grad_enabled()

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = grad_enabled()

        with no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen["enabled"] is True

    def test_count_macs_matmul_and_einsum(self, rng):
        a, b = Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5)))
        with count_macs() as counter:
            a @ b
            einsum("ij,j->i", Tensor(np.ones((6, 7))), Tensor(np.ones(7)))
            einsum("i,j->ij", Tensor(np.ones(3)), Tensor(np.ones(2)))
        assert counter.macs == 2 * 3 * 5 * 4 + 6 * 7

    def test_nested_counters(self):
        with count_macs() as outer:
            Tensor(np.ones((2, 2))) @ Tensor(np.ones((2, 2)))
            with count_macs() as inner:
                Tensor(np.ones((1, 3))) @ Tensor(np.ones((3, 1)))
        assert inner.macs == 3 and outer.macs == 11


class TestSerialization:
    def test_blob_round_trip(self, tmp_path, rng):
        named = {"a.weight": rng.standard_normal((3, 4)), "b": np.arange(5.0),
                 "scalar": np.array(2.5)}
        save_tensors(tmp_path / "t.bin", named)
        loaded = load_tensors(tmp_path / "t.bin")
        assert set(loaded) == set(named)
        for name, value in named.items():
            np.testing.assert_array_equal(loaded[name], value)

    def test_header_is_little_endian_length(self, tmp_path):
        save_tensors(tmp_path / "t.bin", {"x": np.zeros(2)})
        blob = (tmp_path / "t.bin").read_bytes()
        length = int.from_bytes(blob[:4], "little")
        assert blob[4:4 + length].startswith(b"{") and len(blob) == 4 + length + 16

    def test_truncated_blob(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x01")
        with pytest.raises(DiGError):
            load_tensors(tmp_path / "bad.bin")
