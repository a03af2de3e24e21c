"""
Tests for the gated linear attention cell: gates, recurrent and chunked
scans, their agreement, and the output path.
"""
import numpy as np
import pytest

from gla import (ChunkSpec, Gates, GatedLinearAttention, default_heads, gla_forward, gla_gates,
                 gla_output, gla_scan, gla_scan_chunked, merge_heads, safe_log_decay,
                 split_heads)
from linear_attention import lin_attn_simple
from tensor import ConfigError, ShapeError, Tensor, grad_check, grad_check_params, tsum


def _inputs(rng, lead, length, d_k, d_v):
    q = Tensor(rng.standard_normal(lead + (length, d_k)))
    k = Tensor(rng.standard_normal(lead + (length, d_k)))
    v = Tensor(rng.standard_normal(lead + (length, d_v)))
    gates = Gates(Tensor(-rng.uniform(0.0, 0.5, lead + (length, d_k))),
                  Tensor(-rng.uniform(0.0, 0.5, lead + (length, d_v))))
    return q, k, v, gates


@pytest.fixture
def cell(rng):
    return GatedLinearAttention(16, 8, 8, heads=2, tau=16.0, chunk=4, rng=rng)


class TestGates:
    def test_gates_lie_in_unit_interval(self, cell, rng):
        alpha, beta, matrix = gla_gates(Tensor(rng.standard_normal((3, 16)) * 10), cell)
        assert np.all((alpha.data > 0) & (alpha.data <= 1))
        assert np.all((beta.data > 0) & (beta.data <= 1))
        assert matrix.shape == (3, 8, 8)

    def test_temperature_pushes_gates_towards_one(self, rng):
        x = Tensor(rng.standard_normal((4, 16)))
        cold = GatedLinearAttention(16, 8, 8, tau=1.0, rng=np.random.default_rng(0))
        warm = GatedLinearAttention(16, 8, 8, tau=16.0, rng=np.random.default_rng(0))
        assert gla_gates(x, warm).alpha.data.min() > gla_gates(x, cold).alpha.data.min()

    def test_zero_projections_give_quarter_gates(self, rng):
        cell = GatedLinearAttention(8, 4, 4, tau=1.0, rng=rng)
        for proj in (cell.alpha_proj, cell.beta_proj):
            proj.weight.data[:] = 0.0
            proj.bias.data[:] = 0.0
        matrix = gla_gates(Tensor(rng.standard_normal((5, 8))), cell).matrix
        np.testing.assert_allclose(matrix.data, 0.25, rtol=1e-12)

    def test_large_bias_saturates_gates(self, rng):
        cell = GatedLinearAttention(8, 4, 4, tau=1.0, rng=rng)
        for proj in (cell.alpha_proj, cell.beta_proj):
            proj.weight.data[:] = 0.0
            proj.bias.data[:] = 30.0
        matrix = gla_gates(Tensor(rng.standard_normal((5, 8))), cell).matrix
        np.testing.assert_allclose(matrix.data, 1.0, atol=1e-12)

    def test_temperature_two_takes_square_root(self, rng):
        x = Tensor(rng.standard_normal((4, 16)))
        plain = GatedLinearAttention(16, 8, 8, tau=1.0, rng=np.random.default_rng(3))
        soft = GatedLinearAttention(16, 8, 8, tau=2.0, rng=np.random.default_rng(3))
        np.testing.assert_allclose(gla_gates(x, soft).alpha.data,
                                   np.sqrt(gla_gates(x, plain).alpha.data), rtol=1e-12)
        np.testing.assert_allclose(gla_gates(x, soft).matrix.data,
                                   np.sqrt(gla_gates(x, plain).matrix.data), rtol=1e-12)

    def test_matrix_is_outer_product(self, rng):
        gates = _inputs(rng, (), 5, 3, 2)[3]
        expected = np.einsum("tk,tv->tkv", gates.alpha.data, gates.beta.data)
        np.testing.assert_allclose(gates.matrix.data, expected)


class TestScans:
    @pytest.mark.parametrize("M", [1, 3, 4, 7, 16, 64])
    def test_chunked_matches_recurrent(self, rng, M):
        q, k, v, gates = _inputs(rng, (2, 3), 16, 4, 5)
        recurrent = gla_scan(q, k, v, gates.matrix).data
        chunked = gla_scan_chunked(q, k, v, gates, ChunkSpec(M)).data
        np.testing.assert_allclose(chunked, recurrent, rtol=1e-9, atol=1e-9)

    def test_unit_gates_reduce_to_linear_attention(self, rng):
        q, k, v, _ = _inputs(rng, (), 9, 3, 4)
        ones = Tensor(np.ones((9, 3, 4)))
        np.testing.assert_allclose(gla_scan(q, k, v, ones).data, lin_attn_simple(q, k, v).data,
                                   atol=1e-10)
        zero_logs = Gates(Tensor(np.zeros((9, 3))), Tensor(np.zeros((9, 4))))
        np.testing.assert_allclose(gla_scan_chunked(q, k, v, zero_logs, ChunkSpec(4)).data,
                                   lin_attn_simple(q, k, v).data, atol=1e-10)

    def test_zero_gates_forget_history(self, rng):
        q, k, v, _ = _inputs(rng, (), 6, 3, 2)
        out = gla_scan(q, k, v, Tensor(np.zeros((6, 3, 2)))).data
        local = np.einsum("tk,tk,tv->tv", q.data, k.data, v.data)
        np.testing.assert_allclose(out, local, atol=1e-12)

    def test_single_token(self, rng):
        q, k, v, gates = _inputs(rng, (1,), 1, 2, 2)
        out = gla_scan_chunked(q, k, v, gates, ChunkSpec(8)).data
        np.testing.assert_allclose(out[0, 0], (q.data[0, 0] @ k.data[0, 0]) * v.data[0, 0])

    def test_chunked_gradients(self, rng):
        _, k, v, gates = _inputs(rng, (1,), 6, 2, 3)
        report = grad_check(lambda q: tsum(gla_scan_chunked(q, k, v, gates, ChunkSpec(4))),
                            rng.standard_normal((1, 6, 2)))
        assert report.passed, report

    def test_chunk_spec_must_be_positive(self):
        with pytest.raises(ConfigError):
            ChunkSpec(0)

    def test_gate_shape_mismatch(self, rng):
        q, k, v, _ = _inputs(rng, (), 4, 2, 3)
        with pytest.raises(ShapeError):
            gla_scan(q, k, v, Tensor(np.ones((4, 3, 3))))

    def test_harsh_decay_matches_recurrent(self, rng):
        q, k, v, _ = _inputs(rng, (), 64, 2, 2)
        tiny = Gates(Tensor(np.full((64, 2), np.log(1e-5))), Tensor(np.full((64, 2), np.log(1e-5))))
        assert 64 * -np.log(1e-5) > safe_log_decay(np.float64)
        recurrent = gla_scan(q, k, v, tiny.matrix).data
        chunked = gla_scan_chunked(q, k, v, tiny, ChunkSpec(64)).data
        assert np.all(np.isfinite(chunked))
        np.testing.assert_allclose(chunked, recurrent, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("M", [5, 16])
    def test_harsh_gates_with_batch_axes(self, rng, M):
        q, k, v, _ = _inputs(rng, (2, 3), 16, 3, 2)
        harsh = Gates(Tensor(-rng.uniform(50.0, 100.0, (2, 3, 16, 3))),
                      Tensor(-rng.uniform(0.0, 0.5, (2, 3, 16, 2))))
        recurrent = gla_scan(q, k, v, harsh.matrix).data
        chunked = gla_scan_chunked(q, k, v, harsh, ChunkSpec(M)).data
        np.testing.assert_allclose(chunked, recurrent, rtol=1e-9, atol=1e-12)

    def test_pairwise_path_in_float32(self, rng):
        q, k, v, gates = _inputs(rng, (), 48, 3, 3)
        steep = Gates(gates.log_alpha * 8.0, gates.log_beta * 8.0)
        expected = gla_scan(q, k, v, steep.matrix).data
        as32 = [Tensor(t.data.astype(np.float32)) for t in (q, k, v)]
        steep32 = Gates(Tensor(steep.log_alpha.data.astype(np.float32)),
                        Tensor(steep.log_beta.data.astype(np.float32)))
        chunked = gla_scan_chunked(*as32, steep32, ChunkSpec(48)).data
        assert chunked.dtype == np.float32
        np.testing.assert_allclose(chunked, expected, rtol=1e-4, atol=1e-4)

    def test_pairwise_path_gradients(self, rng):
        _, k, v, _ = _inputs(rng, (1,), 8, 2, 2)
        harsh = Gates(Tensor(np.full((1, 8, 2), -120.0)), Tensor(np.full((1, 8, 2), -0.1)))
        report = grad_check(lambda q: tsum(gla_scan_chunked(q, k, v, harsh, ChunkSpec(8))),
                            rng.standard_normal((1, 8, 2)))
        assert report.passed, report


class TestOutputPath:
    def test_zero_output_projection_gives_zero(self, cell, rng):
        cell.o_proj.weight.data[:] = 0.0
        y = gla_output(Tensor(rng.standard_normal((6, 8))), Tensor(rng.standard_normal((6, 16))),
                       cell)
        np.testing.assert_array_equal(y.data, 0.0)

    def test_output_gradients(self, cell, rng):
        x = Tensor(rng.standard_normal((5, 16)))
        w = rng.standard_normal((5, 16))
        report = grad_check(lambda o: tsum(gla_output(o, x, cell) * w),
                            rng.standard_normal((5, 8)))
        assert report.passed, report
        o = Tensor(rng.standard_normal((5, 8)))
        report = grad_check(lambda x: tsum(gla_output(o, x, cell) * w),
                            rng.standard_normal((5, 16)))
        assert report.passed, report

    def test_shape_mismatch(self, cell, rng):
        with pytest.raises(ShapeError):
            gla_output(Tensor(np.zeros((6, 4))), Tensor(np.zeros((6, 16))), cell)


class TestCell:
    def test_modes_agree(self, cell, rng):
        x = Tensor(rng.standard_normal((2, 10, 16)))
        np.testing.assert_allclose(cell(x, mode="chunked").data, cell(x, mode="recurrent").data,
                                   rtol=1e-9, atol=1e-10)

    def test_causality(self, cell, rng):
        x = rng.standard_normal((1, 8, 16))
        changed = x.copy()
        changed[0, 5:] += 1.0
        a, b = cell(Tensor(x)).data, cell(Tensor(changed)).data
        np.testing.assert_allclose(a[0, :5], b[0, :5], atol=1e-12)
        assert not np.allclose(a[0, 5:], b[0, 5:])

    @pytest.mark.parametrize("mode", ["recurrent", "chunked"])
    def test_parameter_gradients(self, rng, mode):
        cell = GatedLinearAttention(8, 4, 4, heads=2, tau=4.0, mode=mode, chunk=3, rng=rng)
        x = Tensor(rng.standard_normal((1, 7, 8)))
        w = rng.standard_normal((1, 7, 8))
        reports = grad_check_params(lambda: tsum(gla_forward(x, cell, mode) * w),
                                    dict(cell.named_parameters()))
        assert set(reports) == {"q_proj.weight", "k_proj.weight", "v_proj.weight",
                                "alpha_proj.weight", "alpha_proj.bias", "beta_proj.weight",
                                "beta_proj.bias", "r_proj.weight", "r_proj.bias",
                                "o_proj.weight"}
        for name, report in reports.items():
            assert report.passed, (name, report)

    def test_head_split_round_trip(self, rng):
        t = Tensor(rng.standard_normal((2, 5, 12)))
        heads = split_heads(t, 3)
        assert heads.shape == (2, 3, 5, 4)
        np.testing.assert_array_equal(merge_heads(heads).data, t.data)

    def test_default_heads(self):
        assert default_heads(384, 72, 72) == 6
        assert default_heads(32, 16, 16) == 1
        assert default_heads(1152, 216, 216) == 18

    def test_bad_configuration(self):
        with pytest.raises(ConfigError):
            GatedLinearAttention(16, 8, 8, tau=0.0)
        with pytest.raises(ConfigError):
            GatedLinearAttention(16, 8, 8, mode="parallel")
        with pytest.raises(ConfigError):
            GatedLinearAttention(16, 8, 8, heads=3)

    def test_width_mismatch(self, cell, rng):
        with pytest.raises(ShapeError):
            cell(Tensor(rng.standard_normal((1, 4, 8))))
