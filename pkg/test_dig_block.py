"""
Tests for the DiG block: adaLN-zero behaviour, SREM placement and scan
strategy bookkeeping.
"""
import numpy as np
import pytest

from conftest import perturb
from dig_block import SREM_POSITIONS, DiGBlock, adaln_modulation, modulate
from srem import OpCounter, reorient
from tensor import ConfigError, ShapeError, Tensor


def _block(rng, **kwargs):
    return DiGBlock(8, 8, 4, 4, chunk=4, rng=rng, **kwargs)


def _conditioning(rng, batch=2):
    return Tensor(rng.standard_normal((batch, 8))), Tensor(rng.standard_normal((batch, 8)))


class TestZeroInit:
    @pytest.mark.parametrize("position", SREM_POSITIONS)
    def test_fresh_block_only_reorients(self, rng, position):
        z = Tensor(rng.standard_normal((2, 16, 8)))
        out = _block(rng, srem_position=position)(z, *_conditioning(rng), 2)
        np.testing.assert_allclose(out.data, reorient(z, 2).data, atol=1e-12)

    def test_causal_block_is_identity(self, rng):
        z = Tensor(rng.standard_normal((2, 16, 8)))
        out = _block(rng, scan="causal")(z, *_conditioning(rng), 0)
        np.testing.assert_allclose(out.data, z.data, atol=1e-12)

    def test_modulation_has_six_parts(self, rng):
        block = _block(rng)
        parts = adaln_modulation(*_conditioning(rng, 3), block.adaln)
        assert len(parts) == 6 and all(p.shape == (3, 8) for p in parts)

    def test_modulate_broadcasts_over_tokens(self):
        x = Tensor(np.ones((2, 4, 3)))
        out = modulate(x, Tensor(np.ones((2, 3))), Tensor(np.full((2, 3), 2.0))).data
        np.testing.assert_array_equal(out, np.full((2, 4, 3), 4.0))


class TestTrainedBlock:
    def test_perturbed_block_mixes_tokens(self, rng):
        block = perturb(_block(rng, scan="causal"), rng)
        z = Tensor(rng.standard_normal((1, 16, 8)))
        out = block(z, *_conditioning(rng, 1), 0).data
        assert not np.allclose(out, z.data)

    def test_srem_position_matters_once_trained(self, rng):
        z = Tensor(rng.standard_normal((1, 16, 8)))
        cond = _conditioning(rng, 1)
        outputs = []
        for position in ("after_ffn", "before_attn"):
            block = perturb(_block(np.random.default_rng(0), srem_position=position),
                            np.random.default_rng(1))
            outputs.append(block(z, *cond, 0).data)
        assert not np.allclose(*outputs)


class TestStrategies:
    @pytest.mark.parametrize("scan, expected", [("block", (2, 0)), ("causal", (0, 0)),
                                                ("bidirectional", (3, 1)),
                                                ("four_direction", (13, 3))])
    def test_extra_operations(self, rng, scan, expected):
        counter = OpCounter()
        _block(rng, scan=scan)(Tensor(rng.standard_normal((1, 16, 8))), *_conditioning(rng, 1),
                               0, counter)
        assert counter.as_tuple() == expected

    @pytest.mark.parametrize("scan", ["bidirectional", "four_direction"])
    def test_multi_direction_blocks_keep_conv_but_not_reorientation(self, rng, scan):
        z = Tensor(rng.standard_normal((2, 16, 8)))
        block = _block(rng, scan=scan, dwconv="random")
        out = block(z, *_conditioning(rng), 2)
        assert not block.reorients
        np.testing.assert_allclose(out.data, block.dwconv(z).data, atol=1e-12)

    def test_unknown_options(self, rng):
        with pytest.raises(ConfigError):
            _block(rng, scan="spiral")
        with pytest.raises(ConfigError):
            _block(rng, dwconv="dilated")
        with pytest.raises(ConfigError):
            _block(rng, srem_position="nowhere")

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            _block(rng)(Tensor(np.ones((1, 16, 4))), *_conditioning(rng, 1), 0)
