"""
Tests for the analytic FLOP and parameter model.
"""
import numpy as np
import pytest

from bench import DEFAULT_PRESETS
from checks import FLOP_TARGETS
from flops import dit_macs, flops_estimate, reference_config
from model import build_model, load_preset
from tensor import ConfigError, count_macs, no_grad

# preset: (Gflops, ratio against its DiT reference)
PUBLISHED = {
    "dig-s": (4.30, 0.708),
    "dig-b": (17.07, 0.741),
    "dig-l": (61.66, 0.763),
    "dig-xl": (89.40, 0.753),
    "udig-s": (4.10, 0.676),
    "udig-b": (15.20, 0.660),
    "udig-l": (53.57, 0.663),
    "udig-xl": (79.09, 0.666),
}


class TestPresetTable:
    @pytest.mark.parametrize("preset", sorted(PUBLISHED))
    def test_close_to_published(self, preset):
        gflops, ratio = PUBLISHED[preset]
        report = flops_estimate(load_preset(preset))
        assert report.gflops == pytest.approx(gflops, rel=0.05)
        assert report.ratio_vs_dit == pytest.approx(ratio, abs=0.02)

    def test_every_size_preset_is_asserted(self):
        assert set(PUBLISHED) == set(DEFAULT_PRESETS) == set(FLOP_TARGETS)
        assert FLOP_TARGETS == PUBLISHED

    def test_small_parameter_count(self):
        # narrower GLA than the published 33.1M model; see presets/dig-s.toml
        assert flops_estimate(load_preset("dig-s")).params == pytest.approx(28.13e6, rel=1e-3)

    def test_dit_small_baseline(self):
        assert dit_macs(12, 384, 256, 2, 4) / 1e9 == pytest.approx(6.06, rel=0.01)

    def test_ordering(self):
        gflops = [flops_estimate(load_preset(p)).gflops for p in ("dig-s", "dig-b", "dig-l",
                                                                 "dig-xl")]
        assert gflops == sorted(gflops)
        assert flops_estimate(load_preset("udig-s")).gflops < gflops[0]

    def test_report_dict(self):
        row = flops_estimate(load_preset("dig-s")).to_dict()
        assert row["reference"] == "dit-s/2"
        assert row["gflops_2x"] == pytest.approx(2 * row["gflops"], abs=1e-3)
        assert set(row) >= {"name", "macs", "params", "params_m", "ratio_vs_dit"}


class TestScaling:
    def test_smaller_patch_costs_more(self):
        cfg = load_preset("dig-s")
        assert (flops_estimate(cfg.replace(patch_size=1)).gflops
                > 3 * flops_estimate(cfg).gflops)

    def test_quadratic_baseline_outgrows_linear(self):
        cfg = load_preset("dig-s").replace(input_size=128, reference="")
        assert flops_estimate(cfg).ratio_vs_dit < flops_estimate(load_preset("dig-s")).ratio_vs_dit

    def test_ushape_needs_reference(self):
        cfg = load_preset("udig-s").replace(reference="")
        with pytest.raises(ConfigError):
            reference_config(cfg)

    def test_unknown_reference(self):
        with pytest.raises(ConfigError):
            flops_estimate(load_preset("dig-s").replace(reference="dit-h"))


class TestCountedMacs:
    @pytest.mark.parametrize("changes", [{}, {"mode": "recurrent"}, {"scan": "bidirectional"},
                                         {"scan": "four_direction"}, {"dwconv": "none"}])
    def test_forward_matches_estimate(self, toy_cfg, changes):
        cfg = toy_cfg.replace(**changes)
        model = build_model(cfg)
        x = np.zeros((1, cfg.in_channels, cfg.input_size, cfg.input_size))
        with no_grad(), count_macs() as counter:
            model(x, [3], [1])
        assert counter.macs == flops_estimate(cfg).macs
