"""
Checks module for the DiG desk implementation.
A quick invariant suite over the kernels, the block structure, the scan
operation counts, the FLOP estimator and the diffusion schedule. The CLI's
`check` subcommand runs it and prints one JSON line per check.
"""
import logging
from dataclasses import dataclass

import numpy as np

from dig_block import DiGBlock
from diffusion import NoiseSchedule, normal_kl
from flops import flops_estimate, dit_macs
from gla import ChunkSpec, Gates, gla_scan, gla_scan_chunked
from linear_attention import (FeatureMap, lin_attn_normalized, lin_attn_normalized_streaming,
                              lin_attn_simple)
from model import build_model, load_preset
from srem import DepthwiseConv2d, OpCounter, ReorientSchedule
from tensor import DiGError, Tensor, count_macs, grad_check_params, mean, no_grad

logger = logging.getLogger(__name__)

# published Gflops / ratio targets and their tolerances
FLOP_TARGETS = {
    "dig-s": (4.30, 0.708),
    "dig-b": (17.07, 0.741),
    "dig-l": (61.66, 0.763),
    "dig-xl": (89.40, 0.753),
    "udig-s": (4.10, 0.676),
    "udig-b": (15.20, 0.660),
    "udig-l": (53.57, 0.663),
    "udig-xl": (79.09, 0.666),
}
DIT_S2_GFLOPS = 6.06
GFLOPS_TOL = 0.05
RATIO_TOL = 0.02
OP_COUNTS = {"block": (2, 0), "bidirectional": (3, 1), "four_direction": (13, 3)}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict

    def to_dict(self):
        return {"check": self.name, "passed": bool(self.passed), **self.detail}


def _random_gates(rng, length, d_k, d_v, depth=0.5):
    return Gates(Tensor(-rng.uniform(0.0, depth, (length, d_k))),
                 Tensor(-rng.uniform(0.0, depth, (length, d_v))))


def check_chunked_equivalence(cases=200, seed=0):
    """Chunked and recurrent scans agree to 1e-9 on random cases.

    Every fourth case draws log-gates down to -30 per token, so long chunks
    leave the factored range.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    harsh = 0
    for n in range(cases):
        length = int(rng.integers(1, 65))
        d_k, d_v = (int(v) for v in rng.integers(1, 33, 2))
        m = int(rng.choice([1, 2, 4, 8, length]))
        q = Tensor(rng.standard_normal((length, d_k)))
        k = Tensor(rng.standard_normal((length, d_k)))
        v = Tensor(rng.standard_normal((length, d_v)))
        depth = 30.0 if n % 4 == 3 else 0.5
        harsh += int(depth > 1.0)
        gates = _random_gates(rng, length, d_k, d_v, depth)
        with no_grad():
            a = gla_scan(q, k, v, gates.matrix).data
            b = gla_scan_chunked(q, k, v, gates, ChunkSpec(m)).data
        worst = max(worst, float(np.abs(a - b).max()))
    return CheckResult("chunked_equivalence", worst <= 1e-9,
                       {"cases": cases, "harsh_cases": harsh, "max_abs_err": worst})


def check_reductions(seed=0):
    """Unit gates reduce GLA to plain linear attention; both normalized forms agree."""
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.standard_normal((24, 6))) for _ in range(3))
    with no_grad():
        ones = Tensor(np.ones((24, 6, 6)))
        unit = float(np.abs(gla_scan(q, k, v, ones).data - lin_attn_simple(q, k, v).data).max())
        phi = FeatureMap("elu_plus_one")
        normalized = float(np.abs(lin_attn_normalized(q, k, v, phi).data
                                  - lin_attn_normalized_streaming(q, k, v, phi).data).max())
    return CheckResult("reductions", unit <= 1e-12 and normalized <= 1e-12,
                       {"unit_gate_err": unit, "normalized_err": normalized})


def _perturb(model, rng, scale=0.05):
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape)


def check_gradients(max_entries=4, seed=0):
    """Finite differences on every parameter tensor of a two-block toy model."""
    cfg = load_preset("toy-xs")
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    _perturb(model, rng)
    shape = (2, cfg.in_channels, cfg.input_size, cfg.input_size)
    x = Tensor(rng.standard_normal(shape))
    r_noise, r_cov = Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))
    t, y = np.array([0, 37]), np.array([1, 3])

    # random projection of both heads; the training loss detaches part of the graph
    def loss_fn():
        noise, cov = model(x, t, y)
        return mean(noise * r_noise) + mean(cov * r_cov)

    reports = grad_check_params(loss_fn, dict(model.named_parameters()),
                                max_entries=max_entries, rng=rng)
    worst_name = max(reports, key=lambda n: reports[n].max_rel_err)
    worst = reports[worst_name].max_rel_err
    return CheckResult("gradients", all(r.passed for r in reports.values()),
                       {"tensors": len(reports), "worst": worst_name, "max_rel_err": worst})


def check_structure(seed=0):
    """Identity conv, zero initial prediction, reorientation windows and reading orders."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 16, 8)))
    with no_grad():
        identity = bool(np.array_equal(DepthwiseConv2d(8)(x).data, x.data))
        cfg = load_preset("toy-xs")
        model = build_model(cfg, seed=seed)
        noise, cov = model(rng.standard_normal((2, 1, 8, 8)), [3, 50], [0, 2])
        zero = not np.any(noise.data) and not np.any(cov.data)
    windows = distinct = True
    for side in range(2, 9):
        schedule = ReorientSchedule(12, side * side)
        for first in range(8):
            windows &= bool(np.array_equal(schedule.window_perm(first),
                                           np.arange(side * side)))
            orders = [tuple(schedule.reading_order(first + i)) for i in range(4)]
            distinct &= len(set(orders)) == 4
    return CheckResult("structure", identity and zero and windows and distinct,
                       {"identity_conv": identity, "zero_output": bool(zero),
                        "window_identity": windows, "distinct_orders": distinct})


def check_op_counts(seed=0):
    """Extra matrix and scan operations per block for each scanning strategy."""
    rng = np.random.default_rng(seed)
    counts = {}
    for scan in OP_COUNTS:
        block = DiGBlock(8, 8, 4, 4, scan=scan, chunk=4, rng=rng)
        z = Tensor(rng.standard_normal((1, 16, 8)))
        c = Tensor(rng.standard_normal((1, 8)))
        counter = OpCounter()
        with no_grad():
            block(z, c, c, 0, counter)
        counts[scan] = counter.as_tuple()
    return CheckResult("op_counts", counts == OP_COUNTS,
                       {k: list(v) for k, v in counts.items()})


def check_flops():
    """Published Gflops and DiT ratios, plus instrumented MACs of a toy forward."""
    detail = {}
    ok = True
    for name, (gflops, ratio) in FLOP_TARGETS.items():
        report = flops_estimate(load_preset(name))
        row_ok = (abs(report.gflops - gflops) <= GFLOPS_TOL * gflops
                  and abs(report.ratio_vs_dit - ratio) <= RATIO_TOL)
        detail[name] = [round(report.gflops, 3), round(report.ratio_vs_dit, 4)]
        ok &= row_ok
    dit = dit_macs(12, 384, 256, 2, 4) / 1e9
    detail["dit-s/2"] = round(dit, 3)
    ok &= abs(dit - DIT_S2_GFLOPS) <= GFLOPS_TOL * DIT_S2_GFLOPS
    cfg = load_preset("toy-xs")
    model = build_model(cfg)
    with no_grad(), count_macs() as counter:
        model(np.zeros((1, 1, 8, 8)), [5], [1])
    expected = flops_estimate(cfg).macs
    detail["toy_macs"] = [counter.macs, expected]
    ok &= counter.macs == expected
    return CheckResult("flops", ok, detail)


def check_diffusion():
    """Schedule identity and the closed-form Gaussian KL."""
    s = NoiseSchedule.linear(1000)
    identity = float(np.abs(s.sqrt_alphas_cumprod ** 2 + s.sqrt_one_minus_alphas_cumprod ** 2
                            - 1.0).max())
    kl = normal_kl(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1)).item()
    decreasing = bool(np.all(np.diff(s.alphas_cumprod) < 0))
    return CheckResult("diffusion", identity < 1e-12 and kl == 0.5 and decreasing,
                       {"identity_err": identity, "kl_hand_case": kl,
                        "abar_decreasing": decreasing})


CHECKS = (check_chunked_equivalence, check_reductions, check_gradients, check_structure,
          check_op_counts, check_flops, check_diffusion)


def run_checks(emit=None):
    """Run every check; `emit` receives each result as it completes."""
    results = []
    for check in CHECKS:
        try:
            result = check()
        except DiGError as exc:
            result = CheckResult(check.__name__.removeprefix("check_"), False,
                                 {"error": f"{type(exc).__name__}: {exc}"})
        logger.debug("%s: %s", result.name, "ok" if result.passed else "FAILED")
        results.append(result)
        if emit is not None:
            emit(result)
    return results
