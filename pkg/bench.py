"""
Bench module for the DiG desk implementation.
Runtime scaling of chunked gated linear attention against softmax attention,
the peak-memory estimator, the scan-strategy comparison and the analytic
FLOP table. Every kernel is checked against an oracle before it is timed.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flops import flops_estimate
from gla import ChunkSpec, Gates, GatedLinearAttention, gla_scan, gla_scan_chunked
from linear_attention import softmax_attention
from model import ModelConfig, load_preset
from profiler import create_profiler
from srem import OpCounter, scan_4directional, scan_bidirectional, scan_block
from tensor import NumericError, Tensor, log_sigmoid, no_grad, tsum
from utils import write_csv

logger = logging.getLogger(__name__)

METHODS = ("softmax", "gla_chunked")
CSV_COLUMNS = ("method", "T", "D", "M", "median_ms", "p10_ms", "p90_ms", "est_peak_bytes")
DEFAULT_T = (256, 512, 1024, 2048, 4096, 8192, 16384)
STRATEGIES = ("block", "bidirectional", "four_direction")
DEFAULT_PRESETS = ("dig-s", "dig-b", "dig-l", "dig-xl", "udig-s", "udig-b", "udig-l", "udig-xl")


def tokens_for_resolution(resolution, patch_size, vae_factor=8):
    """T = (res / 8 / P)^2 for a latent-space model."""
    side = resolution // vae_factor // patch_size
    return side * side


def estimate_peak_bytes(method, B, T, D, M=64, itemsize=4):
    """Working-set estimate of one attention call.

    softmax holds the [B, T, T] score matrix next to Q, K, V and O; chunked
    GLA holds Q, K, V, O, one M x M chunk score block, one M x d chunk and the
    d x d state.
    """
    io = 4 * B * T * D
    if method == "softmax":
        return (B * T * T + io) * itemsize
    if method == "gla_chunked":
        m = min(M, T)
        return (io + m * m + m * D + D * D) * itemsize
    raise ValueError(f"unknown method {method!r}")


def available_memory_bytes():
    """Free physical memory reported by the OS, or None where sysconf lacks it."""
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (AttributeError, ValueError, OSError):
        return None


def _inputs(rng, B, T, D, dtype):
    q, k, v = (Tensor(rng.standard_normal((B, T, D)) / np.sqrt(D), dtype=dtype)
               for _ in range(3))
    gates = Gates(log_sigmoid(Tensor(rng.standard_normal((B, T, D)) + 2.0, dtype=dtype)) / 16.0,
                  log_sigmoid(Tensor(rng.standard_normal((B, T, D)) + 2.0, dtype=dtype)) / 16.0)
    return q, k, v, gates


def _softmax_oracle(q, k, v):
    scores = q @ k.swapaxes(-1, -2) / np.sqrt(q.shape[-1])
    scores = np.where(np.triu(np.ones(scores.shape[-2:], dtype=bool), 1), -np.inf, scores)
    scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return (scores / scores.sum(axis=-1, keepdims=True)) @ v


def precheck_kernels(D, M, T=64, seed=0, tol=1e-9):
    """f64 equivalence of both benchmarked kernels with their oracles."""
    rng = np.random.default_rng(seed)
    q, k, v, gates = _inputs(rng, 1, T, min(D, 16), np.float64)
    with no_grad():
        chunked = gla_scan_chunked(q, k, v, gates, ChunkSpec(min(M, T)))
        recurrent = gla_scan(q, k, v, gates.matrix)
        soft = softmax_attention(q, k, v, causal=True)
    errors = {
        "gla_chunked": float(np.abs(chunked.data - recurrent.data).max()),
        "softmax": float(np.abs(soft.data - _softmax_oracle(q.data, k.data, v.data)).max()),
    }
    for method, err in errors.items():
        if err > tol:
            raise NumericError(f"{method} kernel disagrees with its oracle (max err {err:.2e})")
    return errors


@dataclass
class ScalingReport:
    """Timings per (method, T), fitted log-log slopes and the crossover length."""

    D: int
    M: int
    batch: int
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    crossover_T: int = None
    precheck: dict = field(default_factory=dict)

    def median(self, method, T):
        for row in self.rows:
            if row["method"] == method and row["T"] == T:
                return row["median_ms"]
        raise KeyError((method, T))

    def summary(self):
        out = asdict(self)
        out.pop("rows")
        return out


def fit_slope(ts, times):
    """Least-squares slope of log(time) against log(T)."""
    if len(ts) < 4:
        raise ValueError("slope fits need at least 4 points")
    slope, _ = np.polyfit(np.log(ts), np.log(times), 1)
    return float(slope)


def _crossover(ts, fast, slow):
    """Smallest T from which `fast` stays faster than `slow`."""
    found = None
    for t, a, b in zip(ts, fast, slow):
        if a < b:
            found = t if found is None else found
        else:
            found = None
    return found


def scaling_run(D=64, M=64, T_list=DEFAULT_T, batch=1, dtype=np.float32, repeats=5, warmup=2,
                backward=False, seed=0, profiler=None):
    """Time softmax attention and chunked GLA across sequence lengths."""
    T_list = list(T_list)
    if T_list != sorted(T_list):
        raise ValueError("T_list must be ascending")
    report = ScalingReport(D, M, batch, precheck=precheck_kernels(D, M, seed=seed))
    profiler = profiler or create_profiler()
    rng = np.random.default_rng(seed)
    spec = ChunkSpec(M)
    kernels = {
        "softmax": lambda q, k, v, g: softmax_attention(q, k, v, causal=True),
        "gla_chunked": lambda q, k, v, g: gla_scan_chunked(q, k, v, g, spec),
    }
    for T in T_list:
        q, k, v, gates = _inputs(rng, batch, T, D, dtype)
        for method, kernel in kernels.items():
            label = f"{method}@T={T}"
            if backward:
                leaves = [Tensor(a.data, requires_grad=True) for a in (q, k, v)]

                def run(leaves=leaves, kernel=kernel):
                    for leaf in leaves:
                        leaf.zero_grad()
                    tsum(kernel(*leaves, gates)).backward()
            else:
                def run(kernel=kernel):
                    with no_grad():
                        kernel(q, k, v, gates)
            profiler.time_call(label, run, warmup=warmup, repeats=repeats)
            stats = profiler.summary(label)
            report.rows.append({"method": method, "T": T, "D": D, "M": M,
                                "median_ms": stats["median_ms"], "p10_ms": stats["p10_ms"],
                                "p90_ms": stats["p90_ms"],
                                "est_peak_bytes": estimate_peak_bytes(
                                    method, batch, T, D, M, np.dtype(dtype).itemsize)})
            logger.info("%s T=%d: %.3f ms", method, T, stats["median_ms"])
    medians = {m: [report.median(m, T) for T in T_list] for m in METHODS}
    if len(T_list) >= 4:
        report.slopes = {m: fit_slope(T_list, medians[m]) for m in METHODS}
    report.crossover_T = _crossover(T_list, medians["gla_chunked"], medians["softmax"])
    return report


def write_scaling_outputs(report, out_dir):
    """bench.csv with one row per (method, T) and bench.json with the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "bench.csv", report.rows, CSV_COLUMNS)
    (out_dir / "bench.json").write_text(json.dumps(report.summary(), indent=2))
    return out_dir / "bench.csv", out_dir / "bench.json"


def _resolve(preset):
    return preset if isinstance(preset, ModelConfig) else load_preset(preset)


def scan_strategy_bench(preset="toy-b", batch=2, repeats=5, warmup=2, seed=0, profiler=None):
    """Time one block's token mixing under each scanning strategy on equal inputs."""
    cfg = _resolve(preset)
    width = cfg.hidden_size
    rng = np.random.default_rng(seed)
    gla = GatedLinearAttention(width, cfg.key_width(width), cfg.value_width(width),
                               heads=cfg.heads_for(width), tau=cfg.tau, mode=cfg.mode,
                               chunk=cfg.chunk, rng=rng)
    x = Tensor(rng.standard_normal((batch, cfg.num_tokens, width)))
    strategies = {
        "block": lambda c: scan_block(x, gla, 0, c),
        "bidirectional": lambda c: scan_bidirectional(x, gla, c),
        "four_direction": lambda c: scan_4directional(x, gla, c),
    }
    profiler = profiler or create_profiler()
    rows = []
    for name, fn in strategies.items():
        counter = OpCounter()
        with no_grad():
            fn(counter)

            def run(fn=fn):
                fn(None)
            profiler.time_call(name, run, warmup=warmup, repeats=repeats)
        stats = profiler.summary(name)
        rows.append({"strategy": name, "matrix_ops": counter.matrix_ops,
                     "scan_ops": counter.scan_ops, **stats})
    times = {row["strategy"]: row["median_ms"] for row in rows}
    return {
        "preset": cfg.name,
        "tokens": cfg.num_tokens,
        "width": width,
        "rows": rows,
        "ordering_ok": times["block"] < times["bidirectional"] < times["four_direction"],
        "ratio_4dir_vs_block": times["four_direction"] / times["block"],
    }


def flops_table(presets=DEFAULT_PRESETS, patch_sizes=None):
    """FlopReport rows per preset, optionally re-instantiated at other patch sizes."""
    rows = []
    for preset in presets:
        cfg = _resolve(preset)
        variants = [cfg]
        for p in patch_sizes or ():
            if p != cfg.patch_size and cfg.input_size % p == 0:
                variants.append(cfg.replace(patch_size=p, name=f"{cfg.name}/{p}"))
        rows.extend(flops_estimate(c).to_dict() for c in variants)
    return rows
