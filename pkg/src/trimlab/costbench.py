"""Analytic and empirical cost accounting.

MAC counting convention: multiply-accumulates of the matmul/conv kernels
only. Linear layers cost in*out per position, conv1d out_ch*in_ch*k per
output position, attention its projections plus score and weighted-sum
products. Bias additions, activations, normalizations, reductions, and the
gating multiplies are excluded. FLOPs = 2 * MACs. All analytic counts are for
a single input example and equal the instrumented kernel counts exactly.

Latency is a single-example, single-thread forward; medians over repeated
runs are reported, never means.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .blocks import ModelInstance, ModelSpec, param_counts


@dataclass
class TimingStats:
    wall_ms_median: float
    wall_ms_min: float
    wall_ms_p90: float
    reps: int
    warmup: int

    def to_dict(self) -> dict:
        return vars(self).copy()


@dataclass
class CostReport:
    params: int
    macs: int
    flops: int
    bytes: int | None = None
    timing: TimingStats | None = None
    speedup: float | None = None

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "macs": self.macs,
            "flops": self.flops,
            "bytes": self.bytes,
            "timing": None if self.timing is None else self.timing.to_dict(),
            "speedup": self.speedup,
            "conventions": {"flops_per_mac": 2, "bias_and_norm_excluded": True, "batch": 1},
        }


def count_costs(spec: ModelSpec, input_shape: tuple[int, int]) -> CostReport:
    """Closed-form MAC count for one example of shape (frames, feature_dim)."""
    t, f = int(input_shape[0]), int(input_shape[1])
    if f != spec.feature_dim:
        raise ag.ShapeError(f"count_costs: shapes {input_shape} and feature_dim {spec.feature_dim} do not conform")
    macs = 0
    if spec.backbone == "conv_t":
        cin, length = spec.feature_dim, t
        for blk in spec.conv_blocks:
            out_len = (length + 2 * blk.padding - blk.kernel) // blk.stride + 1
            macs += blk.out_channels * cin * blk.kernel * out_len
            cin, length = blk.out_channels, out_len
    else:
        d = spec.d_model
        macs += t * spec.feature_dim * d
        for layer in spec.layers:
            hd = layer.num_heads * layer.d_head
            macs += 3 * t * d * hd  # q, k, v projections
            macs += 2 * layer.num_heads * t * t * layer.d_head  # scores + weighted sum
            macs += t * hd * d  # output projection
            if spec.backbone == "conformer_t":
                c = layer.conv_channels
                dw_len = t + 2 * ((layer.conv_kernel - 1) // 2) - layer.conv_kernel + 1
                macs += t * d * c + c * layer.conv_kernel * dw_len + t * c * d
            macs += t * d * layer.ffn_hidden + t * layer.ffn_hidden * d
    if spec.head is not None:
        emb = spec.embedding_dim()
        macs += emb * spec.head.hidden + spec.head.hidden * spec.head.out_dim
    return CostReport(params=param_counts(spec)["total"], macs=macs, flops=2 * macs)


def instrumented_macs(model: ModelInstance, features: np.ndarray) -> int:
    """Exact count of kernel multiply-accumulates executed by one forward."""
    features = np.asarray(features)
    if features.ndim == 2:
        features = features[None]
    with ag.count_macs() as counter, ag.no_grad():
        emb = model.encode(features)
        if model.spec.head is not None:
            model.head_forward(emb)
    return counter.total


def time_forward(
    model: ModelInstance,
    input_shape: tuple[int, int],
    warmup: int = 10,
    reps: int = 30,
    seed: int = 0,
) -> TimingStats:
    """Median single-example forward latency over ``reps`` monotonic-clock
    timings after ``warmup`` discarded runs."""
    if reps < 3:
        raise ValueError("time_forward: reps must be >= 3")
    dtype = next(iter(model.params.values())).dtype
    rng = np.random.default_rng(seed)
    probe = rng.normal(size=(1,) + tuple(input_shape)).astype(dtype)

    def once() -> float:
        t0 = time.perf_counter()
        with ag.no_grad():
            emb = model.encode(probe)
            if model.spec.head is not None:
                model.head_forward(emb)
        return (time.perf_counter() - t0) * 1e3

    for _ in range(warmup):
        once()
    times = np.array([once() for _ in range(reps)])
    return TimingStats(
        wall_ms_median=float(np.median(times)),
        wall_ms_min=float(times.min()),
        wall_ms_p90=float(np.percentile(times, 90)),
        reps=reps,
        warmup=warmup,
    )


def render_comparison_row(label: str, size_mo: float, gflops: float, gmacs: float, speedup: float | None = None) -> str:
    """One side-by-side table row, e.g. 'base, 344.2 Mo, 23.3 GFLOPs, 11.6 GMACs'."""
    row = f"{label}, {size_mo:.1f} Mo, {gflops:.1f} GFLOPs, {gmacs:.1f} GMACs"
    if speedup is not None:
        row += f", ×{speedup:.1f}"
    return row


def comparison_rows(base: CostReport, trimmed: CostReport) -> list[dict]:
    """CSV-ready rows (size in Mo = bytes/1e6, giga-unit FLOPs/MACs)."""

    def row(label, rep, speedup):
        return {
            "label": label,
            "size_mo": None if rep.bytes is None else rep.bytes / 1e6,
            "gflops": rep.flops / 1e9,
            "gmacs": rep.macs / 1e9,
            "params": rep.params,
            "speedup": speedup,
        }

    speedup = None
    if base.timing is not None and trimmed.timing is not None and trimmed.timing.wall_ms_median > 0:
        speedup = base.timing.wall_ms_median / trimmed.timing.wall_ms_median
    return [row("base", base, None), row("trimmed", trimmed, speedup)]
