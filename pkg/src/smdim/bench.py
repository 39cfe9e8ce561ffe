"""Compute accounting for the denoiser: closed-form MACs vs instrumented counts.

Closed forms per MFA block on a length-``L`` sequence of width ``D`` with
state size ``N``: Mamba ``8LDN`` (per Mamba layer), FFN ``LD^2``, attention
``L^2 D``. Measured counts come from the multiply-accumulate tally kept by
:mod:`smdim.tensor` and are attributed to stages:

``embedding``       time-embedding projection
``downsample``      strided convolution
``mamba``           in/gate/S_A/S_B/S_C/out projections, depthwise conv, scan
``ffn``             both feed-forward matmuls
``attention_proj``  Q, K, V and output projections
``attention``       QK^T scores and the weighted sum over V
``upsample``        transposed convolution
``head``            output projection
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .model import ModelConfig, init_parameters, smdim_forward

CSV_COLUMNS = ("L", "mamba_analytic", "ffn_analytic", "attn_analytic", "total_analytic",
               "measured_macs", "attn_fraction", "median_wall_ms")


@dataclass
class FlopReport:
    L: int
    mamba: int
    ffn: int
    attention: int

    @property
    def total(self) -> int:
        return self.mamba + self.ffn + self.attention

    @property
    def attention_fraction(self) -> float:
        return self.attention / self.total if self.total else 0.0


def analytic_flops(config: ModelConfig, L: int) -> FlopReport:
    """Closed-form MACs of the block stack for a block-level length ``L``."""
    D, N, nb = config.D, config.N, config.n_blocks
    order = config.block_order
    m = config.mamba_layers_per_block if order in ("MFA", "AFM", "mamba_only") else 0
    with_attn = order in ("MFA", "AFM", "attention_only")
    return FlopReport(
        L=L,
        mamba=nb * m * 8 * L * D * N,
        ffn=nb * L * D * D,
        attention=nb * L * L * D if with_attn else 0,
    )


@dataclass
class MeasuredMacs:
    L: int
    by_stage: dict[str, int]
    by_op: dict[tuple[str, str], int]

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())

    def stages(self, *names: str) -> int:
        return sum(self.by_stage.get(n, 0) for n in names)


def measured_macs(config: ModelConfig, L: int, params=None, seed: int = 0) -> MeasuredMacs:
    """Instrumented MAC count of one forward pass at input length ``L``."""
    cfg = replace(config, L_in=L)
    params = params if params is not None else init_parameters(cfg, seed)
    tokens = np.random.default_rng(seed).integers(0, cfg.vocab_size - 1, size=L)
    with tn.mac_counter() as counter:
        smdim_forward(tokens, 1, params, cfg)
    return MeasuredMacs(L, dict(counter.by_stage), dict(counter.by_op))


def loglog_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of log(y) on log(x), and the fit's R^2."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot else 1.0
    return float(slope), float(r2)


def bench_scaling(lengths, config: ModelConfig, repeats: int = 5, seed: int = 0) -> list[dict]:
    """One row per input length: analytic terms at the block-level length
    ``L / stride``, the measured total MACs and the median wall time.

    Each length gets one discarded warm-up pass before ``repeats`` timed ones.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    for L in lengths:
        if L % config.stride:
            raise ValueError(f"length {L} is not divisible by stride {config.stride}")
    params = init_parameters(config, seed)
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        cfg = replace(config, L_in=L)
        flops = analytic_flops(cfg, L // cfg.stride)
        macs = measured_macs(cfg, L, params, seed)
        tokens = rng.integers(0, cfg.vocab_size - 1, size=L)
        smdim_forward(tokens, 1, params, cfg)
        times = []
        for _ in range(max(repeats, 1)):
            t0 = time.perf_counter()
            smdim_forward(tokens, 1, params, cfg)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append({
            "L": L,
            "mamba_analytic": flops.mamba,
            "ffn_analytic": flops.ffn,
            "attn_analytic": flops.attention,
            "total_analytic": flops.total,
            "measured_macs": macs.total,
            "attn_fraction": flops.attention_fraction,
            "median_wall_ms": float(np.median(times)),
        })
    return rows


def write_csv(rows, path, workers: int = 1) -> None:
    with open(Path(path), "w", newline="") as fh:
        fh.write(f"# workers={workers}\n")
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
