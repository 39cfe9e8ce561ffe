"""
Closed-form vs instrumented compute
===================================

The block stack costs 8LDN (Mamba) + LD^2 (FFN) + L^2 D (attention)
multiply-accumulates per block. Here the formulas are compared with counts
taken from an actual forward pass.
"""

from dataclasses import replace

import numpy as np

from smdim import bench
from smdim.model import ModelConfig

one_block = replace(ModelConfig.full(), n_blocks=1, mamba_layers_per_block=1)
r = bench.analytic_flops(one_block, 2048)
print(f"one block at L=2048, D=512, N=16: mamba {r.mamba:,}  ffn {r.ffn:,}  "
      f"attention {r.attention:,}  total {r.total:,}")

cfg = ModelConfig()        # desk profile, stride 4
lengths = [64, 128, 256, 512, 1024]
print(f"\n{'L':>6} {'mamba':>10} {'ffn':>10} {'attention':>11} {'head':>10} {'attn frac':>10}")
for L in lengths:
    m = bench.measured_macs(cfg, L)
    a = bench.analytic_flops(cfg, L // cfg.stride)
    print(f"{L:>6} {m.stages('mamba'):>10,} {m.stages('ffn'):>10,} {m.stages('attention'):>11,} "
          f"{m.stages('head'):>10,} {a.attention_fraction:>10.3f}")

# measured slopes on a log-log scale, one block order at a time
for order, stages in (("mamba_only", None), ("attention_only", ("attention",))):
    c = replace(cfg, block_order=order)
    counts = [bench.measured_macs(c, L) for L in lengths]
    ys = [m.total if stages is None else m.stages(*stages) for m in counts]
    slope, r2 = bench.loglog_slope(lengths, ys)
    print(f"{order}: slope {slope:.3f} (R^2 {r2:.4f})")

# the attention stage alone counts L_inner^2 D for the score matrix
m = bench.measured_macs(cfg, 256)
inner = 256 // cfg.stride
print("QK^T MACs:", m.by_op[("attention", "qk")], "=", cfg.n_blocks, "*", inner, "^2 *", cfg.D,
      "=", cfg.n_blocks * inner**2 * cfg.D)
print("median of 3 timed passes at L=256: %.1f ms" % np.median(
    [row["median_wall_ms"] for row in bench.bench_scaling([256], cfg, repeats=3)]))
