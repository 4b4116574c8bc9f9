# Layer diagnostics: Jacobian structure, collapse indicators, FLOPs
# -----------------------------------------------------------------
# The routing contribution to a MoE layer's Jacobian lives in the span of the
# expert embeddings, so its numerical rank is bounded by the expert count N
# for the baseline layer and by 2N for the two-path stochastic layer (one
# routing term per path). The probe verifies this with finite differences.

import numpy as np

from s2moe import ModelConfig, RngStream, S2MoeLayer, SmoeLayer
from s2moe.diagnostics import (
    flops_per_token,
    format_flops_report,
    format_jacobian_report,
    jacobian_probe,
)
from s2moe.stochastic import compute_batch_stats
from s2moe.tensor import Tensor

d, n = 32, 4
smoe = SmoeLayer(d, n, 16, RngStream(0), dtype=np.float64)
probe_x = np.random.default_rng(5).standard_normal(d)
report = jacobian_probe(smoe, probe_x, k=n)
print(format_jacobian_report(report))
print(f"-> routing-term rank {report.rank} <= N = {n}\n")

s2 = S2MoeLayer(d, n, 16, RngStream(1), dtype=np.float64)
stats = compute_batch_stats(Tensor(np.random.default_rng(6).standard_normal((4, 8, d))))
report2 = jacobian_probe(s2, probe_x, k=n, stats=stats, noise_rng=RngStream(9))
print(format_jacobian_report(report2))
print(f"-> routing-term rank {report2.rank} <= 2N = {2 * n}\n")

# FLOPs accounting at the full-scale configuration: dropping from two active
# experts to one at inference removes about a quarter of the per-token MACs.
cfg = ModelConfig()
r2 = flops_per_token(cfg, k=2)
r1 = flops_per_token(cfg, k=1)
print(format_flops_report(r1))
print(f"reduction k=2 -> k=1: {100 * (r2.total - r1.total) / r2.total:.2f}%")
