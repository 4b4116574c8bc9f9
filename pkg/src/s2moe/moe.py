"""MoE layer objects: the baseline sparse layer and the two-path stochastic one.

The stochastic layer routes the clean input and a noise-augmented copy
independently, blends the two outputs with a learned per-token gate, and
surfaces mean-pooled (clean, noisy) input pairs for the uncertainty loss.
At eval time the noise branch is disabled and the layer is exactly the
baseline sparse layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experts import ExpertBank, moe_combine
from .routing import RouterDecision, RouterParams, make_router, route
from .stochastic import (
    RngStream,
    blend_gate,
    compute_batch_stats,
    make_blend_gate,
    perturb,
)
from .tensor import Tensor, add, mean, mul, sub


@dataclass
class MoeAux:
    """Per-layer byproducts needed by losses and diagnostics."""

    decision: RouterDecision
    decision_noisy: RouterDecision | None = None
    pooled_clean: Tensor | None = None   # (B, d)
    pooled_noisy: Tensor | None = None   # (B, d)
    moe_input: np.ndarray | None = None  # detached copy, only when requested


class SmoeLayer:
    """Sparse MoE layer: route, evaluate selected experts, combine."""

    def __init__(self, d_model: int, n_experts: int, d_expert: int, rng: RngStream,
                 variant: str = "smoe", dtype=np.float32, d_low: int = 8,
                 stage_boundary: int | None = None, frozen_seed: int | None = None,
                 rng_router: RngStream | None = None):
        self.d_model = d_model
        self.router: RouterParams = make_router(
            n_experts, d_model, variant if variant != "s2moe" else "smoe",
            rng_router if rng_router is not None else rng,
            dtype=dtype, d_low=d_low, stage_boundary=stage_boundary, frozen_seed=frozen_seed)
        self.experts = ExpertBank(n_experts, d_model, d_expert, rng, dtype=dtype)

    @property
    def n_experts(self) -> int:
        return self.experts.n_experts

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"router.{n}", t) for n, t in self.router.parameters()]
        named += self.experts.parameters()
        return named

    def forward(self, x: Tensor, k: int, train: bool = True,
                collect_input: bool = False) -> tuple[Tensor, MoeAux]:
        decision = route(x, self.router, k)
        y = moe_combine(x, decision, self.experts)
        aux = MoeAux(decision=decision)
        if collect_input:
            aux.moe_input = x.data.copy()
        return y, aux


class S2MoeLayer:
    """Two-path MoE layer learning from clean and noise-augmented inputs."""

    def __init__(self, d_model: int, n_experts: int, d_expert: int, rng: RngStream,
                 dtype=np.float32, noise_enabled: bool = True,
                 rng_router: RngStream | None = None, rng_blend: RngStream | None = None):
        self.inner = SmoeLayer(d_model, n_experts, d_expert, rng, variant="smoe",
                               dtype=dtype, rng_router=rng_router)
        self.blend = make_blend_gate(d_model, rng_blend if rng_blend is not None else rng, dtype=dtype)
        self.noise_enabled = noise_enabled

    @property
    def d_model(self) -> int:
        return self.inner.d_model

    @property
    def n_experts(self) -> int:
        return self.inner.n_experts

    @property
    def router(self) -> RouterParams:
        return self.inner.router

    @property
    def experts(self) -> ExpertBank:
        return self.inner.experts

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.inner.parameters() + self.blend.parameters()

    def forward(self, x: Tensor, k: int, train: bool = True, rng: RngStream | None = None,
                collect_input: bool = False) -> tuple[Tensor, MoeAux]:
        """Train: g(x) * f(x) + (1 - g(x)) * f(x_hat). Eval: exactly f(x)."""
        if not train:
            return self.inner.forward(x, k, train=False, collect_input=collect_input)
        if self.noise_enabled:
            if rng is None:
                raise ValueError("train-mode stochastic forward needs an RngStream")
            stats = compute_batch_stats(x)
            x_hat = perturb(x, stats, rng)
        else:
            x_hat = x
        y_clean, aux = self.inner.forward(x, k, train=True, collect_input=collect_input)
        decision_noisy = route(x_hat, self.inner.router, k)
        y_noisy = moe_combine(x_hat, decision_noisy, self.inner.experts)
        g = blend_gate(x, self.blend)
        y = add(mul(g, y_clean), mul(sub(Tensor(np.asarray(1.0, dtype=g.dtype)), g), y_noisy))
        aux.decision_noisy = decision_noisy
        aux.pooled_clean = mean(x, axis=1)
        aux.pooled_noisy = mean(x_hat, axis=1)
        return y, aux
