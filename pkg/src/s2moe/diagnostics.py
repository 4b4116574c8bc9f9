"""Numerical layer diagnostics: Jacobian structure probes, representation
collapse indicators, and a closed-form FLOPs accountant.

The Jacobian probe estimates the layer map at a single token by central
differences (64-bit), once with the routing probabilities live and once with
them frozen at the probe point. Their difference is the routing contribution;
its numerical rank is bounded by the number of routing softmax terms, which is
what the probe asserts (one per expert embedding for the baseline layer, twice
that for the fixed-draw stochastic layer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .experts import moe_combine
from .moe import S2MoeLayer
from .routing import RouterDecision, route
from .stochastic import RngStream, blend_gate, compute_batch_stats
from .tensor import Tape, Tensor, backward, mul, no_grad, tsum


@dataclass
class JacobianReport:
    jacobian: np.ndarray            # (d, d) FD estimate, routing live
    jacobian_fixed_gates: np.ndarray
    routing_residual: np.ndarray    # difference of the two
    singular_values: np.ndarray     # of the residual
    rank: int
    rank_tolerance: float
    autodiff_fd_max_rel_err: float
    prob_gap: float                 # top-k boundary margin at the probe point
    kink_gap: float                 # distance of expert hidden pre-acts to 0


@dataclass
class CollapseReport:
    mean_pairwise_cosine: float
    per_layer_cosine: list[float]
    router_entropy: float           # mean nats over tokens
    expert_load: np.ndarray         # fraction of selected slots per expert
    load_gini: float
    per_k_bpc: dict[int, float] = field(default_factory=dict)


@dataclass
class FlopsReport:
    items: dict[str, int]           # per-token MACs, whole stack
    total: int
    k: int
    seq_len: int
    variant: str
    mode: str


# ---------------------------------------------------------------------------
# Jacobian probe


def _layer_pieces(layer):
    if isinstance(layer, S2MoeLayer):
        return layer.inner.router, layer.inner.experts, layer.blend
    return layer.router, layer.experts, None


def _freeze_decision(dec: RouterDecision) -> RouterDecision:
    return RouterDecision(probs=Tensor(dec.probs.data.copy()), indices=dec.indices.copy(),
                          gates=Tensor(dec.gates.data.copy()), k_used=dec.k_used)


def _boundary_gap(probs_row: np.ndarray, k: int) -> float:
    srt = np.sort(probs_row)[::-1]
    if k >= srt.size:
        return float("inf")
    return float(srt[k - 1] - srt[k])


def _kink_gap(experts, x_row: np.ndarray, indices: np.ndarray) -> float:
    gap = float("inf")
    for i in np.unique(indices):
        pre = x_row @ experts.w1[int(i)].data + experts.b1[int(i)].data
        gap = min(gap, float(np.abs(pre).min()))
    return gap


def jacobian_probe(layer, x_token: np.ndarray, k: int, eps: float = 1e-5,
                   noise_rng: RngStream | None = None, stats=None,
                   boundary_tol: float = 1e-3) -> JacobianReport:
    """Probe the layer Jacobian at one token and decompose out the routing term.

    For a stochastic layer a single noise draw is frozen for the whole probe,
    so the map under test is deterministic; pass ``stats`` from a context
    batch, otherwise the single-token stats degenerate to sigma = 0. Probe
    points whose top-k margin is below ``boundary_tol`` are rejected.
    """
    v0 = np.asarray(x_token, dtype=np.float64).reshape(-1)
    d = v0.size
    router, experts, blend = _layer_pieces(layer)

    stochastic = isinstance(layer, S2MoeLayer)
    if stochastic:
        if stats is None:
            stats = compute_batch_stats(Tensor(v0.reshape(1, 1, d)))
        rng = noise_rng if noise_rng is not None else RngStream(0)
        sigma = np.broadcast_to(stats.sigma, (1, 1, d))
        n1 = rng.normal((1, 1, d), loc=1.0, scale=sigma)
        n2 = rng.normal((1, 1, d), loc=np.broadcast_to(stats.mu, (1, 1, d)), scale=sigma)
    else:
        n1 = n2 = None

    def forward(v: np.ndarray, frozen: tuple | None):
        """Layer output vector at input v; frozen=(dec, dec_noisy) pins routing."""
        x = Tensor(v.reshape(1, 1, d))
        dec = frozen[0] if frozen else route(x, router, k)
        y = moe_combine(x, dec, experts)
        if stochastic:
            x_hat = mul(x, Tensor(n1)) + Tensor(n2)
            dec_n = frozen[1] if frozen else route(x_hat, router, k)
            y_n = moe_combine(x_hat, dec_n, experts)
            g = blend_gate(x, blend)
            y = mul(g, y) + mul(1.0 - g, y_n)
        return y

    with no_grad():
        dec0 = route(Tensor(v0.reshape(1, 1, d)), router, k)
        gap = _boundary_gap(dec0.probs.data[0, 0], k)
        if stochastic:
            xh0 = v0.reshape(1, 1, d) * n1 + n2
            dec0_n = route(Tensor(xh0), router, k)
            gap = min(gap, _boundary_gap(dec0_n.probs.data[0, 0], k))
            frozen = (_freeze_decision(dec0), _freeze_decision(dec0_n))
            kink = min(_kink_gap(experts, v0, dec0.indices),
                       _kink_gap(experts, xh0.reshape(-1), dec0_n.indices))
        else:
            frozen = (_freeze_decision(dec0), None)
            kink = _kink_gap(experts, v0, dec0.indices)
        if gap <= boundary_tol:
            raise ValueError(f"probe point sits on a top-k boundary (gap {gap:.3e})")

        def fd_jacobian(frozen_arg):
            jac = np.zeros((d, d))
            for j in range(d):
                vp, vm = v0.copy(), v0.copy()
                vp[j] += eps
                vm[j] -= eps
                jac[:, j] = (forward(vp, frozen_arg).data.reshape(-1)
                             - forward(vm, frozen_arg).data.reshape(-1)) / (2 * eps)
            return jac

        j_full = fd_jacobian(None)
        j_fixed = fd_jacobian(frozen)

    # autodiff rows of the full map for the FD cross-check
    j_auto = np.zeros((d, d))
    for i in range(d):
        onehot = np.zeros((1, 1, d))
        onehot[0, 0, i] = 1.0
        with Tape():
            x = Tensor(v0.reshape(1, 1, d), requires_grad=True)
            dec = route(x, router, k)
            y = moe_combine(x, dec, experts)
            if stochastic:
                x_hat = mul(x, Tensor(n1)) + Tensor(n2)
                dec_n = route(x_hat, router, k)
                y_n = moe_combine(x_hat, dec_n, experts)
                g = blend_gate(x, blend)
                y = mul(g, y) + mul(1.0 - g, y_n)
            backward(tsum(mul(y, Tensor(onehot))))
        j_auto[i] = x.grad.reshape(-1)

    denom = np.maximum(np.maximum(np.abs(j_auto), np.abs(j_full)), 1e-8)
    rel_err = float(np.max(np.abs(j_auto - j_full) / denom))

    residual = j_full - j_fixed
    sv = np.linalg.svd(residual, compute_uv=False)
    smax = float(sv[0]) if sv.size else 0.0
    tol = 1e-6 * smax
    rank = int(np.sum(sv > tol)) if smax > 0 else 0
    return JacobianReport(
        jacobian=j_full, jacobian_fixed_gates=j_fixed, routing_residual=residual,
        singular_values=sv, rank=rank, rank_tolerance=tol,
        autodiff_fd_max_rel_err=rel_err, prob_gap=gap, kink_gap=kink,
    )


# ---------------------------------------------------------------------------
# collapse metrics


def gini(values: np.ndarray) -> float:
    """Gini coefficient of a non-negative vector (0 = perfectly even)."""
    v = np.asarray(values, dtype=np.float64)
    if v.sum() == 0:
        return 0.0
    diffs = np.abs(v[:, None] - v[None, :]).sum()
    return float(diffs / (2.0 * v.size * v.sum()))


def collapse_metrics(model, tokens: np.ndarray, per_k_bpc: dict[int, float] | None = None) -> CollapseReport:
    """Expert-output similarity, router entropy, and load statistics.

    Every token of the batch is pushed through all N experts of each layer
    (on the layer's actual input activations) and expert pairs are compared
    by cosine similarity.
    """
    tokens = np.asarray(tokens)
    if tokens.size < 64:
        raise ValueError("collapse_metrics wants at least 64 tokens")
    with no_grad():
        _, auxes = model.lm_forward(tokens, mode="eval", collect_moe_inputs=True)

    per_layer = []
    entropies = []
    n = model.cfg.n_experts
    load = np.zeros(n)
    with no_grad():
        for blk, aux in zip(model.blocks, auxes):
            x = aux.moe_input.reshape(-1, model.cfg.d_model)
            bank = blk.moe.experts
            outs = np.stack([bank.apply(Tensor(x), i).data for i in range(n)])  # (N, M, d)
            norms = np.linalg.norm(outs, axis=-1)
            norms = np.maximum(norms, 1e-12)
            unit = outs / norms[..., None]
            cos_acc = []
            for i in range(n):
                for j in range(i + 1, n):
                    cos_acc.append(float(np.mean(np.sum(unit[i] * unit[j], axis=-1))))
            per_layer.append(float(np.mean(cos_acc)))

            p = aux.decision.probs.data.reshape(-1, n)
            entropies.append(float(np.mean(-np.sum(p * np.log(np.maximum(p, 1e-300)), axis=-1))))
            idx = aux.decision.indices.reshape(-1)
            load += np.bincount(idx, minlength=n)

    load = load / load.sum()
    return CollapseReport(
        mean_pairwise_cosine=float(np.mean(per_layer)),
        per_layer_cosine=per_layer,
        router_entropy=float(np.mean(entropies)),
        expert_load=load,
        load_gini=gini(load),
        per_k_bpc=dict(per_k_bpc or {}),
    )


# ---------------------------------------------------------------------------
# FLOPs accounting


def flops_per_token(cfg, k: int, seq_len: int | None = None, mode: str = "eval") -> FlopsReport:
    """Itemized per-token forward multiply-accumulates for the decoder stack.

    Counts linear maps only (norms and activations excluded): attention
    4*d^2 + 2*T*d, router N*d, experts k * 2*d*d_exp, each per layer. In
    train mode the stochastic variant runs both paths, doubling the router
    and expert items and adding the blend gate; at eval it runs one path and
    matches the baseline exactly.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode '{mode}'")
    if not 0 <= k <= cfg.n_experts:
        raise ValueError(f"k={k} out of range [0, {cfg.n_experts}]")
    t = int(seq_len if seq_len is not None else cfg.seq_len)
    d, h, n, layers = cfg.d_model, cfg.d_exp, cfg.n_experts, cfg.n_layers
    two_path = cfg.variant == "s2moe" and mode == "train"
    paths = 2 if two_path else 1
    items = {
        "attention_projections": layers * 4 * d * d,
        "attention_mix": layers * 2 * t * d,
        "router": layers * paths * n * d,
        "experts": layers * paths * k * 2 * d * h,
        "blend_gate": layers * d if two_path else 0,
    }
    return FlopsReport(items=items, total=sum(items.values()), k=k, seq_len=t,
                       variant=cfg.variant, mode=mode)


# ---------------------------------------------------------------------------
# structured text reports


def format_flops_report(report: FlopsReport) -> str:
    lines = ["[flops]",
             f"variant = {report.variant}",
             f"mode = {report.mode}",
             f"k = {report.k}",
             f"seq_len = {report.seq_len}"]
    lines += [f"per_token.{name} = {macs}" for name, macs in report.items.items()]
    lines.append(f"per_token.total = {report.total}")
    return "\n".join(lines)


def format_collapse_report(report: CollapseReport) -> str:
    lines = ["[collapse]",
             f"mean_pairwise_cosine = {report.mean_pairwise_cosine!r}",
             f"router_entropy_nats = {report.router_entropy!r}",
             f"expert_load = {','.join(repr(float(v)) for v in report.expert_load)}",
             f"load_gini = {report.load_gini!r}"]
    for i, c in enumerate(report.per_layer_cosine):
        lines.append(f"layer{i}.cosine = {c!r}")
    for k in sorted(report.per_k_bpc):
        lines.append(f"bpc.k{k} = {report.per_k_bpc[k]!r}")
    return "\n".join(lines)


def format_jacobian_report(report: JacobianReport) -> str:
    sv = ",".join(repr(float(v)) for v in report.singular_values[:12])
    return "\n".join([
        "[jacobian]",
        f"rank = {report.rank}",
        f"rank_tolerance = {report.rank_tolerance!r}",
        f"autodiff_fd_max_rel_err = {report.autodiff_fd_max_rel_err!r}",
        f"prob_gap = {report.prob_gap!r}",
        f"kink_gap = {report.kink_gap!r}",
        f"leading_singular_values = {sv}",
    ])
