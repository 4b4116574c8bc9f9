"""Training loop, optimizer, evaluation, and metrics plumbing.

All stochasticity is counter-based: batch indices and forward-pass draws are
pure functions of (seed, step), so a run resumed from a checkpoint continues
bit-for-bit where the uninterrupted run would have been (at matching
precision).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, apply_tensors, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config_text
from .data import Corpus, ingest_corpus, make_batch, pair_count
from .diagnostics import CollapseReport, collapse_metrics, gini
from .losses import PooledPair, balance_loss, task_loss, total_loss, uncertainty_loss
from .model import LanguageModel
from .moe import MoeAux
from .routing import dropout_schedule_k, stablemoe_update
from .stochastic import RngStream
from .tensor import NonFiniteError, Tape, backward, no_grad

METRICS_HEADER = "step,task_nats,bpc,balance,uncertainty,total,router_entropy,expert_load_gini,k,wall_ms"

# stream ids under (seed << 8)
_STREAM_BATCH = 3
_STREAM_FORWARD = 4
_FORWARD_STRIDE = 1 << 20


class TrainAbort(RuntimeError):
    """Training stopped on a non-finite loss; prior checkpoints are retained."""


@dataclass
class MetricsRow:
    step: int
    task_nats: float
    bpc: float
    balance: float
    uncertainty: float
    total: float
    router_entropy: float
    expert_load_gini: float
    k: int
    wall_ms: float

    def to_line(self) -> str:
        return (f"{self.step},{self.task_nats!r},{self.bpc!r},{self.balance!r},"
                f"{self.uncertainty!r},{self.total!r},{self.router_entropy!r},"
                f"{self.expert_load_gini!r},{self.k},{self.wall_ms!r}")

    @classmethod
    def from_line(cls, line: str) -> "MetricsRow":
        parts = line.strip().split(",")
        if len(parts) != 10:
            raise ValueError(f"metrics row has {len(parts)} fields, want 10: '{line}'")
        return cls(step=int(parts[0]), task_nats=float(parts[1]), bpc=float(parts[2]),
                   balance=float(parts[3]), uncertainty=float(parts[4]), total=float(parts[5]),
                   router_entropy=float(parts[6]), expert_load_gini=float(parts[7]),
                   k=int(parts[8]), wall_ms=float(parts[9]))


def parse_metrics(path: str) -> list[MetricsRow]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"metrics file '{path}' missing header")
    return [MetricsRow.from_line(ln) for ln in lines[1:]]


def metrics_equal(path_a: str, path_b: str, ignore_wall: bool = True) -> bool:
    """Bitwise comparison of two metrics files (wall_ms excluded by default)."""
    a, b = parse_metrics(path_a), parse_metrics(path_b)
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        fields_a = ra.to_line().split(",")
        fields_b = rb.to_line().split(",")
        if ignore_wall:
            fields_a, fields_b = fields_a[:-1], fields_b[:-1]
        if fields_a != fields_b:
            return False
    return True


class Adam:
    """Adam over named parameters; frozen and gradient-free tensors are skipped."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in self.named}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named}

    def step(self, t: int) -> None:
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.named:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self):
        out = []
        for name, _ in self.named:
            out.append((f"adam.m.{name}", self.m[name]))
            out.append((f"adam.v.{name}", self.v[name]))
        return out

    def load_state(self, stored: dict[str, np.ndarray]) -> None:
        for name, _ in self.named:
            self.m[name] = stored[f"adam.m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = stored[f"adam.v.{name}"].astype(self.v[name].dtype, copy=True)


def clip_global_norm(named_params, max_norm: float) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    rows: list[MetricsRow]
    corpus: Corpus


def _aux_metrics(auxes: list[MoeAux], n_experts: int) -> tuple[float, float]:
    entropies = []
    load = np.zeros(n_experts)
    for aux in auxes:
        p = aux.decision.probs.data.reshape(-1, n_experts)
        entropies.append(float(np.mean(-np.sum(p * np.log(np.maximum(p, 1e-300)), axis=-1))))
        load += np.bincount(aux.decision.indices.reshape(-1), minlength=n_experts)
    return float(np.mean(entropies)), gini(load)


def _step_losses(model: LanguageModel, cfg: RunConfig, x, y, rng, k):
    logits, auxes = model.lm_forward(x, "train", rng=rng, k=k)
    nats, bpc, ppl = task_loss(logits, y)
    n_layers = len(auxes)
    bal = None
    for aux in auxes:
        term = balance_loss(aux.decision)
        bal = term if bal is None else bal + term
    bal = bal * (1.0 / n_layers)
    unc = None
    if cfg.variant == "s2moe":
        for aux in auxes:
            pair = PooledPair(aux.pooled_clean, aux.pooled_noisy, tau=cfg.tau_u)
            term = uncertainty_loss(pair)
            unc = term if unc is None else unc + term
        unc = unc * (1.0 / n_layers)
    total = total_loss(nats, bal, unc, cfg.alpha, cfg.beta)
    return logits, auxes, nats, bal, unc, total


def _save_state(path: str, cfg: RunConfig, model: LanguageModel, adam: Adam, step: int) -> None:
    base = cfg.seed << 8
    tensors = [(name, t.data) for name, t in model.parameters()]
    tensors += adam.state_tensors()
    ckpt = Checkpoint(
        config_text=cfg.to_text(),
        step=step,
        rng_states=[("batch", base + _STREAM_BATCH, step),
                    ("forward", base + _STREAM_FORWARD, step * _FORWARD_STRIDE)],
        tensors=tensors,
    )
    save_checkpoint(path, ckpt)


def _restore_stablemoe(model: LanguageModel, step: int) -> None:
    for blk in model.blocks:
        router = blk.moe.router
        if router.variant == "stablemoe" and router.stage_boundary is not None \
                and step >= router.stage_boundary and router.snapshot is None:
            router.snapshot = router.w_e.data.copy()
            router.snapshot_step = router.stage_boundary
            router.snapshot_events += 1
            router.frozen = True
            router.w_e.requires_grad = False


def build_model(cfg: RunConfig, corpus: Corpus) -> LanguageModel:
    cfg.vocab_size = corpus.vocab_size
    return LanguageModel(cfg.model_config())


def train(cfg: RunConfig, resume_from: str | None = None,
          log=None, model_hook=None) -> TrainResult:
    """Run the training loop; returns checkpoint/metrics paths and rows.

    ``model_hook(model)``, if given, runs after construction (and after any
    checkpoint restore), e.g. to pin gates or disable the noise branch.
    """
    corpus = ingest_corpus(cfg.corpus, cfg.splits)
    model = build_model(cfg, corpus)
    adam = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)

    start_step = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        apply_tensors(model.parameters(), ck)
        adam.load_state(ck.tensor_dict())
        start_step = ck.step
        _restore_stablemoe(model, start_step)
    if model_hook is not None:
        model_hook(model)

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    mode = "a" if resume_from is not None and os.path.exists(metrics_path) else "w"
    metrics_file = open(metrics_path, mode, encoding="utf-8")
    if mode == "w":
        metrics_file.write(METRICS_HEADER + "\n")

    rows: list[MetricsRow] = []
    pairs = pair_count(corpus.train, cfg.seq_len)
    if pairs == 0:
        raise ValueError("corpus train split shorter than one sequence")
    base = cfg.seed << 8
    n_experts = cfg.n_experts
    t0 = time.monotonic()
    last_ckpt = resume_from or ""

    try:
        for step in range(start_step, cfg.steps):
            for blk in model.blocks:
                stablemoe_update(blk.moe.router, step)
            if cfg.variant == "smoe-dropout":
                k = dropout_schedule_k(step, cfg.steps, n_experts)
            else:
                k = cfg.k_train

            idx = RngStream(base + _STREAM_BATCH, counter=step).integers(pairs, cfg.batch_size)
            x, y = make_batch(corpus.train, cfg.seq_len, idx)
            rng = RngStream(base + _STREAM_FORWARD, counter=step * _FORWARD_STRIDE)

            try:
                with Tape():
                    logits, auxes, nats, bal, unc, total = _step_losses(model, cfg, x, y, rng, k)
                    total_value = total.item()
                    if not math.isfinite(total_value):
                        raise TrainAbort(f"non-finite loss at step {step}; last checkpoint: {last_ckpt or 'none'}")
                    model.zero_grad()
                    backward(total)
            except NonFiniteError as err:
                raise TrainAbort(f"non-finite value at step {step} ({err}); "
                                 f"last checkpoint: {last_ckpt or 'none'}") from err

            clip_global_norm(model.parameters(), cfg.grad_clip)
            adam.step(step + 1)

            if step % cfg.eval_interval == 0 or step == cfg.steps - 1:
                entropy, load_gini = _aux_metrics(auxes, n_experts)
                nats_value = nats.item()
                row = MetricsRow(
                    step=step, task_nats=nats_value, bpc=nats_value / math.log(2),
                    balance=bal.item(), uncertainty=unc.item() if unc is not None else 0.0,
                    total=total_value, router_entropy=entropy, expert_load_gini=load_gini,
                    k=k, wall_ms=(time.monotonic() - t0) * 1000.0,
                )
                rows.append(row)
                metrics_file.write(row.to_line() + "\n")
                metrics_file.flush()
                if log:
                    log(f"step {step} bpc {row.bpc:.4f} balance {row.balance:.4f} "
                        f"uncert {row.uncertainty:.5f} k {k}")

            if (step + 1) % cfg.ckpt_interval == 0 or step == cfg.steps - 1:
                last_ckpt = os.path.join(cfg.out_dir, f"ckpt-{step + 1:07d}.bin")
                _save_state(last_ckpt, cfg, model, adam, step + 1)
    finally:
        metrics_file.close()

    final = os.path.join(cfg.out_dir, "ckpt-final.bin")
    _save_state(final, cfg, model, adam, cfg.steps)
    return TrainResult(final_checkpoint=final, metrics_path=metrics_path, rows=rows, corpus=corpus)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    bpc: float
    ppl: float
    nats: float
    n_tokens: int
    k: int
    collapse: CollapseReport | None


def evaluate_model(model: LanguageModel, corpus: Corpus, cfg: RunConfig, k: int,
                   split: str, with_collapse: bool = True) -> EvalResult:
    """Teacher-forced evaluation over a split at inference-time k."""
    tokens = {"train": corpus.train, "val": corpus.val, "test": corpus.test}.get(split)
    if tokens is None:
        raise ValueError(f"unknown split '{split}'")
    model.set_inference_k(k)
    pairs = pair_count(tokens, cfg.seq_len)
    if pairs == 0:
        raise ValueError(f"split '{split}' shorter than one sequence")
    total_nats = 0.0
    count = 0
    for start in range(0, pairs, cfg.batch_size):
        idx = range(start, min(start + cfg.batch_size, pairs))
        x, y = make_batch(tokens, cfg.seq_len, idx)
        with no_grad():
            logits, _ = model.lm_forward(x, "eval")
        nats, _, _ = task_loss(logits, y)
        total_nats += nats.item() * x.size
        count += x.size
    mean_nats = total_nats / count

    collapse = None
    if with_collapse:
        n_batch = max(1, math.ceil(64 / cfg.seq_len))
        x, _ = make_batch(tokens, cfg.seq_len, range(min(n_batch, pairs)))
        collapse = collapse_metrics(model, x)
    return EvalResult(bpc=mean_nats / math.log(2), ppl=math.exp(mean_nats),
                      nats=mean_nats, n_tokens=count, k=k, collapse=collapse)


def evaluate_checkpoint(ckpt_path: str, k: int, split: str,
                        with_collapse: bool = True) -> tuple[EvalResult, RunConfig]:
    """Rebuild the run from a checkpoint and evaluate it."""
    ck = load_checkpoint(ckpt_path)
    cfg = parse_config_text(ck.config_text)
    if not 1 <= k <= cfg.n_experts:
        raise ValueError(f"k={k} out of range [1, {cfg.n_experts}]")
    corpus = ingest_corpus(cfg.corpus, cfg.splits)
    model = build_model(cfg, corpus)
    apply_tensors(model.parameters(), ck)
    _restore_stablemoe(model, ck.step)
    return evaluate_model(model, corpus, cfg, k, split, with_collapse=with_collapse), cfg
