"""Run configuration: presets, flat key=value config files, serialization.

The config file format is one ``key = value`` per line; ``#`` starts a
comment. Unknown keys are rejected. The same text format is echoed into
checkpoints so a run can be reconstructed from its artifact alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .model import ModelConfig

PRESETS = ("paper-base", "desk")


@dataclass
class RunConfig:
    # model
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 8
    d_exp: int = 512
    n_experts: int = 16
    k_train: int = 2
    k_eval: int = 2
    vocab_size: int = 257
    seq_len: int = 512
    dropout: float = 0.1
    variant: str = "smoe"
    alpha: float = 0.01
    beta: float = 0.1
    tau_u: float = 1.0
    d_low: int = 8
    stage_boundary: int = -1          # -1: steps // 2 for stablemoe
    seed: int = 0
    precision: str = "f32"
    # run
    preset: str = "paper-base"
    corpus: str = ""
    batch_size: int = 48
    steps: int = 100_000
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    grad_clip: float = 0.25
    eval_interval: int = 1000
    ckpt_interval: int = 10_000
    out_dir: str = "runs/out"
    split_train: float = 0.9
    split_val: float = 0.05
    split_test: float = 0.05

    def model_config(self) -> ModelConfig:
        boundary = self.stage_boundary if self.stage_boundary >= 0 else self.steps // 2
        return ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            d_exp=self.d_exp, n_experts=self.n_experts, k_train=self.k_train,
            k_eval=self.k_eval, vocab_size=self.vocab_size, seq_len=self.seq_len,
            dropout=self.dropout, variant=self.variant, alpha=self.alpha,
            beta=self.beta, tau_u=self.tau_u, d_low=self.d_low,
            stage_boundary=boundary, seed=self.seed, precision=self.precision,
        )

    @property
    def splits(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def to_text(self) -> str:
        # repr round-trips floats exactly and quotes strings
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))


def preset(name: str) -> RunConfig:
    """Named baseline configurations."""
    if name == "paper-base":
        return RunConfig(preset=name)
    if name == "desk":
        return RunConfig(
            preset=name, n_layers=2, d_model=128, n_heads=4, d_exp=256,
            n_experts=8, k_train=2, k_eval=2, seq_len=128, steps=2000,
            batch_size=8, lr=1e-3, eval_interval=100, ckpt_interval=500,
            out_dir="runs/desk",
        )
    raise ValueError(f"unknown preset '{name}' (choose from {PRESETS})")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if raw.startswith(("'", '"')) and raw.endswith(("'", '"')) and len(raw) >= 2:
        return raw[1:-1]
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply key=value lines on top of ``base``.

    A ``preset`` key, if present, establishes the baseline first; remaining
    keys override it in file order.
    """
    pairs: list[tuple[int, str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key != "preset" and key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        pairs.append((lineno, key, raw))

    cfg = dataclasses.replace(base) if base is not None else preset("paper-base")
    for _, key, raw in pairs:
        if key == "preset":
            cfg = preset(str(_coerce_value("preset", raw)))
    for _, key, raw in pairs:
        if key != "preset":
            setattr(cfg, key, _coerce_value(key, raw))
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)
