# The three training-loss terms
# -----------------------------
# total = task cross-entropy + alpha * balance + beta * uncertainty,
# with alpha = 0.01 and beta = 0.1 by default.

import math

import numpy as np

from s2moe import PooledPair, balance_loss, task_loss, total_loss, uncertainty_loss
from s2moe.routing import route, make_router
from s2moe import RngStream
from s2moe.tensor import Tensor

# Task loss on uniform logits over a 256-way byte vocabulary: ln(256) nats,
# exactly 8 bits per character.
logits = Tensor(np.zeros((2, 4, 256)))
nats, bpc, ppl = task_loss(logits, np.zeros((2, 4), dtype=int))
print(f"uniform model: {nats.item():.4f} nats, {bpc:.2f} bpc, ppl {ppl:.0f}")

# Balance loss: 1.0 when load and probability mass are uniform, N under
# total collapse onto one expert.
router = make_router(4, 8, "smoe", RngStream(0), dtype=np.float64)
x = Tensor(np.random.default_rng(1).standard_normal((2, 16, 8)))
decision = route(x, router, 2)
print("balance loss:", balance_loss(decision).item())

# Uncertainty loss: InfoNCE over pooled (clean, noisy) pairs with
# temperature-scaled cosine similarity. Identical orthonormal pools with a
# hot diagonal make it vanish.
pools = np.eye(4)
tight = uncertainty_loss(PooledPair(Tensor(pools), Tensor(pools.copy()), tau=0.05))
loose = uncertainty_loss(PooledPair(Tensor(pools), Tensor(pools.copy()), tau=1.0))
print(f"uncertainty: tight tau {tight.item():.2e}, loose tau {loose.item():.4f}")
print("closed form at tau=1:", -math.log(math.e / (math.e + 3.0)))

total = total_loss(nats, balance_loss(decision), loose, alpha=0.01, beta=0.1)
print("total objective:", total.item())
