# Top-k routing and sparse expert dispatch
# ----------------------------------------
# A router scores each token against learnable expert embeddings, softmaxes
# over experts, and keeps the k largest probabilities as combination weights.
# Unselected experts are masked to exact zero and never evaluated.

import numpy as np

from s2moe import ExpertBank, RngStream, make_router, moe_combine, route, topk_mask
from s2moe.routing import dropout_schedule_k
from s2moe.tensor import Tensor

d, n_experts, k = 16, 8, 2
rng = RngStream(0)
router = make_router(n_experts, d, "smoe", rng, dtype=np.float64)
bank = ExpertBank(n_experts, d, d_expert=32, rng=rng, dtype=np.float64)

x = Tensor(np.random.default_rng(1).standard_normal((2, 5, d)))
decision = route(x, router, k)
print("probs row 0:", np.round(decision.probs.data[0, 0], 3))
print("selected   :", decision.indices[0, 0])
print("gates row 0:", np.round(decision.gates.data[0, 0], 3))

y = moe_combine(x, decision, bank)
print("output shape:", y.shape)
print("token-expert evaluations:", bank.invocations, "=", 2 * 5, "tokens x k =", k)

# The mask on its own: keep the top k, zero the rest, ties to the lowest index.
print(topk_mask(np.array([0.4, 0.3, 0.2, 0.1]), 2))
print(topk_mask(np.array([0.25, 0.25, 0.25, 0.25]), 1))

# The frozen-router baseline grows its active expert count on a linear
# schedule over training.
print("schedule:", [dropout_schedule_k(s, 10, n_experts) for s in range(11)])
