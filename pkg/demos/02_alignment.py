#!/usr/bin/env python3
"""How well each learning rule points in the BPTT direction.

Per layer we take the cosine between a rule's recurrent-parameter gradient
and the BPTT one, then average over layers. Spatial drops the trace history,
Truncated1 keeps one step of it, and the online rule keeps all of it, so the
expected order is online > truncated1 > spatial. Depth hurts the online rule
only through the error signal.
"""
# %%
import numpy as np

from lru_online import ModelConfig, Network, RuleKind, bptt_gradient, cosine_alignment
from lru_online import online_sequence_gradient
from lru_online.tasks import random_batch

rules = (RuleKind.ONLINE, RuleKind.TRUNCATED1, RuleKind.SPATIAL)

# %%
for depth in (1, 2, 4):
    cos = {r: [] for r in rules}
    for seed in range(8):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(num_layers=depth, state_size=16, model_size=16, input_dim=3,
                          output_dim=2, dropout_p=0.0)
        net = Network.init(cfg, rng)
        batch = random_batch(rng, 4, 32, 3, 2)
        ref = bptt_gradient(net, batch)
        for r in rules:
            cos[r].append(cosine_alignment(online_sequence_gradient(net, batch, r), ref))
    print(f"depth {depth}: " + "  ".join(f"{r.value} {np.mean(v):.3f}" for r, v in cos.items()))
