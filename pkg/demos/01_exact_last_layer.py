#!/usr/bin/env python3
"""Where the online rule is exact, and where it is not.

Traces inside every LRU layer are exact forward-mode sensitivities. The only
approximation is the error signal: each layer gets the instantaneous
dL_t/dh_t from spatial backprop and never hears about how h_t affects later
losses through the layers above it. The last layer has no layer above it, so
its recurrent gradient comes out exact.
"""
# %%
import numpy as np

from lru_online import ModelConfig, Network, bptt_gradient, online_sequence_gradient
from lru_online.diagnostics import compare_gradients, finite_difference_gradient, sample_coords
from lru_online.tasks import random_batch

rng = np.random.default_rng(0)
cfg = ModelConfig(num_layers=3, state_size=8, model_size=8, input_dim=3, output_dim=2,
                  dropout_p=0.0)
net = Network.init(cfg, rng)
batch = random_batch(rng, 4, 32, cfg.input_dim, cfg.output_dim)

# %% BPTT against finite differences first: it is the oracle for everything else
coords = sample_coords(net, rng, per_param=3)
fd = finite_difference_gradient(net, batch, 1e-6, coords=coords, method="central",
                                precision="extended")
bp = bptt_gradient(net, batch)
print("BPTT vs finite differences, max relative error:",
      f"{compare_gradients(bp, fd).max_error:.2e}")

# %% online vs BPTT, block by block
on = online_sequence_gradient(net, batch)
for l in range(cfg.num_layers):
    keys = [f"blocks.{l}.lru.{n}" for n in ("nu_log", "theta_log", "gamma_log", "B")]
    err = compare_gradients(on, bp, keys).max_error
    print(f"block {l}: recurrent params max rel error {err:.2e}")
# the last block sits at ~1e-14; lower blocks carry the expected bias
