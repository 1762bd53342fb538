#!/usr/bin/env python3
"""The online rule's memory does not grow with sequence length.

Each layer keeps its state, the traces (2N + N*H complex numbers per
sequence) and one step of forward cache. BPTT has to keep every step.
"""
# %%
import tracemalloc

import numpy as np

from lru_online import ModelConfig, Network, bptt_gradient, online_sequence_gradient
from lru_online.diagnostics import cost_report
from lru_online.tasks import random_batch

cfg = ModelConfig(num_layers=2, state_size=16, model_size=16, input_dim=3, output_dim=2,
                  dropout_p=0.0)
net = Network.init(cfg, np.random.default_rng(0))


def peak(fn):
    tracemalloc.start()
    fn()
    out = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return out


# %% one throwaway pass first: numpy and the interpreter cache a few buffers on first use
online_sequence_gradient(net, random_batch(np.random.default_rng(1), 1, 4096, 3, 2))

print(f"{'T':>6s} {'counted':>8s} {'online KiB':>11s} {'BPTT KiB':>9s}")
for T in (16, 128, 1024, 4096):
    batch = random_batch(np.random.default_rng(T), 1, T, 3, 2)
    stats = {}
    on = peak(lambda: online_sequence_gradient(net, batch, stats=stats))
    bp = peak(lambda: bptt_gradient(net, batch))
    print(f"{T:6d} {stats['peak_aux_entries']:8d} {on / 1024:11.1f} {bp / 1024:9.1f}")

# %% flop accounting at the full-size configuration
big = Network.init(ModelConfig(num_layers=4, state_size=64, model_size=128),
                   np.random.default_rng(0))
for k, v in cost_report(big).items():
    print(f"{k:30s} {v:.6g}" if isinstance(v, float) else f"{k:30s} {v}")
