"""Learning rules over a stream of (input, target, mask) steps.

``ONLINE`` carries exact eligibility traces inside every LRU layer and gets its
error signals from instantaneous spatial backprop. ``SPATIAL`` keeps only the
current step's contribution to each trace, ``TRUNCATED1`` one extra carried
step. ``BPTT`` is the offline reference and stores the whole sequence.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .lru import (RECURRENT_NAMES, RecurrentGrad, SensitivityState, accumulate_recurrent_grad,
                  carry_traces, chain_to_real_params, instantaneous_terms, trace_step_)
from .network import (dropout_masks, finalize_grads, forward_step, spatial_backward_step,
                      zero_grads)
from .optim import OptState, adamw_step, lr_at
from .tasks import batch_step_loss


class RuleKind(str, Enum):
    ONLINE = "online"
    SPATIAL = "spatial"
    TRUNCATED1 = "truncated1"
    BPTT = "bptt"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        aliases = {"online": cls.ONLINE, "onlinetraces": cls.ONLINE, "ours": cls.ONLINE,
                   "spatial": cls.SPATIAL, "spat": cls.SPATIAL,
                   "truncated1": cls.TRUNCATED1, "truncated": cls.TRUNCATED1, "trunc": cls.TRUNCATED1,
                   "bptt": cls.BPTT, "bp": cls.BPTT}
        if key not in aliases:
            raise ValueError(f"unknown learning rule {name!r}")
        return aliases[key]


@dataclass
class GradientEstimate:
    grads: dict
    rule: RuleKind
    seq_len: int
    batch_size: int
    loss_sum: float = 0.0
    mask_count: float = 0.0
    correct_bits: float = 0.0
    num_bits: float = 0.0

    @property
    def mean_loss(self):
        return self.loss_sum / self.mask_count if self.mask_count else float("nan")

    @property
    def accuracy(self):
        return self.correct_bits / self.num_bits if self.num_bits else float("nan")

    def flat(self, keys=None):
        keys = self.grads.keys() if keys is None else keys
        return np.concatenate([self.grads[k].ravel() for k in keys])

    def layer_recurrent(self, layer):
        return self.flat([f"blocks.{layer}.lru.{n}" for n in RECURRENT_NAMES])

    @property
    def num_layers(self):
        return len({k.split(".")[1] for k in self.grads if k.startswith("blocks.")})


def _merge_recurrent(net, acc, rec):
    grads = finalize_grads(acc)
    for l, block in enumerate(net.blocks):
        for name, g in chain_to_real_params(rec[l], block.lru).items():
            grads[f"blocks.{l}.lru.{name}"] = g
    return grads


def _step_metrics(logits, targets, mask):
    correct = (((logits > 0) == (targets > 0.5)) * mask[:, None]).sum()
    return correct, mask.sum() * logits.shape[-1]


class OnlineLearner:
    """Streams one step at a time; memory does not grow with sequence length.

    ``trace_law(rule, params, h_prev, u, bu, traces, prev_inst) -> (traces, prev_inst)``
    may replace the rule's trace update (used for negative controls).
    """

    def __init__(self, net, rule=RuleKind.ONLINE, batch_size=1, dropout_rng=None, trace_law=None):
        rule = RuleKind.parse(rule)
        if rule is RuleKind.BPTT:
            raise ValueError("BPTT is offline; use bptt_gradient")
        self.net, self.rule, self.batch_size = net, rule, batch_size
        self.dropout_rng = dropout_rng
        self.trace_law = trace_law or advance_traces
        N, H = net.config.state_size, net.config.model_size
        self.states = net.zero_states(batch_size)
        self.traces = [SensitivityState.zeros(N, H, (batch_size,)) for _ in net.blocks]
        self.prev_inst = [SensitivityState.zeros(N, H, (batch_size,)) if rule is RuleKind.TRUNCATED1
                          else None for _ in net.blocks]
        self.t = 0
        self.peak_entries = 0
        self.reset_gradients()

    def reset_gradients(self):
        N, H = self.net.config.state_size, self.net.config.model_size
        self.acc = zero_grads(self.net)
        self.rec = [RecurrentGrad.zeros(N, H) for _ in self.net.blocks]
        self.loss_sum = self.mask_count = self.correct = self.num_bits = 0.0
        self.steps_since_reset = 0

    def step(self, x, target, mask):
        """Consume one input step; returns the logits."""
        net = self.net
        masks = dropout_masks(net, self.dropout_rng, self.batch_size)
        h_prev = self.states
        self.states, logits, cache = forward_step(net, h_prev, x, masks, step=self.t)
        for l, block in enumerate(net.blocks):
            c = cache.layers[l]
            self.traces[l], self.prev_inst[l] = self.trace_law(
                self.rule, block.lru, h_prev[l], c.u, c.bu, self.traces[l], self.prev_inst[l])
        losses, dlogits = batch_step_loss(logits, target, mask)
        deltas, _ = spatial_backward_step(net, cache, dlogits, acc=self.acc, step=self.t)
        for l in range(len(net.blocks)):
            accumulate_recurrent_grad(deltas[l], self.traces[l], self.rec[l])

        self.peak_entries = max(self.peak_entries, self.aux_entries(cache))
        correct, bits = _step_metrics(logits, target, mask)
        self.loss_sum += float(losses.sum())
        self.mask_count += float(mask.sum())
        self.correct += float(correct)
        self.num_bits += float(bits)
        self.t += 1
        self.steps_since_reset += 1
        return logits

    def aux_entries(self, cache=None):
        """Per-sequence scalars kept between steps: states, traces and one step cache."""
        total = 0
        for h, tr, prev in zip(self.states, self.traces, self.prev_inst):
            total += h.shape[-1] + tr.entries_per_sequence()
            if prev is not None:
                total += prev.entries_per_sequence()
        if cache is not None:
            total += cache.num_entries()
        return total

    def estimate(self, reset=True):
        est = GradientEstimate(_merge_recurrent(self.net, self.acc, self.rec), self.rule,
                               self.steps_since_reset, self.batch_size, self.loss_sum,
                               self.mask_count, self.correct, self.num_bits)
        if reset:
            self.reset_gradients()
        return est


def advance_traces(rule, params, h_prev, u, bu, traces, prev_inst):
    """Next traces under ``rule``; may reuse the buffers of ``traces``/``prev_inst``."""
    if rule is RuleKind.ONLINE:
        return trace_step_(params, h_prev, u, traces, bu), None
    inst = instantaneous_terms(params, h_prev, u, bu)
    if rule is RuleKind.SPATIAL:
        return inst, None
    if rule is RuleKind.TRUNCATED1:
        # one carried step: inst_t + lam * inst_{t-1}
        return carry_traces(params, prev_inst, inst), inst
    raise ValueError(f"no trace law for {rule}")


def online_sequence_gradient(net, batch, rule=RuleKind.ONLINE, dropout_rng=None,
                             update_every=None, on_update=None, trace_law=None, stats=None):
    """Summed gradient estimate over a batch of sequences, computed in one forward pass.

    With ``update_every=K`` the partial estimate is handed to ``on_update``
    every K steps (and reset); the return value then covers the final chunk.
    """
    learner = OnlineLearner(net, rule, len(batch), dropout_rng, trace_law)
    T = batch.seq_len
    for t in range(T):
        learner.step(batch.inputs[:, t], batch.targets[:, t], batch.loss_mask[:, t])
        if update_every and on_update is not None and (t + 1) % update_every == 0 and t + 1 < T:
            on_update(learner.estimate())
    if stats is not None:
        stats["peak_aux_entries"] = learner.peak_entries
        stats["trace_entries_per_layer"] = [tr.entries_per_sequence() for tr in learner.traces]
    return learner.estimate()


def bptt_gradient(net, batch, dropout_rng=None):
    """Exact gradient of the summed masked loss by a hand-written reverse pass."""
    B, T = len(batch), batch.seq_len
    states = net.zero_states(B)
    caches, dlogits_all = [], []
    loss_sum = correct = num_bits = 0.0
    for t in range(T):
        masks = dropout_masks(net, dropout_rng, B)
        states, logits, cache = forward_step(net, states, batch.inputs[:, t], masks, step=t)
        losses, dlogits = batch_step_loss(logits, batch.targets[:, t], batch.loss_mask[:, t])
        c, nb = _step_metrics(logits, batch.targets[:, t], batch.loss_mask[:, t])
        loss_sum += float(losses.sum())
        correct += float(c)
        num_bits += float(nb)
        caches.append(cache)
        dlogits_all.append(dlogits)

    N, H = net.config.state_size, net.config.model_size
    acc = zero_grads(net)
    rec = [RecurrentGrad.zeros(N, H) for _ in net.blocks]
    carry = [None] * len(net.blocks)
    for t in range(T - 1, -1, -1):
        deltas, _ = spatial_backward_step(net, caches[t], dlogits_all[t], acc=acc, carry=carry)
        for l, block in enumerate(net.blocks):
            p, c, d = block.lru, caches[t].layers[l], deltas[l]
            rec[l].d_lambda += (d * c.h_prev).sum(axis=0)
            rec[l].d_gamma += (d * c.bu).real.sum(axis=0)
            rec[l].d_B += np.einsum("bn,bh->nh", d * p.gamma(), c.u)
            carry[l] = p.lam() * d
    return GradientEstimate(_merge_recurrent(net, acc, rec), RuleKind.BPTT, T, B, loss_sum,
                            float(batch.loss_mask.sum()), correct, num_bits)


def sequence_gradient(net, batch, rule, dropout_rng=None):
    rule = RuleKind.parse(rule)
    if rule is RuleKind.BPTT:
        return bptt_gradient(net, batch, dropout_rng)
    return online_sequence_gradient(net, batch, rule, dropout_rng)


def layer_cosines(a, b):
    """Cosine between the recurrent-parameter gradients of each block (nan if a norm is 0)."""
    if a.grads.keys() != b.grads.keys():
        raise ValueError("gradient estimates have different parameter sets")
    out = []
    for l in range(a.num_layers):
        ga, gb = a.layer_recurrent(l), b.layer_recurrent(l)
        na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
        out.append(float(np.clip(ga @ gb / (na * nb), -1.0, 1.0)) if na > 0 and nb > 0
                   else float("nan"))
    return out


def cosine_alignment(a, b):
    """Per-layer cosine averaged over layers; undefined layers are skipped."""
    cos = [c for c in layer_cosines(a, b) if not np.isnan(c)]
    return float(np.mean(cos)) if cos else float("nan")


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    train_loss: float
    train_accuracy: float
    lr: float


@dataclass
class Trainer:
    """Minibatch training with per-batch gradients from one learning rule."""
    net: object
    rule: RuleKind
    optim: object
    batch_size: int
    seed: int = 0
    state: OptState = field(default_factory=OptState)
    step: int = 0

    def __post_init__(self):
        self.rule = RuleKind.parse(self.rule)
        self._shuffle_rng = np.random.default_rng([self.seed, 1])

    def train_batch(self, batch):
        drop = (np.random.default_rng([self.seed, 2, self.step])
                if self.net.config.dropout_p > 0 else None)
        est = sequence_gradient(self.net, batch, self.rule, drop)
        scale = 1.0 / (len(batch) * batch.seq_len)
        grads = {k: g * scale for k, g in est.grads.items()}
        if not np.isfinite(est.loss_sum):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        adamw_step(self.net.named_arrays(), grads, self.state, self.optim, self.step)
        self.step += 1
        return est

    def batches_per_epoch(self, n):
        return n // self.batch_size

    def train_epoch(self, data, epoch, on_step=None):
        perm = self._shuffle_rng.permutation(len(data))
        loss_sum = mask_count = correct = bits = 0.0
        for i in range(self.batches_per_epoch(len(data))):
            est = self.train_batch(data.subset(perm[i * self.batch_size:(i + 1) * self.batch_size]))
            loss_sum += est.loss_sum
            mask_count += est.mask_count
            correct += est.correct_bits
            bits += est.num_bits
            if on_step is not None:
                on_step(self.step, est)
        return EpochMetrics(epoch, self.step, loss_sum / mask_count, correct / bits,
                            lr_at(self.optim, min(self.step, self.optim.total_steps)))
