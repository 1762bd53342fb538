"""Synthetic copy task and per-step losses.

Sequence layout for ``pattern_len=P``, ``padding=K`` (total ``2P + K + 1`` steps):

* steps ``0..P-1`` show a random bit pattern; channel ``bits`` is 1 (presentation flag)
* steps ``P..P+K-1`` are blank
* step ``P+K`` raises the recall cue (channel ``bits + 1``)
* steps ``P+K+1..2P+K`` are blank inputs; the target is the pattern, in order,
  and only these steps carry loss
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class CopyTaskConfig:
    pattern_len: int = 20
    bits: int = 7
    padding: int = 7
    num_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.pattern_len < 1 or self.bits < 1 or self.padding < 0:
            raise ValueError("need pattern_len >= 1, bits >= 1, padding >= 0")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")

    @property
    def seq_len(self):
        return 2 * self.pattern_len + self.padding + 1

    @property
    def input_dim(self):
        return self.bits + 2


@dataclass
class CopyTaskBatch:
    inputs: np.ndarray     # (batch, T, input_dim)
    targets: np.ndarray    # (batch, T, output_dim), 0/1
    loss_mask: np.ndarray  # (batch, T), 0/1

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def seq_len(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        return CopyTaskBatch(self.inputs[idx], self.targets[idx], self.loss_mask[idx])


def batch_from_patterns(cfg, patterns):
    """Lay out ``patterns`` of shape (batch, pattern_len, bits) as copy sequences."""
    patterns = np.asarray(patterns, dtype=np.float64)
    n, P, K = patterns.shape[0], cfg.pattern_len, cfg.padding
    if patterns.shape[1:] != (P, cfg.bits):
        raise ValueError(f"patterns must be (batch, {P}, {cfg.bits})")
    T = cfg.seq_len
    inputs = np.zeros((n, T, cfg.input_dim))
    targets = np.zeros((n, T, cfg.bits))
    mask = np.zeros((n, T))
    inputs[:, :P, :cfg.bits] = patterns
    inputs[:, :P, cfg.bits] = 1.0
    inputs[:, P + K, cfg.bits + 1] = 1.0
    targets[:, P + K + 1:] = patterns
    mask[:, P + K + 1:] = 1.0
    return CopyTaskBatch(inputs, targets, mask)


def generate_copy_batch(cfg, rng, batch_size):
    patterns = rng.integers(0, 2, size=(batch_size, cfg.pattern_len, cfg.bits))
    return batch_from_patterns(cfg, patterns)


def make_dataset(cfg):
    """The fixed training set of ``num_samples`` sequences for ``cfg.seed``."""
    return generate_copy_batch(cfg, np.random.default_rng(cfg.seed), cfg.num_samples)


def random_batch(rng, batch_size, seq_len, input_dim, output_dim, mask_prob=1.0):
    """Gaussian inputs with random binary targets; used by gradient checks."""
    inputs = rng.normal(size=(batch_size, seq_len, input_dim))
    targets = rng.integers(0, 2, size=(batch_size, seq_len, output_dim)).astype(np.float64)
    mask = (rng.random((batch_size, seq_len)) < mask_prob).astype(np.float64)
    return CopyTaskBatch(inputs, targets, mask)


def bce_with_logits(logits, targets):
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def step_loss(logits, target, masked):
    """Mean per-bit sigmoid cross-entropy of one step, or 0 when unmasked."""
    if not masked:
        return 0.0
    return float(np.mean(bce_with_logits(np.asarray(logits, float), np.asarray(target, float))))


def batch_step_loss(logits, targets, mask):
    """Per-sample losses of one step and their gradient w.r.t. the logits.

    ``logits``/``targets`` are (batch, bits), ``mask`` is (batch,).
    """
    bits = logits.shape[-1]
    losses = mask * bce_with_logits(logits, targets).mean(axis=-1)
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    dlogits = mask[:, None] * (probs - targets) / bits
    return losses, dlogits


def accuracy(logits, targets, mask):
    """Fraction of masked bits whose sign matches the target (logit 0 predicts 0)."""
    logits, targets, mask = np.asarray(logits), np.asarray(targets), np.asarray(mask)
    correct = ((logits > 0) == (targets > 0.5)) * mask[..., None]
    total = mask.sum() * logits.shape[-1]
    return float(correct.sum() / total) if total else float("nan")


_MAGIC = b"CPYT"
_HEADER = struct.Struct("<4sIIIIIq")


def save_dataset(cfg, patterns, path):
    """Header (cfg + seed) followed by the patterns packed 8 bits per byte."""
    patterns = np.asarray(patterns, dtype=np.uint8)
    header = _HEADER.pack(_MAGIC, 1, cfg.pattern_len, cfg.bits, cfg.padding,
                          patterns.shape[0], cfg.seed)
    Path(path).write_bytes(header + np.packbits(patterns.ravel(), bitorder="little").tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    magic, version, P, bits, K, n, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a copy-task dataset file")
    cfg = CopyTaskConfig(P, bits, K, n, seed)
    flat = np.unpackbits(np.frombuffer(raw[_HEADER.size:], np.uint8), bitorder="little")
    patterns = flat[:n * P * bits].reshape(n, P, bits)
    return cfg, patterns


def dataset_patterns(cfg):
    """Patterns underlying :func:`make_dataset`, for :func:`save_dataset`."""
    return np.random.default_rng(cfg.seed).integers(0, 2, size=(cfg.num_samples, cfg.pattern_len, cfg.bits))
