"""Stacked residual LRU blocks with an affine encoder and decoder.

Each block computes ``z + dropout(GLU(LRU(LayerNorm(z))))`` with
``GLU(v) = (W1 v + b1) * sigmoid(W2 v + b2)``. All functions work on one time
step of a batch; nothing here keeps history.
"""
import ast
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .lru import LruParams, init_lru
from .numerics import as_real_pairs, cmatvec, re_cmatvec

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    num_layers: int = 4
    state_size: int = 64
    model_size: int = 128
    input_dim: int = 9
    output_dim: int = 7
    dropout_p: float = 0.1
    r_min: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        for name in ("num_layers", "state_size", "model_size", "input_dim", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_size < 2:
            raise ValueError("model_size must be >= 2 for layer norm")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0.0 <= self.r_min < self.r_max <= 1.0:
            raise ValueError("need 0 <= r_min < r_max <= 1")


@dataclass
class Block:
    norm_scale: np.ndarray
    norm_bias: np.ndarray
    lru: LruParams
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def named_arrays(self):
        out = {"norm.scale": self.norm_scale, "norm.bias": self.norm_bias}
        out.update({f"lru.{k}": v for k, v in self.lru.named_arrays().items()})
        out.update({"glu.W1": self.W1, "glu.b1": self.b1, "glu.W2": self.W2, "glu.b2": self.b2})
        return out


@dataclass
class Network:
    config: ModelConfig
    enc_W: np.ndarray
    enc_b: np.ndarray
    blocks: list
    dec_W: np.ndarray
    dec_b: np.ndarray

    @classmethod
    def init(cls, config, rng):
        H = config.model_size
        enc_W = rng.normal(size=(H, config.input_dim)) / np.sqrt(config.input_dim)
        blocks = []
        for _ in range(config.num_layers):
            lru = init_lru(rng, config.state_size, H, config.r_min, config.r_max)
            blocks.append(Block(
                norm_scale=np.ones(H), norm_bias=np.zeros(H), lru=lru,
                W1=rng.normal(size=(H, H)) / np.sqrt(H), b1=np.zeros(H),
                W2=rng.normal(size=(H, H)) / np.sqrt(H), b2=np.zeros(H)))
        dec_W = rng.normal(size=(config.output_dim, H)) / np.sqrt(H)
        return cls(config, enc_W, np.zeros(H), blocks, dec_W, np.zeros(config.output_dim))

    def named_arrays(self):
        """Ordered name -> real array view of every trainable parameter."""
        out = {"encoder.W": self.enc_W, "encoder.b": self.enc_b}
        for l, block in enumerate(self.blocks):
            out.update({f"blocks.{l}.{k}": v for k, v in block.named_arrays().items()})
        out["decoder.W"] = self.dec_W
        out["decoder.b"] = self.dec_b
        return out

    def num_params(self):
        return sum(a.size for a in self.named_arrays().values())

    def copy(self):
        blocks = [Block(b.norm_scale.copy(), b.norm_bias.copy(), b.lru.copy(),
                        b.W1.copy(), b.b1.copy(), b.W2.copy(), b.b2.copy()) for b in self.blocks]
        return Network(self.config, self.enc_W.copy(), self.enc_b.copy(), blocks,
                       self.dec_W.copy(), self.dec_b.copy())

    def zero_states(self, batch_size):
        dtype = self.blocks[0].lru.B.dtype
        return [np.zeros((batch_size, self.config.state_size), dtype) for _ in self.blocks]

    def astype(self, real_dtype):
        """Copy with every parameter in ``real_dtype`` (complex ones in its complex twin)."""
        cplx = np.result_type(real_dtype, np.complex64)

        def cast(a):
            return np.array(a, dtype=cplx if np.iscomplexobj(a) else real_dtype)
        blocks = [Block(cast(b.norm_scale), cast(b.norm_bias),
                        LruParams(*(cast(a) for a in (b.lru.nu_log, b.lru.theta_log,
                                                      b.lru.gamma_log, b.lru.B, b.lru.C, b.lru.D))),
                        cast(b.W1), cast(b.b1), cast(b.W2), cast(b.b2)) for b in self.blocks]
        return Network(self.config, cast(self.enc_W), cast(self.enc_b), blocks,
                       cast(self.dec_W), cast(self.dec_b))


@dataclass
class LayerCache:
    z: np.ndarray        # block input
    n: np.ndarray        # normalized input before scale/bias
    inv_std: np.ndarray
    u: np.ndarray        # LRU input
    h_prev: np.ndarray
    h: np.ndarray
    bu: np.ndarray       # B @ u
    y: np.ndarray        # LRU output
    a: np.ndarray        # GLU linear path
    s: np.ndarray        # GLU gate
    keep: np.ndarray = None


@dataclass
class StepCache:
    x: np.ndarray
    layers: list
    z_out: np.ndarray
    step: int = None

    def num_entries(self):
        """Stored scalars per sequence (complex entries count once)."""
        total = self.x.shape[-1] + self.z_out.shape[-1]
        for c in self.layers:
            for f in fields(c):
                arr = getattr(c, f.name)
                if arr is not None:
                    total += arr[0].size if arr.ndim > 1 else arr.size
        return total


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_norm(x, scale, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    n = xc * inv_std
    return n * scale + bias, n, inv_std


def layer_norm_backward(dout, n, inv_std, scale):
    """Returns (dx, dscale, dbias), parameter gradients summed over batch axes."""
    batch_axes = tuple(range(dout.ndim - 1))
    dscale = (dout * n).sum(axis=batch_axes)
    dbias = dout.sum(axis=batch_axes)
    dn = dout * scale
    dx = inv_std * (dn - dn.mean(axis=-1, keepdims=True)
                    - n * (dn * n).mean(axis=-1, keepdims=True))
    return dx, dscale, dbias


def dropout_masks(net, rng, batch_size):
    """Inverted-dropout multipliers for one step, one array per block (or None)."""
    p = net.config.dropout_p
    if p == 0.0 or rng is None:
        return None
    H = net.config.model_size
    return [(rng.random((batch_size, H)) >= p) / (1.0 - p) for _ in net.blocks]


def forward_step(net, states, x, masks=None, step=None):
    """One time step through the whole network.

    ``states`` holds one ``(batch, N)`` complex array per block. Returns
    ``(new_states, logits, cache)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(states) != len(net.blocks):
        raise ValueError(f"expected {len(net.blocks)} states, got {len(states)}")
    if x.shape[-1] != net.enc_W.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != {net.enc_W.shape[1]}")
    z = x @ net.enc_W.T + net.enc_b
    new_states, layers = [], []
    for l, (block, h_prev) in enumerate(zip(net.blocks, states)):
        p = block.lru
        u, n, inv_std = layer_norm(z, block.norm_scale, block.norm_bias)
        bu = cmatvec(p.B, u)
        h = p.lam() * h_prev + p.gamma() * bu
        y = re_cmatvec(p.C, h) + u @ p.D.T
        a = y @ block.W1.T + block.b1
        s = sigmoid(y @ block.W2.T + block.b2)
        g = a * s
        keep = None if masks is None else masks[l]
        if keep is not None:
            g = g * keep
        layers.append(LayerCache(z, n, inv_std, u, h_prev, h, bu, y, a, s, keep))
        new_states.append(h)
        z = z + g
    logits = z @ net.dec_W.T + net.dec_b
    return new_states, logits, StepCache(x, layers, z, step)


def zero_grads(net):
    """Accumulator dict; complex parameters accumulate as complex arrays."""
    acc = {}
    for name, arr in net.named_arrays().items():
        if name.endswith(".lru.B") or name.endswith(".lru.C"):
            acc[name] = np.zeros(arr.shape[:-1] + (arr.shape[-1] // 2,), np.complex128)
        else:
            acc[name] = np.zeros_like(arr)
    return acc


def spatial_backward_step(net, cache, dlogits, acc=None, carry=None, step=None):
    """Instantaneous backprop through depth for one step.

    Returns ``(deltas, acc)``: ``deltas[l] = dL_t/dh_t`` (Wirtinger) for every
    block, and ``acc`` with this step's gradients of every parameter outside
    {nu_log, theta_log, gamma_log, B} added in. The complex entry for ``C``
    holds ``dL/dRe C + i dL/dIm C``.

    ``carry`` optionally adds a per-block gradient arriving from the future
    state ``h_{t+1}``; this turns the step into one step of full BPTT.
    """
    if step is not None and cache.step is not None and step != cache.step:
        raise RuntimeError(f"stale cache: built at step {cache.step}, used at step {step}")
    if acc is None:
        acc = zero_grads(net)
    dlogits = np.atleast_2d(dlogits)
    acc["decoder.W"] += dlogits.T @ cache.z_out
    acc["decoder.b"] += dlogits.sum(axis=0)
    dz = dlogits @ net.dec_W
    deltas = [None] * len(net.blocks)
    for l in range(len(net.blocks) - 1, -1, -1):
        block, c, pre = net.blocks[l], cache.layers[l], f"blocks.{l}."
        p = block.lru
        dg = dz if c.keep is None else dz * c.keep
        da = dg * c.s
        dpre2 = dg * c.a * c.s * (1.0 - c.s)
        acc[pre + "glu.W1"] += da.T @ c.y
        acc[pre + "glu.b1"] += da.sum(axis=0)
        acc[pre + "glu.W2"] += dpre2.T @ c.y
        acc[pre + "glu.b2"] += dpre2.sum(axis=0)
        dy = da @ block.W1 + dpre2 @ block.W2

        acc[pre + "lru.D"] += dy.T @ c.u
        acc[pre + "lru.C"] += dy.T @ np.conj(c.h)
        delta = 0.5 * (dy @ p.C)
        if carry is not None and carry[l] is not None:
            delta = delta + carry[l]
        deltas[l] = delta
        du = dy @ p.D + 2.0 * ((delta * p.gamma()) @ p.B).real

        dzn, dscale, dbias = layer_norm_backward(du, c.n, c.inv_std, block.norm_scale)
        acc[pre + "norm.scale"] += dscale
        acc[pre + "norm.bias"] += dbias
        dz = dz + dzn
    acc["encoder.W"] += dz.T @ cache.x
    acc["encoder.b"] += dz.sum(axis=0)
    return deltas, acc


def finalize_grads(acc):
    """Convert an accumulator dict into real arrays (complex -> real-pair view)."""
    out = {}
    for name, arr in acc.items():
        out[name] = as_real_pairs(np.ascontiguousarray(arr)) if np.iscomplexobj(arr) else arr
    return out


def save_checkpoint(net, path):
    """Write ``<path>.manifest`` (text) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    lines = ["# lru_online checkpoint v1"]
    for f in fields(net.config):
        lines.append(f"config {f.name} {getattr(net.config, f.name)!r}")
    chunks = []
    for name, arr in net.named_arrays().items():
        lines.append(f"param {name} float64 {'x'.join(map(str, arr.shape))}")
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(path):
    path = Path(path)
    cfg, params = {}, []
    for line in path.with_suffix(".manifest").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        kind, name, rest = line.split(" ", 2)
        if kind == "config":
            cfg[name] = ast.literal_eval(rest)
        elif kind == "param":
            _, shape = rest.split(" ")
            params.append((name, tuple(int(s) for s in shape.split("x"))))
    config = ModelConfig(**cfg)
    net = Network.init(config, np.random.default_rng(0))
    data = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays = net.named_arrays()
    offset = 0
    for name, shape in params:
        size = int(np.prod(shape))
        arrays[name][...] = data[offset:offset + size].reshape(shape)
        offset += size
    if offset != data.size:
        raise ValueError("checkpoint binary does not match manifest")
    return net
