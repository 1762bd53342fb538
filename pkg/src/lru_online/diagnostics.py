"""Gradient oracles, alignment measurements and cost accounting."""
from dataclasses import dataclass, field

import numpy as np

from .learning import (GradientEstimate, RuleKind, Trainer, bptt_gradient, layer_cosines,
                       online_sequence_gradient)
from .network import Network, forward_step
from .optim import OptimConfig
from .tasks import batch_step_loss, generate_copy_batch, make_dataset


def sequence_loss(net, batch):
    """Total masked loss of ``batch`` (summed over samples and steps), no dropout."""
    states = net.zero_states(len(batch))
    total = 0.0
    for t in range(batch.seq_len):
        states, logits, _ = forward_step(net, states, batch.inputs[:, t])
        total += batch_step_loss(logits, batch.targets[:, t], batch.loss_mask[:, t])[0].sum()
    return total


def finite_difference_gradient(net, batch=None, eps=1e-6, loss_fn=None, coords=None,
                               method="central", precision="double"):
    """Numerical derivative of the loss w.r.t. every real parameter coordinate.

    ``method``:

    * ``"central"``: three-point stencil with step ``eps``
    * ``"five-point"``: fourth-order stencil, happy with ``eps`` around 1e-3
    * ``"adaptive"``: ``scipy.differentiate.derivative`` starting from step
      ``eps``, which shrinks the step and extrapolates until converged. Use
      it as the reference: a fixed step cannot suit both ``theta_log`` (loss
      oscillates quickly over long sequences) and coordinates whose
      derivative is tiny compared with the loss.

    ``precision="extended"`` evaluates the loss of a ``long double`` copy of
    ``net`` (80-bit on x86), so cancellation costs about three fewer digits.

    ``net`` needs a ``named_arrays()`` method returning mutable real views.
    ``coords`` optionally maps parameter name -> flat indices to evaluate;
    coordinates not evaluated are NaN in the result.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if method not in ("central", "five-point", "adaptive"):
        raise ValueError(f"unknown method {method!r}")
    if precision not in ("double", "extended"):
        raise ValueError(f"unknown precision {precision!r}")
    if precision == "extended":
        if loss_fn is not None or not hasattr(net, "astype"):
            raise ValueError("extended precision needs a Network and a batch")
        net = net.astype(np.longdouble)
    if loss_fn is None:
        loss_fn = lambda: sequence_loss(net, batch)  # noqa: E731
    grads = {}
    for name, arr in net.named_arrays().items():
        g = np.full(arr.shape, np.nan)
        idx = range(arr.size) if coords is None else coords.get(name, ())
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name}: parameter array is not contiguous")
        for i in idx:
            g.flat[i] = _derivative(flat, i, loss_fn, eps, method)
        grads[name] = g
    T = batch.seq_len if batch is not None else 0
    B = len(batch) if batch is not None else 0
    return GradientEstimate(grads, "finite_difference", T, B)


_STENCILS = {  # (offset, weight); derivative = sum(w * f(x + k eps)) / eps
    "central": ((1, 0.5), (-1, -0.5)),
    "five-point": ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def _derivative(flat, i, loss_fn, eps, method):
    orig = flat[i]
    # only differences matter; removing the baseline keeps them exact when the
    # loss is long double but scipy works in float64
    base = loss_fn()
    try:
        if method == "adaptive":
            from scipy.differentiate import derivative

            def f(x):
                out = np.empty(x.shape)
                for j, v in np.ndenumerate(x):
                    flat[i] = v
                    out[j] = loss_fn() - base
                return out
            # status -1 means roundoff started to dominate; df is then the best estimate
            return float(derivative(f, float(orig), initial_step=eps).df)
        total = 0.0
        for k, w in _STENCILS[method]:
            flat[i] = orig + k * flat.dtype.type(eps)
            total += w * (loss_fn() - base)
        return float(total / flat.dtype.type(eps))
    finally:
        flat[i] = orig


def sample_coords(net, rng, per_param=None, total=None):
    """Random flat indices per parameter, either ``per_param`` each or ``total`` overall."""
    arrays = net.named_arrays()
    if total is not None:
        names = list(arrays)
        sizes = np.array([arrays[n].size for n in names])
        picks = rng.choice(sizes.sum(), size=min(total, sizes.sum()), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        coords = {n: [] for n in names}
        for p in np.sort(picks):
            k = np.searchsorted(offsets, p, side="right") - 1
            coords[names[k]].append(int(p - offsets[k]))
        return coords
    return {n: (range(a.size) if per_param is None or a.size <= per_param
                else np.sort(rng.choice(a.size, per_param, replace=False)))
            for n, a in arrays.items()}


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)


@dataclass
class ParamError:
    max_rel: float
    mean_rel: float
    worst_index: int
    checked: int


@dataclass
class GradCheckReport:
    params: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max((p.max_rel for p in self.params.values() if p.checked), default=0.0)

    @property
    def worst(self):
        name = max(self.params, key=lambda n: self.params[n].max_rel if self.params[n].checked else -1)
        return name, self.params[name].worst_index

    def passed(self, tol):
        return self.max_error <= tol

    def format(self):
        lines = [f"{'parameter':32s} {'max_rel':>10s} {'mean_rel':>10s} {'worst':>7s} {'n':>6s}"]
        for name, p in self.params.items():
            if p.checked:
                lines.append(f"{name:32s} {p.max_rel:10.2e} {p.mean_rel:10.2e} "
                             f"{p.worst_index:7d} {p.checked:6d}")
        return "\n".join(lines)


def compare_gradients(estimate, reference, keys=None):
    """Relative errors of ``estimate`` vs ``reference``; NaN coordinates are skipped."""
    report = GradCheckReport()
    for name in (reference.grads if keys is None else keys):
        a = np.ravel(estimate.grads[name])
        b = np.ravel(reference.grads[name])
        ok = ~(np.isnan(a) | np.isnan(b))
        if not ok.any():
            report.params[name] = ParamError(0.0, 0.0, -1, 0)
            continue
        err = relative_error(a[ok], b[ok])
        k = int(np.argmax(err))
        report.params[name] = ParamError(float(err[k]), float(err.mean()),
                                         int(np.flatnonzero(ok)[k]), int(ok.sum()))
    return report


def exact_keys(net, rule):
    """Parameters whose gradient ``rule`` computes exactly (for any inputs).

    The online rule is exact for the last LRU layer and everything it feeds;
    the last block's layer norm and everything below it rely on the
    instantaneous error signal only.
    """
    keys = list(net.named_arrays())
    if RuleKind.parse(rule) is RuleKind.BPTT:
        return keys
    last = len(net.blocks) - 1
    downstream = [f"blocks.{last}.lru.{n}" for n in ("nu_log", "theta_log", "gamma_log", "B", "C", "D")]
    downstream += [f"blocks.{last}.glu.{n}" for n in ("W1", "b1", "W2", "b2")]
    downstream += ["decoder.W", "decoder.b"]
    if RuleKind.parse(rule) is RuleKind.ONLINE:
        return [k for k in keys if k in downstream]
    return [k for k in downstream if ".lru." not in k or k.endswith((".C", ".D"))]


@dataclass
class AlignmentPoint:
    step: int
    mean_cosine: float
    layer_cosines: list
    loss: float


@dataclass
class AlignmentCurve:
    label: str
    points: list = field(default_factory=list)


def measure_alignment(net, probe, rule=RuleKind.ONLINE):
    est = online_sequence_gradient(net, probe, rule)
    ref = bptt_gradient(net, probe)
    cos = layer_cosines(est, ref)
    valid = [c for c in cos if not np.isnan(c)]
    return (float(np.mean(valid)) if valid else float("nan")), cos, ref.mean_loss


def alignment_run(task_cfg, model_cfg, optim_cfg, epochs, batch_size, seed=0, every=50,
                  probe_size=50, rule=RuleKind.ONLINE, label="", measure=True, on_epoch=None):
    """Train with ``rule`` and measure gradient alignment on a fixed probe batch.

    BPTT is only evaluated on the probe batch; it never drives an update.
    Returns ``(curve, net, epoch_metrics)``.
    """
    data = make_dataset(task_cfg)
    probe = generate_copy_batch(task_cfg, np.random.default_rng([seed, 7]), probe_size)
    net = Network.init(model_cfg, np.random.default_rng(seed))
    trainer = Trainer(net, rule, optim_cfg, batch_size, seed)
    curve = AlignmentCurve(label)

    def record(step, _est=None):
        if measure and step % every == 0:
            mean, cos, loss = measure_alignment(net, probe, rule)
            curve.points.append(AlignmentPoint(step, mean, cos, loss))

    record(0)
    history = []
    for epoch in range(1, epochs + 1):
        history.append(trainer.train_epoch(data, epoch, on_step=record))
        if on_epoch is not None:
            on_epoch(history[-1])
    return curve, net, history


def alignment_sweep(task_cfg, model_cfg, optim_cfg, epochs, batch_size, depths=None, r_mins=None,
                    seed=0, every=50, probe_size=50):
    """One alignment curve per grid cell (depth or ``|lambda|_min``)."""
    if depths and r_mins:
        raise ValueError("sweep over depths or r_mins, not both")
    cells = [("depth", d) for d in (depths or [])] + [("r_min", r) for r in (r_mins or [])]
    if not cells:
        raise ValueError("empty alignment grid")
    curves = {}
    for key, value in cells:
        if key == "depth":
            cfg = _replace(model_cfg, num_layers=int(value))
        else:
            cfg = _replace(model_cfg, r_min=float(value))
        curve, _, _ = alignment_run(task_cfg, cfg, optim_cfg, epochs, batch_size, seed, every,
                                    probe_size, label=f"{key}={value}")
        curves[(key, value)] = curve
    return curves


def _replace(cfg, **changes):
    from dataclasses import replace
    return replace(cfg, **changes)


def cost_report(net):
    """Storage and per-step real flop counts of the recurrent path, per sequence.

    Complex values count as one entry. Flops: complex multiply 6, complex add 2,
    complex-by-real multiply 2, real operations 1. ``flops_per_step_online``
    adds the trace updates and trace/error contractions to the forward pass;
    producing the error signal itself is spatial backprop and is reported
    separately.
    """
    N, H = net.config.state_size, net.config.model_size
    L = len(net.blocks)
    forward = (6 * N                      # lam * h
               + 4 * N * H - 2 * N        # B @ u
               + 2 * N + 2 * N            # gamma * Bu, add
               + 4 * N * H - H            # Re[C h]
               + 2 * H * H)               # D u (+ add)
    traces = (8 * N                       # e_lambda = lam e + h
              + 8 * N                     # e_gamma = lam e + Bu (Bu reused)
              + 6 * N * H + N * H + N * H)  # e_B = lam e + gamma u^T
    contraction = (8 * N                  # delta * e_lambda, accumulate
                   + 7 * N                # Re[delta * e_gamma], accumulate
                   + 8 * N * H)           # delta e_B, accumulate
    error_signal = 4 * N * H              # delta = C^T dy / 2
    return {
        "layers": L,
        "state_entries": L * N,
        "trace_entries": L * (2 * N + N * H),
        "recurrent_param_entries": L * (N + N + N * H),
        "param_entries": net.num_params(),
        "flops_per_step_forward": L * forward,
        "flops_per_step_online": L * (forward + traces + contraction),
        "flops_per_step_error_signal": L * error_signal,
        "online_to_forward_ratio": (forward + traces + contraction) / forward,
    }
