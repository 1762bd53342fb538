"""A single linear recurrent unit (LRU) layer and its forward-mode sensitivities.

Dynamics, with a leading batch axis on ``h`` and ``x``::

    h_t = lam * h_{t-1} + gamma * (B @ x_t)
    y_t = Re[C @ h_t] + D @ x_t

where ``lam = exp(-exp(nu_log) + i exp(theta_log))`` and ``gamma = exp(gamma_log)``.

Gradients flowing into ``h`` use the Wirtinger convention ``delta = dL/dh``
(``h̄`` treated as independent), so the readout contributes ``C / 2`` and real
parameter gradients pick up a factor 2 in :func:`chain_to_real_params`.
"""
from dataclasses import dataclass

import numpy as np

from .numerics import as_real_pairs, cmatvec, re_cmatvec

RECURRENT_NAMES = ("nu_log", "theta_log", "gamma_log", "B")


@dataclass
class LruParams:
    nu_log: np.ndarray     # (N,)
    theta_log: np.ndarray  # (N,)
    gamma_log: np.ndarray  # (N,)
    B: np.ndarray          # (N, H) complex
    C: np.ndarray          # (H, N) complex
    D: np.ndarray          # (H, H)

    def __post_init__(self):
        n, h = self.B.shape
        if n == 0 or h == 0:
            raise ValueError("LRU needs N >= 1 and H >= 1")
        for name in ("nu_log", "theta_log", "gamma_log"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if self.C.shape != (h, n) or self.D.shape != (h, h):
            raise ValueError("C must be (H, N) and D must be (H, H)")

    @property
    def state_size(self):
        return self.B.shape[0]

    @property
    def model_size(self):
        return self.B.shape[1]

    def lam(self):
        return lambda_of(self)

    def gamma(self):
        return np.exp(self.gamma_log)

    def named_arrays(self):
        """Real views of every trainable array, complex ones as (re, im) pairs."""
        return {
            "nu_log": self.nu_log,
            "theta_log": self.theta_log,
            "gamma_log": self.gamma_log,
            "B": as_real_pairs(self.B),
            "C": as_real_pairs(self.C),
            "D": self.D,
        }

    def copy(self):
        return LruParams(*(np.array(a, copy=True) for a in
                           (self.nu_log, self.theta_log, self.gamma_log, self.B, self.C, self.D)))


@dataclass
class SensitivityState:
    """Eligibility traces dh_t/dlam, dh_t/dgamma (as if complex) and dh_t/dB."""
    e_lambda: np.ndarray  # (..., N)
    e_gamma: np.ndarray   # (..., N)
    e_B: np.ndarray       # (..., N, H)

    @classmethod
    def zeros(cls, n, h, batch_shape=()):
        batch = tuple(batch_shape)
        return cls(np.zeros(batch + (n,), np.complex128),
                   np.zeros(batch + (n,), np.complex128),
                   np.zeros(batch + (n, h), np.complex128))

    def entries_per_sequence(self):
        n, h = self.e_B.shape[-2:]
        return 2 * n + n * h


@dataclass
class RecurrentGrad:
    """Complex derivatives dL/dlam, dL/dgamma (real part taken) and dL/dB."""
    d_lambda: np.ndarray  # (N,) complex
    d_gamma: np.ndarray   # (N,) real
    d_B: np.ndarray       # (N, H) complex

    @classmethod
    def zeros(cls, n, h):
        return cls(np.zeros(n, np.complex128), np.zeros(n), np.zeros((n, h), np.complex128))


def lambda_of(params):
    return np.exp(-np.exp(params.nu_log) + 1j * np.exp(params.theta_log))


def init_lru(rng, N, H, r_min=0.0, r_max=1.0, max_phase=2 * np.pi):
    """Sample LRU parameters with eigenvalues uniform on a ring of the unit disk.

    ``|lam|^2`` is uniform on ``[r_min^2, r_max^2]`` (uniform over the ring's
    area), the phase is uniform on ``[0, max_phase]``, and ``gamma`` is set to
    ``sqrt(1 - |lam|^2)``. B and C have i.i.d. Gaussian real and imaginary
    parts with variance ``1/(2H)`` and ``1/(2N)``; D starts at zero.
    """
    if N < 1 or H < 1:
        raise ValueError("LRU needs N >= 1 and H >= 1")
    if not 0.0 <= r_min < r_max <= 1.0:
        raise ValueError(f"invalid radius range [{r_min}, {r_max}]")
    u = rng.uniform(size=N)
    radius = np.sqrt(u * (r_max ** 2 - r_min ** 2) + r_min ** 2)
    radius = np.clip(radius, 1e-300, np.nextafter(1.0, 0.0))
    phase = np.maximum(rng.uniform(size=N) * max_phase, 1e-300)
    nu_log = np.log(-np.log(radius))
    theta_log = np.log(phase)
    gamma_log = np.log(np.sqrt(1.0 - radius ** 2))

    B = (rng.normal(size=(N, H)) + 1j * rng.normal(size=(N, H))) * np.sqrt(1.0 / (2 * H))
    C = (rng.normal(size=(H, N)) + 1j * rng.normal(size=(H, N))) * np.sqrt(1.0 / (2 * N))
    D = np.zeros((H, H))
    return LruParams(nu_log, theta_log, gamma_log, B, C, D)


def lru_step(params, h, x):
    """Advance the state by one input and read out from the new state."""
    h_new = params.lam() * h + params.gamma() * cmatvec(params.B, x)
    y = re_cmatvec(params.C, h_new) + x @ params.D.T
    return h_new, y


def instantaneous_terms(params, h_prev, x_next, bx=None):
    """The part of each sensitivity created by the current step alone.

    ``bx`` may pass in ``B @ x_next`` when the forward pass already has it.
    """
    if bx is None:
        bx = cmatvec(params.B, x_next)
    gam = params.gamma()
    e_B = np.zeros(x_next.shape[:-1] + (gam.size, x_next.shape[-1]), np.complex128)
    e_B.real[...] = gam[:, None] * x_next[..., None, :]
    return SensitivityState(np.array(h_prev, dtype=np.complex128, copy=True), bx, e_B)


def carry_traces(params, traces, inst):
    """``lam * traces + inst``; the forward-mode recursion shared by all rules."""
    lam = params.lam()
    return SensitivityState(lam * traces.e_lambda + inst.e_lambda,
                            lam * traces.e_gamma + inst.e_gamma,
                            lam[:, None] * traces.e_B + inst.e_B)


def trace_step(params, h_prev, x_next, traces, bx=None):
    """Exact sensitivities of ``h_next`` given those of ``h_prev``.

    ``h_prev`` is the state before the step and ``x_next`` the input consumed
    by it. Each trace coordinate only ever touches its own neuron (and for
    ``e_B`` its own synapse).
    """
    return carry_traces(params, traces, instantaneous_terms(params, h_prev, x_next, bx))


def trace_step_(params, h_prev, x_next, traces, bx=None):
    """In-place :func:`trace_step`; overwrites and returns ``traces``."""
    if bx is None:
        bx = cmatvec(params.B, x_next)
    lam = params.lam()
    traces.e_lambda *= lam
    traces.e_lambda += h_prev
    traces.e_gamma *= lam
    traces.e_gamma += bx
    traces.e_B *= lam[:, None]
    traces.e_B.real += params.gamma()[:, None] * x_next[..., None, :]
    return traces


def accumulate_recurrent_grad(delta, traces, acc):
    """Add ``delta * e`` for every recurrent parameter, summed over any batch axis."""
    delta = np.asarray(delta, dtype=np.complex128)
    batch_axes = tuple(range(delta.ndim - 1))
    acc.d_lambda += np.sum(delta * traces.e_lambda, axis=batch_axes)
    acc.d_gamma += np.sum((delta * traces.e_gamma).real, axis=batch_axes)
    if delta.ndim == 1:
        acc.d_B += delta[:, None] * traces.e_B
    else:
        flat_d = delta.reshape(-1, delta.shape[-1])
        flat_e = traces.e_B.reshape((-1,) + traces.e_B.shape[-2:])
        # per neuron n: (1, batch) @ (batch, H)
        acc.d_B += np.matmul(flat_d.T[:, None, :], flat_e.transpose(1, 0, 2))[:, 0, :]
    return acc


def chain_to_real_params(acc, params):
    """Map complex derivatives onto the real trainable parameters.

    Returns a dict keyed like :meth:`LruParams.named_arrays` (recurrent part
    only). B's entry is the real-pair view of ``2 * conj(dL/dB)``, i.e.
    ``(dL/dRe B, dL/dIm B)`` interleaved.
    """
    lam = params.lam()
    d_nu = 2.0 * (acc.d_lambda * lam * -np.exp(params.nu_log)).real
    d_theta = 2.0 * (acc.d_lambda * lam * 1j * np.exp(params.theta_log)).real
    d_gamma_log = 2.0 * acc.d_gamma * params.gamma()
    d_B = np.ascontiguousarray(2.0 * np.conj(acc.d_B))
    return {
        "nu_log": d_nu,
        "theta_log": d_theta,
        "gamma_log": d_gamma_log,
        "B": as_real_pairs(d_B),
    }
