"""Small hand-checkable instances of each building block."""
import math

import mpmath
import numpy as np
import pytest

from conftest import small_batch, small_net
from lru_online.diagnostics import cost_report, finite_difference_gradient, relative_error
from lru_online.learning import (GradientEstimate, RuleKind, bptt_gradient, cosine_alignment,
                                 online_sequence_gradient)
from lru_online.lru import (LruParams, RecurrentGrad, SensitivityState, accumulate_recurrent_grad,
                            chain_to_real_params, lambda_of, lru_step, trace_step)
from lru_online.network import (ModelConfig, Network, forward_step, layer_norm,
                                spatial_backward_step)
from lru_online.numerics import cmatvec, cmul, re_cmatvec
from lru_online.optim import OptimConfig, OptState, adamw_step, lr_at
from lru_online.tasks import (CopyTaskConfig, accuracy, batch_from_patterns, bce_with_logits,
                              generate_copy_batch)


def scalar_lru(nu_log=0.0, theta_log=0.0, gamma_log=0.0, B=1 + 0j):
    return LruParams(np.array([nu_log]), np.array([theta_log]), np.array([gamma_log]),
                     np.array([[B]], complex), np.ones((1, 1), complex), np.zeros((1, 1)))


def with_lambda_zero(p):
    """Same layer with lam = exp(-exp(50)) = 0 exactly in float64."""
    p = p.copy()
    p.nu_log[:] = 50.0
    return p


# complex arithmetic

def test_cmul_cases():
    x = 0.3 - 1.7j
    assert cmul(1 + 0j, x) == x
    assert cmul(1j, 1j) == -1 + 0j
    ref = mpmath.mpc(0.5, 0.5) * mpmath.mpc(0.5, -0.5)
    got = cmul(0.5 + 0.5j, 0.5 - 0.5j)
    assert got.real == float(ref.real) == 0.5 and got.imag == float(ref.imag) == 0.0


def test_cmul_against_mpmath_random():
    rng = np.random.default_rng(0)
    a = rng.normal(size=50) + 1j * rng.normal(size=50)
    b = rng.normal(size=50) + 1j * rng.normal(size=50)
    with mpmath.workdps(40):
        ref = [complex(mpmath.mpc(x.real, x.imag) * mpmath.mpc(y.real, y.imag)) for x, y in zip(a, b)]
    np.testing.assert_allclose([cmul(x, y) for x, y in zip(a, b)], ref, rtol=1e-15, atol=1e-15)


def test_cmatvec_cases():
    np.testing.assert_array_equal(cmatvec(np.eye(2) + 0j, np.array([3.0, 4.0])), [3 + 0j, 4 + 0j])
    assert not cmatvec(np.zeros((3, 2), complex), np.array([5.0, -1.0])).any()
    M = np.array([[1 + 1j, 0], [0, 2]])
    np.testing.assert_array_equal(cmatvec(M, np.array([1.0, 1.0])), [1 + 1j, 2 + 0j])


def test_re_cmatvec_cases():
    np.testing.assert_array_equal(re_cmatvec(np.eye(1) + 0j, np.array([1 + 2j])), [1.0])
    np.testing.assert_array_equal(re_cmatvec(np.array([[1j]]), np.array([1 + 0j])), [0.0])
    np.testing.assert_array_equal(re_cmatvec(np.array([[1 + 1j]]), np.array([1 + 1j])), [0.0])


# the recurrent layer

def test_lambda_closed_forms():
    assert lambda_of(scalar_lru(nu_log=50.0))[0] == 0
    assert lambda_of(scalar_lru(theta_log=-50.0))[0] == pytest.approx(math.exp(-1), abs=1e-15)
    lam = lambda_of(scalar_lru())[0]
    assert lam.real == pytest.approx(0.19877, abs=1e-5)
    assert lam.imag == pytest.approx(0.30956, abs=1e-5)


def test_step_cases():
    rng = np.random.default_rng(0)
    p = LruParams(np.full(3, 50.0), rng.normal(size=3), np.zeros(3),
                  rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2)),
                  np.zeros((2, 3), complex), np.zeros((2, 2)))
    x = rng.normal(size=2)
    h, _ = lru_step(p, rng.normal(size=3) + 1j, x)
    np.testing.assert_allclose(h, p.B @ x, rtol=1e-15)
    p.nu_log[:] = -1.0
    h0 = rng.normal(size=3) + 1j * rng.normal(size=3)
    h, _ = lru_step(p, h0, np.zeros(2))
    np.testing.assert_allclose(h, p.lam() * h0, rtol=1e-15)
    # lam = 0.5, gamma = 1, B = 1, h = 1, x = 2
    half = scalar_lru(nu_log=math.log(math.log(2.0)), theta_log=-800.0)
    h, _ = lru_step(half, np.array([1 + 0j]), np.array([2.0]))
    assert h[0] == pytest.approx(2.5 + 0j, abs=1e-14)


def test_trace_cases():
    rng = np.random.default_rng(1)
    N, H = 3, 2
    p = with_lambda_zero(LruParams(rng.normal(size=N), rng.normal(size=N), rng.normal(size=N),
                                   rng.normal(size=(N, H)) + 1j * rng.normal(size=(N, H)),
                                   np.zeros((H, N), complex), np.zeros((H, H))))
    traces = SensitivityState(rng.normal(size=N) + 1j, rng.normal(size=N) + 1j,
                              rng.normal(size=(N, H)) + 1j)
    h_prev, x = rng.normal(size=N) + 1j * rng.normal(size=N), rng.normal(size=H)
    out = trace_step(p, h_prev, x, traces)
    np.testing.assert_array_equal(out.e_lambda, h_prev)
    np.testing.assert_allclose(out.e_B, p.gamma()[:, None] * x[None, :], rtol=1e-15)

    q = with_lambda_zero(scalar_lru())
    out = trace_step(q, np.zeros(1, complex), np.array([3.0]), SensitivityState.zeros(1, 1))
    assert out.e_gamma[0] == 3 + 0j


def test_two_step_lambda_trace_matches_finite_difference():
    p = scalar_lru(nu_log=-0.7, theta_log=0.3)
    lam = p.lam()[0]
    traces, h = SensitivityState.zeros(1, 1), np.zeros(1, complex)
    for x in (1.0, 0.0):
        x = np.array([x])
        traces = trace_step(p, h, x, traces)
        h, _ = lru_step(p, h, x)
    assert traces.e_lambda[0] == pytest.approx(1.0)

    def h2(lam_):  # h_2 = lam h_1 + 0 with h_1 = 1
        return lam_ * (0 * lam_ + 1.0)
    eps = 1e-6
    assert (h2(lam + eps) - h2(lam - eps)) / (2 * eps) == pytest.approx(1.0, abs=1e-9)


def test_accumulate_cases():
    acc = RecurrentGrad.zeros(1, 1)
    traces = SensitivityState(np.array([0.3 + 0.4j]), np.array([1j]), np.ones((1, 1), complex))
    accumulate_recurrent_grad(np.zeros(1), traces, acc)
    assert acc.d_lambda[0] == 0 and acc.d_gamma[0] == 0 and acc.d_B[0, 0] == 0
    accumulate_recurrent_grad(np.array([1 + 0j]), traces, acc)
    assert acc.d_lambda[0] == 0.3 + 0.4j
    acc = RecurrentGrad.zeros(1, 1)
    accumulate_recurrent_grad(np.array([1j]), traces, acc)
    assert acc.d_gamma[0] == -1.0


def test_chain_rule_cases():
    p = scalar_lru()
    zero = chain_to_real_params(RecurrentGrad.zeros(1, 1), p)
    assert all(not np.any(v) for v in zero.values())
    acc = RecurrentGrad(np.array([1 + 0j]), np.zeros(1), np.zeros((1, 1), complex))
    d_nu = chain_to_real_params(acc, p)["nu_log"][0]
    assert d_nu == pytest.approx(-2 * math.exp(-1) * math.cos(1.0), rel=1e-14)
    assert d_nu == pytest.approx(-0.39754, abs=1e-5)


# the network

def test_zero_network_outputs_decoder_bias():
    net = small_net(L=1)
    for arr in net.named_arrays().values():
        arr[...] = 0.0
    net.dec_b[:] = [0.25, -1.5]
    states = net.zero_states(3)
    for x in np.random.default_rng(0).normal(size=(4, 3, 3)):
        states, logits, _ = forward_step(net, states, x)
        np.testing.assert_array_equal(logits, np.tile(net.dec_b, (3, 1)))


def test_glu_saturation_limit():
    net = small_net(5, L=1)
    block = net.blocks[0]
    block.W1[...] = np.eye(4)
    block.W2[...] = 0.0
    block.b2[:] = 60.0
    x = np.random.default_rng(5).normal(size=(2, 3))
    _, _, cache = forward_step(net, net.zero_states(2), x)
    c = cache.layers[0]
    np.testing.assert_allclose(cache.z_out, c.z + c.y, rtol=1e-12)
    u = layer_norm(c.z, block.norm_scale, block.norm_bias)[0]
    np.testing.assert_allclose(c.y, re_cmatvec(block.lru.C, block.lru.gamma() * cmatvec(block.lru.B, u))
                               + u @ block.lru.D.T, rtol=1e-12)


def test_layer_norm_cases():
    scale, bias = np.array([2.0, 0.5, -1.0]), np.array([0.1, 0.2, 0.3])
    out = layer_norm(np.full((1, 3), 4.2), scale, bias)[0]
    np.testing.assert_allclose(out[0], bias, atol=1e-12)
    out = layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2))[0]
    np.testing.assert_allclose(out[0], np.array([1.0, -1.0]) / math.sqrt(1 + 1e-5), rtol=1e-15)
    assert out[0, 0] == pytest.approx(0.999995, abs=1e-6)


def test_zero_error_gives_zero_deltas():
    net = small_net(2, L=3)
    x = np.random.default_rng(2).normal(size=(2, 3))
    _, logits, cache = forward_step(net, net.zero_states(2), x)
    deltas, acc = spatial_backward_step(net, cache, np.zeros_like(logits))
    assert all(not d.any() for d in deltas)
    assert all(not a.any() for a in acc.values())


def test_single_layer_delta_is_half_readout():
    # C = identity embedding, D = 0, GLU pass-through, decoder identity on the residual stream
    cfg = ModelConfig(num_layers=1, state_size=4, model_size=4, input_dim=3, output_dim=4,
                      dropout_p=0.0)
    net = Network.init(cfg, np.random.default_rng(3))
    block = net.blocks[0]
    block.lru.C[...] = np.eye(4)
    block.lru.D[...] = 0.0
    block.W1[...] = np.eye(4)
    block.W2[...] = 0.0
    block.b2[:] = 60.0
    net.dec_W[...] = np.random.default_rng(4).normal(size=(4, 4))
    _, logits, cache = forward_step(net, net.zero_states(1), np.ones((1, 3)))
    dl = np.random.default_rng(5).normal(size=(1, 4))
    deltas, _ = spatial_backward_step(net, cache, dl)
    np.testing.assert_allclose(deltas[0], 0.5 * (dl @ net.dec_W) + 0j, rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_spatial_exact_when_lambda_is_zero(seed):
    net = small_net(seed, L=2)
    for b in net.blocks:
        b.lru.nu_log[:] = 50.0
    batch = small_batch(net, seed, T=5)
    spatial = online_sequence_gradient(net, batch, RuleKind.SPATIAL)
    # five-point stencil in extended precision keeps oracle roundoff well below 1e-6
    fd = finite_difference_gradient(net, batch, eps=1e-5, method="five-point",
                                    precision="extended")
    ref = bptt_gradient(net, batch)
    for name, g in spatial.grads.items():
        if name.endswith(("nu_log", "theta_log")):
            # lam is flat in these coordinates at nu_log = 50; both sides are 0
            assert not g.any() and np.allclose(fd.grads[name], 0.0)
            continue
        big = np.abs(fd.grads[name]) > 1e-6
        assert relative_error(g[big], fd.grads[name][big]).max(initial=0) < 1e-6, name
        np.testing.assert_allclose(g, ref.grads[name], rtol=1e-8, atol=1e-14)


def test_single_layer_online_equals_bptt():
    net = small_net(7, L=1, N=6, H=5)
    batch = small_batch(net, 7, B=3, T=12)
    online, ref = online_sequence_gradient(net, batch), bptt_gradient(net, batch)
    for key in [k for k in ref.grads if ".lru." in k]:
        np.testing.assert_allclose(online.grads[key], ref.grads[key], rtol=1e-8, atol=1e-14)


# alignment

def _estimate(vectors):
    grads = {}
    for l, v in enumerate(vectors):
        grads.update({f"blocks.{l}.lru.nu_log": v[:2], f"blocks.{l}.lru.theta_log": v[2:4],
                      f"blocks.{l}.lru.gamma_log": v[4:6], f"blocks.{l}.lru.B": v[6:]})
    return GradientEstimate(grads, RuleKind.ONLINE, 1, 1)


def test_cosine_cases():
    rng = np.random.default_rng(0)
    g = [rng.normal(size=10) for _ in range(2)]
    assert cosine_alignment(_estimate(g), _estimate(g)) == pytest.approx(1.0)
    assert cosine_alignment(_estimate(g), _estimate([-v for v in g])) == pytest.approx(-1.0)
    a = [np.eye(10)[0], np.eye(10)[3]]
    b = [np.eye(10)[1], np.eye(10)[9]]
    assert cosine_alignment(_estimate(a), _estimate(b)) == 0.0


# optimizer

def test_schedule_cases():
    cfg = OptimConfig(base_lr=3e-3, warmup_steps=10, total_steps=50)
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 10) == 3e-3
    assert lr_at(cfg, 50) == pytest.approx(0.0, abs=1e-18)


def test_adamw_zero_grad_cases():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=4), "blocks.0.lru.nu_log": rng.normal(size=2)}
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    state = OptState()
    adamw_step(params, grads, state, OptimConfig(base_lr=0.01, total_steps=10), 0)
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])
    adamw_step(params, grads, state, OptimConfig(base_lr=0.01, weight_decay=0.1, total_steps=10), 0)
    np.testing.assert_allclose(params["w"], before["w"] * (1 - 0.001), rtol=1e-15)
    np.testing.assert_array_equal(params["blocks.0.lru.nu_log"], before["blocks.0.lru.nu_log"])


def test_adamw_two_steps_by_hand():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    cfg = OptimConfig(base_lr=lr, total_steps=100, betas=(b1, b2), eps=eps)
    params, state = {"w": np.array([1.0])}, OptState()
    w, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        adamw_step(params, {"w": np.array([1.0])}, state, cfg, t - 1)
        m, v = b1 * m + (1 - b1), b2 * v + (1 - b2)
        step_lr = lr * 0.5 * (1 + math.cos(math.pi * (t - 1) / 100))
        w -= step_lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert params["w"][0] == pytest.approx(w, rel=1e-14)


# copy task

def test_copy_layout_paper_scale():
    cfg = CopyTaskConfig(20, 7, 7, 4)
    b = generate_copy_batch(cfg, np.random.default_rng(0), 4)
    assert cfg.seq_len == 48 and cfg.input_dim == 9 and b.inputs.shape == (4, 48, 9)
    assert (b.loss_mask.sum(axis=1) == 20).all()


def test_copy_layout_minimal():
    cfg = CopyTaskConfig(1, 1, 0, 2)
    b = batch_from_patterns(cfg, np.array([[[1]], [[0]]]))
    assert cfg.seq_len == 3
    np.testing.assert_array_equal(b.targets[:, 2, 0], b.inputs[:, 0, 0])
    np.testing.assert_array_equal(b.loss_mask[0], [0, 0, 1])


def test_bit_frequency():
    b = generate_copy_batch(CopyTaskConfig(10, 10, 0, 1000), np.random.default_rng(0), 1000)
    bits = b.inputs[:, :10, :10]
    assert bits.size == 10 ** 5
    assert abs(bits.mean() - 0.5) < 0.01


def test_loss_cases():
    t = np.random.default_rng(0).integers(0, 2, 7).astype(float)
    np.testing.assert_allclose(bce_with_logits(np.zeros(7), t), math.log(2), rtol=1e-15)
    assert bce_with_logits(np.full(7, 50.0), np.ones(7)).max() < 1e-20


def test_accuracy_cases():
    rng = np.random.default_rng(0)
    targets = rng.integers(0, 2, (200, 7)).astype(float)
    mask = np.ones(200)
    assert accuracy(4 * targets - 2, targets, mask) == 1.0
    assert accuracy(2 - 4 * targets, targets, mask) == 0.0
    tie = accuracy(np.zeros_like(targets), targets, mask)
    assert tie == pytest.approx(1 - targets.mean()) and abs(tie - 0.5) < 0.05


# diagnostics

class _Stub:
    def __init__(self):
        self.w = np.array([3.0])

    def named_arrays(self):
        return {"w": self.w}


def test_finite_difference_square():
    s = _Stub()
    fd = finite_difference_gradient(s, loss_fn=lambda: float(s.w[0] ** 2), eps=1e-6)
    assert fd.grads["w"][0] == pytest.approx(6.0, abs=1e-8)


def test_central_differences_converge_at_second_order():
    net = small_net(2, L=2)
    batch = small_batch(net, 2, T=6)
    ref = bptt_gradient(net, batch).grads["blocks.0.lru.theta_log"][0]
    coords = {"blocks.0.lru.theta_log": [0]}
    errs = []
    for eps in (4e-2, 2e-2, 1e-2):
        fd = finite_difference_gradient(net, batch, eps=eps, coords=coords)
        errs.append(abs(fd.grads["blocks.0.lru.theta_log"][0] - ref))
    for big, small in zip(errs, errs[1:]):
        assert 3.0 < big / small < 5.0


def test_cost_ratio_on_default_config():
    net = Network.init(ModelConfig(), np.random.default_rng(0))
    r = cost_report(net)
    assert r["trace_entries"] == r["recurrent_param_entries"]
    assert r["online_to_forward_ratio"] <= 3.0

