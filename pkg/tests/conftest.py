import numpy as np
import pytest

from lru_online import CopyTaskConfig, ModelConfig, Network
from lru_online.tasks import random_batch


def small_net(seed=0, L=1, N=4, H=4, in_dim=3, out_dim=2, **kw):
    cfg = ModelConfig(num_layers=L, state_size=N, model_size=H, input_dim=in_dim,
                      output_dim=out_dim, dropout_p=kw.pop("dropout_p", 0.0), **kw)
    return Network.init(cfg, np.random.default_rng(seed))


def small_batch(net, seed=0, B=2, T=6, mask_prob=1.0):
    c = net.config
    return random_batch(np.random.default_rng([seed, 99]), B, T, c.input_dim, c.output_dim,
                        mask_prob)


@pytest.fixture
def tiny_task():
    return CopyTaskConfig(pattern_len=2, bits=2, padding=1, num_samples=40, seed=0)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``report(n, ok, detail)`` records one pass/fail line for criterion ``n``."""
    def report(n, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {n}: {status}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
