import numpy as np
import pytest
from hypothesis import settings

from tfm.network import ArchSpec, LayerSpec, MaskedNetwork

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8)


def toy_mlp(mode="tfm", use_fn=True, caps=(8, 6), initial=(4, 3), input_dim=5, dropout_p=0.0,
            seed=0):
    arch = ArchSpec((input_dim,), [LayerSpec("dense", w, c) for w, c in zip(initial, caps)])
    return MaskedNetwork(arch, mode, use_fn=use_fn, dropout_p=dropout_p, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def expected_weight_masks(net, task):
    """Per feature layer (W mask, b mask): owned output row OR owned input column.

    Built from the ownership ledger directly; the network input counts as
    owned by task 1, and a dense layer after a flattened conv repeats each
    channel's ownership over its spatial positions.
    """
    ledger = net.ledger
    out = []
    m_prev = np.full(net.arch.input_shape[0], task == 1)
    for l, mod in enumerate(net.feature_modules):
        m_out = np.zeros(mod.width, bool)
        m_out[:ledger.count_at(l, task)] = ledger.derive_m(l, task)
        m_in = np.repeat(m_prev, mod.in_width // m_prev.size)
        w = m_out[:, None] | m_in[None, :]
        if mod.W.ndim == 4:
            w = np.broadcast_to(w[:, :, None, None], mod.W.shape)
        out.append((w, m_out))
        m_prev = m_out
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
