"""Shared test helpers: finite-difference oracles and small utilities."""

import numpy as np

from neural_icbf import nn


def fd_scalar_grad(f, x, step=1e-5):
    """Central finite differences of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def fd_param_grads(net, scalar_of_net, step=1e-5):
    """Central finite differences of a scalar loss w.r.t. every parameter."""
    grads = []
    params = nn.mlp_params(net)
    for idx, p in enumerate(params):
        g = np.zeros_like(p)
        for flat in range(p.size):
            orig = p.flat[flat]
            p.flat[flat] = orig + step
            up = scalar_of_net(net)
            p.flat[flat] = orig - step
            down = scalar_of_net(net)
            p.flat[flat] = orig
            g.flat[flat] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


def assert_grads_close(got, want, rtol):
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert rel_err(g, w) < rtol, f"gradient mismatch: rel err {rel_err(g, w):.3e}"
