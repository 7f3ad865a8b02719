"""Minimal dense-network engine: MLP evaluation, reverse-mode gradients,
input Jacobians, a forward-over-reverse pass for directional-derivative
objectives, and Adam updates.

Everything is float64 and deterministic: no global RNG state, no threads
spawned here. A network is a plain dataclass of weight/bias arrays; treat a
trained network as read-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")

MODEL_FORMAT_VERSION = 1


@dataclass
class Mlp:
    """Fixed-topology multilayer perceptron.

    weights[k] has shape (layer_dims[k+1], layer_dims[k]); biases[k] shape
    (layer_dims[k+1],). Hidden layers use `hidden_activation`; the output
    layer is identity.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def __post_init__(self):
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1:
            raise ValueError("weights do not match layer_dims")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[k + 1], self.layer_dims[k])
            if w.shape != want or b.shape != (want[0],):
                raise ValueError(f"layer {k}: shape {w.shape} vs dims {want}")


def mlp_init(layer_dims, hidden_activation="relu", seed=0) -> Mlp:
    """Glorot-uniform weights, zero biases, drawn layer by layer from one
    seeded generator so identical seeds give identical parameters."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(list(layer_dims), weights, biases, hidden_activation)


def mlp_params(net: Mlp) -> list[np.ndarray]:
    """Flat parameter list [W0, b0, W1, b1, ...] (views, not copies)."""
    out = []
    for w, b in zip(net.weights, net.biases):
        out.append(w)
        out.append(b)
    return out


def mlp_with_params(net: Mlp, params: list[np.ndarray]) -> Mlp:
    """New network with the same topology and the given flat parameter list."""
    weights = [params[2 * k] for k in range(len(net.weights))]
    biases = [params[2 * k + 1] for k in range(len(net.biases))]
    return Mlp(list(net.layer_dims), weights, biases, net.hidden_activation)


def zero_grads(net: Mlp) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in mlp_params(net)]


def _act(kind, s):
    if kind == "relu":
        return np.maximum(s, 0.0)
    return np.tanh(s)


def _act_prime(kind, s, a):
    # a = activation value at s; relu subgradient at 0 is 0
    if kind == "relu":
        return (s > 0.0).astype(float)
    return 1.0 - a * a


def _act_second(kind, s, a):
    if kind == "relu":
        return np.zeros_like(s)
    return -2.0 * a * (1.0 - a * a)


def _forward_trace(net: Mlp, X: np.ndarray):
    """Hidden-layer forward pass keeping pre-activations for backward."""
    acts = [X]
    pre = []
    A = X
    n_layers = len(net.weights)
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        S = A @ W.T + b
        pre.append(S)
        A = S if k == n_layers - 1 else _act(net.hidden_activation, S)
        acts.append(A)
    return acts, pre


def mlp_forward_batch(net: Mlp, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ValueError(f"input shape {X.shape} incompatible with input dim {net.in_dim}")
    acts, _ = _forward_trace(net, X)
    return acts[-1]


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.in_dim,):
        raise ValueError(f"input shape {x.shape} incompatible with input dim {net.in_dim}")
    return mlp_forward_batch(net, x[None, :])[0]


def mlp_backward_batch(net: Mlp, X: np.ndarray, upstream: np.ndarray):
    """Reverse accumulation of sum_b upstream_b . output_b.

    Returns (param_grads summed over the batch, input_grads per sample).
    """
    X = np.asarray(X, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (X.shape[0], net.out_dim):
        raise ValueError(f"upstream shape {upstream.shape} does not match output dim {net.out_dim}")
    acts, pre = _forward_trace(net, X)
    grads = zero_grads(net)
    n_layers = len(net.weights)
    D = upstream  # d/d(output of layer k); output layer is identity
    for k in range(n_layers - 1, -1, -1):
        if k != n_layers - 1:
            D = D * _act_prime(net.hidden_activation, pre[k], acts[k + 1])
        grads[2 * k] += D.T @ acts[k]
        grads[2 * k + 1] += D.sum(axis=0)
        D = D @ net.weights[k]
    return grads, D


def mlp_backward(net: Mlp, x: np.ndarray, upstream: np.ndarray):
    """Gradients of upstream . output w.r.t. parameters and the input."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.in_dim,):
        raise ValueError(f"input shape {x.shape} incompatible with input dim {net.in_dim}")
    grads, xg = mlp_backward_batch(net, x[None, :], np.asarray(upstream, dtype=float)[None, :])
    return grads, xg[0]


def mlp_jacobian_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    """(out x in) Jacobian; row i is mlp_backward with unit upstream e_i."""
    jac = np.empty((net.out_dim, net.in_dim))
    eye = np.eye(net.out_dim)
    for i in range(net.out_dim):
        _, jac[i] = mlp_backward(net, x, eye[i])
    return jac


def mlp_input_jacobian_batch(net: Mlp, X: np.ndarray) -> np.ndarray:
    """Per-sample input Jacobians, shape (B, out, in)."""
    X = np.asarray(X, dtype=float)
    B = X.shape[0]
    jac = np.empty((B, net.out_dim, net.in_dim))
    for i in range(net.out_dim):
        up = np.zeros((B, net.out_dim))
        up[:, i] = 1.0
        _, jac[:, i, :] = mlp_backward_batch(net, X, up)
    return jac


def mlp_dir_grad_batch(net: Mlp, X: np.ndarray, V: np.ndarray, out_vec: np.ndarray,
                       sample_weights: np.ndarray):
    """Forward-over-reverse pass for directional-derivative objectives.

    With g_b = out_vec . (J_x net(X_b) @ V_b), computes the values g and the
    parameter gradient of sum_b sample_weights_b * g_b. Needed where a loss
    contains first derivatives of the network (so its gradient needs second
    derivatives).
    """
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.shape != X.shape:
        raise ValueError("direction batch must match input batch shape")
    kind = net.hidden_activation
    n_layers = len(net.weights)

    acts, pre = _forward_trace(net, X)
    tang = [V]
    s_dots = []
    primes = []
    A_dot = V
    for k, W in enumerate(net.weights):
        S_dot = A_dot @ W.T
        s_dots.append(S_dot)
        if k == n_layers - 1:
            A_dot = S_dot
            primes.append(None)
        else:
            p = _act_prime(kind, pre[k], acts[k + 1])
            primes.append(p)
            A_dot = p * S_dot
        tang.append(A_dot)
    g = tang[-1] @ out_vec

    lam = np.asarray(sample_weights, dtype=float)
    grads = zero_grads(net)
    D_a = np.zeros_like(acts[-1])            # adjoint of primal activations
    D_ad = lam[:, None] * out_vec[None, :]   # adjoint of tangent activations
    for k in range(n_layers - 1, -1, -1):
        if k == n_layers - 1:
            D_s, D_sd = D_a, D_ad
        else:
            p = primes[k]
            D_s = p * D_a + _act_second(kind, pre[k], acts[k + 1]) * s_dots[k] * D_ad
            D_sd = p * D_ad
        grads[2 * k] += D_s.T @ acts[k] + D_sd.T @ tang[k]
        grads[2 * k + 1] += D_s.sum(axis=0)
        D_a = D_s @ net.weights[k]
        D_ad = D_sd @ net.weights[k]
    return g, grads


@dataclass
class AdamState:
    """First/second-moment accumulators plus hyperparameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns (new params, new state)."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def save_model(net: Mlp, path) -> None:
    """Self-describing model file; floats are written with full round-trip
    precision so load(save(net)) is bit-exact."""
    record = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_dims": list(net.layer_dims),
        "hidden_activation": net.hidden_activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> Mlp:
    with open(path) as fh:
        record = json.load(fh)
    version = record.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    return Mlp(
        layer_dims=list(record["layer_dims"]),
        weights=[np.asarray(w, dtype=float) for w in record["weights"]],
        biases=[np.asarray(b, dtype=float) for b in record["biases"]],
        hidden_activation=record["hidden_activation"],
    )
