"""Behavior cloning of the receding-horizon expert into a feedback network.

Plain supervised regression from states to recorded optimal first inputs
with a mean squared error objective; no on-policy re-aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .expert import ExpertDataset


@dataclass
class PolicyTrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    hidden_layers: int = 2
    hidden_units: int = 128


@dataclass
class PolicyTrainResult:
    net: nn.Mlp
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val: list[float] = field(default_factory=list)


def loss_imitation(net: nn.Mlp, X: np.ndarray, U: np.ndarray) -> float:
    """Mean squared error between predicted and expert inputs."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.ndim != 2 or U.shape != (X.shape[0], net.out_dim):
        raise ValueError("batch shapes do not match the policy network")
    pred = nn.mlp_forward_batch(net, X)
    return float(np.mean(np.sum((pred - U) ** 2, axis=1)))


def loss_imitation_grad(net: nn.Mlp, X, U):
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    pred = nn.mlp_forward_batch(net, X)
    resid = pred - U
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grads, _ = nn.mlp_backward_batch(net, X, (2.0 / len(X)) * resid)
    return loss, grads


def train_policy(data: ExpertDataset, cfg: PolicyTrainConfig) -> PolicyTrainResult:
    """Adam on the cloning loss; returns best-validation parameters."""
    X = np.asarray(data.states, dtype=float)
    U = np.asarray(data.inputs, dtype=float)
    n, m = X.shape[1], U.shape[1]
    net = nn.mlp_init([n] + [cfg.hidden_units] * cfg.hidden_layers + [m],
                      hidden_activation="relu", seed=cfg.seed)

    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(len(X))
    n_val = max(1, int(round(cfg.val_fraction * len(X)))) if len(X) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = val_idx
    Xt, Ut = X[train_idx], U[train_idx]
    Xv, Uv = (X[val_idx], U[val_idx]) if n_val else (Xt, Ut)

    params = nn.mlp_params(net)
    state = nn.adam_init(params, lr=cfg.lr)
    shuffle = np.random.default_rng(cfg.seed + 2)
    result = PolicyTrainResult(net=net)
    best = np.inf
    best_params = [p.copy() for p in params]
    batch = min(cfg.batch_size, len(Xt))

    for epoch in range(cfg.epochs):
        perm = shuffle.permutation(len(Xt))
        epoch_loss = 0.0
        for start in range(0, len(Xt), batch):
            idx = perm[start:start + batch]
            loss, grads = loss_imitation_grad(net, Xt[idx], Ut[idx])
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite cloning loss at epoch {epoch}, batch {start // batch}")
            epoch_loss += loss * len(idx)
            params, state = nn.adam_step(params, grads, state)
            net = nn.mlp_with_params(net, params)
        val = loss_imitation(net, Xv, Uv)
        if val <= best:
            best = val
            best_params = [p.copy() for p in params]
        result.train_loss.append(epoch_loss / len(Xt))
        result.val_loss.append(val)
        result.best_val.append(best)

    result.net = nn.mlp_with_params(net, best_params)
    return result
