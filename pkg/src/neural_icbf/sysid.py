"""Learn a neural vector field from trajectory data.

The transition map is one RK4 step of the network's field per sampling
interval, both in the training loss and in multi-step prediction, so the
prediction path and the loss share the same arithmetic. Gradients flow
through the four integration stages (discretize-then-optimize).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, nn
from .dynamics import IntegrationOverflowError, SystemSpec, Trajectory


@dataclass
class DynDataset:
    trajectories: list[Trajectory]
    dt: float
    resampled: int = 0

    def __post_init__(self):
        for traj in self.trajectories:
            if abs(traj.dt - self.dt) > 1e-12:
                raise ValueError("all trajectories must share the dataset dt")
            if not (np.all(np.isfinite(traj.states)) and np.all(np.isfinite(traj.inputs))):
                raise ValueError("non-finite trajectory data")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    hidden_layers: int = 4
    hidden_units: int = 128
    activation: str = "tanh"


@dataclass
class TrainResult:
    net: nn.Mlp
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val: list[float] = field(default_factory=list)


def gen_dynamics_data(spec: SystemSpec, n_traj: int, horizon_s: float, dt: float,
                      input_low, input_high, seed: int = 0,
                      x0_low=0.0, x0_high=1.0, max_resamples: int = 100) -> DynDataset:
    """Simulate seeded rollouts under piecewise-constant random inputs.

    Initial states are uniform over [x0_low, x0_high]^n and inputs uniform
    over [input_low, input_high]^m per step (bounds may be per-coordinate).
    Rollouts that overflow the integrator are discarded and resampled; the
    count is recorded on the dataset.
    """
    steps = horizon_s / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("horizon must be an integral number of steps")
    steps = int(round(steps))
    input_low = np.broadcast_to(np.asarray(input_low, dtype=float), (spec.m,))
    input_high = np.broadcast_to(np.asarray(input_high, dtype=float), (spec.m,))
    x0_low = np.broadcast_to(np.asarray(x0_low, dtype=float), (spec.n,))
    x0_high = np.broadcast_to(np.asarray(x0_high, dtype=float), (spec.n,))

    rng = np.random.default_rng(seed)
    trajectories = []
    resampled = 0
    while len(trajectories) < n_traj:
        x0 = rng.uniform(x0_low, x0_high)
        inputs = rng.uniform(input_low, input_high, size=(steps, spec.m))
        try:
            trajectories.append(dynamics.rollout(spec, x0, inputs, dt))
        except (IntegrationOverflowError, dynamics.SingularAttitudeError):
            resampled += 1
            if resampled > max_resamples:
                raise IntegrationOverflowError(
                    f"gave up after {resampled} resampled trajectories")
    return DynDataset(trajectories, dt, resampled)


def transitions(data: DynDataset):
    """Stack every (x_k, u_k, x_{k+1}) transition across trajectories."""
    xs, us, nexts = [], [], []
    for traj in data.trajectories:
        xs.append(traj.states[:-1])
        us.append(traj.inputs)
        nexts.append(traj.states[1:])
    if not xs:
        return (np.zeros((0, 0)),) * 3
    return np.vstack(xs), np.vstack(us), np.vstack(nexts)


def phi_step(net: nn.Mlp, X: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step of the network's field over dt. Batched: X (B,n), U (B,m)."""
    def f(Xs):
        return nn.mlp_forward_batch(net, np.hstack([Xs, U]))

    k1 = f(X)
    k2 = f(X + 0.5 * dt * k1)
    k3 = f(X + 0.5 * dt * k2)
    k4 = f(X + dt * k3)
    out = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationOverflowError("non-finite state in learned-model step")
    return out


def _phi_loss_and_grads(net: nn.Mlp, X, U, X_next, dt):
    """Sum of squared one-step residuals and its parameter gradient.

    Reverse accumulation through the four RK4 stages: each stage feeds the
    combination directly and the next stage's evaluation point.
    """
    n = X.shape[1]

    def f(Xs):
        return nn.mlp_forward_batch(net, np.hstack([Xs, U]))

    k1 = f(X)
    a2 = X + 0.5 * dt * k1
    k2 = f(a2)
    a3 = X + 0.5 * dt * k2
    k3 = f(a3)
    a4 = X + dt * k3
    k4 = f(a4)
    pred = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    resid = pred - X_next
    loss = float(np.sum(resid * resid))

    G = 2.0 * resid
    grads = nn.zero_grads(net)

    def accumulate(point, upstream):
        g, xg = nn.mlp_backward_batch(net, np.hstack([point, U]), upstream)
        for total, part in zip(grads, g):
            total += part
        return xg[:, :n]

    a4_bar = accumulate(a4, (dt / 6.0) * G)
    a3_bar = accumulate(a3, (dt / 3.0) * G + dt * a4_bar)
    a2_bar = accumulate(a2, (dt / 3.0) * G + 0.5 * dt * a3_bar)
    accumulate(X, (dt / 6.0) * G + 0.5 * dt * a2_bar)
    return loss, grads


def loss_dynamics(net: nn.Mlp, data: DynDataset) -> float:
    """Sum over trajectories and steps of the squared one-step prediction error."""
    if net.in_dim != data.trajectories[0].states.shape[1] + data.trajectories[0].inputs.shape[1]:
        raise ValueError("network input dim must be state dim + input dim")
    X, U, X_next = transitions(data)
    pred = phi_step(net, X, U, data.dt)
    return float(np.sum((pred - X_next) ** 2))


def train_dynamics(data: DynDataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam on the one-step loss; returns the best-validation
    parameters. Deterministic under cfg.seed."""
    X, U, X_next = transitions(data)
    n, m = X.shape[1], U.shape[1]
    dims = [n + m] + [cfg.hidden_units] * cfg.hidden_layers + [n]
    net = nn.mlp_init(dims, hidden_activation=cfg.activation, seed=cfg.seed)

    n_traj = len(data.trajectories)
    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(n_traj)
    n_val = max(1, int(round(cfg.val_fraction * n_traj))) if n_traj > 1 else 0
    val_ids = set(order[:n_val].tolist())

    def split(ids):
        keep = [i for i in range(n_traj) if (i in ids)]
        sub = DynDataset([data.trajectories[i] for i in keep], data.dt)
        return transitions(sub)

    if n_val:
        Xv, Uv, Xnv = split(val_ids)
        Xt, Ut, Xnt = split(set(range(n_traj)) - val_ids)
    else:
        Xv, Uv, Xnv = X, U, X_next
        Xt, Ut, Xnt = X, U, X_next

    return _fit(net, (Xt, Ut, Xnt), (Xv, Uv, Xnv), data.dt, cfg)


def _fit(net, train, val, dt, cfg: TrainConfig) -> TrainResult:
    Xt, Ut, Xnt = train
    Xv, Uv, Xnv = val
    params = nn.mlp_params(net)
    state = nn.adam_init(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 2)
    result = TrainResult(net=net)
    best = np.inf
    best_params = [p.copy() for p in params]
    n_samples = Xt.shape[0]
    batch = min(cfg.batch_size, n_samples)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_samples)
        epoch_loss = 0.0
        for start in range(0, n_samples, batch):
            idx = order[start:start + batch]
            loss, grads = _phi_loss_and_grads(net, Xt[idx], Ut[idx], Xnt[idx], dt)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite dynamics loss at epoch {epoch}, batch {start // batch}")
            epoch_loss += loss
            params, state = nn.adam_step(params, grads, state)
            net = nn.mlp_with_params(net, params)
        val_pred = phi_step(net, Xv, Uv, dt)
        val_loss = float(np.sum((val_pred - Xnv) ** 2))
        if val_loss <= best:
            best = val_loss
            best_params = [p.copy() for p in params]
        result.train_loss.append(epoch_loss)
        result.val_loss.append(val_loss)
        result.best_val.append(best)

    result.net = nn.mlp_with_params(net, best_params)
    return result


def predict_rollout(net: nn.Mlp, x0, inputs, dt: float) -> np.ndarray:
    """Iterate the learned transition map; returns the (N+1, n) state sequence."""
    x0 = np.asarray(x0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    states = np.empty((len(inputs) + 1, len(x0)))
    states[0] = x0
    for k in range(len(inputs)):
        states[k + 1] = phi_step(net, states[k][None, :], inputs[k][None, :], dt)[0]
    return states


def net_field_spec(net: nn.Mlp, n: int, m: int) -> SystemSpec:
    """Wrap a trained network as a SystemSpec so generic rollout code can use it."""
    def field(x, u):
        single = np.asarray(x).ndim == 1
        out = nn.mlp_forward_batch(net, np.hstack([np.atleast_2d(x), np.atleast_2d(u)]))
        return out[0] if single else out

    return SystemSpec("learned", n=n, m=m, field=field, jac=None)


def save_dataset(data: DynDataset, out_dir, seed=None, params=None) -> None:
    """One trajectory CSV per file plus a manifest with generation metadata."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, traj in enumerate(data.trajectories):
        name = f"traj_{i:04d}.csv"
        dynamics.save_trajectory_csv(traj, os.path.join(out_dir, name))
        files.append(name)
    manifest = {
        "dt": data.dt,
        "files": files,
        "resampled": data.resampled,
        "seed": seed,
        "params": params or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(out_dir) -> DynDataset:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    trajectories = [
        dynamics.load_trajectory_csv(os.path.join(out_dir, name))
        for name in manifest["files"]
    ]
    return DynDataset(trajectories, manifest["dt"], manifest.get("resampled", 0))
