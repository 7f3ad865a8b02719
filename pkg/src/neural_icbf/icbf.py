"""Neural barrier over the joint state-input space.

A single scalar network encodes both obstacle clearance and the input-norm
ball: positive on safe (state, input) pairs, negative on unsafe ones. It is
trained on labeled samples with three hinge sums: a drift condition on safe
pairs (evaluated with the learned dynamics, the tracking law, and the
closed-form auxiliary input held constant), and the two sign conditions.

The drift-condition hinge contains first derivatives of the barrier network,
so its parameter gradient needs the forward-over-reverse pass from `nn`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn, safectl


class NoSafeSamplesError(RuntimeError):
    """The environment admits no safe samples (obstacles cover the box)."""


@dataclass
class EnvironmentSpec:
    """Workspace box, obstacles, admissible-input ball, and goal."""

    state_low: np.ndarray
    state_high: np.ndarray
    obstacles: list            # (center, radius) pairs in position coordinates
    input_ball_radius: float
    goal: np.ndarray
    pos_idx: tuple = (0, 1)

    def __post_init__(self):
        self.state_low = np.asarray(self.state_low, dtype=float)
        self.state_high = np.asarray(self.state_high, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self.obstacles = [(np.asarray(c, dtype=float), float(r)) for c, r in self.obstacles]
        if self.input_ball_radius <= 0:
            raise ValueError("input ball radius must be positive")
        lo = self.state_low[list(self.pos_idx)]
        hi = self.state_high[list(self.pos_idx)]
        for center, radius in self.obstacles:
            if radius <= 0:
                raise ValueError("obstacle radius must be positive")
            if np.any(center < lo) or np.any(center > hi):
                raise ValueError("obstacle center outside the workspace box")

    @property
    def n(self) -> int:
        return len(self.state_low)


@dataclass
class LabeledSet:
    """Joint samples with their safe/unsafe labels."""

    X: np.ndarray            # (N, n)
    U: np.ndarray            # (N, m)
    safe: np.ndarray         # (N,) bool

    def __len__(self):
        return len(self.X)

    @property
    def n_safe(self) -> int:
        return int(self.safe.sum())


@dataclass
class GammaSpec:
    """Linear class-K gain: gamma(s) = gain * s."""

    gain: float = 1.0
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError("only the linear gamma is supported")
        if self.gain <= 0:
            raise ValueError("gamma gain must be positive")

    def __call__(self, s):
        return self.gain * s


def label_samples(env: EnvironmentSpec, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Safe iff strictly outside every obstacle and inside the input ball."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    pos = X[:, list(env.pos_idx)]
    safe = np.einsum("bm,bm->b", U, U) <= env.input_ball_radius ** 2
    for center, radius in env.obstacles:
        safe &= np.linalg.norm(pos - center[None, :], axis=1) > radius
    return safe


def sample_labeled(env: EnvironmentSpec, n_samples: int, m: int, seed: int = 0,
                   input_box_scale: float = 1.5,
                   balance_band=(0.2, 0.8), max_rounds: int = 200) -> LabeledSet:
    """Uniform seeded samples over the state box and an enlarged input box.

    The input box spans +-(input_box_scale * ball radius) per coordinate so
    both admissible and inadmissible inputs occur. If the raw safe fraction
    falls outside `balance_band`, the classes are rejection-sampled to an
    even split. Raises NoSafeSamplesError for degenerate environments.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    half = input_box_scale * env.input_ball_radius

    def draw(count):
        X = rng.uniform(env.state_low, env.state_high, size=(count, env.n))
        U = rng.uniform(-half, half, size=(count, m))
        return X, U, label_samples(env, X, U)

    X, U, safe = draw(n_samples)
    if safe.sum() == 0:
        raise NoSafeSamplesError("no safe samples found; obstacles may cover the box")

    frac = safe.mean()
    lo, hi = balance_band
    if lo <= frac <= hi:
        return LabeledSet(X, U, safe)

    # rejection-sample each class to an even split
    want_each = n_samples // 2
    keep_safe = [X[safe][:want_each]], [U[safe][:want_each]]
    keep_uns = [X[~safe][:want_each]], [U[~safe][:want_each]]
    counts = [min(safe.sum(), want_each), min((~safe).sum(), want_each)]
    rounds = 0
    while min(counts) < want_each:
        rounds += 1
        if rounds > max_rounds:
            raise NoSafeSamplesError("class balancing failed; environment too lopsided")
        Xr, Ur, sr = draw(n_samples)
        for mask, (xs, us), slot in ((sr, keep_safe, 0), (~sr, keep_uns, 1)):
            need = want_each - counts[slot]
            if need > 0:
                xs.append(Xr[mask][:need])
                us.append(Ur[mask][:need])
                counts[slot] += min(need, int(mask.sum()))
    X = np.vstack(keep_safe[0] + keep_uns[0])
    U = np.vstack(keep_safe[1] + keep_uns[1])
    safe = np.zeros(len(X), dtype=bool)
    safe[:want_each] = True
    return LabeledSet(X, U, safe)


def barrier_terms(h_net: nn.Mlp, X: np.ndarray, U: np.ndarray):
    """Barrier values and their joint gradient, split into state and input
    parts: (h, dh/dx, dh/du). One forward plus one reverse sweep."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Z = np.hstack([X, U])
    h = nn.mlp_forward_batch(h_net, Z)[:, 0]
    _, G = nn.mlp_backward_batch(h_net, Z, np.ones((len(Z), 1)))
    n = X.shape[1]
    return h, G[:, :n], G[:, n:]


def icbf_p(h_net: nn.Mlp, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Input gradient of the barrier at one joint point."""
    _, _, dhdu = barrier_terms(h_net, x, u)
    return dhdu[0]


def icbf_q(h_net: nn.Mlp, f_eval: Callable, phi_eval: Callable,
           gamma: GammaSpec, x: np.ndarray, u: np.ndarray) -> float:
    """Drift condition -(dh/dx . f + dh/du . phi + gamma(h)) at one point."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h, dhdx, dhdu = barrier_terms(h_net, x, u)
    f = np.atleast_2d(f_eval(x[None, :], u[None, :]))[0]
    phi = np.atleast_2d(phi_eval(x[None, :], u[None, :]))[0]
    return float(-(dhdx[0] @ f + dhdu[0] @ phi + gamma(h[0])))


def net_dynamics_eval(f_net: nn.Mlp) -> Callable:
    def f_eval(X, U):
        return nn.mlp_forward_batch(f_net, np.hstack([X, U]))
    return f_eval


def true_dynamics_eval(spec) -> Callable:
    def f_eval(X, U):
        return spec.field(np.asarray(X, dtype=float), np.asarray(U, dtype=float))
    return f_eval


def tracking_law(pi_eval: Callable, gain: float) -> Callable:
    """Integral control law driving the input toward the policy output."""
    def phi_eval(X, U):
        return gain * (pi_eval(X) - U)
    return phi_eval


def net_policy_eval(pi_net: nn.Mlp) -> Callable:
    def pi_eval(X):
        return nn.mlp_forward_batch(pi_net, np.asarray(X, dtype=float))
    return pi_eval


def _drift_terms(h_net, Z, F_vals, Phi_vals, gamma: GammaSpec, eps: float,
                 eps_tightens: bool):
    """Per-sample drift-hinge pieces: psi, the frozen direction w, h, and
    gradient split points. psi = -p'v* + q - eps collapses to
    -(grad_z h . w) - gain*h - eps with w = [f, phi + v*]."""
    h = nn.mlp_forward_batch(h_net, Z)[:, 0]
    _, G = nn.mlp_backward_batch(h_net, Z, np.ones((len(Z), 1)))
    n = F_vals.shape[1]
    P = G[:, n:]
    q = -(np.einsum("bi,bi->b", G[:, :n], F_vals)
          + np.einsum("bm,bm->b", P, Phi_vals) + gamma(h))
    V, infeasible = safectl.v_star_batch(P, q)
    W = np.hstack([F_vals, Phi_vals + V])
    margin = eps if not eps_tightens else -eps
    psi = -np.einsum("bm,bm->b", P, V) + q - margin
    return h, G, psi, W, infeasible


def loss_icbf(h_net: nn.Mlp, f_eval: Callable, pi_eval: Callable,
              samples: LabeledSet, eps: float, gamma: GammaSpec,
              kappa_track: float, eps_tightens: bool = False) -> float:
    """Three hinge sums: drift condition on safe pairs, barrier positive on
    safe pairs, barrier negative on unsafe pairs. The auxiliary input inside
    the drift hinge comes from the current network but is treated as data."""
    phi_eval = tracking_law(pi_eval, kappa_track)
    Xs, Us = samples.X[samples.safe], samples.U[samples.safe]
    Xu, Uu = samples.X[~samples.safe], samples.U[~samples.safe]
    total = 0.0
    if len(Xs):
        Zs = np.hstack([Xs, Us])
        F_vals = f_eval(Xs, Us)
        Phi_vals = phi_eval(Xs, Us)
        h_s, _, psi, _, _ = _drift_terms(h_net, Zs, F_vals, Phi_vals,
                                         gamma, eps, eps_tightens)
        total += float(np.sum(np.maximum(psi, 0.0)))
        total += float(np.sum(np.maximum(-h_s, 0.0)))
    if len(Xu):
        h_u = nn.mlp_forward_batch(h_net, np.hstack([Xu, Uu]))[:, 0]
        total += float(np.sum(np.maximum(h_u, 0.0)))
    return total


def _loss_and_grads(h_net, Zs, F_vals, Phi_vals, Zu, eps, gamma, eps_tightens):
    """Loss plus parameter gradients for one training batch.

    Gradient structure: the sign hinges reverse through the network values;
    the drift hinge needs d(grad_z h . w)/dtheta, the forward-over-reverse
    pass, plus the gamma(h) chain.
    """
    grads = None
    total = 0.0

    if len(Zs):
        h_s, _, psi, W, _ = _drift_terms(h_net, Zs, F_vals, Phi_vals,
                                         gamma, eps, eps_tightens)
        drift_mask = psi > 0.0
        total += float(np.sum(psi[drift_mask]))
        sign_mask = h_s < 0.0
        total += float(np.sum(-h_s[sign_mask]))

        _, dir_grads = nn.mlp_dir_grad_batch(
            h_net, Zs, W, np.ones(1), -drift_mask.astype(float))
        upstream = (-gamma.gain * drift_mask.astype(float)
                    - sign_mask.astype(float))[:, None]
        val_grads, _ = nn.mlp_backward_batch(h_net, Zs, upstream)
        grads = [d + v for d, v in zip(dir_grads, val_grads)]

    if len(Zu):
        h_u = nn.mlp_forward_batch(h_net, Zu)[:, 0]
        mask = h_u > 0.0
        total += float(np.sum(h_u[mask]))
        uns_grads, _ = nn.mlp_backward_batch(h_net, Zu, mask.astype(float)[:, None])
        grads = uns_grads if grads is None else [g + u for g, u in zip(grads, uns_grads)]

    if grads is None:
        grads = nn.zero_grads(h_net)
    return total, grads


@dataclass
class IcbfTrainConfig:
    epochs: int = 300
    batch_size: int = 1024
    lr: float = 1e-3
    lr_decay_every: int = 0      # halve the step size every this many epochs
    seed: int = 0
    val_fraction: float = 0.1
    hidden_layers: int = 4
    hidden_units: int = 128
    eps: float = 0.1
    gamma_gain: float = 1.0
    kappa_track: float = 10.0
    eps_tightens: bool = False
    checkpoint_metric: str = "val_loss"   # or "val_sign_accuracy"


@dataclass
class IcbfTrainResult:
    net: nn.Mlp
    sign_accuracy: float = 0.0
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val: list[float] = field(default_factory=list)


def sign_accuracy(h_net: nn.Mlp, samples: LabeledSet) -> float:
    h = nn.mlp_forward_batch(h_net, np.hstack([samples.X, samples.U]))[:, 0]
    return float(np.mean((h > 0.0) == samples.safe))


def train_icbf(samples: LabeledSet, f_eval: Callable, pi_eval: Callable,
               cfg: IcbfTrainConfig) -> IcbfTrainResult:
    """Adam on the hinge loss; the frozen models' values are precomputed once.

    Returns the best-validation parameters and the held-out sign accuracy.
    """
    n = samples.X.shape[1]
    m = samples.U.shape[1]
    net = nn.mlp_init([n + m] + [cfg.hidden_units] * cfg.hidden_layers + [1],
                      hidden_activation="relu", seed=cfg.seed)
    gamma = GammaSpec(gain=cfg.gamma_gain)
    phi_eval = tracking_law(pi_eval, cfg.kappa_track)

    F_all = f_eval(samples.X, samples.U)
    Phi_all = phi_eval(samples.X, samples.U)
    Z_all = np.hstack([samples.X, samples.U])

    rng = np.random.default_rng(cfg.seed + 1)
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(cfg.val_fraction * len(samples))))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        train_idx = val_idx

    val_set = LabeledSet(samples.X[val_idx], samples.U[val_idx], samples.safe[val_idx])

    params = nn.mlp_params(net)
    state = nn.adam_init(params, lr=cfg.lr)
    shuffle = np.random.default_rng(cfg.seed + 2)
    result = IcbfTrainResult(net=net)
    best = np.inf
    best_params = [p.copy() for p in params]
    batch = min(cfg.batch_size, len(train_idx))

    for epoch in range(cfg.epochs):
        if cfg.lr_decay_every and epoch and epoch % cfg.lr_decay_every == 0:
            state.lr *= 0.5
        perm = shuffle.permutation(len(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(train_idx), batch):
            idx = train_idx[perm[start:start + batch]]
            safe_idx = idx[samples.safe[idx]]
            uns_idx = idx[~samples.safe[idx]]
            loss, grads = _loss_and_grads(
                net, Z_all[safe_idx], F_all[safe_idx], Phi_all[safe_idx],
                Z_all[uns_idx], cfg.eps, gamma, cfg.eps_tightens)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite barrier loss at epoch {epoch}, batch {start // batch}")
            epoch_loss += loss
            params, state = nn.adam_step(params, grads, state)
            net = nn.mlp_with_params(net, params)
        val = loss_icbf(net, f_eval, pi_eval, val_set,
                        cfg.eps, gamma, cfg.kappa_track, cfg.eps_tightens)
        if cfg.checkpoint_metric == "val_sign_accuracy":
            score = -sign_accuracy(net, val_set)
        else:
            score = val
        if score <= best:
            best = score
            best_params = [p.copy() for p in params]
        result.train_loss.append(epoch_loss)
        result.val_loss.append(val)
        result.best_val.append(best)

    result.net = nn.mlp_with_params(net, best_params)
    result.sign_accuracy = sign_accuracy(result.net, val_set)
    return result


def make_pq(h_net: nn.Mlp, f_eval: Callable, pi_eval: Callable,
            gamma: GammaSpec, kappa_track: float):
    """Single-point p and q callables for the online filter."""
    phi_eval = tracking_law(pi_eval, kappa_track)

    def p_fun(x, u):
        return icbf_p(h_net, x, u)

    def q_fun(x, u):
        return icbf_q(h_net, f_eval, phi_eval, gamma, x, u)

    return p_fun, q_fun


def export_position_slice(h_net: nn.Mlp, env: EnvironmentSpec, u_fix, path,
                          grid: int = 60) -> None:
    """Barrier values over the position plane at a fixed input."""
    i, j = env.pos_idx[0], env.pos_idx[1]
    xs = np.linspace(env.state_low[i], env.state_high[i], grid)
    ys = np.linspace(env.state_low[j], env.state_high[j], grid)
    u_fix = np.asarray(u_fix, dtype=float)
    base = env.goal.copy()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "h"])
        for a in xs:
            rows_x = np.tile(base, (grid, 1))
            rows_x[:, i] = a
            rows_x[:, j] = ys
            H = nn.mlp_forward_batch(
                h_net, np.hstack([rows_x, np.tile(u_fix, (grid, 1))]))[:, 0]
            for b, hval in zip(ys, H):
                writer.writerow([repr(float(a)), repr(float(b)), repr(float(hval))])


def export_input_slice(h_net: nn.Mlp, env: EnvironmentSpec, x_fix, path,
                       grid: int = 60, box_scale: float = 1.5) -> None:
    """Barrier values over the first two input coordinates at a fixed state."""
    x_fix = np.asarray(x_fix, dtype=float)
    half = box_scale * env.input_ball_radius
    us = np.linspace(-half, half, grid)
    m = h_net.in_dim - len(x_fix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u1", "u2", "h"])
        for a in us:
            U = np.zeros((grid, m))
            U[:, 0] = a
            U[:, 1] = us
            H = nn.mlp_forward_batch(
                h_net, np.hstack([np.tile(x_fix, (grid, 1)), U]))[:, 0]
            for b, hval in zip(us, H):
                writer.writerow([repr(float(a)), repr(float(b)), repr(float(hval))])
