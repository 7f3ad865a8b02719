"""Receding-horizon expert: direct single shooting over the true dynamics.

Decision variables are the horizon's inputs; states are eliminated by RK4
rollout and gradients come from reverse accumulation through the rollout
(adjoint recursion using the field's analytic Jacobians). The solver is
deliberately unconstrained; obstacle handling for benchmarks is injected as
an optional extra state cost by the harness, not here.

Solves are batched over initial states: column b of a batch solve follows
exactly the iteration a standalone solve from that state would.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import SystemSpec


class SolverDivergedError(RuntimeError):
    """Shooting iteration kept producing non-finite values after restarts."""


@dataclass
class NmpcConfig:
    horizon: int               # N_T steps
    dt: float
    Q: np.ndarray              # (n, n), positive semidefinite
    R: np.ndarray              # (m, m), positive definite
    max_iters: int = 500
    grad_tol: float = 1e-6
    lr: float = 0.2
    lr_decay: float = 0.0      # step size lr / (1 + lr_decay * iter)
    seed: int = 0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for name, mat in (("Q", self.Q), ("R", self.R)):
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ValueError(f"{name} must be symmetric")
        if np.min(np.linalg.eigvalsh(self.Q)) < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")

    def to_dict(self):
        return {
            "horizon": self.horizon, "dt": self.dt,
            "Q": self.Q.tolist(), "R": self.R.tolist(),
            "max_iters": self.max_iters, "grad_tol": self.grad_tol,
            "lr": self.lr, "lr_decay": self.lr_decay, "seed": self.seed,
        }


def nmpc_config(n: int, m: int, q=1.0, r=0.1, **kwargs) -> NmpcConfig:
    """Scaled-identity weights; q and r may also be full matrices."""
    Q = np.asarray(q, dtype=float)
    R = np.asarray(r, dtype=float)
    if Q.ndim == 0:
        Q = float(Q) * np.eye(n)
    if R.ndim == 0:
        R = float(R) * np.eye(m)
    return NmpcConfig(Q=Q, R=R, **kwargs)


@dataclass
class NmpcSolution:
    inputs: np.ndarray    # (horizon, m)
    cost: float
    iterations: int
    converged: bool


def shooting_cost_and_grad(spec: SystemSpec, X0, U, cfg: NmpcConfig, state_penalty=None):
    """Cost and gradient of the shooting objective, batched over problems.

    Objective per problem: sum_k x_{k+1}' Q x_{k+1} + u_k' R u_k, i.e. the
    executed-trajectory cost of the predicted rollout (the fixed initial
    state carries no cost; the final state does). `state_penalty`, when
    given, is a (value, grad) pair applied to each visited state x_1..x_N.
    """
    X0 = np.asarray(X0, dtype=float)
    U = np.asarray(U, dtype=float)
    B, N, m = U.shape
    n = X0.shape[1]
    dt = cfg.dt

    xs = np.empty((N + 1, B, n))
    xs[0] = X0
    for k in range(N):
        # divergence shows up as inf/nan in that problem's column and is
        # handled by the caller's restart logic, not as an exception
        xs[k + 1] = dynamics.rk4_step(spec, xs[k], U[:, k], dt, check=False)

    cost = np.einsum("kbi,ij,kbj->b", xs[1:], cfg.Q, xs[1:])
    cost = cost + np.einsum("bki,ij,bkj->b", U, cfg.R, U)
    if state_penalty is not None:
        value, _ = state_penalty
        for k in range(1, N + 1):
            cost = cost + value(xs[k])

    grad = np.empty_like(U)
    lam = np.zeros((B, n))
    for k in range(N - 1, -1, -1):
        x_bar = 2.0 * xs[k + 1] @ cfg.Q + lam
        if state_penalty is not None:
            x_bar = x_bar + state_penalty[1](xs[k + 1])
        lam, u_bar = dynamics.rk4_step_vjp(spec, xs[k], U[:, k], dt, x_bar)
        grad[:, k] = u_bar + 2.0 * U[:, k] @ cfg.R
    return cost, grad, xs


def solve_nmpc_batch(spec: SystemSpec, X0, cfg: NmpcConfig, U_init=None,
                     state_penalty=None, record_trace=False):
    """Adam on the shooting objective for a batch of initial states.

    Per problem: terminate once the full gradient norm drops below grad_tol
    (the iterate is then frozen), keep the best iterate seen, and on a
    non-finite cost or gradient halve that problem's step size and restart
    from its last finite iterate, at most 5 times.

    Returns (U_best (B,N,m), cost (B,), iterations (B,), converged (B,),
    failed (B,)[, best-cost trace]).
    """
    X0 = np.asarray(X0, dtype=float)
    B = X0.shape[0]
    N, m = cfg.horizon, spec.m
    U = np.zeros((B, N, m)) if U_init is None else np.array(U_init, dtype=float)

    mom = np.zeros_like(U)
    vel = np.zeros_like(U)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = np.full(B, cfg.lr)
    restarts = np.zeros(B, dtype=int)
    failed = np.zeros(B, dtype=bool)
    frozen = np.zeros(B, dtype=bool)
    iterations = np.full(B, cfg.max_iters, dtype=int)

    best_cost = np.full(B, np.inf)
    best_U = U.copy()
    last_finite_U = U.copy()
    trace = []

    for t in range(cfg.max_iters):
        with np.errstate(over="ignore", invalid="ignore"):
            cost, grad, _ = shooting_cost_and_grad(spec, X0, U, cfg, state_penalty)
        grad_norm = np.sqrt(np.einsum("bkm,bkm->b", grad, grad))
        bad = ~(np.isfinite(cost) & np.isfinite(grad_norm)) & ~failed & ~frozen

        if np.any(bad):
            restarts[bad] += 1
            newly_failed = bad & (restarts > 5)
            failed |= newly_failed
            recover = bad & ~newly_failed
            lr[recover] *= 0.5
            U[recover] = last_finite_U[recover]
            mom[recover] = 0.0
            vel[recover] = 0.0
            cost = np.where(bad, np.inf, cost)
            grad = np.where(bad[:, None, None], 0.0, grad)
            grad_norm = np.where(bad, np.inf, grad_norm)

        ok = ~bad & ~failed
        improved = ok & (cost < best_cost)
        best_cost = np.where(improved, cost, best_cost)
        best_U[improved] = U[improved]
        last_finite_U[ok] = U[ok]
        if record_trace:
            trace.append(best_cost.copy())

        newly_done = ok & ~frozen & (grad_norm <= cfg.grad_tol)
        iterations[newly_done] = t
        frozen |= newly_done
        if np.all(frozen | failed):
            break

        active = ~frozen & ~failed & ~bad
        mom = np.where(active[:, None, None], beta1 * mom + (1 - beta1) * grad, mom)
        vel = np.where(active[:, None, None], beta2 * vel + (1 - beta2) * grad * grad, vel)
        m_hat = mom / (1 - beta1 ** (t + 1))
        v_hat = vel / (1 - beta2 ** (t + 1))
        step = (lr / (1.0 + cfg.lr_decay * t))[:, None, None]
        U = np.where(active[:, None, None],
                     U - step * m_hat / (np.sqrt(v_hat) + eps), U)

    converged = frozen & ~failed
    out = (best_U, best_cost, iterations, converged, failed)
    return out + (trace,) if record_trace else out


def solve_nmpc(spec: SystemSpec, x0, cfg: NmpcConfig, U_init=None) -> NmpcSolution:
    """Solve from one initial state; see solve_nmpc_batch for the contract."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    init = None if U_init is None else np.asarray(U_init, dtype=float)[None]
    U, cost, iters, converged, failed = solve_nmpc_batch(spec, x0[None], cfg, init)
    if failed[0]:
        raise SolverDivergedError("shooting solve diverged after 5 restarts")
    return NmpcSolution(inputs=U[0], cost=float(cost[0]),
                        iterations=int(iters[0]), converged=bool(converged[0]))


def shift_warm_start(U: np.ndarray) -> np.ndarray:
    """Previous solution shifted one step, zero-appended."""
    out = np.zeros_like(U)
    out[..., :-1, :] = U[..., 1:, :]
    return out


@dataclass
class ExpertDataset:
    states: np.ndarray   # (K, n)
    inputs: np.ndarray   # (K, m)
    skipped: int = 0

    def __len__(self):
        return len(self.states)


def gen_expert_dataset(spec: SystemSpec, n_starts: int, cfg: NmpcConfig,
                       seed: int = 0, rh_steps: int = 40,
                       x0_low=0.0, x0_high=1.0) -> ExpertDataset:
    """Receding-horizon execution from seeded starts, recording every visited
    (state, first optimal input) pair. Diverged starts are dropped whole and
    counted. Records are ordered step-major, start-minor.
    """
    if n_starts < 1:
        raise ValueError("need at least one start")
    rng = np.random.default_rng(seed)
    x0_low = np.broadcast_to(np.asarray(x0_low, dtype=float), (spec.n,))
    x0_high = np.broadcast_to(np.asarray(x0_high, dtype=float), (spec.n,))
    X = rng.uniform(x0_low, x0_high, size=(n_starts, spec.n))

    alive = np.ones(n_starts, dtype=bool)
    warm = None
    rec_states, rec_inputs = [], []
    for _ in range(rh_steps):
        U, _, _, _, failed = solve_nmpc_batch(spec, X, cfg, warm)
        alive &= ~failed
        rec_states.append(X.copy())
        rec_inputs.append(U[:, 0].copy())
        # park dead starts at the origin so the batched step stays finite
        X = np.where(alive[:, None], X, 0.0)
        U = np.where(alive[:, None, None], U, 0.0)
        X = dynamics.rk4_step(spec, X, U[:, 0], cfg.dt)
        warm = shift_warm_start(U)

    return ExpertDataset(
        states=np.vstack([s[alive] for s in rec_states]),
        inputs=np.vstack([u[alive] for u in rec_inputs]),
        skipped=int(n_starts - alive.sum()),
    )


def config_hash(cfg: NmpcConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_expert_dataset(data: ExpertDataset, path, cfg: NmpcConfig, seed: int) -> None:
    """One record per line: the state then the optimal first input."""
    n = data.states.shape[1]
    m = data.inputs.shape[1]
    header = [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for x, u in zip(data.states, data.inputs):
            cells = [repr(float(v)) for v in x] + [repr(float(v)) for v in u]
            fh.write(",".join(cells) + "\n")
    manifest = {"cfg_hash": config_hash(cfg), "seed": seed,
                "records": len(data.states), "skipped": data.skipped}
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_expert_dataset(path) -> ExpertDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n = sum(1 for c in header if c.startswith("x"))
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    arr = np.asarray(rows)
    skipped = 0
    manifest_path = str(path) + ".manifest.json"
    try:
        with open(manifest_path) as fh:
            skipped = json.load(fh).get("skipped", 0)
    except FileNotFoundError:
        pass
    return ExpertDataset(states=arr[:, :n], inputs=arr[:, n:], skipped=skipped)
