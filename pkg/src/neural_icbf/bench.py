"""Benchmark harness: cost metric, per-episode control timing, safety
statistics, and method comparison between the receding-horizon expert, the
learned filtered controller, and the unfiltered clone.

The expert row gets a soft obstacle penalty added to its objective; that is a
harness choice to make the comparison meaningful, not part of the expert
module's problem. Control computation is timed with the monotonic wall clock (the kernel's
per-process CPU clock only advances in 10 ms steps here, useless for
sub-millisecond controller calls) and excludes simulation integration.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, expert, safectl
from .dynamics import SystemSpec, Trajectory
from .icbf import EnvironmentSpec
from .safectl import FilterModels

# published baseline reference values (not executed here): method ->
# (mean computation time in s, mean cost) for the vehicle and quadrotor suites
LITERATURE_REFERENCE = {
    "vehicle": {
        "nmpc": (5.562, 4.583),
        "orca-mapf": (1.373, 6.839),
        "cadrl": (0.837, 5.683),
        "proposed": (0.736, 4.631),
    },
    "quadrotor": {
        "nmpc": (10.242, 15.232),
        "orca-mapf": (2.328, 21.281),
        "cadrl": (2.181, 19.283),
        "proposed": (1.550, 15.672),
    },
}


def trajectory_cost(traj: Trajectory, Q: np.ndarray, R: np.ndarray) -> float:
    """Sum over executed steps of x_{k+1}'Q x_{k+1} + u_k'R u_k: each step is
    charged for the state it produces and the input that produced it."""
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n = traj.states.shape[1]
    m = traj.inputs.shape[1] if traj.inputs.size else Q.shape[0] * 0
    if Q.shape != (n, n):
        raise ValueError("Q does not match the state dimension")
    if traj.inputs.size and R.shape != (traj.inputs.shape[1], traj.inputs.shape[1]):
        raise ValueError("R does not match the input dimension")
    if traj.n_steps == 0:
        return 0.0
    states = traj.states[1:]
    cost = np.einsum("ki,ij,kj->", states, Q, states)
    cost += np.einsum("ki,ij,kj->", traj.inputs, R, traj.inputs)
    return float(cost)


def obstacle_penalty(env: EnvironmentSpec, weight: float):
    """Soft penalty (value, gradient) on squared penetration depth, used only
    by the benchmark's expert row."""
    pos_idx = list(env.pos_idx)

    def value(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        total = np.zeros(len(X))
        for center, radius in env.obstacles:
            d = np.linalg.norm(X[:, pos_idx] - np.asarray(center)[None, :], axis=1)
            total += weight * np.maximum(radius - d, 0.0) ** 2
        return total

    def grad(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros_like(X)
        for center, radius in env.obstacles:
            diff = X[:, pos_idx] - np.asarray(center)[None, :]
            d = np.linalg.norm(diff, axis=1)
            depth = np.maximum(radius - d, 0.0)
            scale = np.where(d > 1e-12, -2.0 * weight * depth / np.maximum(d, 1e-12), 0.0)
            out[:, pos_idx] += scale[:, None] * diff
        return out

    return value, grad


@dataclass
class EpisodeRecord:
    method: str
    start: np.ndarray
    reached: bool
    steps: int
    cost: float
    control_time_s: float
    min_clearance: float
    input_violations: int
    penetrations: int


@dataclass
class BenchmarkTable:
    system: str
    episodes: list = field(default_factory=list)

    def methods(self):
        return sorted({e.method for e in self.episodes})

    def row(self, method):
        eps = [e for e in self.episodes if e.method == method]
        ok = [e for e in eps if np.isfinite(e.cost)]
        return {
            "method": method,
            "mean_cost": float(np.mean([e.cost for e in ok])) if ok else float("nan"),
            "mean_time_s": float(np.mean([e.control_time_s for e in ok])) if ok else float("nan"),
            "success_rate": float(np.mean([e.reached for e in eps])) if eps else 0.0,
            "violations": int(sum(e.input_violations + e.penetrations for e in eps)),
        }


def _run_expert_episode(spec, env, cfg, penalty, x0, eps1, max_steps):
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    inputs = []
    warm = None
    control_time = 0.0
    pos_idx = list(env.pos_idx)
    min_clear = np.inf
    penetrations = 0
    for _ in range(max_steps):
        if np.linalg.norm(x - env.goal) <= eps1:
            break
        tic = time.perf_counter()
        U, _, _, _, failed = expert.solve_nmpc_batch(
            spec, x[None], cfg, warm, state_penalty=penalty)
        control_time += time.perf_counter() - tic
        if failed[0]:
            break
        u = U[0, 0]
        x_next = dynamics.rk4_step(spec, x, u, cfg.dt)
        if env.obstacles:
            clear = safectl._segment_clearance(env, x[pos_idx], x_next[pos_idx])
            min_clear = min(min_clear, clear)
            penetrations += int(clear < 0)
        inputs.append(u)
        states.append(x_next.copy())
        x = x_next
        warm = expert.shift_warm_start(U)
    reached = bool(np.linalg.norm(x - env.goal) <= eps1)
    traj = Trajectory(dt=cfg.dt, states=np.asarray(states),
                      inputs=np.asarray(inputs).reshape(-1, spec.m))
    return traj, reached, control_time, min_clear, penetrations


def run_benchmark(env: EnvironmentSpec, spec: SystemSpec, nmpc_cfg: expert.NmpcConfig,
                  filter_models: FilterModels, methods, n_avg: int, seed: int,
                  eps1: float = 0.1, max_steps: int = 200,
                  penalty_weight: float = 1e3, substeps: int = 5,
                  input_slack: float = 1e-3, x0_low=0.0, x0_high=1.0) -> BenchmarkTable:
    """Run each method from the same seeded starts; per-episode failures are
    recorded with nan cost and excluded from means."""
    rng = np.random.default_rng(seed)
    x0_low = np.broadcast_to(np.asarray(x0_low, dtype=float), (spec.n,))
    x0_high = np.broadcast_to(np.asarray(x0_high, dtype=float), (spec.n,))
    starts = rng.uniform(x0_low, x0_high, size=(n_avg, spec.n))
    penalty = obstacle_penalty(env, penalty_weight)
    table = BenchmarkTable(system=spec.name)

    for method in methods:
        for x0 in starts:
            if method == "nmpc":
                try:
                    traj, reached, ctl_time, min_clear, pens = _run_expert_episode(
                        spec, env, nmpc_cfg, penalty, x0, eps1, max_steps)
                except dynamics.IntegrationOverflowError:
                    table.episodes.append(EpisodeRecord(
                        method, x0, False, 0, float("nan"), 0.0, np.inf, 0, 0))
                    continue
                violations = int(np.sum(np.linalg.norm(traj.inputs, axis=1)
                                        > env.input_ball_radius + input_slack)) if traj.inputs.size else 0
            elif method in ("proposed", "nominal_unfiltered"):
                traj, metrics = safectl.run_closed_loop(
                    env, spec, filter_models, x0, nmpc_cfg.dt, eps1, max_steps,
                    substeps=substeps, input_slack=input_slack,
                    filter_enabled=(method == "proposed"))
                reached = metrics.reached
                ctl_time = metrics.control_cpu_s
                min_clear = metrics.min_clearance
                pens = metrics.penetrations
                violations = metrics.input_violations
            else:
                raise ValueError(f"unknown method {method!r}")
            cost = trajectory_cost(traj, nmpc_cfg.Q, nmpc_cfg.R)
            table.episodes.append(EpisodeRecord(
                method, x0, reached, traj.n_steps, cost, ctl_time,
                float(min_clear) if np.isfinite(min_clear) else np.inf,
                violations, pens))
    return table


def export_report(table: BenchmarkTable, path, episodes_path=None) -> None:
    """Summary CSV with a fixed column order plus an optional per-episode CSV.

    Wall-time columns are measurements and vary run to run; every other
    column is deterministic under the benchmark seed.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mean_cost", "mean_time_s", "success_rate",
                         "violations"])
        for method in table.methods():
            row = table.row(method)
            writer.writerow([row["method"], repr(row["mean_cost"]),
                             repr(row["mean_time_s"]), repr(row["success_rate"]),
                             row["violations"]])
    if episodes_path is not None:
        with open(episodes_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "start", "reached", "steps", "cost",
                             "control_time_s", "min_clearance",
                             "input_violations", "penetrations"])
            for e in table.episodes:
                writer.writerow([
                    e.method, " ".join(repr(float(v)) for v in e.start),
                    int(e.reached), e.steps, repr(e.cost), repr(e.control_time_s),
                    repr(e.min_clearance), e.input_violations, e.penetrations])


def format_table(table: BenchmarkTable, include_reference: bool = True) -> str:
    """Human-readable comparison; reference rows are published numbers from
    the literature, clearly marked as not executed here."""
    lines = [f"system: {table.system}",
             f"{'method':<22}{'mean cost':>12}{'mean time, s':>14}"
             f"{'success':>10}{'violations':>12}"]
    for method in table.methods():
        row = table.row(method)
        lines.append(f"{row['method']:<22}{row['mean_cost']:>12.3f}"
                     f"{row['mean_time_s']:>14.4f}{row['success_rate']:>10.2f}"
                     f"{row['violations']:>12d}")
    if include_reference and table.system in LITERATURE_REFERENCE:
        lines.append("")
        lines.append("published baseline reference (not executed here):")
        for name, (t, c) in LITERATURE_REFERENCE[table.system].items():
            lines.append(f"  {name:<20}{c:>12.3f}{t:>14.3f}")
    lines.append("")
    lines.append("timing is controller computation only (monotonic wall clock);"
                 " simulation integration is excluded.")
    return "\n".join(lines)


def load_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("mean_cost", "mean_time_s", "success_rate"):
            row[key] = float(row[key])
        row["violations"] = int(row["violations"])
    return rows
