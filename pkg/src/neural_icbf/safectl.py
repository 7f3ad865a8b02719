"""Online safe-control synthesis.

The minimum-norm auxiliary input solving `min ||v||^2 s.t. p'v >= q` has the
closed form v* = (q / ||p||^2) p when q > 0 (zero otherwise), which makes the
safety filter a handful of array operations per substep: start from the
nominal policy input and integrate u with explicit Euler substeps of v*,
re-evaluating the barrier quantities at the updated input each substep.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dynamics
from .dynamics import SystemSpec, Trajectory

P_TOL = 1e-9


def v_star(p: np.ndarray, q: float, p_tol: float = P_TOL):
    """Closed-form QP solution; None signals infeasibility (p ~ 0 with q > 0).

    Infeasibility is a distinct outcome on purpose: a well-trained barrier
    promises q <= 0 whenever p vanishes, so hitting this path means the
    certificate failed and must be surfaced, never silently zeroed.
    """
    p = np.asarray(p, dtype=float)
    V, infeasible = v_star_batch(p[None, :], np.array([float(q)]), p_tol)
    return None if infeasible[0] else V[0]


def v_star_batch(P: np.ndarray, q: np.ndarray, p_tol: float = P_TOL):
    """Row-wise v_star. Returns (V, infeasible mask); infeasible rows are zero
    in V and flagged instead of raising, so batch callers can decide."""
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    norm_sq = np.einsum("bm,bm->b", P, P)
    active = q > 0.0
    infeasible = active & (norm_sq <= p_tol * p_tol)
    scale = np.where(active & ~infeasible, q / np.where(norm_sq == 0.0, 1.0, norm_sq), 0.0)
    return scale[:, None] * P, infeasible


@dataclass
class FilterModels:
    """Callable bundle the filter needs: the nominal policy and the barrier
    quantities p(x, u) (input gradient) and q(x, u) (drift condition)."""

    policy: Callable       # x -> u
    p_fun: Callable        # (x, u) -> (m,)
    q_fun: Callable        # (x, u) -> float


@dataclass
class FilterDiagnostics:
    q_values: list = field(default_factory=list)
    infeasible: bool = False
    filter_active: bool = False
    input_norm: float = 0.0


def safe_input(models: FilterModels, x: np.ndarray, dt: float, substeps: int = 5):
    """Nominal input corrected by the integrated auxiliary QP solution.

    Substeps where q <= 0 leave the input untouched; an infeasible v* freezes
    the input for that substep and raises the diagnostics flag.
    """
    if dt <= 0 or substeps < 1:
        raise ValueError("need dt > 0 and at least one substep")
    x = np.asarray(x, dtype=float)
    u = np.asarray(models.policy(x), dtype=float).copy()
    diag = FilterDiagnostics()
    h = dt / substeps
    for _ in range(substeps):
        p = models.p_fun(x, u)
        q = float(models.q_fun(x, u))
        diag.q_values.append(q)
        if q <= 0.0:
            continue
        v = v_star(p, q)
        if v is None:
            diag.infeasible = True
            continue
        u = u + h * v
        diag.filter_active = True
    diag.input_norm = float(np.linalg.norm(u))
    return u, diag


@dataclass
class RunMetrics:
    reached: bool
    steps: int
    min_clearance: float
    max_input_norm: float
    input_violations: int
    penetrations: int
    infeasible_substeps: int
    control_cpu_s: float


def _segment_clearance(env, a: np.ndarray, b: np.ndarray, samples: int = 8) -> float:
    """Worst signed obstacle clearance along the segment a -> b.

    Exact for straight-line motion (the planar vehicle under zero-order
    hold); a dense interpolation otherwise.
    """
    ts = np.linspace(0.0, 1.0, samples)[:, None]
    points = a[None, :] + ts * (b - a)[None, :]
    worst = np.inf
    for center, radius in env.obstacles:
        d = np.linalg.norm(points - np.asarray(center)[None, :], axis=1) - radius
        worst = min(worst, float(np.min(d)))
    return worst


def run_closed_loop(env, spec_true: SystemSpec, models: FilterModels, x0,
                    dt: float, eps1: float, max_steps: int,
                    sim_model: str = "true", learned_step: Callable = None,
                    substeps: int = 5, input_slack: float = 1e-3,
                    filter_enabled: bool = True, project_input: bool = False):
    """Run the filtered policy until the goal ball of radius eps1 or the step
    budget. Simulation uses the true dynamics for evaluation; "learned" uses
    the provided learned one-step map instead.

    Returns (Trajectory, RunMetrics). Clearance is measured along interpolated
    step segments, not just at the samples, so fast crossings count.
    """
    if sim_model not in ("true", "learned"):
        raise ValueError("sim_model must be 'true' or 'learned'")
    if sim_model == "learned" and learned_step is None:
        raise ValueError("learned simulation needs a one-step map")

    x = np.asarray(x0, dtype=float).copy()
    goal = np.asarray(env.goal, dtype=float)
    pos_idx = list(env.pos_idx)

    states = [x.copy()]
    inputs = []
    min_clearance = np.inf
    max_input_norm = 0.0
    violations = 0
    penetrations = 0
    infeasible = 0
    control_cpu = 0.0
    reached = bool(np.linalg.norm(x - goal) <= eps1)

    steps = 0
    while not reached and steps < max_steps:
        tic = time.perf_counter()
        if filter_enabled:
            u, diag = safe_input(models, x, dt, substeps)
            infeasible += int(diag.infeasible)
        else:
            u = np.asarray(models.policy(x), dtype=float)
        if project_input:
            norm = np.linalg.norm(u)
            if norm > env.input_ball_radius:
                u = u * (env.input_ball_radius / norm)
        control_cpu += time.perf_counter() - tic

        norm = float(np.linalg.norm(u))
        max_input_norm = max(max_input_norm, norm)
        if norm > env.input_ball_radius + input_slack:
            violations += 1

        if sim_model == "true":
            x_next = dynamics.rk4_step(spec_true, x, u, dt)
        else:
            x_next = learned_step(x, u)

        if env.obstacles:
            clear = _segment_clearance(env, x[pos_idx], x_next[pos_idx])
            min_clearance = min(min_clearance, clear)
            if clear < 0.0:
                penetrations += 1

        inputs.append(u)
        states.append(x_next.copy())
        x = x_next
        steps += 1
        reached = bool(np.linalg.norm(x - goal) <= eps1)

    traj = Trajectory(dt=dt, states=np.asarray(states),
                      inputs=np.asarray(inputs).reshape(-1, spec_true.m))
    metrics = RunMetrics(
        reached=reached, steps=steps,
        min_clearance=float(min_clearance) if np.isfinite(min_clearance) else np.inf,
        max_input_norm=max_input_norm, input_violations=violations,
        penetrations=penetrations, infeasible_substeps=infeasible,
        control_cpu_s=control_cpu,
    )
    return traj, metrics
