"""Empirical certification of the learned safe controller.

Estimates Lipschitz constants from sampled pairs (lower bounds of the true
constants, so the resulting bound is statistical, never a proof), covering
radii of the training sets with respect to the evaluation points, and
worst-case model discrepancies; combines them into the deviation bound

    E2 + dt * (3*E3 + E1_dyn + E2 + E1_barrier)

with E1(M,N) = (L_M + L_N) * delta1 + mu(M,N), E2(M,N) = (L_M + L_N) * delta2
and E3(M,N) = L_M + L_N; then checks the measured gap between the learned
filter and an oracle filter built from the true dynamics, an analytic smooth
barrier, and fresh receding-horizon first inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from . import expert, safectl
from .icbf import EnvironmentSpec
from .safectl import FilterModels


class EstimationError(RuntimeError):
    """All sampled pairs were degenerate; no ratio could be formed."""


def estimate_lipschitz(f: Callable, points: np.ndarray, n_pairs: int, seed: int = 0,
                       min_dist: float = 1e-9) -> float:
    """Max difference quotient over seeded sample pairs: a LOWER bound of the
    true constant that tightens with more pairs."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        raise EstimationError("need at least two points")
    rng = np.random.default_rng(seed)
    # one (n, 2) draw so a larger n extends the same pair sequence: estimates
    # are monotone in the pair count for a fixed seed
    idx = rng.integers(0, len(points), size=(n_pairs, 2))
    A, B = points[idx[:, 0]], points[idx[:, 1]]
    gaps = np.linalg.norm(A - B, axis=1)
    keep = gaps >= min_dist
    if not np.any(keep):
        raise EstimationError("all sampled pairs were degenerate")
    fa = np.asarray(f(A[keep]), dtype=float)
    fb = np.asarray(f(B[keep]), dtype=float)
    if fa.ndim == 1:
        fa, fb = fa[:, None], fb[:, None]
    num = np.linalg.norm(fa.reshape(len(fa), -1) - fb.reshape(len(fb), -1), axis=1)
    return float(np.max(num / gaps[keep]))


def fill_distance(dataset_points: np.ndarray, probe_points: np.ndarray) -> float:
    """Covering radius: max over probes of the distance to the nearest
    dataset point."""
    dataset_points = np.asarray(dataset_points, dtype=float)
    probe_points = np.asarray(probe_points, dtype=float)
    if len(dataset_points) == 0 or len(probe_points) == 0:
        raise ValueError("both point sets must be non-empty")
    tree = cKDTree(dataset_points)
    dists, _ = tree.query(probe_points)
    return float(np.max(dists))


def model_discrepancy(f_true: Callable, f_model: Callable, points: np.ndarray) -> float:
    """Max over the dataset of the pointwise output gap."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        raise ValueError("empty point set")
    a = np.asarray(f_true(points), dtype=float).reshape(len(points), -1)
    b = np.asarray(f_model(points), dtype=float).reshape(len(points), -1)
    return float(np.max(np.linalg.norm(a - b, axis=1)))


@dataclass
class ErrorBoundReport:
    """Every quantity the deviation bound is assembled from, stored so the
    bound can be recomputed exactly from the record."""

    dt: float
    lip_f_true: float
    lip_f_model: float
    lip_h_true: float
    lip_h_model: float
    lip_phi_true: float
    lip_policy: float
    gamma_gain: float
    delta1_dynamics: float      # joint-space covering radius of the rollout data
    delta2_policy: float        # state-space covering radius of the expert data
    delta1_barrier: float       # joint-space covering radius of the labeled data
    mu_dynamics: float
    mu_policy: float
    mu_barrier: float           # discrepancy of gamma(h) vs gamma(h_model)
    violation_rate: float = float("nan")

    def e1_dynamics(self) -> float:
        return (self.lip_f_true + self.lip_f_model) * self.delta1_dynamics + self.mu_dynamics

    def e2_policy(self) -> float:
        return (self.lip_phi_true + self.lip_policy) * self.delta2_policy

    def e3_barrier(self) -> float:
        return self.lip_h_true + self.lip_h_model

    def e1_barrier(self) -> float:
        scaled = self.gamma_gain * (self.lip_h_true + self.lip_h_model)
        return scaled * self.delta1_barrier + self.mu_barrier

    def bound(self) -> float:
        e2 = self.e2_policy()
        return e2 + self.dt * (3.0 * self.e3_barrier() + self.e1_dynamics()
                               + e2 + self.e1_barrier())


def error_bound(report: ErrorBoundReport) -> float:
    return report.bound()


def save_report(report: ErrorBoundReport, path) -> None:
    record = asdict(report)
    record["bound"] = report.bound()
    record["E1_dynamics"] = report.e1_dynamics()
    record["E2_policy"] = report.e2_policy()
    record["E3_barrier"] = report.e3_barrier()
    record["E1_barrier"] = report.e1_barrier()
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path) -> ErrorBoundReport:
    with open(path) as fh:
        record = json.load(fh)
    stored_bound = record.pop("bound")
    for key in ("E1_dynamics", "E2_policy", "E3_barrier", "E1_barrier"):
        record.pop(key, None)
    report = ErrorBoundReport(**record)
    if not np.isclose(report.bound(), stored_bound, rtol=0, atol=0):
        raise ValueError("stored bound does not recompute from its components")
    return report


def smooth_min(values: np.ndarray, rho: float):
    """Soft minimum -rho*log(sum exp(-v/rho)) with its softmax weights."""
    values = np.asarray(values, dtype=float)
    low = values.min()
    w = np.exp(-(values - low) / rho)
    total = w.sum()
    return float(low - rho * np.log(total)), w / total


def analytic_barrier(env: EnvironmentSpec, rho: float = 0.01):
    """Smooth-min of signed obstacle clearances and the input-ball margin:
    a Lipschitz, differentiable stand-in for the true barrier."""
    pos_idx = list(env.pos_idx)
    b_sq = env.input_ball_radius ** 2

    def h_fun(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        vals = [b_sq - float(u @ u)]
        for center, radius in env.obstacles:
            vals.append(float(np.linalg.norm(x[pos_idx] - center)) - radius)
        val, _ = smooth_min(np.array(vals), rho)
        return val

    def grads(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        vals = [b_sq - float(u @ u)]
        gx_list = [np.zeros_like(x)]
        gu_list = [-2.0 * u]
        for center, radius in env.obstacles:
            d = x[pos_idx] - center
            dist = max(float(np.linalg.norm(d)), 1e-12)
            vals.append(dist - radius)
            gx = np.zeros_like(x)
            gx[pos_idx] = d / dist
            gx_list.append(gx)
            gu_list.append(np.zeros_like(u))
        _, w = smooth_min(np.array(vals), rho)
        gx = sum(wi * gi for wi, gi in zip(w, gx_list))
        gu = sum(wi * gi for wi, gi in zip(w, gu_list))
        return gx, gu

    return h_fun, grads


def oracle_filter_models(env: EnvironmentSpec, spec_true, nmpc_cfg: expert.NmpcConfig,
                         kappa_track: float, gamma_gain: float,
                         rho: float = 0.01) -> FilterModels:
    """Reference filter: true dynamics, analytic smooth barrier, and a fresh
    receding-horizon first input as the nominal policy. The solve is cached
    per state so the filter's substeps do not re-run the optimizer."""
    h_fun, grads = analytic_barrier(env, rho)
    cache = {}

    def policy(x):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in cache:
            cache[key] = expert.solve_nmpc(spec_true, x, nmpc_cfg).inputs[0]
        return cache[key]

    def p_fun(x, u):
        return grads(x, u)[1]

    def q_fun(x, u):
        gx, gu = grads(x, u)
        f = spec_true.field(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        phi = kappa_track * (policy(x) - u)
        return float(-(gx @ f + gu @ phi + gamma_gain * h_fun(x, u)))

    return FilterModels(policy=policy, p_fun=p_fun, q_fun=q_fun)


def validate_bound(oracle: FilterModels, learned: FilterModels,
                   test_states: np.ndarray, bound: float, dt: float,
                   substeps: int = 5, table_path=None):
    """Fraction of test states where the learned and oracle safe inputs differ
    by more than the bound; optionally writes the per-state table."""
    rows = []
    violations = 0
    skipped = 0
    for x in np.asarray(test_states, dtype=float):
        try:
            u_oracle, _ = safectl.safe_input(oracle, x, dt, substeps)
        except expert.SolverDivergedError:
            skipped += 1
            continue
        u_learned, _ = safectl.safe_input(learned, x, dt, substeps)
        gap = float(np.linalg.norm(u_learned - u_oracle))
        violations += int(gap > bound)
        rows.append((x, u_oracle, u_learned, gap))
    if table_path is not None:
        with open(table_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            n = len(test_states[0])
            m = len(rows[0][1]) if rows else 0
            writer.writerow([f"x{i+1}" for i in range(n)]
                            + [f"u_oracle{j+1}" for j in range(m)]
                            + [f"u_learned{j+1}" for j in range(m)]
                            + ["gap", "bound", "violation"])
            for x, uo, ul, gap in rows:
                writer.writerow([repr(float(v)) for v in x]
                                + [repr(float(v)) for v in uo]
                                + [repr(float(v)) for v in ul]
                                + [repr(gap), repr(float(bound)), int(gap > bound)])
    rate = violations / max(len(rows), 1)
    return rate, skipped
