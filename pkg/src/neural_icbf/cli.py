"""Command-line orchestration of the full training-and-evaluation pipeline.

Each stage reads its inputs from the output directory, writes its artifacts
plus a manifest (seed, config hash, artifact checksums), and fails with a
stage-tagged message; completed artifacts stay on disk. Artifacts contain no
timestamps, so a rerun with the same config and seed overwrites every file
with identical bytes (timing CSVs are the documented exception).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import bench, certify, config as config_mod, dynamics, expert, icbf, imitation, nn, safectl, sysid

OUT_ENV_VAR = "NEURAL_ICBF_OUT"


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _system_spec(cfg) -> dynamics.SystemSpec:
    if cfg["system"] == "vehicle":
        return dynamics.vehicle_spec()
    if cfg["system"] == "quadrotor":
        d = cfg["dynamics"]
        return dynamics.quadrotor_spec(mass=d["quadrotor_mass"],
                                       inertia=tuple(d["quadrotor_inertia"]),
                                       gravity=d["gravity"])
    raise StageError("config", f"unknown system {cfg['system']!r}")


def _environment(cfg) -> icbf.EnvironmentSpec:
    e = cfg["env"]
    try:
        obstacles = [(obs["center"], obs["radius"]) for obs in e["obstacles"]]
    except (KeyError, TypeError) as exc:
        raise StageError("config", f"malformed obstacle entry: {exc}")
    return icbf.EnvironmentSpec(
        state_low=e["state_low"], state_high=e["state_high"],
        obstacles=obstacles, input_ball_radius=e["input_ball_radius"],
        goal=e["goal"], pos_idx=tuple(e["pos_idx"]))


def _nmpc_config(cfg, seed) -> expert.NmpcConfig:
    ex = cfg["expert"]
    spec = _system_spec(cfg)
    q = np.asarray(ex["q_weight"], dtype=float)
    r = np.asarray(ex["r_weight"], dtype=float)
    if q.ndim <= 1:
        q = np.diag(np.broadcast_to(q, (spec.n,)))
    if r.ndim <= 1:
        r = np.diag(np.broadcast_to(r, (spec.m,)))
    return expert.NmpcConfig(
        horizon=ex["horizon"], dt=ex["dt"], Q=q, R=r,
        max_iters=ex["max_iters"], grad_tol=ex["grad_tol"],
        lr=ex["lr"], lr_decay=ex["lr_decay"], seed=seed)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, stage, cfg, seed, artifact_paths):
    manifest = {
        "stage": stage,
        "seed": seed,
        "config_hash": config_mod.config_hash(cfg),
        "artifacts": {os.path.relpath(p, out_dir): _sha256(p) for p in artifact_paths},
    }
    path = os.path.join(out_dir, f"{stage}.manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(path, stage):
    if not os.path.exists(path):
        raise StageError(stage, f"missing input artifact: {path}")
    return path


def _models_dir(out_dir):
    path = os.path.join(out_dir, "models")
    os.makedirs(path, exist_ok=True)
    return path


def _data_dir(out_dir):
    path = os.path.join(out_dir, "data")
    os.makedirs(path, exist_ok=True)
    return path


def stage_gen_dyn_data(cfg, out_dir, seed):
    spec = _system_spec(cfg)
    s = cfg["sysid"]
    data = sysid.gen_dynamics_data(
        spec, s["n_traj"], s["horizon_s"], s["dt"],
        s["input_low"], s["input_high"], seed=seed,
        x0_low=s["x0_low"], x0_high=s["x0_high"])
    dest = os.path.join(_data_dir(out_dir), "dynamics")
    sysid.save_dataset(data, dest, seed=seed, params={"n_traj": s["n_traj"]})
    _write_manifest(out_dir, "gen-dyn-data", cfg, seed,
                    [os.path.join(dest, "manifest.json")])
    return dest


def stage_train_dynamics(cfg, out_dir, seed):
    src = _require(os.path.join(out_dir, "data", "dynamics", "manifest.json"),
                   "train-dynamics")
    data = sysid.load_dataset(os.path.dirname(src))
    s = cfg["sysid"]
    tc = sysid.TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"], seed=seed,
        val_fraction=s["val_fraction"], hidden_layers=s["hidden_layers"],
        hidden_units=s["hidden_units"], activation=s["activation"])
    result = sysid.train_dynamics(data, tc)
    path = os.path.join(_models_dir(out_dir), "dynamics.json")
    nn.save_model(result.net, path)
    history = os.path.join(_models_dir(out_dir), "dynamics_history.json")
    with open(history, "w") as fh:
        json.dump({"train_loss": result.train_loss, "val_loss": result.val_loss},
                  fh, indent=1)
        fh.write("\n")
    _write_manifest(out_dir, "train-dynamics", cfg, seed, [path, history])
    return path


def stage_gen_expert(cfg, out_dir, seed):
    spec = _system_spec(cfg)
    ex = cfg["expert"]
    ncfg = _nmpc_config(cfg, seed)
    data = expert.gen_expert_dataset(
        spec, ex["n_starts"], ncfg, seed=seed, rh_steps=ex["rh_steps"],
        x0_low=ex["x0_low"], x0_high=ex["x0_high"])
    path = os.path.join(_data_dir(out_dir), "expert.csv")
    expert.save_expert_dataset(data, path, ncfg, seed=seed)
    _write_manifest(out_dir, "gen-expert", cfg, seed,
                    [path, path + ".manifest.json"])
    return path


def stage_train_policy(cfg, out_dir, seed):
    src = _require(os.path.join(out_dir, "data", "expert.csv"), "train-policy")
    data = expert.load_expert_dataset(src)
    im = cfg["imitation"]
    tc = imitation.PolicyTrainConfig(
        epochs=im["epochs"], batch_size=im["batch_size"], lr=im["lr"], seed=seed,
        val_fraction=im["val_fraction"], hidden_layers=im["hidden_layers"],
        hidden_units=im["hidden_units"])
    result = imitation.train_policy(data, tc)
    path = os.path.join(_models_dir(out_dir), "policy.json")
    nn.save_model(result.net, path)
    _write_manifest(out_dir, "train-policy", cfg, seed, [path])
    return path


def stage_sample_icbf(cfg, out_dir, seed):
    env = _environment(cfg)
    spec = _system_spec(cfg)
    ic = cfg["icbf"]
    samples = icbf.sample_labeled(
        env, ic["n_samples"], m=spec.m, seed=seed,
        input_box_scale=ic["input_box_scale"],
        balance_band=(ic["balance_low"], ic["balance_high"]))
    path = os.path.join(_data_dir(out_dir), "labeled.csv")
    with open(path, "w") as fh:
        n, m = samples.X.shape[1], samples.U.shape[1]
        fh.write(",".join([f"x{i+1}" for i in range(n)]
                          + [f"u{j+1}" for j in range(m)] + ["label"]) + "\n")
        for x, u, safe in zip(samples.X, samples.U, samples.safe):
            cells = [repr(float(v)) for v in x] + [repr(float(v)) for v in u]
            cells.append("safe" if safe else "unsafe")
            fh.write(",".join(cells) + "\n")
    _write_manifest(out_dir, "sample-icbf", cfg, seed, [path])
    return path


def load_labeled(path) -> icbf.LabeledSet:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n = sum(1 for c in header if c.startswith("x"))
        m = sum(1 for c in header if c.startswith("u"))
        X, U, safe = [], [], []
        for line in fh:
            cells = line.strip().split(",")
            if not cells or cells == [""]:
                continue
            X.append([float(v) for v in cells[:n]])
            U.append([float(v) for v in cells[n:n + m]])
            safe.append(cells[n + m] == "safe")
    return icbf.LabeledSet(np.asarray(X), np.asarray(U), np.asarray(safe, dtype=bool))


def stage_train_icbf(cfg, out_dir, seed):
    labeled = _require(os.path.join(out_dir, "data", "labeled.csv"), "train-icbf")
    f_path = _require(os.path.join(out_dir, "models", "dynamics.json"), "train-icbf")
    pi_path = _require(os.path.join(out_dir, "models", "policy.json"), "train-icbf")
    samples = load_labeled(labeled)
    f_net = nn.load_model(f_path)
    pi_net = nn.load_model(pi_path)
    ic = cfg["icbf"]
    tc = icbf.IcbfTrainConfig(
        epochs=ic["epochs"], batch_size=ic["batch_size"], lr=ic["lr"],
        lr_decay_every=ic["lr_decay_every"], seed=seed,
        val_fraction=ic["val_fraction"], hidden_layers=ic["hidden_layers"],
        hidden_units=ic["hidden_units"], eps=ic["eps"],
        gamma_gain=ic["gamma_gain"], kappa_track=ic["kappa_track"],
        eps_tightens=ic["eps_tightens"],
        checkpoint_metric=ic["checkpoint_metric"])
    result = icbf.train_icbf(samples, icbf.net_dynamics_eval(f_net),
                             icbf.net_policy_eval(pi_net), tc)
    path = os.path.join(_models_dir(out_dir), "barrier.json")
    nn.save_model(result.net, path)
    env = _environment(cfg)
    pos_slice = os.path.join(_models_dir(out_dir), "barrier_position_slice.csv")
    inp_slice = os.path.join(_models_dir(out_dir), "barrier_input_slice.csv")
    icbf.export_position_slice(result.net, env, np.zeros(len(samples.U[0])), pos_slice)
    icbf.export_input_slice(result.net, env, env.goal, inp_slice,
                            box_scale=ic["input_box_scale"])
    metrics = os.path.join(_models_dir(out_dir), "barrier_metrics.json")
    with open(metrics, "w") as fh:
        json.dump({"held_out_sign_accuracy": result.sign_accuracy}, fh, indent=1)
        fh.write("\n")
    _write_manifest(out_dir, "train-icbf", cfg, seed,
                    [path, pos_slice, inp_slice, metrics])
    return path


def build_filter_models(cfg, out_dir) -> safectl.FilterModels:
    f_net = nn.load_model(_require(os.path.join(out_dir, "models", "dynamics.json"),
                                   "simulate"))
    pi_net = nn.load_model(_require(os.path.join(out_dir, "models", "policy.json"),
                                    "simulate"))
    h_net = nn.load_model(_require(os.path.join(out_dir, "models", "barrier.json"),
                                   "simulate"))
    ic = cfg["icbf"]
    gamma = icbf.GammaSpec(gain=ic["gamma_gain"])
    p_fun, q_fun = icbf.make_pq(h_net, icbf.net_dynamics_eval(f_net),
                                icbf.net_policy_eval(pi_net), gamma,
                                ic["kappa_track"])
    policy = lambda x: nn.mlp_forward(pi_net, np.asarray(x, dtype=float))
    return safectl.FilterModels(policy=policy, p_fun=p_fun, q_fun=q_fun)


def stage_simulate(cfg, out_dir, seed):
    env = _environment(cfg)
    spec = _system_spec(cfg)
    models = build_filter_models(cfg, out_dir)
    sc = cfg["safectl"]
    rng = np.random.default_rng(seed)
    starts = rng.uniform(env.state_low, env.state_high,
                         size=(sc["n_eval_starts"], spec.n))
    dest = os.path.join(out_dir, "results", "simulate")
    os.makedirs(dest, exist_ok=True)
    ncfg = _nmpc_config(cfg, seed)
    rows = []
    timing = []
    f_net = nn.load_model(os.path.join(out_dir, "models", "dynamics.json"))
    learned_step = (lambda x, u: sysid.phi_step(f_net, x[None], u[None],
                                                cfg["expert"]["dt"])[0])
    for k, x0 in enumerate(starts):
        traj, metrics = safectl.run_closed_loop(
            env, spec, models, x0, cfg["expert"]["dt"], sc["eps1"],
            sc["max_steps"], sim_model=sc["sim_model"],
            learned_step=learned_step, substeps=sc["substeps"],
            input_slack=sc["input_slack"], project_input=sc["project_input"])
        cost = bench.trajectory_cost(traj, ncfg.Q, ncfg.R)
        rows.append((k, x0, metrics, cost))
        timing.append((k, metrics.control_cpu_s))
        if k < 5:
            dynamics.save_trajectory_csv(
                traj, os.path.join(dest, f"trajectory_{k:03d}.csv"))
    summary = os.path.join(dest, "summary.csv")
    with open(summary, "w") as fh:
        fh.write("start_idx,reached,steps,cost,min_clearance,input_violations,"
                 "penetrations,infeasible_substeps\n")
        for k, x0, metrics, cost in rows:
            fh.write(f"{k},{int(metrics.reached)},{metrics.steps},{cost!r},"
                     f"{metrics.min_clearance!r},{metrics.input_violations},"
                     f"{metrics.penetrations},{metrics.infeasible_substeps}\n")
    with open(os.path.join(dest, "timing.csv"), "w") as fh:
        fh.write("start_idx,control_cpu_s\n")
        for k, t in timing:
            fh.write(f"{k},{t!r}\n")
    _write_manifest(out_dir, "simulate", cfg, seed, [summary])
    return summary


def stage_certify(cfg, out_dir, seed):
    env = _environment(cfg)
    spec = _system_spec(cfg)
    ce = cfg["certify"]
    ic = cfg["icbf"]
    f_net = nn.load_model(_require(os.path.join(out_dir, "models", "dynamics.json"),
                                   "certify"))
    pi_net = nn.load_model(_require(os.path.join(out_dir, "models", "policy.json"),
                                    "certify"))
    h_net = nn.load_model(_require(os.path.join(out_dir, "models", "barrier.json"),
                                   "certify"))
    dyn_data = sysid.load_dataset(os.path.dirname(
        _require(os.path.join(out_dir, "data", "dynamics", "manifest.json"), "certify")))
    expert_data = expert.load_expert_dataset(
        _require(os.path.join(out_dir, "data", "expert.csv"), "certify"))
    labeled = load_labeled(
        _require(os.path.join(out_dir, "data", "labeled.csv"), "certify"))

    rng = np.random.default_rng(seed + 1)
    test_states = rng.uniform(env.state_low, env.state_high,
                              size=(ce["n_test_states"], spec.n))

    dt = cfg["expert"]["dt"]
    kappa = ic["kappa_track"]
    gamma_gain = ic["gamma_gain"]
    oracle_cfg = _nmpc_config(cfg, seed)
    oracle_cfg.horizon = ce["oracle_horizon"]
    oracle_cfg.max_iters = ce["oracle_max_iters"]

    h_true_fun, h_true_grads = certify.analytic_barrier(env, ce["smooth_rho"])
    oracle = certify.oracle_filter_models(env, spec, oracle_cfg, kappa,
                                          gamma_gain, ce["smooth_rho"])
    learned = build_filter_models(cfg, out_dir)

    X_dyn, U_dyn, _ = sysid.transitions(dyn_data)
    joint_dyn = np.hstack([X_dyn, U_dyn])
    joint_lab = np.hstack([labeled.X, labeled.U])
    probe_states = test_states
    probe_joint = np.hstack([probe_states,
                             nn.mlp_forward_batch(pi_net, probe_states)])

    n_pairs = ce["n_lipschitz_pairs"]
    f_true = lambda Z: spec.field(Z[:, :spec.n], Z[:, spec.n:])
    f_model = lambda Z: nn.mlp_forward_batch(f_net, Z)
    h_true_batch = lambda Z: np.array(
        [h_true_fun(z[:spec.n], z[spec.n:]) for z in Z])
    h_model = lambda Z: nn.mlp_forward_batch(h_net, Z)
    policy_model = lambda X: nn.mlp_forward_batch(pi_net, X)
    # the policy approximates the tracking law over joint points through its
    # state part only
    policy_on_joint = lambda Z: nn.mlp_forward_batch(pi_net, Z[:, :spec.n])

    def phi_true(Z):
        out = np.empty((len(Z), spec.m))
        for i, z in enumerate(Z):
            out[i] = kappa * (oracle.policy(z[:spec.n]) - z[spec.n:])
        return out

    # phi pairs are expensive (each evaluation solves the oracle problem), so
    # its constant is estimated on a reduced pair budget
    phi_points = joint_dyn[np.random.default_rng(seed + 2).permutation(len(joint_dyn))[:60]]

    report = certify.ErrorBoundReport(
        dt=dt,
        lip_f_true=certify.estimate_lipschitz(f_true, joint_dyn, n_pairs, seed),
        lip_f_model=certify.estimate_lipschitz(f_model, joint_dyn, n_pairs, seed),
        lip_h_true=certify.estimate_lipschitz(h_true_batch, joint_lab, n_pairs, seed),
        lip_h_model=certify.estimate_lipschitz(h_model, joint_lab, n_pairs, seed),
        lip_phi_true=certify.estimate_lipschitz(phi_true, phi_points, 120, seed),
        lip_policy=certify.estimate_lipschitz(policy_model, expert_data.states,
                                              n_pairs, seed),
        gamma_gain=gamma_gain,
        delta1_dynamics=certify.fill_distance(joint_dyn, probe_joint),
        delta2_policy=certify.fill_distance(expert_data.states, probe_states),
        delta1_barrier=certify.fill_distance(joint_lab, probe_joint),
        mu_dynamics=certify.model_discrepancy(f_true, f_model, joint_dyn),
        mu_policy=certify.model_discrepancy(phi_true, policy_on_joint, phi_points),
        mu_barrier=gamma_gain * certify.model_discrepancy(
            h_true_batch, lambda Z: h_model(Z)[:, 0], joint_lab),
    )

    dest = os.path.join(out_dir, "results", "certify")
    os.makedirs(dest, exist_ok=True)
    table = os.path.join(dest, "validation.csv")
    rate, skipped = certify.validate_bound(
        oracle, learned, test_states, report.bound(), dt,
        substeps=cfg["safectl"]["substeps"], table_path=table)
    report.violation_rate = rate
    path = os.path.join(dest, "report.json")
    certify.save_report(report, path)
    _write_manifest(out_dir, "certify", cfg, seed, [path, table])
    return path


def stage_bench(cfg, out_dir, seed):
    env = _environment(cfg)
    spec = _system_spec(cfg)
    be = cfg["bench"]
    models = build_filter_models(cfg, out_dir)
    ncfg = _nmpc_config(cfg, seed)
    table = bench.run_benchmark(
        env, spec, ncfg, models, be["methods"], be["n_avg"], seed,
        eps1=cfg["safectl"]["eps1"], max_steps=be["max_steps"],
        penalty_weight=be["obstacle_penalty_weight"],
        substeps=cfg["safectl"]["substeps"],
        input_slack=cfg["safectl"]["input_slack"],
        x0_low=cfg["expert"]["x0_low"], x0_high=cfg["expert"]["x0_high"])
    dest = os.path.join(out_dir, "results", "bench")
    os.makedirs(dest, exist_ok=True)
    summary = os.path.join(dest, "summary.csv")
    bench.export_report(table, summary, episodes_path=os.path.join(dest, "episodes.csv"))
    text = bench.format_table(table)
    with open(os.path.join(dest, "table.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    _write_manifest(out_dir, "bench", cfg, seed, [summary])
    return summary


PIPELINE_STAGES = [
    ("gen-dyn-data", stage_gen_dyn_data),
    ("train-dynamics", stage_train_dynamics),
    ("gen-expert", stage_gen_expert),
    ("train-policy", stage_train_policy),
    ("sample-icbf", stage_sample_icbf),
    ("train-icbf", stage_train_icbf),
    ("simulate", stage_simulate),
]

STAGES = dict(PIPELINE_STAGES + [("certify", stage_certify), ("bench", stage_bench)])


def stage_pipeline(cfg, out_dir, seed):
    last = None
    for name, fn in PIPELINE_STAGES:
        print(f"stage {name} ...", flush=True)
        last = fn(cfg, out_dir, seed)
    return last


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="neural-icbf",
        description="train and evaluate a neural integral-barrier safe controller")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["pipeline"]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None,
                       help=f"output directory (or ${OUT_ENV_VAR})")
    args = parser.parse_args(argv)

    try:
        cfg = config_mod.load_config(args.config)
    except (config_mod.ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else cfg["seed"]
    out_dir = args.out or os.environ.get(OUT_ENV_VAR) or "out"
    os.makedirs(out_dir, exist_ok=True)

    runner = stage_pipeline if args.command == "pipeline" else STAGES[args.command]
    try:
        artifact = runner(cfg, out_dir, seed)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - stage-tag anything unexpected
        print(f"[{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: ok ({artifact})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
