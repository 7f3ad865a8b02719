import numpy as np
import pytest

from conftest import assert_grads_close, fd_param_grads, fd_scalar_grad, rel_err
from neural_icbf import dynamics, icbf, nn, safectl
from neural_icbf.icbf import EnvironmentSpec, GammaSpec, LabeledSet


def square_env(obstacles=(), b=1.0):
    return EnvironmentSpec(
        state_low=np.zeros(2), state_high=np.ones(2),
        obstacles=list(obstacles), input_ball_radius=b,
        goal=np.zeros(2), pos_idx=(0, 1))


def linear_h(w, b0=0.0):
    w = np.asarray(w, dtype=float)
    return nn.Mlp([len(w), 1], [w[None, :].copy()], [np.array([b0])], "relu")


class TestEnvironment:
    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError):
            square_env(obstacles=[((0.5, 0.5), -0.1)])
        with pytest.raises(ValueError):
            square_env(obstacles=[((5.0, 0.5), 0.1)])
        with pytest.raises(ValueError):
            square_env(b=0.0)


class TestLabeling:
    def test_vacuous_constraints_all_safe(self):
        env = square_env(b=1e9)
        rng = np.random.default_rng(0)
        X = rng.uniform(0, 1, size=(50, 2))
        U = rng.uniform(-5, 5, size=(50, 2))
        assert np.all(icbf.label_samples(env, X, U))

    def test_obstacle_center_is_unsafe(self):
        env = square_env(obstacles=[((0.5, 0.5), 0.2)])
        safe = icbf.label_samples(env, np.array([[0.5, 0.5]]), np.array([[0.0, 0.0]]))
        assert not safe[0]

    def test_matches_brute_force_geometric_check(self):
        env = square_env(obstacles=[((0.3, 0.4), 0.15), ((0.7, 0.6), 0.1)], b=0.8)
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 1, size=(300, 2))
        U = rng.uniform(-1.5, 1.5, size=(300, 2))
        got = icbf.label_samples(env, X, U)
        for k in range(300):
            ok = (U[k, 0] ** 2 + U[k, 1] ** 2) <= 0.8 ** 2
            for (cx, cy), r in [((0.3, 0.4), 0.15), ((0.7, 0.6), 0.1)]:
                if np.hypot(X[k, 0] - cx, X[k, 1] - cy) <= r:
                    ok = False
            assert got[k] == ok

    def test_safe_fraction_matches_volume_ratio(self):
        # one disc fully inside the unit box; inputs all admissible
        env = square_env(obstacles=[((0.5, 0.5), 0.25)], b=100.0)
        n = 20000
        samples = icbf.sample_labeled(env, n, m=2, seed=1, input_box_scale=0.005,
                                      balance_band=(0.0, 1.0))
        p = 1.0 - np.pi * 0.25 ** 2
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(samples.safe.mean() - p) < 3 * sigma


class TestSampling:
    def test_counts_and_determinism(self):
        env = square_env(obstacles=[((0.5, 0.5), 0.2)], b=1.0)
        a = icbf.sample_labeled(env, 500, m=2, seed=4)
        b = icbf.sample_labeled(env, 500, m=2, seed=4)
        assert len(a) == 500
        assert np.array_equal(a.X, b.X)
        assert np.array_equal(a.U, b.U)
        assert np.array_equal(a.safe, b.safe)

    def test_enlarged_input_box_creates_both_classes(self):
        env = square_env(b=1.0)
        samples = icbf.sample_labeled(env, 1000, m=2, seed=0)
        assert 0 < samples.n_safe < 1000

    def test_degenerate_environment_raises(self):
        env = square_env(obstacles=[((0.5, 0.5), 0.925)], b=1.0)
        # the disc nearly covers the box and the input scale makes u unsafe too
        with pytest.raises(icbf.NoSafeSamplesError):
            icbf.sample_labeled(env, 100, m=2, seed=0, input_box_scale=60.0)

    def test_balancing_kicks_in_for_lopsided_classes(self):
        env = square_env(b=1.0)
        samples = icbf.sample_labeled(env, 400, m=2, seed=2, input_box_scale=12.0)
        # raw safe fraction would be about pi/576 ~ 0.5%; balanced to half
        assert samples.n_safe == 200


class TestPQ:
    def test_p_of_input_linear_barrier_is_coefficient(self):
        h = linear_h([0.3, -0.7, 1.5, 2.0])
        p = icbf.icbf_p(h, np.array([0.1, 0.2]), np.array([0.5, -0.5]))
        assert np.allclose(p, [1.5, 2.0], atol=1e-14)

    def test_p_zero_when_barrier_ignores_input(self):
        h = linear_h([0.3, -0.7, 0.0, 0.0])
        p = icbf.icbf_p(h, np.array([0.1, 0.2]), np.array([0.5, -0.5]))
        assert np.array_equal(p, np.zeros(2))

    def test_p_matches_finite_differences(self):
        h = nn.mlp_init([4, 8, 1], hidden_activation="tanh", seed=2)
        x = np.array([0.3, 0.6])
        u = np.array([-0.2, 0.4])
        p = icbf.icbf_p(h, x, u)
        want = fd_scalar_grad(
            lambda w: nn.mlp_forward(h, np.concatenate([x, w]))[0], u)
        assert rel_err(p, want) < 1e-5

    def test_q_of_constant_barrier_is_minus_gamma(self):
        h = linear_h([0.0, 0.0, 0.0, 0.0], b0=2.5)
        gamma = GammaSpec(gain=1.3)
        q = icbf.icbf_q(h, lambda X, U: np.zeros_like(X),
                        lambda X, U: np.zeros_like(U), gamma,
                        np.zeros(2), np.zeros(2))
        assert abs(q + 1.3 * 2.5) < 1e-14
        assert q < 0

    def test_q_linear_barrier_zero_field_zero_law(self):
        h = linear_h([1.0, -2.0, 0.5, 0.3], b0=0.1)
        gamma = GammaSpec(gain=2.0)
        x = np.array([0.2, 0.4])
        u = np.array([0.6, -0.1])
        q = icbf.icbf_q(h, lambda X, U: np.zeros_like(X),
                        lambda X, U: np.zeros_like(U), gamma, x, u)
        h_val = 1.0 * 0.2 - 2.0 * 0.4 + 0.5 * 0.6 + 0.3 * -0.1 + 0.1
        assert abs(q + 2.0 * h_val) < 1e-12

    def test_q_generic_net_matches_straight_line_evaluation(self):
        h = nn.mlp_init([4, 6, 1], hidden_activation="tanh", seed=9)
        gamma = GammaSpec(gain=0.7)
        x = np.array([0.25, 0.75])
        u = np.array([0.4, -0.6])

        def f_eval(X, U):
            return np.stack([X[:, 0] * U[:, 1], X[:, 1] - U[:, 0]], axis=1)

        def phi_eval(X, U):
            return 3.0 * (0.5 - U)

        got = icbf.icbf_q(h, f_eval, phi_eval, gamma, x, u)

        z = np.concatenate([x, u])
        grad = fd_scalar_grad(lambda w: nn.mlp_forward(h, w)[0], z, step=1e-6)
        h_val = nn.mlp_forward(h, z)[0]
        f = np.array([x[0] * u[1], x[1] - u[0]])
        phi = 3.0 * (0.5 - u)
        want = -(grad[:2] @ f + grad[2:] @ phi + 0.7 * h_val)
        assert abs(got - want) < 1e-5


def frozen_vstar_loss(h_net, Zs, F_vals, Phi_vals, V_frozen, Zu, eps, gamma):
    """Straight-line loss with the auxiliary input held at V_frozen: the
    quantity whose parameter gradient the training code must produce."""
    total = 0.0
    if len(Zs):
        h = nn.mlp_forward_batch(h_net, Zs)[:, 0]
        _, G = nn.mlp_backward_batch(h_net, Zs, np.ones((len(Zs), 1)))
        n = F_vals.shape[1]
        P = G[:, n:]
        q = -(np.einsum("bi,bi->b", G[:, :n], F_vals)
              + np.einsum("bm,bm->b", P, Phi_vals) + gamma(h))
        psi = -np.einsum("bm,bm->b", P, V_frozen) + q - eps
        total += float(np.sum(np.maximum(psi, 0.0)))
        total += float(np.sum(np.maximum(-h, 0.0)))
    if len(Zu):
        h_u = nn.mlp_forward_batch(h_net, Zu)[:, 0]
        total += float(np.sum(np.maximum(h_u, 0.0)))
    return total


class TestLoss:
    def make_case(self, seed=0, activation="tanh"):
        rng = np.random.default_rng(seed)
        h = nn.mlp_init([4, 6, 5, 1], hidden_activation=activation, seed=seed)
        Zs = rng.normal(size=(5, 4))
        Zu = rng.normal(size=(4, 4))
        F_vals = rng.normal(size=(5, 2))
        Phi_vals = rng.normal(size=(5, 2))
        return h, Zs, F_vals, Phi_vals, Zu

    def test_loss_zero_when_all_constraints_satisfied(self):
        # barrier positive on safe and negative on unsafe by construction,
        # with a drift margin supplied by a strongly negative q
        h = linear_h([0.0, 0.0, -1.0, 0.0], b0=1.0)   # h = 1 - u1
        env_samples = LabeledSet(
            X=np.array([[0.2, 0.2], [0.4, 0.1]]),
            U=np.array([[0.0, 0.0], [0.5, 0.0]]),     # h = 1, 0.5 > 0
            safe=np.array([True, True]))
        gamma = GammaSpec(gain=1.0)
        # f = 0 and pi(x) = u so phi = 0; q = -gamma(h) < 0, v* = 0, psi < 0
        loss = icbf.loss_icbf(h, lambda X, U: np.zeros_like(X),
                              lambda X: np.array([[0.0, 0.0], [0.5, 0.0]]),
                              env_samples, eps=0.1, gamma=gamma, kappa_track=1.0)
        assert loss == 0.0

    def test_single_safe_pair_hand_computed(self):
        w = np.array([1.0, 0.5, -2.0, 1.0])
        h = linear_h(w, b0=0.2)
        x = np.array([0.3, 0.1])
        u = np.array([0.2, -0.4])
        F = np.array([[0.5, -0.2]])
        kappa, gain, eps = 2.0, 1.5, 0.05
        pi_const = np.array([0.1, 0.3])

        h_val = w @ np.concatenate([x, u]) + 0.2
        phi = kappa * (pi_const - u)
        p = w[2:]
        q = -(w[:2] @ F[0] + p @ phi + gain * h_val)
        v = (q / (p @ p)) * p if q > 0 else np.zeros(2)
        psi = -p @ v + q - eps
        want = max(0.0, psi) + max(0.0, -h_val)

        samples = LabeledSet(X=x[None], U=u[None], safe=np.array([True]))
        got = icbf.loss_icbf(h, lambda X, U: F,
                             lambda X: pi_const[None, :], samples,
                             eps=eps, gamma=GammaSpec(gain=gain), kappa_track=kappa)
        assert abs(got - want) < 1e-12

    def test_loss_nonnegative(self):
        h, Zs, F_vals, Phi_vals, Zu = self.make_case(seed=5)
        samples = LabeledSet(
            X=np.vstack([Zs[:, :2], Zu[:, :2]]),
            U=np.vstack([Zs[:, 2:], Zu[:, 2:]]),
            safe=np.array([True] * 5 + [False] * 4))
        loss = icbf.loss_icbf(h, lambda X, U: np.ones_like(X),
                              lambda X: np.zeros((len(X), 2)), samples,
                              eps=0.1, gamma=GammaSpec(), kappa_track=1.0)
        assert loss >= 0.0

    def test_gradient_matches_frozen_vstar_finite_differences(self):
        h, Zs, F_vals, Phi_vals, Zu = self.make_case(seed=7)
        gamma = GammaSpec(gain=0.8)
        eps = 0.05

        loss, grads = icbf._loss_and_grads(h, Zs, F_vals, Phi_vals, Zu,
                                           eps, gamma, eps_tightens=False)

        # freeze v* at the base parameters, then differentiate
        _, _, _, W, _ = icbf._drift_terms(h, Zs, F_vals, Phi_vals, gamma,
                                          eps, False)
        V_frozen = W[:, 2:] - Phi_vals
        base = frozen_vstar_loss(h, Zs, F_vals, Phi_vals, V_frozen, Zu, eps, gamma)
        assert abs(loss - base) < 1e-12
        want = fd_param_grads(
            h, lambda net: frozen_vstar_loss(net, Zs, F_vals, Phi_vals,
                                             V_frozen, Zu, eps, gamma))
        assert_grads_close(grads, want, 1e-5)


class TestTraining:
    def test_unsafe_only_dataset_drives_barrier_nonpositive(self):
        rng = np.random.default_rng(0)
        samples = LabeledSet(X=rng.uniform(0, 1, (200, 2)),
                             U=rng.uniform(-1, 1, (200, 2)),
                             safe=np.zeros(200, dtype=bool))
        cfg = icbf.IcbfTrainConfig(epochs=200, batch_size=200, lr=3e-3, seed=0,
                                   hidden_layers=2, hidden_units=16)
        result = icbf.train_icbf(samples, lambda X, U: np.zeros_like(X),
                                 lambda X: np.zeros((len(X), 2)), cfg)
        h = nn.mlp_forward_batch(result.net, np.hstack([samples.X, samples.U]))[:, 0]
        assert result.best_val[-1] < 1e-6
        assert np.all(h <= 1e-3)

    def test_determinism(self):
        rng = np.random.default_rng(1)
        samples = LabeledSet(X=rng.uniform(0, 1, (60, 2)),
                             U=rng.uniform(-1, 1, (60, 2)),
                             safe=rng.uniform(size=60) > 0.5)
        cfg = icbf.IcbfTrainConfig(epochs=5, batch_size=32, lr=1e-3, seed=3,
                                   hidden_layers=1, hidden_units=8)
        f_eval = lambda X, U: np.zeros_like(X)
        pi_eval = lambda X: np.zeros((len(X), 2))
        a = icbf.train_icbf(samples, f_eval, pi_eval, cfg)
        b = icbf.train_icbf(samples, f_eval, pi_eval, cfg)
        for wa, wb in zip(a.net.weights, b.net.weights):
            assert np.array_equal(wa, wb)

    def test_two_disc_vehicle_sign_structure(self):
        env = EnvironmentSpec(
            state_low=np.zeros(2), state_high=np.ones(2),
            obstacles=[((0.5, 0.42), 0.15), ((0.18, 0.75), 0.12)],
            input_ball_radius=2.0, goal=np.zeros(2))
        samples = icbf.sample_labeled(env, 4000, m=2, seed=0)
        pi_net = nn.mlp_init([2, 16, 2], seed=1)
        cfg = icbf.IcbfTrainConfig(epochs=400, batch_size=1024, lr=2e-3, seed=0,
                                   hidden_layers=2, hidden_units=64,
                                   eps=0.05, gamma_gain=1.0, kappa_track=10.0)
        result = icbf.train_icbf(
            samples, icbf.true_dynamics_eval(dynamics.vehicle_spec()),
            icbf.net_policy_eval(pi_net), cfg)
        assert result.sign_accuracy >= 0.99

    def test_post_training_invariants_on_training_set(self):
        # after the loss is driven to ~0, the trained-set conditions hold
        rng = np.random.default_rng(2)
        X = rng.uniform(0, 1, (150, 2))
        U = rng.uniform(-1, 1, (150, 2))
        safe = np.linalg.norm(U, axis=1) < 0.9
        samples = LabeledSet(X=X, U=U, safe=safe)
        f_eval = lambda Xb, Ub: np.zeros_like(Xb)
        pi_eval = lambda Xb: np.zeros((len(Xb), 2))
        cfg = icbf.IcbfTrainConfig(epochs=500, batch_size=150, lr=3e-3, seed=0,
                                   hidden_layers=2, hidden_units=32,
                                   eps=0.02, kappa_track=1.0, val_fraction=0.05)
        result = icbf.train_icbf(samples, f_eval, pi_eval, cfg)
        gamma = GammaSpec(gain=cfg.gamma_gain)
        tol = max(1e-3, icbf.loss_icbf(result.net, f_eval, pi_eval, samples,
                                       cfg.eps, gamma, cfg.kappa_track))
        h, dhdx, dhdu = icbf.barrier_terms(result.net, X, U)
        assert np.all(h[safe] > -tol)
        assert np.all(h[~safe] < tol)


class TestSliceExport:
    def test_position_slice_round_trip(self, tmp_path):
        env = square_env(obstacles=[((0.5, 0.5), 0.2)], b=1.0)
        h = nn.mlp_init([4, 8, 1], seed=0)
        path = tmp_path / "pos.csv"
        icbf.export_position_slice(h, env, np.zeros(2), path, grid=10)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "x1,x2,h"
        assert len(rows) == 101
        x1, x2, hval = (float(v) for v in rows[1].split(","))
        want = nn.mlp_forward(h, np.array([x1, x2, 0.0, 0.0]))[0]
        assert abs(hval - want) < 1e-15

    def test_input_slice_shape(self, tmp_path):
        env = square_env(b=1.0)
        h = nn.mlp_init([4, 8, 1], seed=0)
        path = tmp_path / "inp.csv"
        icbf.export_input_slice(h, env, np.array([0.1, 0.2]), path, grid=8)
        rows = path.read_text().strip().splitlines()
        assert len(rows) == 65
