import numpy as np
import pytest

from conftest import assert_grads_close, fd_param_grads, fd_scalar_grad, rel_err
from neural_icbf import nn


def tiny_net(seed=0, dims=(2, 5, 3), activation="tanh"):
    return nn.mlp_init(list(dims), hidden_activation=activation, seed=seed)


class TestForward:
    def test_zero_parameters_give_zero_output(self):
        net = tiny_net()
        for w in net.weights:
            w[:] = 0.0
        x = np.array([0.7, -1.3])
        assert np.array_equal(nn.mlp_forward(net, x), np.zeros(3))

    def test_single_layer_identity(self):
        net = nn.Mlp([2, 2], [np.eye(2)], [np.zeros(2)], "relu")
        out = nn.mlp_forward(net, np.array([1.0, 2.0]))
        assert np.array_equal(out, np.array([1.0, 2.0]))

    def test_two_layer_tanh_matches_straight_line_arithmetic(self):
        # independent re-evaluation: spell out the same arithmetic inline
        net = nn.mlp_init([2, 4, 2], hidden_activation="tanh", seed=7)
        x = np.array([0.5, -0.3])
        h = np.tanh(net.weights[0] @ x + net.biases[0])
        want = net.weights[1] @ h + net.biases[1]
        got = nn.mlp_forward(net, x)
        assert np.allclose(got, want, rtol=0, atol=1e-14)

    def test_dimension_mismatch_raises(self):
        net = tiny_net()
        with pytest.raises(ValueError):
            nn.mlp_forward(net, np.zeros(3))

    def test_forward_is_deterministic(self):
        net = tiny_net(seed=3)
        x = np.array([0.2, 0.9])
        a = nn.mlp_forward(net, x)
        b = nn.mlp_forward(net, x)
        assert np.array_equal(a, b)


class TestBackward:
    def test_linear_net_input_gradient_is_w_transpose_upstream(self):
        W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
        net = nn.Mlp([2, 3], [W], [np.zeros(3)], "relu")
        upstream = np.array([1.0, -2.0, 0.5])
        _, xg = nn.mlp_backward(net, np.array([0.3, 0.4]), upstream)
        assert np.allclose(xg, W.T @ upstream, atol=1e-15)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_param_gradients_match_finite_differences(self, activation):
        net = tiny_net(seed=11, dims=(3, 6, 4, 2), activation=activation)
        rng = np.random.default_rng(5)
        x = rng.normal(size=3)
        upstream = rng.normal(size=2)

        grads, xg = nn.mlp_backward(net, x, upstream)
        want = fd_param_grads(net, lambda n: float(upstream @ nn.mlp_forward(n, x)))
        assert_grads_close(grads, want, 1e-5)

        want_xg = fd_scalar_grad(lambda z: float(upstream @ nn.mlp_forward(net, z)), x)
        assert rel_err(xg, want_xg) < 1e-5

    def test_zero_upstream_gives_zero_gradients(self):
        net = tiny_net(seed=2)
        grads, xg = nn.mlp_backward(net, np.array([0.1, 0.2]), np.zeros(3))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads)
        assert np.array_equal(xg, np.zeros(2))

    def test_upstream_shape_mismatch_raises(self):
        net = tiny_net()
        with pytest.raises(ValueError):
            nn.mlp_backward(net, np.zeros(2), np.zeros(4))


class TestJacobian:
    def test_linear_net_jacobian_is_w(self):
        W = np.array([[1.0, 2.0], [3.0, -1.0]])
        net = nn.Mlp([2, 2], [W], [np.zeros(2)], "relu")
        assert np.array_equal(nn.mlp_jacobian_input(net, np.array([0.4, -0.2])), W)

    def test_jacobian_rows_match_finite_differences(self):
        net = tiny_net(seed=9, dims=(2, 5, 3), activation="tanh")
        x = np.array([0.3, -0.8])
        jac = nn.mlp_jacobian_input(net, x)
        for i in range(3):
            want = fd_scalar_grad(lambda z: nn.mlp_forward(net, z)[i], x)
            assert rel_err(jac[i], want) < 1e-5

    def test_jacobian_rows_equal_backward_unit_upstreams_exactly(self):
        net = tiny_net(seed=4, dims=(3, 7, 2), activation="relu")
        x = np.array([0.5, -0.1, 0.9])
        jac = nn.mlp_jacobian_input(net, x)
        for i in range(2):
            _, row = nn.mlp_backward(net, x, np.eye(2)[i])
            assert np.array_equal(jac[i], row)

    def test_relu_jacobian_locally_constant_away_from_kinks(self):
        net = tiny_net(seed=13, dims=(2, 8, 1), activation="relu")
        x = np.array([0.37, -0.21])
        # distance to the nearest pre-activation kink bounds the safe radius
        pre = net.weights[0] @ x + net.biases[0]
        row_norms = np.linalg.norm(net.weights[0], axis=1)
        margin = np.min(np.abs(pre) / np.maximum(row_norms, 1e-12))
        assert margin > 0
        jac = nn.mlp_jacobian_input(net, x)
        rng = np.random.default_rng(0)
        for _ in range(5):
            d = rng.normal(size=2)
            d *= 0.5 * margin / np.linalg.norm(d)
            assert np.allclose(nn.mlp_jacobian_input(net, x + d), jac, atol=1e-14)


class TestDirectionalGrad:
    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_finite_differences(self, activation):
        net = tiny_net(seed=21, dims=(4, 6, 5, 1), activation=activation)
        rng = np.random.default_rng(3)
        X = rng.normal(size=(6, 4))
        V = rng.normal(size=(6, 4))
        lam = rng.normal(size=6)
        c = np.array([1.0])

        g, grads = nn.mlp_dir_grad_batch(net, X, V, c, lam)

        # value oracle: directional derivatives row by row from the Jacobian
        for b in range(6):
            want = nn.mlp_jacobian_input(net, X[b])[0] @ V[b]
            assert abs(g[b] - want) < 1e-10

        def objective(n):
            total = 0.0
            for b in range(6):
                total += lam[b] * (nn.mlp_jacobian_input(n, X[b])[0] @ V[b])
            return total

        want_grads = fd_param_grads(net, objective)
        assert_grads_close(grads, want_grads, 1e-5)


class TestAdam:
    def test_zero_gradient_from_fresh_state_leaves_parameters_unchanged(self):
        params = [np.array([1.0, -2.0]), np.array([[0.5]])]
        state = nn.adam_init(params, lr=0.1)
        grads = [np.zeros(2), np.zeros((1, 1))]
        new_params, new_state = nn.adam_step(params, grads, state)
        for p, q in zip(params, new_params):
            assert np.array_equal(p, q)
        assert new_state.step == 1

    def test_zero_gradient_decays_existing_moments(self):
        params = [np.array([1.0, -2.0])]
        state = nn.adam_init(params, lr=0.1)
        state.m = [np.array([0.3, 0.1])]
        state.v = [np.array([0.4, 0.2])]
        state.step = 3
        _, new_state = nn.adam_step(params, [np.zeros(2)], state)
        assert np.allclose(new_state.m[0], 0.9 * state.m[0], atol=1e-15)
        assert np.allclose(new_state.v[0], 0.999 * state.v[0], atol=1e-15)
        assert new_state.step == 4

    def test_first_step_matches_hand_computation(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        p0 = np.array([0.5, -1.0])
        g = np.array([2.0, -3.0])
        state = nn.adam_init([p0], lr=lr, beta1=b1, beta2=b2, eps=eps)
        (p1,), _ = nn.adam_step([p0], [g], state)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        want = p0 - lr * g / (np.abs(g) + eps)
        assert np.allclose(p1, want, atol=1e-15)

    def test_two_identical_steps_match_hand_computation(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        p = np.array([1.0])
        g = np.array([0.7])
        state = nn.adam_init([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        (p1,), state = nn.adam_step([p], [g], state)
        (p2,), _ = nn.adam_step([p1], [g], state)
        m2 = (b1 * (1 - b1) + (1 - b1)) * g
        v2 = (b2 * (1 - b2) + (1 - b2)) * g * g
        want = p1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
        assert np.allclose(p2, want, atol=1e-15)


class TestDeterminismAndSerialization:
    def test_seeded_init_is_bit_identical(self):
        a = nn.mlp_init([3, 16, 2], seed=42)
        b = nn.mlp_init([3, 16, 2], seed=42)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_model_file_round_trip_is_bit_exact(self, tmp_path):
        net = nn.mlp_init([4, 9, 3], hidden_activation="tanh", seed=17)
        path = tmp_path / "model.json"
        nn.save_model(net, path)
        back = nn.load_model(path)
        assert back.layer_dims == net.layer_dims
        assert back.hidden_activation == net.hidden_activation
        for wa, wb in zip(net.weights, back.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(net.biases, back.biases):
            assert np.array_equal(ba, bb)
        # saving again produces the identical file
        path2 = tmp_path / "model2.json"
        nn.save_model(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_unknown_format_version_rejected(self, tmp_path):
        net = nn.mlp_init([2, 2], seed=0)
        path = tmp_path / "model.json"
        nn.save_model(net, path)
        text = path.read_text().replace('"format_version": 1', '"format_version": 99')
        path.write_text(text)
        with pytest.raises(ValueError):
            nn.load_model(path)
