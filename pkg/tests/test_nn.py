import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapley_relu.nn import (
    SGD,
    Activation,
    Adam,
    DenseLayer,
    Network,
    NumericalError,
    cross_entropy_loss,
    grad_check,
    init_params,
    softmax,
    train_step,
)
from shapley_relu.shapley_core import NeuronView, sa_gradient, sa_value, shapley_gradient

PHI_1 = 0.8413447460685429


def example_layer(act):
    return DenseLayer([[1.0, 2.0, 3.0]], [-1.0], act)


class TestForward:
    def test_identity(self):
        layer = DenseLayer(np.eye(4), np.zeros(4), Activation.IDENTITY)
        x = np.arange(8.0).reshape(2, 4)
        np.testing.assert_array_equal(Network([layer]).forward(x), x)

    def test_example_relu_and_sa(self):
        x = np.array([[-1.0, 2.0, -1.0]])
        assert example_layer(Activation.RELU).forward(x)[0, 0] == 0.0
        assert example_layer(Activation.SHAPLU).forward(x)[0, 0] == 0.0
        assert example_layer(Activation.SA).forward(x)[0, 0] == pytest.approx(-0.3154770205920854, abs=1e-14)

    def test_sa_layer_matches_per_neuron_value(self):
        rng = np.random.default_rng(0)
        layer = DenseLayer(rng.normal(size=(5, 8)), rng.normal(size=5), Activation.SA)
        x = rng.normal(size=(3, 8))
        y = layer.forward(x)
        for i in range(3):
            for j in range(5):
                nv = NeuronView.from_weights(layer.weights[j], x[i], layer.bias[j])
                assert y[i, j] == pytest.approx(sa_value(nv), rel=1e-12, abs=1e-13)

    def test_shaplu_forward_is_relu_bitwise(self):
        net = Network.dense([6, 9, 7, 3], Activation.RELU, seed=4)
        twin = net.with_activation(Activation.SHAPLU)
        x = np.random.default_rng(1).normal(size=(11, 6))
        np.testing.assert_array_equal(net.forward(x), twin.forward(x))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            example_layer(Activation.RELU).forward(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            Network([DenseLayer(np.zeros((3, 2)), np.zeros(3)), DenseLayer(np.zeros((2, 4)), np.zeros(2))])

    def test_softmax_only_last(self):
        with pytest.raises(ValueError):
            Network([DenseLayer(np.zeros((3, 2)), np.zeros(3), "softmax"), DenseLayer(np.zeros((2, 3)), np.zeros(2))])

    @settings(max_examples=50)
    @given(arrays(np.float64, (4, 10), elements=st.floats(-100, 100, allow_nan=False)))
    def test_softmax_rows_sum_to_one(self, z):
        p = softmax(z)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_sa_approaches_phi1_times_relu_for_dominant_input(self):
        rng = np.random.default_rng(2)
        others = rng.uniform(-1, 1, 6)
        p = np.concatenate([[1e6], others])
        s = p.sum()
        layer = DenseLayer([p], [0.0], Activation.SA)
        out = layer.forward(np.ones((1, p.size)))[0, 0]
        assert abs(out - PHI_1 * s) / abs(s) < 1e-3

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            example_layer(Activation.SA).backward(np.ones((1, 1)))


def fd_layer_grads(layer, x, g, h=1e-6):
    """Central differences of sum(g * layer.forward(x)) w.r.t. x, W and b."""
    def f():
        return float((layer.forward(x) * g).sum())

    out = []
    for arr in (x, layer.weights, layer.bias):
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = f()
            flat[j] = old - h
            dn = f()
            flat[j] = old
            grad.reshape(-1)[j] = (up - dn) / (2 * h)
        out.append(grad)
    return out


def rel_err(a, b, floor=1e-4):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class TestBackward:
    def test_sa_layer_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        layer = DenseLayer(rng.normal(size=(5, 8)), rng.normal(size=5), Activation.SA)
        x = rng.normal(size=(4, 8))
        g = rng.normal(size=(4, 5))
        layer.forward(x)
        dx = layer.backward(g)
        fx, fw, fb = fd_layer_grads(layer, x.copy(), g)
        assert rel_err(dx, fx) <= 1e-4
        assert rel_err(layer.grad_w, fw) <= 1e-4
        assert rel_err(layer.grad_b, fb) <= 1e-4

    @pytest.mark.parametrize("correction", [False, True])
    def test_shaplu_layer_matches_per_neuron_formula(self, correction):
        rng = np.random.default_rng(8)
        layer = DenseLayer(rng.normal(size=(3, 5)), rng.normal(size=3), Activation.SHAPLU, correction)
        x = rng.normal(size=(2, 5))
        g = rng.normal(size=(2, 3))
        layer.forward(x)
        dx = layer.backward(g)
        ref_dx = np.zeros_like(x)
        ref_dw = np.zeros_like(layer.weights)
        ref_db = np.zeros(3)
        for i in range(2):
            for j in range(3):
                nv = NeuronView.from_weights(layer.weights[j], x[i], layer.bias[j])
                sg = shapley_gradient(nv, layer.weights[j], x[i], correction)
                ref_dx[i] += g[i, j] * sg.d_x
                ref_dw[j] += g[i, j] * sg.d_w
                ref_db[j] += g[i, j] * sg.d_b
        np.testing.assert_allclose(dx, ref_dx, atol=1e-13)
        np.testing.assert_allclose(layer.grad_w, ref_dw, atol=1e-13)
        np.testing.assert_allclose(layer.grad_b, ref_db, atol=1e-13)

    def test_sa_layer_matches_per_neuron_gradient(self):
        rng = np.random.default_rng(9)
        layer = DenseLayer(rng.normal(size=(2, 4)), rng.normal(size=2), Activation.SA)
        x = rng.normal(size=(1, 4))
        layer.forward(x)
        dx = layer.backward(np.array([[1.0, 0.0]]))
        ref = sa_gradient(NeuronView.from_weights(layer.weights[0], x[0], layer.bias[0]), layer.weights[0], x[0])
        np.testing.assert_allclose(dx[0], ref.d_x, atol=1e-14)
        np.testing.assert_allclose(layer.grad_w[0], ref.d_w, atol=1e-14)

    def test_shaplu_backward_differs_from_relu(self):
        rng = np.random.default_rng(10)
        w, b = rng.normal(size=(4, 6)), rng.normal(size=4)
        x = rng.normal(size=(3, 6))
        g = rng.normal(size=(3, 4))
        relu = DenseLayer(w, b, Activation.RELU)
        shap = DenseLayer(w, b, Activation.SHAPLU)
        np.testing.assert_array_equal(relu.forward(x), shap.forward(x))
        assert np.all((shap.gate > 0) & (shap.gate < 1))
        assert not np.allclose(relu.backward(g), shap.backward(g))

    def test_dead_relu_has_zero_gradient_but_shapley_backends_do_not(self):
        # every pre-activation <= -1, but the products are spread out
        w = np.array([[3.0, -4.0, 2.0, -2.5], [1.0, 1.0, -5.0, 0.5]])
        b = np.array([-1.0, -1.5])
        x = np.array([[1.0, 1.0, 1.0, 1.0], [0.5, 1.0, 0.8, 0.2]])
        grads = {}
        for act in (Activation.RELU, Activation.SHAPLU, Activation.SA):
            layer = DenseLayer(w, b, act)
            layer.forward(x)
            assert np.all(layer.preactivation <= -1)
            layer.backward(np.ones((2, 2)))
            grads[act] = np.linalg.norm(layer.grad_w)
        assert grads[Activation.RELU] == 0.0
        assert grads[Activation.SHAPLU] > 0.0 and grads[Activation.SA] > 0.0

    def test_softmax_jvp_matches_fused_gradient(self):
        rng = np.random.default_rng(12)
        layer = DenseLayer(rng.normal(size=(4, 3)), rng.normal(size=4), Activation.SOFTMAX)
        x = rng.normal(size=(5, 3))
        labels = rng.integers(0, 4, 5)
        probs = layer.forward(x)
        _, fused = cross_entropy_loss(probs, labels)
        dx_fused = layer.backward(fused, wrt_preactivation=True)
        gw_fused = layer.grad_w.copy()
        onehot = np.eye(4)[labels]
        dx_chain = layer.backward(-onehot / probs / 5)
        np.testing.assert_allclose(dx_chain, dx_fused, atol=1e-12)
        np.testing.assert_allclose(layer.grad_w, gw_fused, atol=1e-12)


class TestLoss:
    def test_onehot_is_zero(self):
        assert cross_entropy_loss(np.eye(3), [0, 1, 2])[0] == 0.0

    def test_uniform(self):
        loss, _ = cross_entropy_loss(np.full((4, 10), 0.1), [0, 3, 5, 9])
        assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_probability_floor(self):
        loss, _ = cross_entropy_loss(np.array([[1.0, 0.0]]), [1])
        assert loss == pytest.approx(-math.log(1e-12))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, 6)
        _, grad = cross_entropy_loss(softmax(z), labels)
        h = 1e-6
        fd = np.zeros_like(z)
        for idx in np.ndindex(*z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (cross_entropy_loss(softmax(zp), labels)[0] - cross_entropy_loss(softmax(zm), labels)[0]) / (2 * h)
        assert rel_err(grad, fd) <= 1e-5


class TestOptimizers:
    def test_sgd(self):
        p = [np.array([0.0])]
        SGD(0.1).step(p, [np.array([1.0])])
        assert p[0][0] == pytest.approx(-0.1)

    def test_adam_first_step_is_lr(self):
        for g in (1e-3, 2.0, -7.0):
            p = [np.array([0.0])]
            Adam(0.01).step(p, [np.array([g])])
            assert p[0][0] == pytest.approx(-0.01 * np.sign(g), rel=1e-4)

    def test_adam_quadratic(self):
        p = [np.array([1.0])]
        opt = Adam(0.01)
        for _ in range(100):
            opt.step(p, [2 * p[0]])
        assert abs(p[0][0]) < 0.5

    def test_adam_defaults(self):
        opt = Adam()
        assert (opt.learning_rate, opt.beta1, opt.beta2) == (0.001, 0.9, 0.999)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError):
            SGD(0.1).step([np.zeros(2)], [np.array([1.0, np.nan])])
        with pytest.raises(NumericalError):
            Adam().step([np.zeros(1)], [np.array([np.inf])])


class TestInit:
    def test_limit(self):
        net = init_params(Network([DenseLayer(np.zeros((3, 3)), np.zeros(3))]), seed=0)
        assert np.abs(net.layers[0].weights).max() <= 1.0
        big = init_params(Network([DenseLayer(np.zeros((300, 300)), np.ones(300))]), seed=1)
        w = big.layers[0].weights
        lim = math.sqrt(6 / 600)
        assert np.abs(w).max() <= lim and np.abs(w).max() > 0.99 * lim
        np.testing.assert_array_equal(big.layers[0].bias, 0.0)

    def test_mean_statistics(self):
        net = Network.dense([500, 200], Activation.RELU, Activation.IDENTITY, seed=3)
        w = net.layers[0].weights.ravel()
        assert w.size == 100_000
        assert abs(w.mean()) <= 3 * w.std() / math.sqrt(w.size)

    def test_determinism(self):
        a = Network.dense([5, 4, 3], seed=7)
        b = Network.dense([5, 4, 3], seed=7)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            init_params(Network.dense([2, 2]), scheme="he")


def _random_bias(net, seed):
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        layer.bias = rng.normal(0, 0.3, layer.fan_out)
    return net


class TestGradCheck:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.uniform(0, 1, size=(8, 8))
        self.y = rng.integers(0, 4, 8)

    def test_sa_net_passes(self):
        net = _random_bias(Network.dense([8, 16, 16, 4], Activation.SA, seed=1), 2)
        report = grad_check(net, self.x, self.y, tolerance=1e-4)
        assert report.passed, report.lines()
        assert all(c.checked >= min(200, 16 * 8) for c in report.layers[:1])

    def test_relu_net_passes_away_from_kinks(self):
        net = _random_bias(Network.dense([8, 16, 16, 4], Activation.RELU, seed=1), 2)
        report = grad_check(net, self.x, self.y, tolerance=1e-4)
        assert report.passed, report.lines()

    def test_shaplu_deviation_reported_not_gated(self):
        net = _random_bias(Network.dense([8, 16, 16, 4], Activation.SHAPLU, seed=1), 2)
        report = grad_check(net, self.x, self.y, tolerance=1e-4)
        assert report.shaplu_deviation > 1e-2
        assert [c.exempt for c in report.layers] == [True, True, False]
        assert report.passed

    def test_non_softmax_head(self):
        net = _random_bias(Network.dense([5, 6, 3], Activation.SA, Activation.IDENTITY, seed=3), 4)
        report = grad_check(net, self.x[:, :5], tolerance=1e-4)
        assert report.passed, report.lines()

    def test_caches_restored(self):
        net = Network.dense([8, 6, 4], Activation.SA, seed=5)
        before = net.forward(self.x).copy()
        grad_check(net, self.x, self.y, n_params=10)
        np.testing.assert_array_equal(net.layers[-1].output, before)


def _toy_data(seed=0, n=200):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    margin = x[:, 0] + 0.5 * x[:, 1]
    keep = np.abs(margin) > 0.1
    while keep.sum() < n:
        extra = rng.uniform(-1, 1, size=(n, 2))
        x = np.concatenate([x[keep], extra])
        margin = x[:, 0] + 0.5 * x[:, 1]
        keep = np.abs(margin) > 0.1
    x = x[keep][:n]
    return x, (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)


@pytest.mark.parametrize("act", [Activation.RELU, Activation.SA, Activation.SHAPLU])
def test_toy_problem_trains(act):
    x, y = _toy_data()
    net = Network.dense([2, 16, 2], act, seed=0)
    opt = SGD(0.1)
    rng = np.random.default_rng(1)
    for _ in range(50):
        order = rng.permutation(len(y))
        for start in range(0, len(y), 10):
            idx = order[start : start + 10]
            train_step(net, opt, x[idx], y[idx])
            for p in net.parameters():
                assert np.all(np.isfinite(p))
    acc = (net.predict(x) == y).mean()
    assert acc >= 0.95


def test_train_step_raises_on_nan():
    net = Network.dense([2, 3, 2], seed=0)
    net.layers[0].weights[0, 0] = np.nan
    with pytest.raises(NumericalError):
        train_step(net, SGD(0.1), np.ones((1, 2)), np.array([0]))


def test_with_activation_copies_parameters():
    net = Network.dense([3, 4, 2], seed=0)
    twin = net.with_activation(Activation.SA)
    assert twin.layers[0].activation is Activation.SA and twin.layers[-1].activation is Activation.SOFTMAX
    twin.layers[0].weights[0, 0] += 1
    assert net.layers[0].weights[0, 0] != twin.layers[0].weights[0, 0]
