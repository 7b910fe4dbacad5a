import math

import numpy as np
import pytest

from trafonet.catalog import DenseSpec, NetworkSpec, mlp_spec
from trafonet.errors import DimensionError, DivergenceError, StateError, ValidationError
from trafonet.nn import (
    DenseLayer,
    GradientSet,
    Network,
    SgdConfig,
    accuracy,
    confusion_matrix,
    fc_forward,
    fit,
    grad_check,
    loss_cross_entropy,
    loss_mse,
    network_backward,
    network_forward,
    one_hot,
    sgd_step,
    softmax,
    softplus,
)
from trafonet.types import Activation, LossKind


def _net(layers, loss=LossKind.MSE):
    """Network from explicit (W, b, activation) triples."""
    dense = [DenseLayer(w, b, act) for w, b, act in layers]
    spec = NetworkSpec((dense[0].weights.shape[0],), [d.spec for d in dense], loss)
    return Network(spec, dense)


# ----- dense layer -----

def test_fc_forward_identity_linear():
    layer = DenseLayer(np.eye(2), np.zeros(2), Activation.LINEAR)
    assert fc_forward(layer, [[3.0, -1.0]]).tolist() == [[3.0, -1.0]]


def test_fc_forward_softplus_at_zero():
    layer = DenseLayer([[1.0], [1.0]], [0.0], Activation.SOFTPLUS)
    out = fc_forward(layer, [[0.0, 0.0]])
    assert out.shape == (1, 1)
    assert abs(out[0, 0] - math.log(2.0)) < 1e-15


def test_fc_forward_matches_triple_loop():
    rng = np.random.default_rng(7)
    w, b, x = rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal((5, 4))
    got = fc_forward(DenseLayer(w, b, Activation.SOFTPLUS), x)

    for i in range(5):
        for j in range(3):
            s = b[j]
            for k in range(4):
                s += x[i, k] * w[k, j]
            assert abs(got[i, j] - math.log1p(math.exp(s))) < 1e-12


def test_fc_forward_dimension_error_names_shapes():
    layer = DenseLayer(np.ones((3, 2)), np.zeros(2))
    with pytest.raises(DimensionError) as e:
        fc_forward(layer, np.ones((1, 4)))
    assert "(1, 4)" in str(e.value) and "(3, 2)" in str(e.value)


def test_fc_forward_rejects_nan():
    layer = DenseLayer(np.eye(2), np.zeros(2))
    with pytest.raises(ValidationError):
        fc_forward(layer, [[float("nan"), 1.0]])


# ----- activations / losses -----

def test_softplus_values():
    assert softplus(0.0) == pytest.approx(0.6931471805599453, abs=1e-16)
    assert abs(softplus(40.0) - 40.0) < 1e-12
    small = softplus(-40.0)
    assert small > 0.0
    assert small == pytest.approx(math.exp(-40.0), rel=1e-9)


def test_softplus_positive_and_monotone():
    s = np.linspace(-50.0, 50.0, 2001)
    out = softplus(s)
    assert np.all(out > 0.0)
    assert np.all(np.diff(out) > 0.0)


def test_softmax_rows_and_shift_invariance():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((6, 5)) * 10
    p = softmax(z)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)
    assert np.max(np.abs(softmax(z + 123.0) - p)) < 1e-12


def test_loss_mse_examples():
    assert loss_mse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert loss_mse([1.0, 0.0], [0.0, 0.0]) == 0.5


def test_loss_mse_matches_scalar_loop():
    rng = np.random.default_rng(3)
    y, f = rng.standard_normal(100), rng.standard_normal(100)
    total = 0.0
    for a, b in zip(y, f):
        total += (a - b) ** 2
    assert abs(loss_mse(y, f) - total / 100) < 1e-12


def test_loss_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_mse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_cross_entropy_examples():
    assert loss_cross_entropy([[0, 0, 1]], [[0.0, 0.0, 1.0]]) == 0.0
    assert loss_cross_entropy([[1, 0]], [[0.5, 0.5]]) == pytest.approx(math.log(2.0), abs=1e-15)


def test_cross_entropy_matches_scalar_loop():
    rng = np.random.default_rng(11)
    p = softmax(rng.standard_normal((50, 10)))
    y = one_hot(rng.integers(0, 10, size=50), 10)
    total = 0.0
    for i in range(50):
        for k in range(10):
            if y[i, k] == 1.0:
                total -= math.log(p[i, k])
    assert abs(loss_cross_entropy(y, p) - total / 50) < 1e-12


def test_cross_entropy_clamps_zero_probability():
    loss = loss_cross_entropy([[1, 0]], [[0.0, 1.0]])
    assert loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValidationError) as e:
        loss_cross_entropy([[1, 0], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])
    assert "row 1" in str(e.value)


# ----- network forward / backward -----

def test_network_forward_identity():
    net = _net([(np.eye(3), np.zeros(3), Activation.LINEAR)])
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(network_forward(net, x), x)


def test_two_linear_layers_equal_product():
    rng = np.random.default_rng(2)
    w1, w2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    net = _net([(w1, np.zeros(4), Activation.LINEAR), (w2, np.zeros(2), Activation.LINEAR)])
    single = _net([(w1 @ w2, np.zeros(2), Activation.LINEAR)])
    x = rng.standard_normal((5, 3))
    assert np.allclose(network_forward(net, x), network_forward(single, x), rtol=0, atol=1e-12)


def test_three_layer_softplus_matches_reimplementation():
    spec = mlp_spec([3, 6, 5, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE)
    net = Network.from_spec(spec, seed=13)
    x = np.random.default_rng(13).standard_normal((4, 3))

    h = x
    for layer in net.layers:
        z = h @ layer.weights + layer.bias
        h = z if layer.activation == Activation.LINEAR else np.log1p(np.exp(z))
    assert np.max(np.abs(network_forward(net, x) - h)) < 1e-12


def test_forward_is_deterministic():
    net = Network.from_spec(mlp_spec([3, 8, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=5)
    x = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(net.forward(x), net.forward(x))


def test_from_spec_is_seeded():
    spec = mlp_spec([3, 8, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE)
    a, b = Network.from_spec(spec, seed=9), Network.from_spec(spec, seed=9)
    assert np.array_equal(a.layers[0].weights, b.layers[0].weights)
    bound = math.sqrt(6.0 / (3 + 8))
    assert np.all(np.abs(a.layers[0].weights) <= bound)
    assert np.all(a.layers[0].bias == 0.0)


def test_forward_error_names_layer():
    spec = NetworkSpec((3,), [DenseSpec(3, 4), DenseSpec(4, 2, Activation.LINEAR)])
    net = Network.from_spec(spec)
    with pytest.raises(DimensionError) as e:
        net.forward(np.ones((2, 5)))
    assert "layer 0" in str(e.value)


def test_backward_before_forward():
    net = Network.from_spec(mlp_spec([2, 2], Activation.LINEAR, Activation.LINEAR, LossKind.MSE))
    with pytest.raises(StateError):
        network_backward(net, np.zeros((1, 2)))


def test_zero_error_batch_gives_zero_gradients():
    net = Network.from_spec(mlp_spec([3, 4, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=4)
    x = np.random.default_rng(4).standard_normal((5, 3))
    y = network_forward(net, x).copy()
    grads = network_backward(net, y)
    assert grads.max_abs() == 0.0


def test_softmax_ce_logit_gradient_closed_form():
    # one dense softmax layer: grad_b is the column sum of (p - y) / n
    w = np.array([[0.5, -0.5], [1.0, 2.0]])
    net = _net([(w, np.zeros(2), Activation.SOFTMAX)], LossKind.CROSS_ENTROPY)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = network_forward(net, x)
    grads = network_backward(net, y)
    expected = (p - y) / 2
    assert np.allclose(grads.blocks[0]["b"], expected.sum(axis=0), rtol=0, atol=1e-15)
    assert np.allclose(grads.blocks[0]["W"], x.T @ expected, rtol=0, atol=1e-15)


def test_backward_rejects_non_onehot_targets():
    net = Network.from_spec(mlp_spec([2, 3], Activation.LINEAR, Activation.SOFTMAX, LossKind.CROSS_ENTROPY))
    net.forward(np.ones((1, 2)))
    with pytest.raises(ValidationError):
        net.backward(np.array([[0.5, 0.5, 0.0]]))


# ----- SGD -----

def test_sgd_single_step():
    net = _net([(np.array([[2.0]]), np.zeros(1), Activation.LINEAR)])
    grads = GradientSet([{"W": np.array([[1.0]]), "b": np.zeros(1)}])
    sgd_step(net, grads, SgdConfig(learning_rate=0.1, momentum=0.0))
    assert net.layers[0].weights[0, 0] == pytest.approx(1.9, abs=1e-15)


def test_sgd_zero_gradient_is_identity():
    net = Network.from_spec(mlp_spec([3, 4, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=1)
    before = [{k: v.copy() for k, v in block.items()} for block in net.params()]
    zeros = GradientSet([{k: np.zeros_like(v) for k, v in block.items()} for block in net.params()])
    sgd_step(net, zeros, SgdConfig(learning_rate=0.5, momentum=0.9))
    for old, new in zip(before, net.params()):
        for k in old:
            assert np.array_equal(old[k], new[k])


def test_momentum_sgd_on_quadratic():
    # L = w^2, g = 2w; momentum 0.9 contracts by sqrt(0.9) per step
    net = _net([(np.array([[1.0]]), np.zeros(1), Activation.LINEAR)])
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9)
    w = net.layers[0].weights
    for step in range(300):
        sgd_step(net, GradientSet([{"W": 2.0 * w.copy(), "b": np.zeros(1)}]), cfg)
        if step == 199:
            assert abs(w[0, 0]) < 1e-4
    assert abs(w[0, 0]) < 1e-6


def test_sgd_nan_gradient_leaves_params_untouched():
    net = Network.from_spec(mlp_spec([2, 3, 1], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=2)
    before = [{k: v.copy() for k, v in block.items()} for block in net.params()]
    grads = GradientSet([{k: np.ones_like(v) for k, v in block.items()} for block in net.params()])
    grads.blocks[1]["W"][0, 0] = np.nan
    with pytest.raises(DivergenceError) as e:
        sgd_step(net, grads, SgdConfig())
    assert "layer 1" in str(e.value)
    for old, new in zip(before, net.params()):
        for k in old:
            assert np.array_equal(old[k], new[k])


def test_sgd_config_validation():
    with pytest.raises(ValidationError):
        SgdConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValidationError):
        SgdConfig(batch_size=0)


# ----- gradient check -----

def test_grad_check_linear_layer():
    net = _net([(np.array([[0.5, -1.0], [2.0, 0.3]]), np.array([0.1, -0.2]), Activation.LINEAR)])
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    report = grad_check(net, x, np.zeros((2, 2)))
    assert report.max_error < 1e-8


def test_grad_check_softplus_mlp_mse():
    net = Network.from_spec(mlp_spec([3, 8, 4, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=17)
    rng = np.random.default_rng(17)
    report = grad_check(net, rng.standard_normal((6, 3)), rng.standard_normal((6, 2)), step=1e-6)
    assert report.max_error < 1e-5
    assert set(report.per_layer()) == {0, 1, 2}


def test_grad_check_softmax_mlp_ce():
    spec = mlp_spec([3, 8, 4, 2], Activation.SOFTPLUS, Activation.SOFTMAX, LossKind.CROSS_ENTROPY)
    net = Network.from_spec(spec, seed=17)
    rng = np.random.default_rng(18)
    report = grad_check(net, rng.standard_normal((6, 3)), one_hot(rng.integers(0, 2, size=6), 2))
    assert report.max_error < 1e-5


def test_grad_check_single_sample():
    net = Network.from_spec(mlp_spec([3, 8, 4, 2], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=3)
    rng = np.random.default_rng(3)
    assert grad_check(net, rng.standard_normal((1, 3)), rng.standard_normal((1, 2))).max_error < 1e-5


def test_grad_check_step_range():
    net = _net([(np.eye(2), np.zeros(2), Activation.LINEAR)])
    with pytest.raises(ValidationError):
        grad_check(net, np.ones((1, 2)), np.zeros((1, 2)), step=1e-2)


# ----- training helpers -----

def test_fit_reduces_regression_loss():
    rng = np.random.default_rng(21)
    x = rng.uniform(-2.0, 2.0, size=(64, 1))
    y = np.sin(x)
    net = Network.from_spec(mlp_spec([1, 16, 1], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE), seed=21)
    history = fit(net, x, y, SgdConfig(learning_rate=0.01, momentum=0.9, batch_size=16, seed=1), epochs=40)
    assert len(history) == 40
    assert history[-1] < history[0]


def test_fit_classification_and_metrics():
    rng = np.random.default_rng(8)
    x = np.concatenate([rng.normal(-2.0, 0.3, (30, 2)), rng.normal(2.0, 0.3, (30, 2))])
    labels = np.array([0] * 30 + [1] * 30)
    spec = mlp_spec([2, 8, 2], Activation.SOFTPLUS, Activation.SOFTMAX, LossKind.CROSS_ENTROPY)
    net = Network.from_spec(spec, seed=8)
    fit(net, x, one_hot(labels, 2), SgdConfig(learning_rate=0.1, momentum=0.9, batch_size=10, seed=0), epochs=30)
    assert accuracy(net, x, labels) == 1.0


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
