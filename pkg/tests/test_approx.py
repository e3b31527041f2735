import numpy as np
import pytest

from dsfn_irl.approx import (AdamState, DenseNet, GaussianHead, adam_update,
                             count_params, load_snapshot, mean_squared_error,
                             polyak_update, save_snapshot, value_and_gradient)
from dsfn_irl.exceptions import ConfigurationError, NumericalError
from tests.src.util import numerical_gradient, scratch_dir


@pytest.fixture
def scratch():
    yield from scratch_dir('scratch/test_approx')


@pytest.fixture
def net(rng) -> DenseNet:
    return DenseNet.initialize((3, 5, 4, 2), rng)


def test_count_params():
    assert count_params((3, 5, 2)) == 4 * 5 + 6 * 2
    assert DenseNet.zeros((2, 128, 128)).num_params == 3 * 128 + 129 * 128


def test_forward_single_and_batch(net, rng):
    x = rng.normal(size=(6, 3))
    batch = net.forward(x)
    assert batch.shape == (6, 2)
    assert np.allclose(net.forward(x[2]), batch[2])


def test_forward_rejects_wrong_input_size(net):
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros(4))


def test_tanh_output_is_bounded(rng):
    net = DenseNet.initialize((2, 8, 3), rng, output_activation='tanh')
    out = net.forward(rng.normal(size=(10, 2)) * 100)
    assert np.all(np.abs(out) <= 1.)


def test_non_finite_input_raises(net):
    with pytest.raises(NumericalError):
        net.forward(np.array([np.nan, 0., 0.]))


def test_gradient_matches_finite_differences(net, rng):
    x = rng.normal(size=(7, 3))
    y = rng.normal(size=(7, 2))

    def loss(params):
        return value_and_gradient(net.with_params(params), mean_squared_error,
                                  (x, y))[0]

    _, grad = value_and_gradient(net, mean_squared_error, (x, y))
    expected = numerical_gradient(loss, net.params.copy())
    assert np.allclose(grad, expected, atol=1e-7)


def test_input_gradient_matches_finite_differences(net, rng):
    x = rng.normal(size=3)
    output, cache = net.forward_with_cache(x)
    _, d_input = net.backward(cache, np.ones(2))
    expected = numerical_gradient(lambda v: float(net.forward(v).sum()),
                                  x.copy())
    assert np.allclose(d_input, expected, atol=1e-7)


def test_adam_first_step_moves_by_learning_rate():
    params = np.array([1., -2.])
    state = AdamState.zeros(2, learning_rate=.1, epsilon=1e-12)
    new_params, state = adam_update(params, state, np.array([3., -.5]))
    # After bias correction the first step is lr * sign(grad).
    assert np.allclose(new_params, [.9, -1.9])
    assert state.step == 1


def test_adam_does_not_modify_inputs():
    params = np.ones(3)
    state = AdamState.zeros(3)
    adam_update(params, state, np.ones(3))
    assert np.all(params == 1.)
    assert np.all(state.first_moment == 0.)


def test_adam_rejects_mismatched_gradient():
    with pytest.raises(ConfigurationError):
        adam_update(np.ones(3), AdamState.zeros(3), np.ones(2))


def test_polyak_update(rng):
    online = DenseNet.initialize((2, 3, 1), rng)
    target = DenseNet.zeros((2, 3, 1))
    updated = polyak_update(target, online, .25)
    assert np.allclose(updated.params, .25 * online.params)
    assert np.all(target.params == 0.)
    assert np.allclose(polyak_update(target, online, 1.).params,
                       online.params)


@pytest.mark.parametrize('tau', [0., -.1, 1.5])
def test_polyak_update_rejects_tau(tau):
    net = DenseNet.zeros((2, 1))
    with pytest.raises(ConfigurationError):
        polyak_update(net, net, tau)


def test_gaussian_head_std_positive():
    head = GaussianHead.from_output(np.array([[0., 1., -50., 50.]]))
    assert np.all(head.std > 0)
    assert np.allclose(head.clipped_log_std, [[-5., 2.]])


def test_gaussian_head_gradients(rng):
    output = rng.normal(size=(1, 6))
    x = rng.normal(size=(1, 3))

    def nll(flat):
        return float(GaussianHead.from_output(flat.reshape(1, 6))
                     .negative_log_likelihood(x).sum())

    d_mean, d_log_std = GaussianHead.from_output(output).gradients(x)
    expected = numerical_gradient(nll, output.ravel().copy())
    assert np.allclose(np.concatenate([d_mean, d_log_std], axis=1).ravel(),
                       expected, atol=1e-6)


def test_snapshot_round_trip(net, scratch):
    path = f'{scratch}/net.bin'
    save_snapshot(net, path)
    loaded = load_snapshot(path)
    assert loaded.layer_sizes == net.layer_sizes
    assert np.array_equal(loaded.params, net.params)


def test_zero_net_outputs_zero(rng):
    net = DenseNet.zeros((3, 4, 2))
    assert np.array_equal(net.forward(rng.normal(size=3)), np.zeros(2))


def test_identity_net():
    net = DenseNet((1, 1), np.array([1., 0.]))
    assert np.array_equal(net.forward(np.array([2.])), [2.])


def test_seeded_forward_is_reproducible():
    x = np.linspace(-1, 1, 3)
    a = DenseNet.initialize((3, 5, 2), np.random.default_rng(7)).forward(x)
    b = DenseNet.initialize((3, 5, 2), np.random.default_rng(7)).forward(x)
    assert np.array_equal(a, b)


def test_scalar_gradient_by_hand():
    net = DenseNet((1, 1), np.array([2., 0.]))
    loss, grad = value_and_gradient(net, mean_squared_error,
                                    (np.array([[1.]]), np.array([[1.]])))
    assert loss == .5
    assert np.allclose(grad, [1., 1.])


def test_perfect_fit_has_zero_gradient(net, rng):
    x = rng.normal(size=(4, 3))
    _, grad = value_and_gradient(net, mean_squared_error, (x, net.forward(x)))
    assert np.all(grad == 0.)


def test_adam_zero_gradient_keeps_params():
    params = np.array([.5, -.5])
    new_params, state = adam_update(params, AdamState.zeros(2), np.zeros(2))
    assert np.array_equal(new_params, params)
    assert np.all(state.first_moment == 0.)
    assert np.all(state.second_moment == 0.)


def test_adam_decreases_quadratic():
    params = np.array([3., -2., 1.])
    state = AdamState.zeros(3, learning_rate=.01)
    start = .5 * np.sum(params ** 2)
    for _ in range(100):
        params, state = adam_update(params, state, params)
    assert .5 * np.sum(params ** 2) < start
    assert state.step == 100
