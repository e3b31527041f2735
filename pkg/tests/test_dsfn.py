import warnings

import numpy as np
import pytest

from dsfn_irl.approx import DenseNet
from dsfn_irl.data import Dataset, RollingNormalizer, split_train_val
from dsfn_irl.dsfn import (DsfnConfig, DsfnNet, bellman_residual,
                           bellman_targets, dsfn_loss_and_grad, overall_mu,
                           support_mismatch, train_dsfn, validation_loss)
from dsfn_irl.envs import GridWorld, batch_only, exact_mu_dp, generate_batch
from dsfn_irl.exceptions import (NonConvergenceWarning,
                                 SupportMismatchWarning, UsageError,
                                 ValidationFallbackWarning)
from dsfn_irl.features import ConstantFeatureMap, FeatureMap, StackedFeatureMap
from dsfn_irl.policies import ScorePolicy, UniformPolicy, state_index
from tests.conftest import slow
from tests.src.util import numerical_gradient, scratch_dir


class StateFeatureMap(FeatureMap):
    """
    `phi(s, a) = [s_0 + a, 1]`
    """

    def __init__(self, action_count: int = 2):
        super().__init__(2, action_count)

    def encode(self, states, actions):
        return np.stack([states[:, 0] + actions, np.ones(len(actions))],
                        axis=1)


def always(action: int, action_count: int = 2) -> ScorePolicy:
    def scores(states):
        res = np.zeros((len(states), action_count))
        res[:, action] = 1.
        return res

    return ScorePolicy(scores, action_count, 0.)


def random_batch(rng, n: int = 40, terminal_every: int = 0) -> Dataset:
    states = rng.normal(size=(n, 2))
    terminals = np.zeros(n, dtype=bool)
    if terminal_every:
        terminals[terminal_every - 1::terminal_every] = True
    return Dataset(states, rng.integers(0, 2, size=n),
                   rng.normal(size=(n, 2)), terminals, np.arange(n) // 5,
                   np.arange(n) % 5)


@pytest.fixture
def scratch():
    yield from scratch_dir('scratch/test_dsfn')


@pytest.fixture
def net(rng) -> DsfnNet:
    net = DsfnNet.initialize(2, 2, 2, rng, hidden_size=8, tau=.5)
    net.normalizer.update(rng.normal(size=(20, 2)))
    return net


def test_terminal_targets_are_features(rng, net):
    batch = random_batch(rng)
    batch.terminals[:] = True
    targets = bellman_targets(batch, UniformPolicy(2), StateFeatureMap(), .9,
                              net)
    assert np.array_equal(targets, StateFeatureMap()(batch.states,
                                                     batch.actions))


def test_gamma_zero_targets_are_features(rng, net):
    batch = random_batch(rng)
    targets = bellman_targets(batch, UniformPolicy(2), StateFeatureMap(), 0.,
                              net)
    assert np.array_equal(targets, StateFeatureMap()(batch.states,
                                                     batch.actions))


def test_deterministic_policy_targets(rng, net):
    batch = random_batch(rng)
    targets = bellman_targets(batch, always(1), StateFeatureMap(), .9, net)
    expected = StateFeatureMap()(batch.states, batch.actions) \
        + .9 * net.target_mu(batch.next_states)[:, 1]
    assert np.allclose(targets, expected)


def test_targets_use_target_network(rng, net):
    batch = random_batch(rng)
    before = bellman_targets(batch, UniformPolicy(2), StateFeatureMap(), .9,
                             net)
    net.online = net.online.with_params(net.online.params + 1.)
    after = bellman_targets(batch, UniformPolicy(2), StateFeatureMap(), .9,
                            net)
    assert np.array_equal(before, after)


def test_online_targets_bootstrap_from_online_network(rng, net):
    batch = random_batch(rng)
    net.online = net.online.with_params(net.online.params + .1)
    targets = bellman_targets(batch, always(1), StateFeatureMap(), .9, net,
                              online=True)
    expected = StateFeatureMap()(batch.states, batch.actions) \
        + .9 * net.mu(batch.next_states)[:, 1]
    assert np.allclose(targets, expected)


def lagging_net() -> DsfnNet:
    # Online outputs 1 everywhere, the target still outputs 0.
    target = DenseNet.zeros((2, 4, 4, 2))
    params = target.params.copy()
    params[-2:] = 1.
    return DsfnNet(target.with_params(params), target, 2, 1, 1e-4,
                   RollingNormalizer(2))


def test_residual_sees_what_the_lagging_target_hides(rng):
    batch = random_batch(rng)
    net = lagging_net()
    features = ConstantFeatureMap(2)
    # 1 = 1 + 0.9 * 0 against the target, 1 != 1 + 0.9 * 1 against itself.
    assert validation_loss(net, batch, UniformPolicy(2), features, .9) == 0.
    assert bellman_residual(net, batch, UniformPolicy(2), features, .9) \
        == pytest.approx(.5 * .9 ** 2)


def test_lagging_target_does_not_count_as_converged(rng):
    batch = random_batch(rng)
    config = DsfnConfig(hidden_size=4, learning_rate=1e-12, delta=1e-3,
                        max_iterations=20, eval_every=10)
    with pytest.warns(NonConvergenceWarning):
        result = train_dsfn(batch, batch, UniformPolicy(2),
                            ConstantFeatureMap(2), .9, config, rng,
                            initial=lagging_net())
    assert not result.converged
    assert all(row['val_loss'] < config.delta for row in result.curve)
    assert all(row['residual'] > config.delta for row in result.curve)


def test_single_sample_loss_by_hand():
    online = DenseNet.zeros((1, 3, 3, 1))
    params = online.params.copy()
    params[-1] = 2.
    net = DsfnNet(online.with_params(params), online, 1, 1, .01,
                  RollingNormalizer(1))
    batch = Dataset([[0.]], [0], [[0.]], [True], [0], [0])
    loss, grad, residuals = dsfn_loss_and_grad(net, batch, np.array([[1.]]))
    assert loss == .5
    assert residuals[0] == 1.
    # The output bias receives the residual directly.
    assert grad[-1] == 1.


def test_perfect_fit_has_zero_loss(rng, net):
    batch = random_batch(rng)
    targets = net.mu(batch.states)[np.arange(len(batch)), batch.actions]
    loss, grad, _ = dsfn_loss_and_grad(net, batch, targets)
    assert loss == 0.
    assert np.all(grad == 0.)


def test_gradient_matches_finite_differences(rng, net):
    batch = random_batch(rng, n=10)
    targets = rng.normal(size=(10, 2))
    weights = rng.random(10)

    def loss(params):
        net.online = net.online.with_params(params)
        return dsfn_loss_and_grad(net, batch, targets, weights)[0]

    params = net.online.params.copy()
    _, grad, _ = dsfn_loss_and_grad(net, batch, targets, weights)
    expected = numerical_gradient(loss, params.copy())
    net.online = net.online.with_params(params)
    assert np.allclose(grad, expected, rtol=1e-4, atol=1e-8)


def test_validation_loss_is_zero_for_exact_fit(rng):
    # With gamma 0 and a net that outputs phi exactly the loss vanishes.
    batch = random_batch(rng)
    online = DenseNet.zeros((2, 4, 4, 2))
    net = DsfnNet(online, online, 2, 1, .01, RollingNormalizer(2))
    features = ConstantFeatureMap(2, 0.)
    assert validation_loss(net, batch, UniformPolicy(2), features, 0.) == 0.


def test_config_validation():
    with pytest.raises(UsageError):
        DsfnConfig(delta=0.)
    with pytest.raises(UsageError):
        DsfnConfig(tau=0.)
    with pytest.raises(UsageError):
        DsfnConfig(max_iterations=50, eval_every=100)
    with pytest.raises(UsageError):
        DsfnConfig(patience=0)
    config = DsfnConfig()
    assert config.delta == 5e-3
    assert config.batch_size == 32
    assert config.min_iterations(0.) == 500
    assert config.min_iterations(.99) == 49700
    assert DsfnConfig(max_iterations=700).min_iterations(0.) == 400
    assert DsfnConfig(max_iterations=200).min_iterations(0.) == 0


def test_support_mismatch(rng):
    batch = random_batch(rng)
    batch.actions[:] = 0
    assert support_mismatch(always(0), batch) == 0.
    assert support_mismatch(always(1), batch) == 1.


def test_support_mismatch_warns(rng):
    batch = random_batch(rng)
    batch.actions[:] = 0
    config = DsfnConfig(hidden_size=4, max_iterations=2, eval_every=1)
    with pytest.warns(SupportMismatchWarning):
        train_dsfn(batch, batch, always(1), StateFeatureMap(), .9, config,
                   rng)


def test_empty_validation_falls_back_to_train(rng):
    batch = random_batch(rng)
    config = DsfnConfig(hidden_size=4, max_iterations=3, eval_every=1)
    with pytest.warns(ValidationFallbackWarning):
        result = train_dsfn(batch, Dataset.empty(2), UniformPolicy(2),
                            StateFeatureMap(), .9, config, rng)
    assert len(result.curve) == 3
    assert result.net.normalizer.frozen


def test_train_on_empty_dataset_raises(rng):
    with pytest.raises(UsageError):
        train_dsfn(Dataset.empty(2), Dataset.empty(2), UniformPolicy(2),
                   StateFeatureMap(), .9)


def test_warm_start_does_not_modify_initial(rng, net):
    batch = random_batch(rng)
    params = net.online.params.copy()
    config = DsfnConfig(hidden_size=8, max_iterations=5, eval_every=5)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        result = train_dsfn(batch, batch, UniformPolicy(2), StateFeatureMap(),
                            .9, config, rng, initial=net)
    assert np.array_equal(net.online.params, params)
    assert result.iterations == 5


def test_prioritized_training_runs(rng):
    batch = random_batch(rng, terminal_every=5)
    config = DsfnConfig(hidden_size=8, max_iterations=20, eval_every=10,
                        prioritized=True)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        result = train_dsfn(batch, batch, UniformPolicy(2), StateFeatureMap(),
                            .9, config, rng)
    assert [row['iteration'] for row in result.curve] == [10, 20]


def test_convergence_needs_consecutive_settled_checks(rng):
    batch = random_batch(rng)
    config = DsfnConfig(hidden_size=4, tau=.1, settle_time=2., delta=1e6,
                        max_iterations=200, eval_every=5)
    assert config.min_iterations(0.) == 20
    result = train_dsfn(batch, batch, UniformPolicy(2), StateFeatureMap(), 0.,
                        config, rng)
    assert result.converged
    assert result.iterations == 30
    assert [row['iteration'] for row in result.curve] == [5, 10, 15, 20, 25,
                                                          30]


def test_last_iteration_is_always_validated(rng):
    batch = random_batch(rng)
    config = DsfnConfig(hidden_size=4, max_iterations=7, eval_every=5)
    with pytest.warns(NonConvergenceWarning):
        result = train_dsfn(batch, batch, UniformPolicy(2), StateFeatureMap(),
                            .9, config, rng)
    assert [row['iteration'] for row in result.curve] == [5, 7]
    assert np.isfinite(result.best_val_loss)


def test_target_is_polyak_average_after_update(rng, net):
    batch = random_batch(rng)
    net.target = net.target.with_params(net.target.params + .3)
    old_target = net.target.params.copy()
    config = DsfnConfig(hidden_size=8, max_iterations=1, eval_every=1)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        result = train_dsfn(batch, batch, UniformPolicy(2), StateFeatureMap(),
                            .9, config, rng, initial=net)
    online = result.net.online.params
    assert not np.array_equal(online, net.online.params)
    assert np.array_equal(result.net.target.params,
                          (1. - net.tau) * old_target + net.tau * online)


def test_training_never_touches_the_simulator(rng):
    batch = random_batch(rng)
    config = DsfnConfig(hidden_size=4, max_iterations=10, eval_every=5)
    with batch_only() as simulator, warnings.catch_warnings():
        warnings.simplefilter('ignore')
        steps = simulator.steps
        train_dsfn(batch, batch, UniformPolicy(2), StateFeatureMap(), .9,
                   config, rng)
        assert simulator.steps == steps



def test_overall_mu_single_state_deterministic_policy(rng, net):
    s0 = rng.normal(size=(1, 2))
    assert np.allclose(overall_mu(net, s0, always(1)), net.mu(s0)[0, 1])


def test_overall_mu_identical_rows(rng, net):
    s0 = np.tile(rng.normal(size=(1, 2)), (2, 1))
    assert np.allclose(overall_mu(net, s0, UniformPolicy(2)),
                       net.mu(s0[:1])[0].mean(axis=0))


def test_overall_mu_requires_initial_states(net):
    with pytest.raises(UsageError):
        overall_mu(net, np.zeros((0, 2)), UniformPolicy(2))


def test_save_and_load(net, scratch, rng):
    path = f'{scratch}/dsfn.json'
    net.save(path)
    loaded = DsfnNet.load(path)
    states = rng.normal(size=(3, 2))
    assert np.array_equal(loaded.mu(states), net.mu(states))
    assert np.array_equal(loaded.target.params, net.target.params)


def test_constant_feature_short_horizon(rng):
    batch = random_batch(rng, n=64)
    config = DsfnConfig(hidden_size=16, learning_rate=1e-2, tau=.1,
                        delta=1e-5, max_iterations=4000, eval_every=50)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        result = train_dsfn(batch, batch, UniformPolicy(2),
                            ConstantFeatureMap(2), .5, config, rng)
    estimate = overall_mu(result.net, batch.initial_states, UniformPolicy(2))
    assert estimate[0] == pytest.approx(2., rel=.02)


@slow
def test_constant_feature_long_horizon():
    rng = np.random.default_rng(0)
    batch = random_batch(rng, n=200)
    features = StackedFeatureMap(StateFeatureMap(), ConstantFeatureMap(2))
    result = train_dsfn(batch, batch, UniformPolicy(2), features, .99,
                        DsfnConfig(), rng)
    estimate = overall_mu(result.net, batch.initial_states, UniformPolicy(2))
    assert estimate[-1] == pytest.approx(100., rel=.02)


@slow
def test_matches_exact_successor_features_on_gridworld():
    env = GridWorld()
    expert = env.expert()
    # Shortest path episodes of 8 steps.
    dataset = generate_batch(env, expert, 250, seed=0, greedy=True)
    assert len(dataset) == 2000
    train, val = split_train_val(dataset, .7, 0)
    result = train_dsfn(train, val, expert, env.feature_map, env.mdp.gamma,
                        DsfnConfig(), np.random.default_rng(0))
    assert result.converged
    exact, exact_overall = exact_mu_dp(env.mdp, expert)
    rows = np.arange(len(dataset))
    estimated = result.net.mu(dataset.states)[rows, dataset.actions]
    expected = exact[state_index(dataset.states), dataset.actions]
    assert np.max(np.abs(estimated - expected)) < .05
    estimate = overall_mu(result.net, dataset.initial_states, expert)
    assert np.max(np.abs(estimate - exact_overall)) < .05
