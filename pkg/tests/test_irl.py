import numpy as np
import pytest

from dsfn_irl.data import Dataset
from dsfn_irl.envs import (GridWorld, exact_mu_dp, generate_batch,
                           policy_value, value_iteration)
from dsfn_irl.exceptions import Converged, UsageError
from dsfn_irl.features import ConstantFeatureMap, FeatureMap
from dsfn_irl.irl import (IrlConfig, IrlHistory, IrlRecord, batch_irl,
                          empirical_mu_expert, min_norm_point,
                          solve_max_margin_qp)
from dsfn_irl.policies import EpsilonGreedyPolicy, ScorePolicy, UniformPolicy
from dsfn_irl.utils import read_json
from tests.conftest import slow
from tests.src.util import scratch_dir


class FixedFeatureMap(FeatureMap):
    def __init__(self, value, action_count: int = 2):
        super().__init__(len(value), action_count)
        self.value = np.asarray(value, dtype=float)

    def encode(self, states, actions):
        return np.tile(self.value, (len(actions), 1))


def always(action: int, action_count: int = 2) -> ScorePolicy:
    def scores(states):
        res = np.zeros((len(states), action_count))
        res[:, action] = 1.
        return res

    return ScorePolicy(scores, action_count, 0.)


def one_step_episodes(n: int = 4) -> Dataset:
    return Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), np.zeros((n, 1)),
                   np.ones(n, dtype=bool), np.arange(n), np.zeros(n))


@pytest.fixture
def scratch():
    yield from scratch_dir('scratch/test_irl')


def test_empirical_mu_single_step():
    dataset = one_step_episodes(1)
    mu = empirical_mu_expert(dataset, FixedFeatureMap([2., 3.]), .9)
    assert np.array_equal(mu, [2., 3.])


def test_empirical_mu_geometric_sum():
    dataset = Dataset(np.zeros((3, 1)), [0, 1, 0], np.zeros((3, 1)),
                      [False, False, True], [0, 0, 0], [0, 1, 2])
    mu = empirical_mu_expert(dataset, ConstantFeatureMap(2), .5)
    assert mu[0] == pytest.approx(1.75)


def test_empirical_mu_averages_episodes():
    mu = empirical_mu_expert(one_step_episodes(5), FixedFeatureMap([1., 0.]),
                             .9)
    assert np.allclose(mu, [1., 0.])


def test_empirical_mu_requires_episodes():
    with pytest.raises(UsageError):
        empirical_mu_expert(Dataset.empty(1), ConstantFeatureMap(2), .9)


def test_empirical_mu_matches_exact_on_gridworld():
    env = GridWorld()
    expert = env.expert()
    dataset = generate_batch(env, expert, 3, seed=0, greedy=True)
    _, exact = exact_mu_dp(env.mdp, expert)
    assert np.allclose(empirical_mu_expert(dataset, env.feature_map,
                                           env.mdp.gamma), exact)


def test_qp_single_candidate():
    solution = solve_max_margin_qp(np.array([1., 0.]), [np.array([0., 0.])])
    assert np.allclose(solution.weights, [1., 0.])
    assert solution.margin == pytest.approx(1.)
    assert solution.norm == pytest.approx(1.)


def test_qp_two_candidates():
    solution = solve_max_margin_qp(np.array([1., 1.]),
                                   [np.array([1., 0.]), np.array([0., 1.])])
    assert np.allclose(solution.weights, [1., 1.])


def test_qp_inactive_constraint():
    # The second candidate is separated by more than the first requires.
    solution = solve_max_margin_qp(np.array([0., 0.]),
                                   [np.array([-1., 0.]), np.array([-3., 1.])])
    assert np.allclose(solution.weights, [1., 0.])
    assert solution.margin == pytest.approx(1.)


def test_qp_identical_candidate_converges():
    with pytest.raises(Converged) as e:
        solve_max_margin_qp(np.array([1., 2.]), [np.array([1., 2.])])
    assert e.value.solution.weights.shape == (2,)


def test_qp_expert_inside_hull_converges():
    with pytest.raises(Converged) as e:
        solve_max_margin_qp(np.array([0., 0.]),
                            [np.array([1., 0.]), np.array([-1., 0.])])
    assert np.isclose(np.linalg.norm(e.value.solution.weights), 1.) \
        or np.allclose(e.value.solution.weights, 0.)


def test_qp_requires_candidates():
    with pytest.raises(UsageError):
        solve_max_margin_qp(np.zeros(2), [])


def project_onto_simplex(x: np.ndarray) -> np.ndarray:
    u = np.sort(x)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(x) + 1)
    rho = k[u - (css - 1) / k > 0][-1]
    return np.maximum(x - (css[rho - 1] - 1) / rho, 0)


def projected_gradient_min_norm(points: np.ndarray,
                                max_iterations: int = 200000) -> np.ndarray:
    """
    Independent oracle: plain projected gradient on the simplex, run to a
    tight tolerance. Returns the minimum-norm point of the convex hull.
    """
    gram = points @ points.T
    step = 1. / (2 * np.linalg.eigvalsh(gram)[-1])
    lam = np.full(len(points), 1 / len(points))
    for _ in range(max_iterations):
        new = project_onto_simplex(lam - step * 2 * gram @ lam)
        if np.max(np.abs(new - lam)) < 1e-15:
            break
        lam = new
    return lam @ points


def test_min_norm_point_matches_projected_gradient(rng):
    points = rng.normal(size=(6, 4)) + 2.
    lam = min_norm_point(points)
    assert lam.min() >= 0
    assert lam.sum() == pytest.approx(1.)
    assert np.linalg.norm(lam @ points) \
        <= np.linalg.norm(projected_gradient_min_norm(points)) + 1e-8


def test_qp_matches_projected_gradient_on_random_instances(rng):
    compared = 0
    for _ in range(50):
        dim = rng.integers(1, 5)
        count = rng.integers(1, 4)
        mu_expert = rng.normal(size=dim)
        mus = rng.normal(size=(count, dim))
        v = projected_gradient_min_norm(mu_expert[None, :] - mus)
        if np.linalg.norm(v) < .2:
            continue
        solution = solve_max_margin_qp(mu_expert, list(mus))
        assert np.allclose(solution.weights, v / (v @ v), rtol=0, atol=1e-6)
        assert solution.margin == pytest.approx(1.)
        compared += 1
    assert compared >= 15


def test_history_append_checks_order():
    history = IrlHistory(np.zeros(2))
    history.append(IrlRecord(0, np.zeros(2), 0., 1.))
    with pytest.raises(UsageError):
        history.append(IrlRecord(2, np.zeros(2), 0., 1.))


def test_history_save(scratch):
    history = IrlHistory(np.array([1., 2.]))
    history.append(IrlRecord(0, np.zeros(2), 2.2, 1., qp_weights=np.ones(2),
                             qp_margin=1., wall_time=.5))
    history.save(f'{scratch}/history.csv', f'{scratch}/history.json')
    saved = read_json(f'{scratch}/history.json')
    assert saved['mu_expert'] == [1., 2.]
    assert saved['iterations'][0]['inducing_weights'] is None
    assert 'wall_time' not in history.to_dataframe().columns


def test_irl_stops_at_iteration_cap():
    dataset = one_step_episodes()
    features = FixedFeatureMap([1., 0.])

    def estimate(policy, i):
        return np.array([0., float(i + 1)]), False

    def solve(weights, i):
        return always(0), False

    result = batch_irl(dataset, always(0), features, .9, estimate, solve,
                       IrlConfig(max_iterations=3))
    assert result.stop_reason == 'iteration_cap'
    assert len(result.history) == 3
    assert len(result.policies) == 3
    # The initial policy matches best but has no inducing reward.
    assert result.history.records[0].margin < result.history.records[1].margin
    assert result.best_iteration == 1
    assert np.array_equal(result.weights,
                          result.history.records[0].qp_weights)
    assert np.array_equal(result.final_weights,
                          result.history.records[2].qp_weights)
    assert not result.flagged


def test_irl_stops_on_margin():
    dataset = one_step_episodes()
    features = FixedFeatureMap([1., 0.])
    mus = [np.array([0., 0.]), np.array([1., .05])]

    def estimate(policy, i):
        return mus[i], False

    def solve(weights, i):
        return always(0), True

    result = batch_irl(dataset, always(0), features, .9, estimate, solve)
    assert result.stop_reason == 'margin'
    assert result.best_iteration == 1
    assert result.flagged
    assert result.history.records[1].qp_weights is not None


def test_irl_stops_when_matching_drops():
    dataset = one_step_episodes()
    features = FixedFeatureMap([1., 0.])

    def estimate(policy, i):
        return np.array([0., float(i)]), False

    def solve(weights, i):
        return always(1), False

    result = batch_irl(dataset, always(0), features, .9, estimate, solve)
    assert result.stop_reason == 'matching_drop'
    assert [r.val_matching for r in result.history.records] == [1., 0.]


def test_irl_stops_when_qp_infeasible():
    dataset = one_step_episodes()
    features = FixedFeatureMap([1., 0.])
    mus = [np.array([2., 0.]), np.array([0., 0.])]

    def estimate(policy, i):
        return mus[i], False

    def solve(weights, i):
        return always(0), False

    result = batch_irl(dataset, always(0), features, .9, estimate, solve)
    assert result.stop_reason == 'qp_infeasible'
    assert len(result.history) == 2


def test_irl_recovers_gridworld_reward():
    env = GridWorld()
    mdp = env.mdp
    dataset = generate_batch(env, env.expert(), 5, seed=0, greedy=True)

    def estimate(policy, i):
        return exact_mu_dp(mdp, policy)[1], False

    def solve(weights, i):
        return value_iteration(mdp, mdp.features @ weights)[1], False

    result = batch_irl(dataset, UniformPolicy(4), env.feature_map,
                       mdp.gamma, estimate, solve)
    optimal = policy_value(mdp, env.expert(), env.true_rewards)
    recovered = policy_value(mdp, result.policy, env.true_rewards)
    assert recovered >= optimal - .05 * abs(optimal)
    _, induced = value_iteration(mdp, mdp.features @ result.weights)
    assert policy_value(mdp, induced, env.true_rewards) \
        >= optimal - .05 * abs(optimal)


def test_qp_norm_never_decreases():
    env = GridWorld()
    mdp = env.mdp
    # A noisy demonstrator no deterministic policy matches exactly.
    dataset = generate_batch(env, EpsilonGreedyPolicy(env.expert(), .3), 20,
                             seed=0)

    def estimate(policy, i):
        return exact_mu_dp(mdp, policy)[1], False

    def solve(weights, i):
        return value_iteration(mdp, mdp.features @ weights)[1], False

    result = batch_irl(dataset, UniformPolicy(4), env.feature_map, mdp.gamma,
                       estimate, solve, IrlConfig(max_iterations=6,
                                                  margin_threshold=1e-6,
                                                  matching_drop=1.))
    history = result.history
    norms = []
    for record in history.records:
        try:
            solution = solve_max_margin_qp(history.mu_expert,
                                           history.mus[:record.iteration + 1])
        except Converged:
            break
        assert np.allclose(record.qp_weights, solution.weights)
        norms.append(solution.norm)
    assert len(norms) >= 2
    assert all(b >= a - 1e-9 for a, b in zip(norms, norms[1:]))


@slow
def test_empirical_mu_band_on_stochastic_expert():
    env = GridWorld()
    q, _ = value_iteration(env.mdp, env.true_rewards)
    soft = ScorePolicy(lambda s: s @ q, 4, .1)
    dataset = generate_batch(env, soft, 10000, seed=1)
    _, exact = exact_mu_dp(env.mdp, soft.probabilities(np.eye(25)))
    phi = env.feature_map(dataset.states, dataset.actions)
    discounted = np.power(env.mdp.gamma, dataset.step_indices)[:, None] * phi
    per_episode = np.array([discounted[dataset.episode_ids == e].sum(axis=0)
                            for e in dataset.episodes])
    standard_error = per_episode.std(axis=0, ddof=1) / np.sqrt(10000)
    mu = empirical_mu_expert(dataset, env.feature_map, env.mdp.gamma)
    assert np.all(np.abs(mu - exact) <= 3 * standard_error + 1e-3)
