"""
MDP solvers: batch fitted Q-iteration under a linear reward (the inner solver
of the IRL loop), online DQN for training the demonstrating expert, and
evaluation rollouts.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from absl import logging
from tqdm import tqdm

from dsfn_irl.approx import (AdamState, DenseNet, adam_update, load_snapshot,
                             polyak_update, save_snapshot)
from dsfn_irl.data import (Dataset, PrioritizedReplayBuffer, ReplayBuffer,
                           RollingNormalizer, normalize)
from dsfn_irl.envs import ControlEnv, run_episode
from dsfn_irl.exceptions import ExpertTrainingError, UsageError
from dsfn_irl.features import FeatureMap
from dsfn_irl.policies import EpsilonGreedyPolicy, ScorePolicy, StochasticPolicy
from dsfn_irl.utils import read_json, write_json
from dsfn_irl.versioning import Tag


@dataclass(frozen=True)
class FqiConfig:
    hidden_size: int = 128
    learning_rate: float = 3e-4
    adam_epsilon: float = 1e-4
    batch_size: int = 64
    max_iterations: int = 30000
    tau: float = .01
    stop_threshold: float = 1e-2
    eval_every: int = 200
    stop_patience: int = 3
    settle_time: float = 5.
    prioritized: bool = True
    alpha: float = .6
    beta0: float = .9
    temperature: float = .1
    divergence_patience: int = 5
    normalize_states: bool = False
    verbose: bool = False

    def __post_init__(self):
        if not 0. < self.tau <= 1.:
            raise UsageError(f'tau must lie in (0, 1], got {self.tau}')
        if not 0 < self.eval_every <= self.max_iterations:
            raise UsageError(f'eval_every must lie in [1, max_iterations], '
                             f'got {self.eval_every}')
        if self.stop_patience < 1:
            raise UsageError(f'stop_patience must be at least 1, got '
                             f'{self.stop_patience}')

    def min_iterations(self, gamma: float) -> int:
        horizon = self.settle_time / (self.tau * (1. - gamma))
        budget = self.max_iterations - self.stop_patience * self.eval_every
        return int(max(min(np.ceil(horizon), budget), 0))


@dataclass(frozen=True)
class ExpertConfig:
    hidden_size: int = 128
    learning_rate: float = 1e-3
    adam_epsilon: float = 1e-4
    batch_size: int = 64
    buffer_size: int = 50000
    gamma: float = .99
    tau: float = .01
    epsilon_start: float = 1.
    epsilon_end: float = .05
    epsilon_decay_steps: int = 20000
    learning_starts: int = 1000
    max_steps: int = 300000
    check_every: int = 5000
    check_episodes: int = 20
    eval_episodes: int = 100
    verbose: bool = False


@dataclass
class QNet:
    """
    Maps a state to one Q-value per action. `normalizer` is optional: the
    Q-solvers run on raw states unless configured otherwise.
    """
    online: DenseNet
    target: DenseNet
    tau: float = .01
    normalizer: Optional[RollingNormalizer] = None

    @classmethod
    def initialize(cls,
                   state_dim: int,
                   action_count: int,
                   rng: np.random.Generator,
                   hidden_size: int = 128,
                   tau: float = .01,
                   normalize_states: bool = False) -> QNet:
        online = DenseNet.initialize(
            [state_dim, hidden_size, hidden_size, action_count], rng)
        normalizer = RollingNormalizer(state_dim) if normalize_states else None
        return cls(online, online.copy(), tau, normalizer)

    @property
    def action_count(self) -> int:
        return self.online.output_size

    def _inputs(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        if self.normalizer is None:
            return states
        return self.normalizer.apply(states)

    def q_values(self, states: np.ndarray) -> np.ndarray:
        return self.online.forward(self._inputs(states))

    def target_q_values(self, states: np.ndarray) -> np.ndarray:
        return self.target.forward(self._inputs(states))

    def update_target(self) -> QNet:
        return QNet(self.online,
                    polyak_update(self.target, self.online, self.tau),
                    self.tau, self.normalizer)

    def copy(self) -> QNet:
        return QNet(self.online.copy(), self.target.copy(), self.tau,
                    None if self.normalizer is None
                    else self.normalizer.copy())

    def policy(self, temperature: float = 0.) -> ScorePolicy:
        return ScorePolicy(self.q_values, self.action_count, temperature)

    def save(self, path: str, temperature: float = 0.):
        basename, _ = os.path.splitext(path)
        filename = Tag('qnet').append_to_filename(f'{basename}.bin')
        save_snapshot(self.online, filename)
        write_json({'kind': 'qnet',
                    'tau': self.tau,
                    'temperature': temperature,
                    'normalizer': None if self.normalizer is None
                    else self.normalizer.to_dict(),
                    'snapshot': os.path.basename(filename)}, path)

    @classmethod
    def load(cls, path: str) -> QNet:
        meta = read_json(path)
        directory = os.path.dirname(os.path.abspath(path))
        online = load_snapshot(os.path.join(directory, meta['snapshot']))
        normalizer = None if meta['normalizer'] is None \
            else RollingNormalizer.from_dict(meta['normalizer'])
        return cls(online, online.copy(), meta['tau'], normalizer)


def q_loss_and_grad(net: QNet,
                    states: np.ndarray,
                    actions: np.ndarray,
                    targets: np.ndarray,
                    weights: Optional[np.ndarray] = None) \
        -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Weighted mean of `0.5 * (Q(s, a) - y)^2` over the batch, its gradient with
    respect to the online parameters and the per-sample TD errors.
    """
    n = len(actions)
    q, cache = net.online.forward_with_cache(net._inputs(states))
    rows = np.arange(n)
    td = q[rows, actions] - targets
    w = np.ones(n) if weights is None else np.asarray(weights)
    loss = float(np.sum(w * 0.5 * td ** 2) / n)
    d_q = np.zeros_like(q)
    d_q[rows, actions] = w * td / n
    grad, _ = net.online.backward(cache, d_q)
    return loss, grad, td


def q_targets(net: QNet,
              rewards: np.ndarray,
              next_states: np.ndarray,
              terminals: np.ndarray,
              gamma: float,
              online: bool = False) -> np.ndarray:
    """
    `r + gamma * max_a' Q_target(s', a')`, without the bootstrap term at
    terminal transitions. `online` bootstraps from the online network.
    """
    if gamma == 0:
        return np.asarray(rewards, dtype=np.float64)
    q_next = net.q_values if online else net.target_q_values
    bootstrap = q_next(next_states).max(axis=1)
    return rewards + gamma * (~np.asarray(terminals, dtype=bool)) * bootstrap


@dataclass
class QSolverResult:
    policy: ScorePolicy
    net: QNet
    converged: bool
    diverged: bool
    iterations: int
    best_val_loss: float
    curve: List[Dict[str, float]] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return self.diverged


def batch_q_solver(train: Dataset,
                   val: Dataset,
                   weights: np.ndarray,
                   feature_map: FeatureMap,
                   gamma: float,
                   config: FqiConfig = FqiConfig(),
                   rng: Optional[np.random.Generator] = None) -> QSolverResult:
    """
    Fitted Q-iteration on the batch with rewards relabeled as
    `w . phi(s, a)`. Mini-batches come from prioritized replay (unless
    disabled) with `beta` annealed linearly from `beta0` to 1. Every
    `eval_every` iterations, and at the last one, the TD loss on `val` is
    measured against both target-network and online-network bootstrap
    values; the larger is the validation score. Training stops once the score
    has stayed below `stop_threshold` for `stop_patience` consecutive checks
    after `config.min_iterations(gamma)`, or flags divergence after
    `divergence_patience` consecutive increases. The snapshot with the lowest
    validation score is returned as a softmax policy with temperature
    `config.temperature`.
    """
    if len(train) == 0:
        raise UsageError('Cannot solve an MDP on an empty dataset')
    rng = rng if rng is not None else np.random.default_rng()
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (feature_map.dim,):
        raise UsageError(f'Expected {feature_map.dim} reward weights, got '
                         f'{weights.shape}')
    if len(val) == 0:
        val = train
    train_rewards = feature_map(train.states, train.actions) @ weights
    val_rewards = feature_map(val.states, val.actions) @ weights

    net = QNet.initialize(train.state_dim, feature_map.action_count, rng,
                          config.hidden_size, config.tau,
                          config.normalize_states)
    if config.prioritized:
        buffer = PrioritizedReplayBuffer(train, config.alpha)
    else:
        buffer = ReplayBuffer(train)
    adam = AdamState.zeros(net.online.num_params, config.learning_rate,
                           config.adam_epsilon)

    min_iterations = config.min_iterations(gamma)
    best_loss, best_net = np.inf, net.copy()
    previous, increases, streak = np.inf, 0, 0
    converged = diverged = False
    curve = []
    iteration = 0
    for iteration in tqdm(range(1, config.max_iterations + 1), desc='FQI',
                          disable=not config.verbose):
        indices = buffer.sample_indices(config.batch_size, rng)
        if net.normalizer is not None:
            normalize(net.normalizer,
                      np.concatenate([train.states[indices],
                                      train.next_states[indices]]),
                      update=True)
        targets = q_targets(net, train_rewards[indices],
                            train.next_states[indices],
                            train.terminals[indices], gamma)
        importance = None
        if config.prioritized:
            beta = config.beta0 + (1. - config.beta0) * iteration \
                / config.max_iterations
            importance = buffer.importance_weights(indices, beta)
        loss, grad, td = q_loss_and_grad(net, train.states[indices],
                                         train.actions[indices], targets,
                                         importance)
        if config.prioritized:
            buffer.update_priorities(indices, td)
        params, adam = adam_update(net.online.params, adam, grad)
        net.online = net.online.with_params(params)
        net = net.update_target()

        if iteration % config.eval_every == 0 \
                or iteration == config.max_iterations:
            q = net.q_values(val.states)[np.arange(len(val)), val.actions]
            val_targets = q_targets(net, val_rewards, val.next_states,
                                    val.terminals, gamma)
            online_targets = q_targets(net, val_rewards, val.next_states,
                                       val.terminals, gamma, online=True)
            val_loss = float(np.mean(0.5 * (q - val_targets) ** 2))
            residual = float(np.mean(0.5 * (q - online_targets) ** 2))
            score = max(val_loss, residual)
            curve.append({'iteration': iteration, 'train_loss': loss,
                          'val_loss': val_loss, 'residual': residual})
            if score < best_loss:
                best_loss, best_net = score, net.copy()
            increases = increases + 1 if score > previous else 0
            previous = score
            settled = iteration >= min_iterations \
                and score < config.stop_threshold
            streak = streak + 1 if settled else 0
            if streak >= config.stop_patience:
                converged = True
                break
            if increases >= config.divergence_patience:
                diverged = True
                logging.warning(f'Q-solver diverging after {iteration} '
                                f'iterations; returning the best snapshot')
                break

    if best_net.normalizer is not None:
        best_net.normalizer = best_net.normalizer.freeze()
    return QSolverResult(best_net.policy(config.temperature), best_net,
                         converged, diverged, iteration, float(best_loss),
                         curve)


class OnlineReplay:
    """
    Fixed-capacity ring buffer of transitions collected while interacting
    with a simulator.
    """

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.position = 0

    def add(self, state, action, reward, next_state, terminal):
        i = self.position
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = terminal
        self.position = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int,
                       rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)

    def __len__(self) -> int:
        return self.size


@dataclass
class RolloutResult:
    mean: float
    standard_error: float
    returns: np.ndarray


def evaluate_rollout(env: ControlEnv,
                     policy: StochasticPolicy,
                     episodes: int,
                     seed: int,
                     greedy: bool = False) -> RolloutResult:
    """
    Mean undiscounted environment return of `policy` over `episodes` rollouts
    and its standard error. Episode `k` uses the `k`-th child of `seed`.
    Only used for reporting.
    """
    if episodes <= 0:
        raise UsageError('At least one evaluation episode is required')
    children = np.random.SeedSequence(seed).spawn(episodes)
    returns = np.array([
        run_episode(env, policy, np.random.default_rng(child), k, greedy)[1]
        for k, child in enumerate(children)
    ])
    se = float(np.std(returns, ddof=1) / np.sqrt(episodes)) \
        if episodes > 1 else 0.
    return RolloutResult(float(np.mean(returns)), se, returns)


@dataclass
class ExpertResult:
    policy: ScorePolicy
    net: QNet
    evaluation: RolloutResult
    steps: int


def online_dqn_expert(env: ControlEnv,
                      config: ExpertConfig = ExpertConfig(),
                      seed: int = 0) -> ExpertResult:
    """
    Trains a DQN expert by interacting with `env`, annealing epsilon linearly
    from `epsilon_start` to `epsilon_end`. Every `check_every` steps the
    greedy policy is tried on `check_episodes` episodes; once that looks
    solved, `eval_episodes` evaluation episodes decide. Raises
    `ExpertTrainingError` when `max_steps` run out first.
    """
    threshold = env.spec.solve_threshold
    if threshold is None:
        raise UsageError(f'{env.spec.name} has no solve criterion')
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    net = QNet.initialize(env.spec.state_dim, env.spec.action_count, rng,
                          config.hidden_size, config.tau)
    adam = AdamState.zeros(net.online.num_params, config.learning_rate,
                           config.adam_epsilon)
    replay = OnlineReplay(config.buffer_size, env.spec.state_dim)

    state, t, episode_return = env.initial_state(rng), 0, 0.
    recent: List[float] = []
    best_check = -np.inf
    for step in tqdm(range(1, config.max_steps + 1), desc='expert',
                     disable=not config.verbose):
        fraction = min(1., step / config.epsilon_decay_steps)
        epsilon = config.epsilon_start \
            + fraction * (config.epsilon_end - config.epsilon_start)
        action = EpsilonGreedyPolicy(net.policy(), epsilon).sample_action(
            state, rng)
        next_state, done = env.step(state, action, step_index=t)
        reward = env.reward(state, action, next_state, done)
        episode_return += reward
        # Hitting the episode cap is not a true terminal state.
        replay.add(state, action, reward, next_state,
                   env.is_terminal(next_state))
        state, t = next_state, t + 1
        if done:
            recent.append(episode_return)
            state, t, episode_return = env.initial_state(rng), 0, 0.

        if len(replay) >= config.learning_starts:
            idx = replay.sample_indices(config.batch_size, rng)
            targets = q_targets(net, replay.rewards[idx],
                                replay.next_states[idx],
                                replay.terminals[idx], config.gamma)
            _, grad, _ = q_loss_and_grad(net, replay.states[idx],
                                         replay.actions[idx], targets)
            params, adam = adam_update(net.online.params, adam, grad)
            net.online = net.online.with_params(params)
            net = net.update_target()

        if step % config.check_every == 0 and len(replay) >= \
                config.learning_starts:
            check = evaluate_rollout(env, net.policy(), config.check_episodes,
                                     seed + step, greedy=True)
            best_check = max(best_check, check.mean)
            logging.info(f'Expert step {step}: greedy return {check.mean:.1f}')
            if check.mean >= threshold:
                evaluation = evaluate_rollout(env, net.policy(),
                                              config.eval_episodes,
                                              seed + step + 1, greedy=True)
                if evaluation.mean >= threshold:
                    logging.info(f'Expert solved {env.spec.name} after '
                                 f'{step} steps')
                    return ExpertResult(net.policy(), net, evaluation, step)

    raise ExpertTrainingError(
        f'Expert did not solve {env.spec.name} within {config.max_steps} steps',
        {'threshold': threshold,
         'best_check_return': best_check,
         'last_100_training_returns': float(np.mean(recent[-100:]))
         if recent else None,
         'episodes': len(recent)})
