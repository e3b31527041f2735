"""
Deep successor feature network: off-policy estimation of the per state-action
feature expectations `mu(s, a)` of an evaluation policy from batch data.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from absl import logging
from tqdm import tqdm

from dsfn_irl.approx import (AdamState, DenseNet, adam_update, load_snapshot,
                             polyak_update, save_snapshot)
from dsfn_irl.data import (Dataset, PrioritizedReplayBuffer, ReplayBuffer,
                           RollingNormalizer, normalize)
from dsfn_irl.exceptions import (NonConvergenceWarning, SupportMismatchWarning,
                                 UsageError, ValidationFallbackWarning)
from dsfn_irl.features import FeatureMap
from dsfn_irl.policies import StochasticPolicy
from dsfn_irl.utils import read_json, write_json
from dsfn_irl.versioning import Tag


@dataclass(frozen=True)
class DsfnConfig:
    hidden_size: int = 64
    learning_rate: float = 3e-4
    adam_epsilon: float = 1e-4
    batch_size: int = 32
    max_iterations: int = 50000
    tau: float = .01
    delta: float = 5e-3
    eval_every: int = 100
    patience: int = 3
    settle_time: float = 5.
    prioritized: bool = False
    alpha: float = .6
    beta0: float = .9
    support_threshold: float = .5
    verbose: bool = False

    def __post_init__(self):
        if self.delta <= 0:
            raise UsageError(f'delta must be positive, got {self.delta}')
        if not 0. < self.tau <= 1.:
            raise UsageError(f'tau must lie in (0, 1], got {self.tau}')
        if not 0 < self.eval_every <= self.max_iterations:
            raise UsageError(f'eval_every must lie in [1, max_iterations], '
                             f'got {self.eval_every}')
        if self.patience < 1:
            raise UsageError(f'patience must be at least 1, got '
                             f'{self.patience}')

    def min_iterations(self, gamma: float) -> int:
        """
        Iterations before a validation check may count towards convergence.
        The Polyak-averaged fixed-point iteration contracts by roughly
        `1 - tau * (1 - gamma)` per step, so this is `settle_time` of its time
        constants, capped to leave room for `patience` checks.
        """
        horizon = self.settle_time / (self.tau * (1. - gamma))
        budget = self.max_iterations - self.patience * self.eval_every
        return int(max(min(np.ceil(horizon), budget), 0))


@dataclass
class DsfnNet:
    """
    Maps a normalized state to an `(action_count, feature_dim)` matrix whose
    row `a` is `mu(s, a)`. `target` is the Polyak-averaged copy used for
    bootstrapping.
    """
    online: DenseNet
    target: DenseNet
    action_count: int
    feature_dim: int
    tau: float
    normalizer: RollingNormalizer

    @classmethod
    def initialize(cls,
                   state_dim: int,
                   action_count: int,
                   feature_dim: int,
                   rng: np.random.Generator,
                   hidden_size: int = 64,
                   tau: float = .01) -> DsfnNet:
        online = DenseNet.initialize(
            [state_dim, hidden_size, hidden_size, action_count * feature_dim],
            rng)
        return cls(online, online.copy(), action_count, feature_dim, tau,
                   RollingNormalizer(state_dim))

    @property
    def state_dim(self) -> int:
        return self.online.input_size

    def _mu(self, net: DenseNet, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        out = net.forward(self.normalizer.apply(states))
        return out.reshape(len(states), self.action_count, self.feature_dim)

    def mu(self, states: np.ndarray) -> np.ndarray:
        return self._mu(self.online, states)

    def target_mu(self, states: np.ndarray) -> np.ndarray:
        return self._mu(self.target, states)

    def update_target(self) -> DsfnNet:
        return DsfnNet(self.online,
                       polyak_update(self.target, self.online, self.tau),
                       self.action_count, self.feature_dim, self.tau,
                       self.normalizer)

    def copy(self) -> DsfnNet:
        return DsfnNet(self.online.copy(), self.target.copy(),
                       self.action_count, self.feature_dim, self.tau,
                       self.normalizer.copy())

    def save(self, path: str):
        basename, _ = os.path.splitext(path)
        snapshots = {}
        for name in ('online', 'target'):
            filename = Tag(name).append_to_filename(f'{basename}.bin')
            save_snapshot(getattr(self, name), filename)
            snapshots[name] = os.path.basename(filename)
        write_json({'kind': 'dsfn',
                    'action_count': self.action_count,
                    'feature_dim': self.feature_dim,
                    'tau': self.tau,
                    'normalizer': self.normalizer.to_dict(),
                    'snapshots': snapshots}, path)

    @classmethod
    def load(cls, path: str) -> DsfnNet:
        meta = read_json(path)
        directory = os.path.dirname(os.path.abspath(path))
        online, target = (load_snapshot(os.path.join(directory,
                                                     meta['snapshots'][k]))
                          for k in ('online', 'target'))
        return cls(online, target, meta['action_count'], meta['feature_dim'],
                   meta['tau'], RollingNormalizer.from_dict(meta['normalizer']))


def bellman_targets(batch: Dataset,
                    policy: StochasticPolicy,
                    feature_map: FeatureMap,
                    gamma: float,
                    net: DsfnNet,
                    online: bool = False) -> np.ndarray:
    """
    `y = phi(s, a)` for terminal transitions and
    `y = phi(s, a) + gamma * sum_a' pi(a'|s') mu_target(s', a')` otherwise.
    Only the target network of `net` is evaluated, unless `online` is set.

    :return: np.ndarray, shape `(len(batch), feature_dim)`
    """
    phi = feature_map(batch.states, batch.actions)
    if gamma == 0 or len(batch) == 0:
        return phi
    probabilities = policy.probabilities(batch.next_states)
    bootstrap = net.mu if online else net.target_mu
    expected = np.einsum('na,nad->nd', probabilities,
                         bootstrap(batch.next_states))
    alive = (~batch.terminals).astype(np.float64)[:, None]
    return phi + gamma * alive * expected


def dsfn_loss_and_grad(net: DsfnNet,
                       batch: Dataset,
                       targets: np.ndarray,
                       weights: Optional[np.ndarray] = None) \
        -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Loss `mean_i w_i * 0.5 * ||mu(s_i, a_i) - y_i||^2` (all `w_i = 1` unless
    importance weights are given) and its gradient with respect to the online
    parameters. The targets are treated as constants. Also returns the
    per-sample residual norms.
    """
    n = len(batch)
    out, cache = net.online.forward_with_cache(
        net.normalizer.apply(batch.states))
    out = out.reshape(n, net.action_count, net.feature_dim)
    rows = np.arange(n)
    residual = out[rows, batch.actions] - targets
    w = np.ones(n) if weights is None else np.asarray(weights)
    loss = float(np.sum(w * 0.5 * np.sum(residual ** 2, axis=1)) / n)
    d_out = np.zeros_like(out)
    d_out[rows, batch.actions] = residual * w[:, None] / n
    grad, _ = net.online.backward(cache, d_out.reshape(n, -1))
    return loss, grad, np.linalg.norm(residual, axis=1)


def validation_loss(net: DsfnNet,
                    data: Dataset,
                    policy: StochasticPolicy,
                    feature_map: FeatureMap,
                    gamma: float) -> float:
    targets = bellman_targets(data, policy, feature_map, gamma, net)
    prediction = net.mu(data.states)[np.arange(len(data)), data.actions]
    return float(np.mean(0.5 * np.sum((prediction - targets) ** 2, axis=1)))


def bellman_residual(net: DsfnNet,
                     data: Dataset,
                     policy: StochasticPolicy,
                     feature_map: FeatureMap,
                     gamma: float) -> float:
    """
    Like `validation_loss`, but bootstrapped from the online network: the
    Bellman error of the estimate itself rather than its distance to the
    lagging target.
    """
    targets = bellman_targets(data, policy, feature_map, gamma, net,
                              online=True)
    prediction = net.mu(data.states)[np.arange(len(data)), data.actions]
    return float(np.mean(0.5 * np.sum((prediction - targets) ** 2, axis=1)))


@dataclass
class DsfnResult:
    net: DsfnNet
    converged: bool
    iterations: int
    best_val_loss: float
    curve: List[Dict[str, float]] = field(default_factory=list)


def support_mismatch(policy: StochasticPolicy, dataset: Dataset) -> float:
    """
    Fraction of batch states where the greedy action of `policy` differs from
    the logged action.
    """
    if len(dataset) == 0:
        return 0.
    return float(np.mean(policy.greedy_actions(dataset.states)
                         != dataset.actions))


def train_dsfn(train: Dataset,
               val: Dataset,
               policy: StochasticPolicy,
               feature_map: FeatureMap,
               gamma: float,
               config: DsfnConfig = DsfnConfig(),
               rng: Optional[np.random.Generator] = None,
               initial: Optional[DsfnNet] = None) -> DsfnResult:
    """
    Fits the successor features of `policy` on `train`: sample a mini-batch,
    build Bellman targets with the target network, take an Adam step on the
    online network and Polyak-average it into the target network.

    Every `eval_every` iterations, and at the last one, two losses are
    measured on `val`: against target-network targets and against
    online-network targets. The larger of the two is the validation score.
    Training stops once the score has been below `delta` for `patience`
    consecutive checks, counting only checks after
    `config.min_iterations(gamma)`.
    The snapshot with the lowest score is returned; at the iteration cap with
    `converged=False`.

    Passing `initial` warm-starts from an earlier network.
    """
    if len(train) == 0:
        raise UsageError('Cannot train DSFN on an empty dataset')
    rng = rng if rng is not None else np.random.default_rng()
    mismatch = support_mismatch(policy, train)
    if mismatch > config.support_threshold:
        warnings.warn(f'Evaluation policy disagrees with the batch actions on '
                      f'{mismatch:.0%} of the states; the estimate relies on '
                      f'transitions outside the batch support',
                      SupportMismatchWarning)
    if len(val) == 0:
        warnings.warn('No validation data: DSFN validates on the training '
                      'data', ValidationFallbackWarning)
        val = train

    if initial is not None:
        net = initial.copy()
    else:
        net = DsfnNet.initialize(train.state_dim, feature_map.action_count,
                                 feature_map.dim, rng, config.hidden_size,
                                 config.tau)
    if config.prioritized:
        buffer = PrioritizedReplayBuffer(train, config.alpha)
    else:
        buffer = ReplayBuffer(train)
    adam = AdamState.zeros(net.online.num_params, config.learning_rate,
                           config.adam_epsilon)

    min_iterations = config.min_iterations(gamma)
    best_loss, best_net = np.inf, net.copy()
    curve = []
    converged = False
    streak = 0
    iteration = 0
    for iteration in tqdm(range(1, config.max_iterations + 1), desc='DSFN',
                          disable=not config.verbose):
        indices = buffer.sample_indices(config.batch_size, rng)
        batch = train.subset(indices)
        normalize(net.normalizer,
                  np.concatenate([batch.states, batch.next_states]),
                  update=True)
        targets = bellman_targets(batch, policy, feature_map, gamma, net)
        weights = None
        if config.prioritized:
            beta = config.beta0 + (1. - config.beta0) * iteration \
                / config.max_iterations
            weights = buffer.importance_weights(indices, beta)
        loss, grad, td = dsfn_loss_and_grad(net, batch, targets, weights)
        if config.prioritized:
            buffer.update_priorities(indices, td)
        params, adam = adam_update(net.online.params, adam, grad)
        net.online = net.online.with_params(params)
        net = net.update_target()

        if iteration % config.eval_every == 0 \
                or iteration == config.max_iterations:
            val_loss = validation_loss(net, val, policy, feature_map, gamma)
            residual = bellman_residual(net, val, policy, feature_map, gamma)
            score = max(val_loss, residual)
            curve.append({'iteration': iteration, 'train_loss': loss,
                          'val_loss': val_loss, 'residual': residual})
            if score < best_loss:
                best_loss, best_net = score, net.copy()
            settled = iteration >= min_iterations \
                and score < config.delta
            streak = streak + 1 if settled else 0
            if streak >= config.patience:
                converged = True
                break

    if not converged:
        warnings.warn(f'DSFN did not settle below a validation score of '
                      f'{config.delta} in {config.max_iterations} iterations '
                      f'(best {best_loss:.5f})', NonConvergenceWarning)
    else:
        logging.info(f'DSFN converged after {iteration} iterations')
    best_net.normalizer = best_net.normalizer.freeze()
    return DsfnResult(best_net, converged, iteration, float(best_loss), curve)


def overall_mu(net: DsfnNet,
               initial_states: np.ndarray,
               policy: StochasticPolicy) -> np.ndarray:
    """
    Averages `sum_a pi(a|s0) mu(s0, a)` over the given initial states.
    """
    initial_states = np.asarray(initial_states, dtype=np.float64)
    if initial_states.size == 0:
        raise UsageError('At least one initial state is required')
    initial_states = np.atleast_2d(initial_states)
    probabilities = policy.probabilities(initial_states)
    return np.einsum('na,nad->d', probabilities,
                     net.mu(initial_states)) / len(initial_states)
