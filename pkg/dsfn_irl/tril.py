"""
Transition-regularized imitation learning.

A shared tanh trunk feeds two heads: an action head that imitates the expert
and a transition head that predicts the (normalized) next state from the
trunk output concatenated with a one-hot action. After training, the action
head is the warm-start policy and the frozen trunk plus one-hot action is the
reward feature map.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from absl import logging
from scipy.special import log_softmax, logsumexp, softmax
from tqdm import tqdm

from dsfn_irl.approx import (AdamState, DenseNet, GaussianHead, adam_update,
                             load_snapshot, save_snapshot)
from dsfn_irl.data import (Dataset, ReplayBuffer, RollingNormalizer,
                           normalize)
from dsfn_irl.exceptions import (NumericalError, UsageError,
                                 ValidationFallbackWarning)
from dsfn_irl.features import FeatureMap, concat_action
from dsfn_irl.policies import ScorePolicy, one_hot
from dsfn_irl.utils import checksum, read_json, write_json
from dsfn_irl.versioning import Tag

TRANSITION_VARIANCES = ('fixed', 'learned')


@dataclass(frozen=True)
class TrilConfig:
    regularization: float = 1.4
    hidden_size: int = 128
    learning_rate: float = 3e-4
    adam_epsilon: float = 1e-4
    batch_size: int = 64
    max_iterations: int = 50000
    eval_every: int = 200
    patience: int = 10
    min_delta: float = 5e-3
    fallback_iterations: int = 10000
    transition_variance: str = 'fixed'
    verbose: bool = False

    def __post_init__(self):
        if self.regularization < 0:
            raise UsageError('The regularization coefficient must be >= 0')
        if self.transition_variance not in TRANSITION_VARIANCES:
            raise UsageError(
                f'Unknown transition variance {self.transition_variance}')
        if not 0 < self.eval_every <= self.max_iterations:
            raise UsageError(f'eval_every must lie in [1, max_iterations], '
                             f'got {self.eval_every}')


@dataclass
class TrilNet:
    trunk: DenseNet
    action_head: DenseNet
    transition_head: DenseNet
    regularization: float
    learned_variance: bool
    normalizer: RollingNormalizer

    @classmethod
    def initialize(cls,
                   state_dim: int,
                   action_count: int,
                   rng: np.random.Generator,
                   hidden_size: int = 128,
                   regularization: float = 1.4,
                   learned_variance: bool = False) -> TrilNet:
        out = 2 * state_dim if learned_variance else state_dim
        return cls(
            trunk=DenseNet.initialize([state_dim, hidden_size, hidden_size],
                                      rng, output_activation='tanh'),
            action_head=DenseNet.initialize([hidden_size, action_count], rng),
            transition_head=DenseNet.initialize(
                [hidden_size + action_count, out], rng),
            regularization=regularization,
            learned_variance=learned_variance,
            normalizer=RollingNormalizer(state_dim)
        )

    @property
    def state_dim(self) -> int:
        return self.trunk.input_size

    @property
    def action_count(self) -> int:
        return self.action_head.output_size

    @property
    def hidden_size(self) -> int:
        return self.trunk.output_size

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.trunk.params,
                               self.action_head.params,
                               self.transition_head.params])

    def with_params(self, params: np.ndarray) -> TrilNet:
        sizes = np.cumsum([self.trunk.num_params,
                           self.action_head.num_params])
        trunk, action, transition = np.split(np.asarray(params), sizes)
        return TrilNet(self.trunk.with_params(trunk),
                       self.action_head.with_params(action),
                       self.transition_head.with_params(transition),
                       self.regularization,
                       self.learned_variance,
                       self.normalizer.copy())

    def hidden(self, states: np.ndarray) -> np.ndarray:
        return self.trunk.forward(self.normalizer.apply(np.atleast_2d(states)))

    def action_logits(self, states: np.ndarray) -> np.ndarray:
        return self.action_head.forward(self.hidden(states))

    def policy(self) -> ScorePolicy:
        return ScorePolicy(self.action_logits, self.action_count, 1.)

    def encoder(self) -> FeatureEncoder:
        return FeatureEncoder(self.trunk.copy(), self.normalizer.freeze(),
                              self.action_count)

    def save(self, path: str):
        """
        Writes one parameter snapshot per component next to a JSON file at
        `path` that holds the metadata and the normalizer statistics.
        """
        basename, _ = os.path.splitext(path)
        snapshots = {}
        for name in ('trunk', 'action_head', 'transition_head'):
            filename = Tag(name).append_to_filename(f'{basename}.bin')
            save_snapshot(getattr(self, name), filename)
            snapshots[name] = os.path.basename(filename)
        write_json({
            'kind': 'tril',
            'regularization': self.regularization,
            'learned_variance': self.learned_variance,
            'state_dim': self.state_dim,
            'action_count': self.action_count,
            'normalizer': self.normalizer.to_dict(),
            'snapshots': snapshots,
        }, path)

    @classmethod
    def load(cls, path: str) -> TrilNet:
        meta = read_json(path)
        directory = os.path.dirname(os.path.abspath(path))
        nets = {name: load_snapshot(os.path.join(directory, filename),
                                    'tanh' if name == 'trunk' else 'identity')
                for name, filename in meta['snapshots'].items()}
        return cls(nets['trunk'], nets['action_head'], nets['transition_head'],
                   meta['regularization'], meta['learned_variance'],
                   RollingNormalizer.from_dict(meta['normalizer']))


class FeatureEncoder(FeatureMap):
    """
    `phi(s, a) = [trunk(normalize(s)), onehot(a)]` with a frozen trunk and a
    frozen normalizer.
    """

    def __init__(self,
                 trunk: DenseNet,
                 normalizer: RollingNormalizer,
                 action_count: int):
        super().__init__(trunk.output_size + action_count, action_count)
        self.trunk = trunk
        self.normalizer = normalizer.freeze()

    @property
    def state_dim(self) -> int:
        return self.trunk.input_size

    def state_features(self, states: np.ndarray) -> np.ndarray:
        return self.trunk.forward(self.normalizer.apply(np.atleast_2d(states)))

    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return concat_action(self.state_features(states), actions,
                             self.action_count)

    def all_actions(self, states: np.ndarray) -> np.ndarray:
        h = self.state_features(states)
        n, k = h.shape
        res = np.zeros((n, self.action_count, self.dim))
        res[:, :, :k] = h[:, None, :]
        res[:, np.arange(self.action_count), k + np.arange(self.action_count)] \
            = 1.
        return res

    def checksum(self) -> str:
        return checksum(self.trunk.params, self.normalizer.mean,
                        self.normalizer.m2)


def encode(encoder: FeatureMap,
           state: np.ndarray,
           action: int) -> np.ndarray:
    """
    Feature vector of a single state-action pair.
    """
    return encoder(np.atleast_2d(state), [action])[0]


@dataclass
class TrilLoss:
    total: float
    cross_entropy: float
    transition: float


def _prepare(net: TrilNet, batch: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    x = net.normalizer.apply(batch.states)
    target = net.normalizer.apply(batch.next_states)
    return x, target


def tril_loss_and_grad(net: TrilNet,
                       batch: Dataset,
                       with_gradient: bool = True) \
        -> Tuple[TrilLoss, Optional[np.ndarray]]:
    """
    `L = CE(a, pi_0(s)) + lambda * L_trans(s, a, s')`, averaged over the batch.
    With a fixed unit variance `L_trans` is half the squared error averaged
    over state dimensions, otherwise it is the Gaussian negative
    log-likelihood averaged over state dimensions. Returns the loss components
    and the gradient with respect to `net.params`.
    """
    if len(batch) == 0:
        raise UsageError('Cannot compute a loss on an empty batch')
    n = len(batch)
    x, target = _prepare(net, batch)
    h, trunk_cache = net.trunk.forward_with_cache(x)

    logits, action_cache = net.action_head.forward_with_cache(h)
    log_p = log_softmax(logits, axis=1)
    cross_entropy = -float(np.mean(log_p[np.arange(n), batch.actions]))

    z = np.concatenate([h, one_hot(batch.actions, net.action_count)], axis=1)
    out, transition_cache = net.transition_head.forward_with_cache(z)
    if net.learned_variance:
        head = GaussianHead.from_output(out)
        transition = float(np.mean(head.negative_log_likelihood(target)))
    else:
        residual = out - target
        transition = float(np.mean(0.5 * np.mean(residual ** 2, axis=1)))

    total = cross_entropy + net.regularization * transition
    if not np.isfinite(total):
        raise NumericalError('Non-finite TRIL loss',
                             layer=net.trunk.num_layers - 1)
    loss = TrilLoss(total, cross_entropy, transition)
    if not with_gradient:
        return loss, None

    d_logits = (softmax(logits, axis=1)
                - one_hot(batch.actions, net.action_count)) / n
    action_grad, d_h = net.action_head.backward(action_cache, d_logits)

    if net.learned_variance:
        d_mean, d_log_std = head.gradients(target)
        d_out = np.concatenate([d_mean, d_log_std], axis=1)
    else:
        d_out = residual / residual.shape[1]
    d_out = d_out * net.regularization / n
    transition_grad, d_z = net.transition_head.backward(transition_cache,
                                                        d_out)
    d_h = d_h + d_z[:, :net.hidden_size]
    trunk_grad, _ = net.trunk.backward(trunk_cache, d_h)
    return loss, np.concatenate([trunk_grad, action_grad, transition_grad])


def tril_loss(net: TrilNet, batch: Dataset) -> TrilLoss:
    return tril_loss_and_grad(net, batch, with_gradient=False)[0]


@dataclass
class TrilResult:
    net: TrilNet
    encoder: FeatureEncoder
    policy: ScorePolicy
    iterations: int
    best_val_loss: Optional[float]
    curve: List[Dict[str, float]] = field(default_factory=list)

    def __iter__(self):
        return iter((self.net, self.encoder, self.policy))


def train_tril(train: Dataset,
               val: Dataset,
               action_count: int,
               config: TrilConfig = TrilConfig(),
               rng: Optional[np.random.Generator] = None) -> TrilResult:
    """
    Trains a `TrilNet` with Adam on mini-batches drawn uniformly from `train`.
    Every `eval_every` iterations, and at the last one, the loss on the whole
    of `val` is computed; training stops once the best validation loss has
    failed to improve by `min_delta` for `patience` evaluations in a row, or
    after `max_iterations`. The parameters with the lowest validation loss are
    returned. Without validation data the net trains for a fixed
    `fallback_iterations` and the final parameters are returned.

    The state normalizer absorbs the states and next states of every training
    mini-batch and is frozen when training ends.
    """
    rng = rng if rng is not None else np.random.default_rng()
    net = TrilNet.initialize(train.state_dim, action_count, rng,
                             hidden_size=config.hidden_size,
                             regularization=config.regularization,
                             learned_variance=config.transition_variance
                             == 'learned')
    buffer = ReplayBuffer(train)
    adam = AdamState.zeros(net.params.size, config.learning_rate,
                           config.adam_epsilon)
    params = net.params

    has_val = len(val) > 0
    max_iterations = config.max_iterations
    if not has_val:
        warnings.warn('No validation data: TRIL trains for a fixed budget of '
                      f'{config.fallback_iterations} iterations',
                      ValidationFallbackWarning)
        max_iterations = min(config.fallback_iterations, max_iterations)

    best_loss, best_params, best_normalizer = None, params, None
    reference_loss, wait = np.inf, 0
    curve = []
    iteration = 0
    for iteration in tqdm(range(1, max_iterations + 1), desc='TRIL',
                          disable=not config.verbose):
        batch = train.subset(buffer.sample_indices(config.batch_size, rng))
        normalize(net.normalizer,
                  np.concatenate([batch.states, batch.next_states]),
                  update=True)
        loss, grad = tril_loss_and_grad(net, batch)
        params, adam = adam_update(params, adam, grad)
        net = net.with_params(params)

        if has_val and (iteration % config.eval_every == 0
                        or iteration == max_iterations):
            val_loss = tril_loss(net, val).total
            curve.append({'iteration': iteration, 'train_loss': loss.total,
                          'val_loss': val_loss})
            if best_loss is None or val_loss < best_loss:
                best_loss = val_loss
                best_params = params.copy()
                best_normalizer = net.normalizer.copy()
            if val_loss < reference_loss - config.min_delta:
                reference_loss, wait = val_loss, 0
            else:
                wait += 1
            if wait >= config.patience:
                logging.info(f'TRIL stopped after {iteration} iterations, '
                             f'best validation loss {best_loss:.5f}')
                break

    if best_normalizer is not None:
        net = net.with_params(best_params)
        net.normalizer = best_normalizer
    net.normalizer = net.normalizer.freeze()
    return TrilResult(net, net.encoder(), net.policy(), iteration, best_loss,
                      curve)
