"""
Linear baselines: LSTD-mu for feature expectations and LSPI as the MDP
solver, on radial-basis-function features or on the TRIL trunk.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from absl import logging
from scipy import linalg
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.preprocessing import MinMaxScaler

from dsfn_irl.data import Dataset
from dsfn_irl.exceptions import IllConditionedError, UsageError
from dsfn_irl.features import FeatureMap, kron_action
from dsfn_irl.policies import ScorePolicy, StochasticPolicy
from dsfn_irl.tril import FeatureEncoder

RBF_COMPONENTS = 25
MOUNTAINCAR_BANDWIDTHS = (1.,)
DEFAULT_BANDWIDTHS = (.1, .5, 1., 5.)
CENTER_PLACEMENTS = ('grid', 'sampled')
MAX_CONDITION_NUMBER = 1e12


class KroneckerFeatureMap(FeatureMap):
    """
    Places state features in the block of the chosen action:
    `psi(s, a) = onehot(a) (x) f(s)`.
    """

    def __init__(self,
                 state_features: Callable[[np.ndarray], np.ndarray],
                 state_feature_dim: int,
                 action_count: int):
        super().__init__(state_feature_dim * action_count, action_count)
        self.state_features = state_features
        self.state_feature_dim = state_feature_dim

    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return kron_action(self.state_features(np.atleast_2d(states)), actions,
                           self.action_count)

    def all_actions(self, states: np.ndarray) -> np.ndarray:
        f = self.state_features(np.atleast_2d(states))
        n, k = f.shape
        res = np.zeros((n, self.action_count, self.dim))
        for a in range(self.action_count):
            res[:, a, a * k:(a + 1) * k] = f
        return res


def grid_centers(state_dim: int, n_components: int = RBF_COMPONENTS) \
        -> np.ndarray:
    """
    Centers on a regular grid over the unit cube. The grid has
    `ceil(n ** (1 / d))` points per dimension; `n_components` of them are
    picked at evenly spaced positions in lexicographic order.
    """
    per_dim = max(2, math.ceil(round(n_components ** (1. / state_dim), 10)))
    axis = np.linspace(0., 1., per_dim)
    grid = np.array(list(itertools.product(axis, repeat=state_dim)))
    picks = np.round(np.linspace(0, len(grid) - 1, n_components)).astype(int)
    return grid[picks]


class RbfFeatureMap(KroneckerFeatureMap):
    """
    Gaussian-kernel features of min-max scaled states, one group of centers
    per bandwidth, composed with a one-hot action.
    """

    def __init__(self,
                 scaler: MinMaxScaler,
                 centers: np.ndarray,
                 bandwidths: Sequence[float],
                 action_count: int):
        self.scaler = scaler
        self.centers = np.asarray(centers, dtype=np.float64)
        self.bandwidths = tuple(bandwidths)
        super().__init__(self._rbf, len(self.centers) * len(self.bandwidths),
                         action_count)

    def _rbf(self, states: np.ndarray) -> np.ndarray:
        scaled = self.scaler.transform(states)
        return np.concatenate([rbf_kernel(scaled, self.centers, gamma=g)
                               for g in self.bandwidths], axis=1)

    @classmethod
    def fit(cls,
            states: np.ndarray,
            action_count: int,
            env_name: str = '',
            centers: str = 'grid',
            n_components: int = RBF_COMPONENTS,
            rng: Optional[np.random.Generator] = None) -> RbfFeatureMap:
        """
        Fits the scaler on the observed `states` and places `n_components`
        centers per bandwidth. MountainCar uses a single bandwidth, every
        other environment four.
        """
        if centers not in CENTER_PLACEMENTS:
            raise UsageError(f'Unknown center placement {centers}')
        states = np.atleast_2d(states)
        scaler = MinMaxScaler().fit(states)
        if centers == 'grid':
            positions = grid_centers(states.shape[1], n_components)
        else:
            rng = rng if rng is not None else np.random.default_rng()
            idx = rng.choice(len(states), size=n_components,
                             replace=len(states) < n_components)
            positions = scaler.transform(states[idx])
        bandwidths = MOUNTAINCAR_BANDWIDTHS \
            if env_name.lower().startswith('mountaincar') \
            else DEFAULT_BANDWIDTHS
        return cls(scaler, positions, bandwidths, action_count)


def tril_basis(encoder: FeatureEncoder) -> KroneckerFeatureMap:
    """
    LSTD basis for comparison mode: the TRIL trunk output plus a bias term,
    placed in the block of the chosen action.
    """
    def state_features(states: np.ndarray) -> np.ndarray:
        h = encoder.state_features(states)
        return np.concatenate([h, np.ones((len(h), 1))], axis=1)

    return KroneckerFeatureMap(state_features, encoder.trunk.output_size + 1,
                               encoder.action_count)


def _lstd_system(dataset: Dataset,
                 policy: StochasticPolicy,
                 basis: FeatureMap,
                 gamma: float) -> np.ndarray:
    psi = basis(dataset.states, dataset.actions)
    a = psi.T @ psi
    if gamma != 0:
        probabilities = policy.probabilities(dataset.next_states)
        next_psi = np.einsum('na,nak->nk', probabilities,
                             basis.all_actions(dataset.next_states))
        next_psi *= (~dataset.terminals)[:, None]
        a -= gamma * psi.T @ next_psi
    return a / len(dataset)


def _solve(a: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    if ridge < 0:
        raise UsageError(f'ridge must be >= 0, got {ridge}')
    if ridge == 0:
        condition = np.linalg.cond(a)
        if not np.isfinite(condition) or condition > MAX_CONDITION_NUMBER:
            raise IllConditionedError(
                f'LSTD system has condition number {condition:.3g}; use a '
                f'positive ridge')
    return linalg.solve(a + ridge * np.eye(len(a)), b)


@dataclass
class LinearMuModel:
    """
    `mu(s, a) = psi(s, a) @ coefficients`, one column of coefficients per
    reward feature.
    """
    basis: FeatureMap
    coefficients: np.ndarray

    def mu(self, states: np.ndarray) -> np.ndarray:
        return self.basis.all_actions(states) @ self.coefficients

    def overall(self,
                initial_states: np.ndarray,
                policy: StochasticPolicy) -> np.ndarray:
        initial_states = np.atleast_2d(initial_states)
        if initial_states.size == 0:
            raise UsageError('At least one initial state is required')
        probabilities = policy.probabilities(initial_states)
        return np.einsum('na,nad->d', probabilities,
                         self.mu(initial_states)) / len(initial_states)


def lstd_mu(dataset: Dataset,
            policy: StochasticPolicy,
            basis: FeatureMap,
            feature_map: FeatureMap,
            gamma: float,
            ridge: float = 1e-5) -> LinearMuModel:
    """
    LSTD estimate of the successor features of `policy`: solves
    `(A + ridge I) Theta = B` with
    `A = mean psi(s,a) (psi(s,a) - gamma E_pi psi(s',a'))^T` and
    `B = mean psi(s,a) phi(s,a)^T`.
    """
    if len(dataset) == 0:
        raise UsageError('Cannot run LSTD on an empty dataset')
    a = _lstd_system(dataset, policy, basis, gamma)
    psi = basis(dataset.states, dataset.actions)
    b = psi.T @ feature_map(dataset.states, dataset.actions) / len(dataset)
    return LinearMuModel(basis, _solve(a, b, ridge))


def lstd_q(dataset: Dataset,
           rewards: np.ndarray,
           policy: StochasticPolicy,
           basis: FeatureMap,
           gamma: float,
           ridge: float = 1e-5) -> np.ndarray:
    a = _lstd_system(dataset, policy, basis, gamma)
    b = basis(dataset.states, dataset.actions).T @ rewards / len(dataset)
    return _solve(a, b, ridge)


def linear_q_policy(basis: FeatureMap,
                    coefficients: np.ndarray) -> ScorePolicy:
    return ScorePolicy(lambda s: basis.all_actions(s) @ coefficients,
                       basis.action_count, 0.)


@dataclass
class LspiResult:
    policy: ScorePolicy
    coefficients: np.ndarray
    iterations: int
    converged: bool
    oscillated: bool

    @property
    def flagged(self) -> bool:
        return self.oscillated


def lspi(dataset: Dataset,
         weights: np.ndarray,
         basis: FeatureMap,
         feature_map: FeatureMap,
         gamma: float,
         ridge: float = 1e-5,
         max_iterations: int = 20,
         initial_policy: Optional[StochasticPolicy] = None) -> LspiResult:
    """
    Least-squares policy iteration under the reward `w . phi(s, a)`:
    LSTD-Q evaluation followed by greedy improvement, until the greedy
    actions on every batch state stop changing. A policy that returns to an
    earlier action assignment, or the iteration cap, is flagged as
    oscillating and the last policy is returned.
    """
    rewards = feature_map(dataset.states, dataset.actions) \
        @ np.asarray(weights, dtype=np.float64)
    states = np.concatenate([dataset.states, dataset.next_states])
    policy = initial_policy if initial_policy is not None \
        else linear_q_policy(basis, np.zeros(basis.dim))
    seen = [policy.greedy_actions(states).tobytes()]
    coefficients = np.zeros(basis.dim)
    for iteration in range(1, max_iterations + 1):
        coefficients = lstd_q(dataset, rewards, policy, basis, gamma, ridge)
        policy = linear_q_policy(basis, coefficients)
        actions = policy.greedy_actions(states).tobytes()
        if actions == seen[-1]:
            return LspiResult(policy, coefficients, iteration, True, False)
        if actions in seen:
            logging.warning(f'LSPI oscillates after {iteration} iterations')
            return LspiResult(policy, coefficients, iteration, False, True)
        seen.append(actions)
    logging.warning(f'LSPI did not stabilize in {max_iterations} iterations')
    return LspiResult(policy, coefficients, max_iterations, False, True)
