from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from dsfn_irl.exceptions import UsageError
from dsfn_irl.policies import one_hot, state_index


class FeatureMap(ABC):
    """
    A function `phi(s, a)` from a batch of states and actions to feature
    vectors of size `dim`. Rewards are linear in these features.
    """

    def __init__(self, dim: int, action_count: int):
        self.dim = dim
        self.action_count = action_count

    @abstractmethod
    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """
        :param states: np.ndarray, shape `(n, state_dim)`
        :param actions: np.ndarray, shape `(n,)`
        :return: np.ndarray, shape `(n, dim)`
        """
        raise NotImplementedError

    def all_actions(self, states: np.ndarray) -> np.ndarray:
        """
        Features of every action for every state, shape
        `(n, action_count, dim)`.
        """
        states = np.atleast_2d(states)
        n = states.shape[0]
        repeated = np.repeat(states, self.action_count, axis=0)
        actions = np.tile(np.arange(self.action_count), n)
        return self.encode(repeated, actions).reshape(n, self.action_count,
                                                      self.dim)

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.asarray(actions, dtype=np.int64).ravel()
        if actions.size and (actions.min() < 0
                             or actions.max() >= self.action_count):
            raise UsageError(f'Actions must lie in [0, {self.action_count})')
        return self.encode(states, actions)


class TabularFeatureMap(FeatureMap):
    """
    Looks features up in a `(num_states, action_count, dim)` table, using the
    discrete state encoded by one-hot state vectors.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        super().__init__(table.shape[2], table.shape[1])
        self.table = table

    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.table[state_index(states), actions]


class StackedFeatureMap(FeatureMap):
    """
    Concatenates the outputs of several feature maps.
    """

    def __init__(self, *maps: FeatureMap):
        super().__init__(sum(m.dim for m in maps), maps[0].action_count)
        self.maps = maps

    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate([m.encode(states, actions) for m in self.maps],
                              axis=1)


class ConstantFeatureMap(FeatureMap):
    def __init__(self, action_count: int, value: float = 1.):
        super().__init__(1, action_count)
        self.value = value

    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.full((len(actions), 1), self.value)


def concat_action(state_features: np.ndarray,
                  actions: np.ndarray,
                  action_count: int) -> np.ndarray:
    """
    `[phi(s), onehot(a)]`: state features followed by a one-hot action block.
    """
    return np.concatenate([state_features, one_hot(actions, action_count)],
                          axis=1)


def kron_action(state_features: np.ndarray,
                actions: np.ndarray,
                action_count: int) -> np.ndarray:
    """
    Places `phi(s)` in the block of action `a` of an otherwise zero vector of
    size `action_count * len(phi(s))`.
    """
    n, k = state_features.shape
    res = np.zeros((n, action_count * k))
    for a in range(action_count):
        rows = actions == a
        res[rows, a * k:(a + 1) * k] = state_features[rows]
    return res
