from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Callable

import numpy as np
from scipy.special import softmax

ScoreFunction = Callable[[np.ndarray], np.ndarray]


class StochasticPolicy(ABC):
    """
    A map from states to probability distributions over a discrete action
    set. Subclasses implement `probabilities()` for a 2D batch of states.
    Greedy choices break ties in favour of the lowest action index.
    """

    def __init__(self, action_count: int):
        self.action_count = action_count

    @abstractmethod
    def probabilities(self, states: np.ndarray) -> np.ndarray:
        """
        Returns an array of shape `(num_states, action_count)` whose rows sum
        to 1.

        :param states: np.ndarray, 2D array of shape `(num_states, state_dim)`
        :return: np.ndarray
        """
        raise NotImplementedError

    def probability(self, state: np.ndarray) -> np.ndarray:
        return self.probabilities(np.atleast_2d(state))[0]

    def greedy_actions(self, states: np.ndarray) -> np.ndarray:
        return np.argmax(self.probabilities(np.atleast_2d(states)), axis=1)

    def top_k(self, states: np.ndarray, k: int) -> np.ndarray:
        p = self.probabilities(np.atleast_2d(states))
        return np.argsort(-p, axis=1, kind='stable')[:, :k]

    def sample_action(self, state: np.ndarray, rng: np.random.Generator) -> int:
        p = self.probability(state)
        return int(rng.choice(self.action_count, p=p / p.sum()))

    def act(self,
            state: np.ndarray,
            rng: np.random.Generator,
            greedy: bool = False) -> int:
        if greedy:
            return int(self.greedy_actions(state)[0])
        return self.sample_action(state, rng)


class ScorePolicy(StochasticPolicy):
    """
    Softmax over per-action scores (logits or Q-values) divided by
    `temperature`. A temperature of 0 gives the greedy one-hot policy.
    """

    def __init__(self,
                 scores: ScoreFunction,
                 action_count: int,
                 temperature: float = 1.):
        super().__init__(action_count)
        if temperature < 0:
            raise ValueError(f'Temperature must be >= 0, got {temperature}')
        self.scores = scores
        self.temperature = temperature

    def probabilities(self, states: np.ndarray) -> np.ndarray:
        scores = np.atleast_2d(self.scores(np.atleast_2d(states)))
        if self.temperature == 0:
            return one_hot(np.argmax(scores, axis=1), self.action_count)
        return softmax(scores / self.temperature, axis=1)

    def greedy(self) -> ScorePolicy:
        return ScorePolicy(self.scores, self.action_count, 0.)


class TabularPolicy(StochasticPolicy):
    """
    A lookup table of action probabilities indexed by the discrete state that
    a one-hot state vector encodes.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        super().__init__(table.shape[1])
        self.table = table

    @classmethod
    def greedy_from_values(cls, q_values: np.ndarray) -> TabularPolicy:
        q_values = np.asarray(q_values)
        return cls(one_hot(np.argmax(q_values, axis=1), q_values.shape[1]))

    def probabilities(self, states: np.ndarray) -> np.ndarray:
        return self.table[state_index(states)]


class UniformPolicy(StochasticPolicy):
    def probabilities(self, states: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(states).shape[0]
        return np.full((n, self.action_count), 1. / self.action_count)


class EpsilonGreedyPolicy(StochasticPolicy):
    """
    Takes the greedy action of `base` with probability `1 - epsilon` and a
    uniformly random action otherwise.
    """

    def __init__(self, base: StochasticPolicy, epsilon: float):
        super().__init__(base.action_count)
        self.base = base
        self.epsilon = epsilon

    def probabilities(self, states: np.ndarray) -> np.ndarray:
        greedy = one_hot(self.base.greedy_actions(states), self.action_count)
        return (1. - self.epsilon) * greedy + self.epsilon / self.action_count


def one_hot(indices: np.ndarray, size: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).ravel()
    res = np.zeros((len(indices), size))
    res[np.arange(len(indices)), indices] = 1.
    return res


def state_index(states: np.ndarray) -> np.ndarray:
    """
    Recovers discrete state indices from one-hot state vectors.
    """
    return np.argmax(np.atleast_2d(states), axis=1)
