from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import GroupShuffleSplit

from dsfn_irl.exceptions import SplitWarning, UsageError
from dsfn_irl.utils import read_json, write_json

Seed = Union[int, np.random.Generator, None]


@dataclass
class Transition:
    """
    A single `(s, a, s')` record from the batch. `terminal` is True when `s'`
    ends the episode, in which case no bootstrapping happens past it.
    """
    state: np.ndarray
    action: int
    next_state: np.ndarray
    terminal: bool
    episode_id: int
    step_index: int


@dataclass
class Dataset:
    """
    A column-oriented collection of transitions. Iterating over a `Dataset`
    yields `Transition` instances; the training code works on the columns
    directly. `meta` stores provenance such as the environment spec and seed.
    """
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    episode_ids: np.ndarray
    step_indices: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.next_states = np.atleast_2d(
            np.asarray(self.next_states, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.int64).ravel()
        self.terminals = np.asarray(self.terminals, dtype=bool).ravel()
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.int64).ravel()
        self.step_indices = np.asarray(self.step_indices,
                                       dtype=np.int64).ravel()
        n = len(self.actions)
        if n == 0:
            # Keep the state dimension of empty datasets consistent.
            dim = self.states.shape[1] if self.states.ndim == 2 else 0
            self.states = self.states.reshape(0, dim)
            self.next_states = self.next_states.reshape(0, dim)
        for name in ('states', 'next_states', 'terminals', 'episode_ids',
                     'step_indices'):
            if len(getattr(self, name)) != n:
                raise ValueError(f'Column {name} has length '
                                 f'{len(getattr(self, name))}, expected {n}')

    @classmethod
    def empty(cls, state_dim: int, meta: Optional[Dict[str, Any]] = None) \
            -> Dataset:
        return cls(np.zeros((0, state_dim)), [], np.zeros((0, state_dim)),
                   [], [], [], dict(meta or {}))

    @classmethod
    def from_transitions(cls,
                         transitions: Sequence[Transition],
                         meta: Optional[Dict[str, Any]] = None) -> Dataset:
        return cls(
            states=np.array([t.state for t in transitions]),
            actions=[t.action for t in transitions],
            next_states=np.array([t.next_state for t in transitions]),
            terminals=[t.terminal for t in transitions],
            episode_ids=[t.episode_id for t in transitions],
            step_indices=[t.step_index for t in transitions],
            meta=dict(meta or {})
        )

    @classmethod
    def concatenate(cls, datasets: Sequence[Dataset]) -> Dataset:
        if not datasets:
            raise UsageError('Nothing to concatenate')
        return cls(
            states=np.concatenate([d.states for d in datasets]),
            actions=np.concatenate([d.actions for d in datasets]),
            next_states=np.concatenate([d.next_states for d in datasets]),
            terminals=np.concatenate([d.terminals for d in datasets]),
            episode_ids=np.concatenate([d.episode_ids for d in datasets]),
            step_indices=np.concatenate([d.step_indices for d in datasets]),
            meta=dict(datasets[0].meta)
        )

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def episodes(self) -> List[int]:
        """
        Returns the episode ids in order of first appearance.
        """
        _, first = np.unique(self.episode_ids, return_index=True)
        return [int(self.episode_ids[i]) for i in sorted(first)]

    @property
    def num_episodes(self) -> int:
        return len(np.unique(self.episode_ids))

    @property
    def initial_states(self) -> np.ndarray:
        """
        Returns the first state of every episode, i.e. the states with step
        index 0.
        """
        return self.states[self.step_indices == 0]

    def episode(self, episode_id: int) -> Dataset:
        idx = np.flatnonzero(self.episode_ids == episode_id)
        idx = idx[np.argsort(self.step_indices[idx], kind='stable')]
        return self.subset(idx)

    def iter_episodes(self) -> Iterator[Dataset]:
        for episode_id in self.episodes:
            yield self.episode(episode_id)

    def subset(self, indices: Union[Sequence[int], np.ndarray]) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.states[indices],
            self.actions[indices],
            self.next_states[indices],
            self.terminals[indices],
            self.episode_ids[indices],
            self.step_indices[indices],
            dict(self.meta)
        )

    def select_episodes(self, episode_ids: Sequence[int]) -> Dataset:
        mask = np.isin(self.episode_ids, np.asarray(episode_ids))
        return self.subset(np.flatnonzero(mask))

    def to_csv(self, path: str):
        """
        Writes one row per transition plus a JSON sidecar (`<path>.json`)
        holding `meta`.
        """
        columns = {
            'episode_id': self.episode_ids,
            'step_index': self.step_indices,
        }
        for i in range(self.state_dim):
            columns[f'state_{i}'] = self.states[:, i]
        columns['action'] = self.actions
        for i in range(self.state_dim):
            columns[f'next_state_{i}'] = self.next_states[:, i]
        columns['terminal'] = self.terminals.astype(int)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        pd.DataFrame(columns).to_csv(path, index=False, float_format='%.17g')
        write_json({**self.meta, 'state_dim': self.state_dim},
                   self.sidecar_path(path))

    @classmethod
    def from_csv(cls, path: str) -> Dataset:
        df = pd.read_csv(path)
        meta = {}
        if os.path.exists(cls.sidecar_path(path)):
            meta = read_json(cls.sidecar_path(path))
        state_cols = sorted((c for c in df.columns if c.startswith('state_')),
                            key=lambda c: int(c.split('_')[-1]))
        next_cols = sorted(
            (c for c in df.columns if c.startswith('next_state_')),
            key=lambda c: int(c.split('_')[-1]))
        meta.pop('state_dim', None)
        return cls(
            states=df[state_cols].to_numpy(dtype=np.float64),
            actions=df['action'].to_numpy(),
            next_states=df[next_cols].to_numpy(dtype=np.float64),
            terminals=df['terminal'].to_numpy().astype(bool),
            episode_ids=df['episode_id'].to_numpy(),
            step_indices=df['step_index'].to_numpy(),
            meta=meta
        )

    @staticmethod
    def sidecar_path(path: str) -> str:
        basename, _ = os.path.splitext(path)
        return f'{basename}.json'

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], int(self.actions[i]),
                          self.next_states[i], bool(self.terminals[i]),
                          int(self.episode_ids[i]), int(self.step_indices[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))


def _as_seed(seed: Seed) -> Optional[int]:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2 ** 31 - 1))
    return seed


def split_train_val(dataset: Dataset,
                    ratio: float = .7,
                    seed: Seed = None) -> Tuple[Dataset, Dataset]:
    """
    Splits `dataset` into a training and a validation part at episode
    granularity, so no episode ends up on both sides. With fewer than 2
    episodes everything goes to training and a `SplitWarning` is emitted.

    :param dataset: Dataset
    :param ratio: float, the fraction of episodes used for training
    :param seed: int or np.random.Generator
    :return: Tuple[Dataset, Dataset]
    """
    if len(dataset) == 0:
        raise UsageError('Cannot split an empty dataset')
    if dataset.num_episodes < 2:
        warnings.warn('Fewer than 2 episodes: all data is used for training '
                      'and the validation set is empty', SplitWarning)
        return dataset, Dataset.empty(dataset.state_dim, dataset.meta)

    gss = GroupShuffleSplit(n_splits=1, train_size=ratio,
                            random_state=_as_seed(seed))
    train_idx, val_idx = next(gss.split(dataset.actions,
                                        groups=dataset.episode_ids))
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


class ReplayBuffer:
    """
    Uniform experience replay over a fixed batch of transitions.
    """

    def __init__(self, dataset: Dataset):
        if len(dataset) == 0:
            raise UsageError('Cannot sample from an empty buffer')
        self.dataset = dataset

    def sample_indices(self,
                       batch_size: int,
                       rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, len(self.dataset), size=batch_size)

    def __len__(self) -> int:
        return len(self.dataset)


def sample_batch(buffer: ReplayBuffer,
                 batch_size: int,
                 rng: np.random.Generator) -> Dataset:
    """
    Draws `batch_size` transitions uniformly with replacement.
    """
    return buffer.dataset.subset(buffer.sample_indices(batch_size, rng))


class SumTree:
    """
    A binary sum tree over a fixed number of leaves, stored as one array per
    level (level 0 holds the leaves). Updates and prefix-sum lookups are
    vectorized over whole batches of indices.
    """

    def __init__(self, size: int):
        self.size = size
        capacity = 1
        while capacity < size:
            capacity *= 2
        self.levels = [np.zeros(capacity)]
        while len(self.levels[-1]) > 1:
            self.levels.append(np.zeros(len(self.levels[-1]) // 2))

    @property
    def total(self) -> float:
        return float(self.levels[-1][0])

    @property
    def leaves(self) -> np.ndarray:
        return self.levels[0][:self.size]

    def update(self, indices: np.ndarray, values: np.ndarray):
        idx = np.asarray(indices, dtype=np.int64)
        self.levels[0][idx] = values
        for level in range(1, len(self.levels)):
            idx = np.unique(idx // 2)
            below = self.levels[level - 1]
            self.levels[level][idx] = below[2 * idx] + below[2 * idx + 1]

    def find(self, prefix_sums: np.ndarray) -> np.ndarray:
        """
        Returns, for every value `u`, the leaf index `i` such that the sum of
        leaves before `i` is at most `u` and the sum up to and including `i`
        exceeds it.
        """
        u = np.minimum(np.asarray(prefix_sums, dtype=np.float64),
                       np.nextafter(self.total, 0))
        idx = np.zeros(len(u), dtype=np.int64)
        for level in range(len(self.levels) - 2, -1, -1):
            left = self.levels[level][2 * idx]
            go_right = u >= left
            u = np.where(go_right, u - left, u)
            idx = 2 * idx + go_right
        return np.minimum(idx, self.size - 1)


class PrioritizedReplayBuffer(ReplayBuffer):
    """
    Proportional prioritized replay: transition `i` is drawn with probability
    `p_i^alpha / sum_j p_j^alpha`, and importance weights
    `(N * P(i))^-beta` (normalized by their maximum) correct the bias.
    New transitions start at the current maximum priority.
    """

    def __init__(self,
                 dataset: Dataset,
                 alpha: float = .6,
                 epsilon: float = 1e-6):
        super().__init__(dataset)
        self.alpha = alpha
        self.epsilon = epsilon
        self.tree = SumTree(len(dataset))
        self.max_priority = 1.
        self.tree.update(np.arange(len(dataset)),
                         np.full(len(dataset), self.max_priority ** alpha))

    def sample_indices(self,
                       batch_size: int,
                       rng: np.random.Generator) -> np.ndarray:
        # Stratified: one draw per equal-mass segment of the tree.
        segment = self.tree.total / batch_size
        u = (np.arange(batch_size) + rng.random(batch_size)) * segment
        return self.tree.find(u)

    def importance_weights(self,
                           indices: np.ndarray,
                           beta: float) -> np.ndarray:
        probabilities = self.tree.leaves[indices] / self.tree.total
        weights = (len(self) * probabilities) ** -beta
        return weights / weights.max()

    def update_priorities(self, indices: np.ndarray, td_errors: np.ndarray):
        priorities = np.abs(td_errors) + self.epsilon
        self.max_priority = max(self.max_priority, float(priorities.max()))
        self.tree.update(indices, priorities ** self.alpha)


@dataclass
class RollingNormalizer:
    """
    Running per-dimension mean and variance of every state fed to `update()`
    (parallel Welford accumulation). `normalize()` maps a state to
    `(x - mean) / sqrt(var + floor)`. A frozen normalizer never changes its
    statistics.
    """
    dim: int
    count: int = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    floor: float = 1e-8
    frozen: bool = False

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.m2 = np.asarray(self.m2, dtype=np.float64)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.dim)
        return self.m2 / self.count

    def update(self, x: np.ndarray):
        if self.frozen:
            return
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise UsageError(f'Expected states of size {self.dim}, '
                             f'got {x.shape[1]}')
        n_b = x.shape[0]
        if n_b == 0:
            return
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * n_b / n
        self.m2 = self.m2 + m2_b + delta ** 2 * self.count * n_b / n
        self.count = n

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) \
               / np.sqrt(self.variance + self.floor)

    def copy(self) -> RollingNormalizer:
        return RollingNormalizer(self.dim, self.count, self.mean.copy(),
                                 self.m2.copy(), self.floor, self.frozen)

    def freeze(self) -> RollingNormalizer:
        res = self.copy()
        res.frozen = True
        return res

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dim': self.dim,
            'count': self.count,
            'mean': self.mean.tolist(),
            'm2': self.m2.tolist(),
            'floor': self.floor,
            'frozen': self.frozen,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> RollingNormalizer:
        return cls(d['dim'], d['count'], np.asarray(d['mean']),
                   np.asarray(d['m2']), d['floor'], d['frozen'])


def normalize(normalizer: RollingNormalizer,
              state: np.ndarray,
              update: bool = True) -> np.ndarray:
    """
    Normalizes `state` (one vector or a batch). In update mode, and unless the
    normalizer is frozen, the statistics absorb `state` first.
    """
    if update:
        normalizer.update(state)
    return normalizer.apply(state)
