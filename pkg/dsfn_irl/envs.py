"""
Deterministic reimplementations of the classic-control benchmarks and a small
tabular gridworld with exact dynamic-programming oracles.

During training no code may touch a simulator: `batch_only()` arms a guard
that makes every `step()` raise a `BatchPurityError`.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from dsfn_irl import constants as C
from dsfn_irl.data import Dataset
from dsfn_irl.exceptions import BatchPurityError, UsageError
from dsfn_irl.features import TabularFeatureMap
from dsfn_irl.policies import StochasticPolicy, TabularPolicy, state_index


class SimulatorAccess:
    """
    Counts simulator steps and enforces batch purity while `locked`.
    """

    def __init__(self):
        self.steps = 0
        self.locked = False

    def record_step(self):
        if self.locked:
            raise BatchPurityError(
                'Simulator accessed while only batch data may be used')
        self.steps += 1


SIMULATOR = SimulatorAccess()


@contextmanager
def batch_only() -> Iterator[SimulatorAccess]:
    """
    Context manager under which any simulator step raises. Yields the global
    `SimulatorAccess` so callers can check that its step counter did not
    move.
    """
    previous = SIMULATOR.locked
    SIMULATOR.locked = True
    try:
        yield SIMULATOR
    finally:
        SIMULATOR.locked = previous


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_count: int
    max_episode_steps: int
    solve_threshold: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ControlEnv(ABC):
    """
    An episodic environment with a pure transition function. Environments
    hold no episode state: callers pass the current state to `step()`.
    """
    spec: EnvSpec

    @abstractmethod
    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def dynamics(self, state: np.ndarray, action: int) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def is_terminal(self, state: np.ndarray) -> bool:
        """
        The goal or failure predicate, evaluated on the state reached.
        """
        raise NotImplementedError

    @abstractmethod
    def reward(self,
               state: np.ndarray,
               action: int,
               next_state: np.ndarray,
               terminal: bool) -> float:
        """
        The benchmark's own reward. Only used to score evaluation rollouts and
        to train the online expert; never seen by the batch learners.
        """
        raise NotImplementedError

    def step(self,
             state: np.ndarray,
             action: int,
             step_index: Optional[int] = None) -> Tuple[np.ndarray, bool]:
        """
        Applies `action` in `state`. The returned flag is True when the goal
        or failure predicate holds, or when `step_index` (the 0-based index
        of this step within the episode) reaches the episode cap.
        """
        if not 0 <= int(action) < self.spec.action_count:
            raise UsageError(f'Action {action} out of range for '
                             f'{self.spec.name}')
        SIMULATOR.record_step()
        next_state = self.dynamics(np.asarray(state, dtype=np.float64),
                                   int(action))
        terminal = self.is_terminal(next_state)
        if step_index is not None \
                and step_index + 1 >= self.spec.max_episode_steps:
            terminal = True
        return next_state, bool(terminal)

    def __str__(self):
        return self.spec.name


class MountainCar(ControlEnv):
    spec = EnvSpec('MountainCar-v0', 2, 3, C.MOUNTAINCAR_MAX_EPISODE_STEPS,
                   C.MOUNTAINCAR_REWARD_THRESHOLD)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(*C.MOUNTAINCAR_INITIAL_POSITION), 0.])

    def dynamics(self, state: np.ndarray, action: int) -> np.ndarray:
        position, velocity = state
        velocity += (action - 1) * C.MOUNTAINCAR_FORCE \
            + math.cos(3 * position) * (-C.MOUNTAINCAR_GRAVITY)
        velocity = float(np.clip(velocity, -C.MOUNTAINCAR_MAX_SPEED,
                                 C.MOUNTAINCAR_MAX_SPEED))
        position += velocity
        position = float(np.clip(position, C.MOUNTAINCAR_MIN_POSITION,
                                 C.MOUNTAINCAR_MAX_POSITION))
        if position == C.MOUNTAINCAR_MIN_POSITION and velocity < 0:
            velocity = 0.
        return np.array([position, velocity])

    def is_terminal(self, state: np.ndarray) -> bool:
        return bool(state[0] >= C.MOUNTAINCAR_GOAL_POSITION
                    and state[1] >= C.MOUNTAINCAR_GOAL_VELOCITY)

    def reward(self, state, action, next_state, terminal) -> float:
        return -1.


class CartPole(ControlEnv):
    spec = EnvSpec('CartPole-v0', 4, 2, C.CARTPOLE_MAX_EPISODE_STEPS,
                   C.CARTPOLE_REWARD_THRESHOLD)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-C.CARTPOLE_INITIAL_BOUND, C.CARTPOLE_INITIAL_BOUND,
                           size=4)

    def dynamics(self, state: np.ndarray, action: int) -> np.ndarray:
        x, x_dot, theta, theta_dot = state
        force = C.CARTPOLE_FORCE_MAG if action == 1 else -C.CARTPOLE_FORCE_MAG
        cos_theta = math.cos(theta)
        sin_theta = math.sin(theta)
        temp = (force + C.CARTPOLE_POLEMASS_LENGTH * theta_dot ** 2
                * sin_theta) / C.CARTPOLE_TOTAL_MASS
        theta_acc = (C.CARTPOLE_GRAVITY * sin_theta - cos_theta * temp) / (
                C.CARTPOLE_LENGTH * (4. / 3. - C.CARTPOLE_MASS_POLE
                                     * cos_theta ** 2 / C.CARTPOLE_TOTAL_MASS))
        x_acc = temp - C.CARTPOLE_POLEMASS_LENGTH * theta_acc * cos_theta \
            / C.CARTPOLE_TOTAL_MASS
        x = x + C.CARTPOLE_TAU * x_dot
        x_dot = x_dot + C.CARTPOLE_TAU * x_acc
        theta = theta + C.CARTPOLE_TAU * theta_dot
        theta_dot = theta_dot + C.CARTPOLE_TAU * theta_acc
        return np.array([x, x_dot, theta, theta_dot])

    def is_terminal(self, state: np.ndarray) -> bool:
        x, _, theta, _ = state
        return bool(x < -C.CARTPOLE_X_THRESHOLD
                    or x > C.CARTPOLE_X_THRESHOLD
                    or theta < -C.CARTPOLE_THETA_THRESHOLD
                    or theta > C.CARTPOLE_THETA_THRESHOLD)

    def reward(self, state, action, next_state, terminal) -> float:
        return 1.


class Acrobot(ControlEnv):
    """
    Observations are `(cos t1, sin t1, cos t2, sin t2, dt1, dt2)`; the joint
    angles are recovered from them with `arctan2`, so the observation alone
    determines the next state.
    """
    spec = EnvSpec('Acrobot-v1', 6, 3, C.ACROBOT_MAX_EPISODE_STEPS,
                   C.ACROBOT_REWARD_THRESHOLD)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        internal = rng.uniform(-C.ACROBOT_INITIAL_BOUND,
                               C.ACROBOT_INITIAL_BOUND, size=4)
        return self.observe(internal)

    @staticmethod
    def observe(internal: np.ndarray) -> np.ndarray:
        t1, t2, dt1, dt2 = internal
        return np.array([math.cos(t1), math.sin(t1), math.cos(t2),
                         math.sin(t2), dt1, dt2])

    @staticmethod
    def internal(observation: np.ndarray) -> np.ndarray:
        c1, s1, c2, s2, dt1, dt2 = observation
        return np.array([math.atan2(s1, c1), math.atan2(s2, c2), dt1, dt2])

    def dynamics(self, state: np.ndarray, action: int) -> np.ndarray:
        torque = C.ACROBOT_AVAIL_TORQUE[action]
        s = self.internal(state)
        ns = self._rk4(np.append(s, torque), C.ACROBOT_DT)[:4]
        ns[0] = _wrap(ns[0], -math.pi, math.pi)
        ns[1] = _wrap(ns[1], -math.pi, math.pi)
        ns[2] = float(np.clip(ns[2], -C.ACROBOT_MAX_VEL_1, C.ACROBOT_MAX_VEL_1))
        ns[3] = float(np.clip(ns[3], -C.ACROBOT_MAX_VEL_2, C.ACROBOT_MAX_VEL_2))
        return self.observe(ns)

    def is_terminal(self, state: np.ndarray) -> bool:
        t1, t2, _, _ = self.internal(state)
        return bool(-math.cos(t1) - math.cos(t2 + t1) > 1.)

    def reward(self, state, action, next_state, terminal) -> float:
        return 0. if terminal and self.is_terminal(next_state) else -1.

    def _rk4(self, y0: np.ndarray, dt: float) -> np.ndarray:
        k1 = self._dsdt(y0)
        k2 = self._dsdt(y0 + dt / 2. * k1)
        k3 = self._dsdt(y0 + dt / 2. * k2)
        k4 = self._dsdt(y0 + dt * k3)
        return y0 + dt / 6. * (k1 + 2 * k2 + 2 * k3 + k4)

    @staticmethod
    def _dsdt(s_augmented: np.ndarray) -> np.ndarray:
        m1 = C.ACROBOT_LINK_MASS_1
        m2 = C.ACROBOT_LINK_MASS_2
        l1 = C.ACROBOT_LINK_LENGTH_1
        lc1 = C.ACROBOT_LINK_COM_POS_1
        lc2 = C.ACROBOT_LINK_COM_POS_2
        i1 = i2 = C.ACROBOT_LINK_MOI
        g = C.ACROBOT_GRAVITY
        theta1, theta2, dtheta1, dtheta2, a = s_augmented
        d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2
                                   + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
        d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(theta2)) + i2
        phi2 = m2 * lc2 * g * math.cos(theta1 + theta2 - math.pi / 2.)
        phi1 = -m2 * l1 * lc2 * dtheta2 ** 2 * math.sin(theta2) \
            - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2) \
            + (m1 * lc1 + m2 * l1) * g * math.cos(theta1 - math.pi / 2) + phi2
        ddtheta2 = (a + d2 / d1 * phi1
                    - m2 * l1 * lc2 * dtheta1 ** 2 * math.sin(theta2) - phi2) \
            / (m2 * lc2 ** 2 + i2 - d2 ** 2 / d1)
        ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
        return np.array([dtheta1, dtheta2, ddtheta1, ddtheta2, 0.])


def _wrap(x: float, low: float, high: float) -> float:
    diff = high - low
    while x > high:
        x -= diff
    while x < low:
        x += diff
    return x


@dataclass
class TabularMDP:
    """
    A finite MDP. `transitions[s, a, s']` is `T(s'|s,a)`, `features[s, a]`
    is `phi(s,a)`. Entering a state flagged in `terminal` ends the episode.
    """
    transitions: np.ndarray
    features: np.ndarray
    gamma: float
    terminal: Optional[np.ndarray] = None
    initial: Optional[np.ndarray] = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.features = self.features[:, :, None]
        n_states, n_actions, _ = self.transitions.shape
        if self.terminal is None:
            self.terminal = np.zeros(n_states, dtype=bool)
        if self.initial is None:
            self.initial = np.full(n_states, 1. / n_states)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if not np.allclose(self.transitions.sum(axis=2), 1.):
            raise ValueError('Every T(.|s,a) must sum to 1')
        if np.any(self.transitions < 0):
            raise ValueError('Transition probabilities must be non-negative')
        if not 0. <= self.gamma < 1.:
            raise ValueError(f'gamma must lie in [0, 1), got {self.gamma}')
        if self.features.shape[:2] != (n_states, n_actions):
            raise ValueError('Feature table does not match the state-action '
                             'space')

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def continuation(self, policy_table: np.ndarray) -> np.ndarray:
        """
        The `(S*A, S*A)` matrix `P[(s,a),(s',a')] = T(s'|s,a) * pi(a'|s')`
        restricted to non-terminal `s'`.
        """
        s, a = self.num_states, self.num_actions
        alive = self.transitions * (~self.terminal)[None, None, :]
        return (alive.reshape(s * a, s)[:, :, None]
                * policy_table[None, :, :]).reshape(s * a, s * a)


def _policy_table(policy: Union[StochasticPolicy, np.ndarray],
                  num_states: int) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        return policy
    if isinstance(policy, TabularPolicy):
        return policy.table
    return policy.probabilities(np.eye(num_states))


def exact_mu_dp(mdp: TabularMDP,
                policy: Union[StochasticPolicy, np.ndarray]) \
        -> Tuple[np.ndarray, np.ndarray]:
    """
    Solves `mu = phi + gamma * P_pi mu` exactly. Returns the per state-action
    feature expectations of shape `(S, A, d)` and their average over the
    initial-state distribution with `a0 ~ pi`.
    """
    table = _policy_table(policy, mdp.num_states)
    n = mdp.num_states * mdp.num_actions
    phi = mdp.features.reshape(n, mdp.feature_dim)
    system = np.eye(n) - mdp.gamma * mdp.continuation(table)
    mu = linalg.solve(system, phi)
    residual = np.max(np.abs(system @ mu - phi))
    assert residual < 1e-10, f'DP residual {residual} too large'
    mu = mu.reshape(mdp.num_states, mdp.num_actions, mdp.feature_dim)
    overall = np.einsum('s,sa,sad->d', mdp.initial, table, mu)
    return mu, overall


def policy_q_values(mdp: TabularMDP,
                    policy: Union[StochasticPolicy, np.ndarray],
                    rewards: np.ndarray) -> np.ndarray:
    """
    Exact `Q^pi(s,a)` for a reward table of shape `(S, A)`.
    """
    table = _policy_table(policy, mdp.num_states)
    n = mdp.num_states * mdp.num_actions
    system = np.eye(n) - mdp.gamma * mdp.continuation(table)
    q = linalg.solve(system, np.asarray(rewards, dtype=np.float64).ravel())
    return q.reshape(mdp.num_states, mdp.num_actions)


def policy_value(mdp: TabularMDP,
                 policy: Union[StochasticPolicy, np.ndarray],
                 rewards: np.ndarray) -> float:
    table = _policy_table(policy, mdp.num_states)
    q = policy_q_values(mdp, table, rewards)
    return float(np.einsum('s,sa,sa->', mdp.initial, table, q))


def value_iteration(mdp: TabularMDP,
                    rewards: np.ndarray,
                    tol: float = 1e-12,
                    max_iterations: int = 100000) -> Tuple[np.ndarray,
                                                           TabularPolicy]:
    """
    Optimal Q-values for a reward table of shape `(S, A)` and the greedy
    policy they induce (ties go to the lowest action index).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    alive = mdp.transitions * (~mdp.terminal)[None, None, :]
    q = np.zeros_like(rewards)
    for _ in range(max_iterations):
        new_q = rewards + mdp.gamma * alive @ q.max(axis=1)
        if np.max(np.abs(new_q - q)) < tol:
            q = new_q
            break
        q = new_q
    return q, TabularPolicy.greedy_from_values(q)


def make_gridworld(size: int = C.GRIDWORLD_SIZE,
                   gamma: float = C.GRIDWORLD_GAMMA,
                   start: Tuple[int, int] = C.GRIDWORLD_START,
                   goal: Tuple[int, int] = C.GRIDWORLD_GOAL,
                   lava: Sequence[Tuple[int, int]] = C.GRIDWORLD_LAVA) \
        -> TabularMDP:
    """
    A deterministic `size x size` grid. Moving off the grid leaves the agent
    in place; entering the goal ends the episode. Features are
    `(enters goal, standing in lava, 1)`.
    """
    n_states = size * size
    n_actions = len(C.GRIDWORLD_MOVES)
    transitions = np.zeros((n_states, n_actions, n_states))
    features = np.zeros((n_states, n_actions, 3))
    goal_index = goal[0] * size + goal[1]
    lava_indices = {r * size + c for r, c in lava}
    for s in range(n_states):
        row, col = divmod(s, size)
        for a, (dr, dc) in enumerate(C.GRIDWORLD_MOVES):
            r = min(max(row + dr, 0), size - 1)
            c = min(max(col + dc, 0), size - 1)
            next_index = r * size + c
            transitions[s, a, next_index] = 1.
            features[s, a] = (float(next_index == goal_index),
                              float(s in lava_indices), 1.)
    terminal = np.zeros(n_states, dtype=bool)
    terminal[goal_index] = True
    initial = np.zeros(n_states)
    initial[start[0] * size + start[1]] = 1.
    return TabularMDP(transitions, features, gamma, terminal, initial)


class GridWorld(ControlEnv):
    """
    Episodic wrapper around a deterministic `TabularMDP`. States are one-hot
    vectors over the grid cells.
    """

    def __init__(self,
                 mdp: Optional[TabularMDP] = None,
                 true_weights: Sequence[float] = C.GRIDWORLD_TRUE_WEIGHTS,
                 max_episode_steps: int = C.GRIDWORLD_MAX_EPISODE_STEPS):
        self.mdp = mdp if mdp is not None else make_gridworld()
        if not np.all(self.mdp.transitions.max(axis=2) == 1.):
            raise ValueError('GridWorld requires deterministic transitions')
        self.true_weights = np.asarray(true_weights, dtype=np.float64)
        self.spec = EnvSpec(f'GridWorld-{self.mdp.num_states}',
                            self.mdp.num_states, self.mdp.num_actions,
                            max_episode_steps)

    @property
    def feature_map(self) -> TabularFeatureMap:
        return TabularFeatureMap(self.mdp.features)

    @property
    def true_rewards(self) -> np.ndarray:
        return self.mdp.features @ self.true_weights

    def encode(self, index: int) -> np.ndarray:
        return np.eye(self.mdp.num_states)[index]

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return self.encode(rng.choice(self.mdp.num_states, p=self.mdp.initial))

    def dynamics(self, state: np.ndarray, action: int) -> np.ndarray:
        s = int(state_index(state)[0])
        return self.encode(int(np.argmax(self.mdp.transitions[s, action])))

    def is_terminal(self, state: np.ndarray) -> bool:
        return bool(self.mdp.terminal[state_index(state)[0]])

    def reward(self, state, action, next_state, terminal) -> float:
        return float(self.true_rewards[state_index(state)[0], action])

    def expert(self) -> TabularPolicy:
        _, policy = value_iteration(self.mdp, self.true_rewards)
        return policy


class Environment(Enum):
    """
    All environments that experiments can refer to by name, e.g.

    ```python
    env = Environment.from_name('cartpole').make()
    ```
    """
    MOUNTAINCAR = 'MountainCar-v0'
    CARTPOLE = 'CartPole-v0'
    ACROBOT = 'Acrobot-v1'
    GRIDWORLD = 'GridWorld'

    def make(self) -> ControlEnv:
        if self == self.MOUNTAINCAR:
            return MountainCar()
        if self == self.CARTPOLE:
            return CartPole()
        if self == self.ACROBOT:
            return Acrobot()
        return GridWorld()

    @classmethod
    def from_name(cls, name: str) -> Environment:
        for env in cls:
            if name.lower() in (env.name.lower(), env.value.lower()):
                return env
        raise UsageError(f'Unknown environment {name}')


def run_episode(env: ControlEnv,
                policy: StochasticPolicy,
                rng: np.random.Generator,
                episode_id: int = 0,
                greedy: bool = False) -> Tuple[List[Dict[str, Any]], float]:
    """
    Rolls out one episode and returns its transition rows and its
    undiscounted environment return.
    """
    state = env.initial_state(rng)
    rows = []
    total = 0.
    for t in range(env.spec.max_episode_steps):
        action = policy.act(state, rng, greedy=greedy)
        next_state, terminal = env.step(state, action, step_index=t)
        total += env.reward(state, action, next_state, terminal)
        rows.append({'state': state, 'action': action,
                     'next_state': next_state, 'terminal': terminal,
                     'episode_id': episode_id, 'step_index': t})
        state = next_state
        if terminal:
            break
    return rows, total


def generate_batch(env: ControlEnv,
                   policy: StochasticPolicy,
                   episodes: int,
                   seed: int,
                   greedy: bool = False) -> Dataset:
    """
    Collects `episodes` full trajectories of `policy`. Episode `k` draws all
    its randomness from the `k`-th child of `seed`, so the result does not
    depend on the order in which episodes are generated.

    :param env: ControlEnv
    :param policy: StochasticPolicy
    :param episodes: int
    :param seed: int
    :param greedy: bool, act greedily instead of sampling from `policy`
    :return: Dataset
    """
    if episodes <= 0:
        raise UsageError('At least one episode is required')
    if policy.action_count != env.spec.action_count:
        raise UsageError('Policy and environment disagree on the action set')
    children = np.random.SeedSequence(seed).spawn(episodes)
    rows = []
    for k, child in enumerate(children):
        episode_rows, _ = run_episode(env, policy, np.random.default_rng(child),
                                      episode_id=k, greedy=greedy)
        rows.extend(episode_rows)
    return Dataset(
        states=np.array([r['state'] for r in rows]),
        actions=[r['action'] for r in rows],
        next_states=np.array([r['next_state'] for r in rows]),
        terminals=[r['terminal'] for r in rows],
        episode_ids=[r['episode_id'] for r in rows],
        step_indices=[r['step_index'] for r in rows],
        meta={'env': env.spec.to_dict(), 'seed': seed, 'episodes': episodes}
    )
