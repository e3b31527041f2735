"""
Batch max-margin inverse reinforcement learning.

The outer loop alternates between estimating the feature expectations of the
current policy, finding the minimum-norm reward weights that separate the
expert from every policy seen so far, and solving the MDP under that reward.
Estimators and solvers are plugged in, so the same loop runs with DSFN and
fitted Q-iteration, with LSTD-mu and LSPI, or with exact dynamic programming.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from absl import logging

from dsfn_irl.data import Dataset
from dsfn_irl.evaluators import action_matching
from dsfn_irl.exceptions import Converged, UsageError
from dsfn_irl.features import FeatureMap
from dsfn_irl.policies import StochasticPolicy
from dsfn_irl.utils import as_list, write_json, write_output

# Estimates the feature expectations of a policy. Receives the policy and the
# IRL iteration and returns `(mu, flagged)`.
MuEstimator = Callable[[StochasticPolicy, int], Tuple[np.ndarray, bool]]

# Solves the MDP under the reward `w . phi(s, a)`. Receives the weights and
# the IRL iteration and returns `(policy, flagged)`.
MdpSolver = Callable[[np.ndarray, int], Tuple[StochasticPolicy, bool]]


@dataclass(frozen=True)
class IrlConfig:
    max_iterations: int = 10
    margin_threshold: float = .1
    matching_drop: float = .05
    qp_tolerance: float = 1e-10

    def __post_init__(self):
        if self.max_iterations <= 0:
            raise UsageError('At least one IRL iteration is required')


def empirical_mu_expert(dataset: Dataset,
                        feature_map: FeatureMap,
                        gamma: float) -> np.ndarray:
    """
    Monte-Carlo feature expectation of the demonstrations: the discounted sum
    `sum_t gamma^t phi(s_t, a_t)` of every episode, averaged over episodes.
    """
    if dataset.num_episodes == 0:
        raise UsageError('At least one episode is required')
    phi = feature_map(dataset.states, dataset.actions)
    discounts = np.power(gamma, dataset.step_indices.astype(np.float64))
    return (discounts[:, None] * phi).sum(axis=0) / dataset.num_episodes


@dataclass
class QpSolution:
    """
    `weights` is the minimum-norm `w` with `w . (mu_e - mu_j) >= 1` for all
    candidates `j`; `margin` is the smallest achieved `w . (mu_e - mu_j)`.
    """
    weights: np.ndarray
    margin: float

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.weights))


def _project_simplex(x: np.ndarray) -> np.ndarray:
    u = np.sort(x)[::-1]
    cumulative = np.cumsum(u) - 1.
    rho = np.nonzero(u - cumulative / np.arange(1, len(x) + 1) > 0)[0][-1]
    return np.maximum(x - cumulative[rho] / (rho + 1.), 0.)


def _affine_min_norm(points: np.ndarray) -> np.ndarray:
    """
    Coefficients (summing to 1) of the minimum-norm point in the affine hull
    of the rows of `points`.
    """
    k = len(points)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = points @ points.T
    kkt[:k, k] = 1.
    kkt[k, :k] = 1.
    rhs = np.zeros(k + 1)
    rhs[k] = 1.
    solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return solution[:k]


def min_norm_point(points: np.ndarray,
                   tol: float = 1e-12,
                   max_iterations: int = 5000) -> np.ndarray:
    """
    Returns simplex coefficients `lam` such that `lam @ points` is the point
    of minimum norm in the convex hull of the rows of `points`. A projected
    gradient phase identifies the support, which an active-set phase then
    refines to the exact optimum.
    """
    k = len(points)
    if k == 1:
        return np.ones(1)
    gram = points @ points.T
    lipschitz = 2. * np.linalg.eigvalsh(gram)[-1]
    lam = np.full(k, 1. / k)
    if lipschitz > 0:
        for _ in range(max_iterations):
            new = _project_simplex(lam - 2. * gram @ lam / lipschitz)
            if np.max(np.abs(new - lam)) < tol:
                lam = new
                break
            lam = new

    scale = max(1., float(np.max(np.abs(gram))))
    support = lam > 1e-9
    for _ in range(4 * k):
        coefficients = np.zeros(k)
        coefficients[support] = _affine_min_norm(points[support])
        if np.any(coefficients[support] < -1e-14):
            # Leave the affine hull through the most negative coefficient.
            drop = np.flatnonzero(support)[np.argmin(coefficients[support])]
            support[drop] = False
            continue
        v = coefficients @ points
        slack = points @ v - v @ v
        if np.all(slack >= -1e-12 * scale):
            lam = np.maximum(coefficients, 0.)
            return lam / lam.sum()
        support[np.argmin(slack)] = True
    return lam


def solve_max_margin_qp(mu_expert: np.ndarray,
                        mus: Sequence[np.ndarray],
                        tol: float = 1e-10) -> QpSolution:
    """
    Solves `min ||w||^2` subject to `w . (mu_e - mu_j) >= 1` for every
    candidate. With `v` the minimum-norm point in the convex hull of the
    differences `mu_e - mu_j`, the solution is `w = v / ||v||^2`.

    Raises `Converged` when `v` vanishes, i.e. when no direction separates
    the expert from the candidates. The exception carries a best-effort
    direction of unit norm.
    """
    if len(mus) == 0:
        raise UsageError('At least one candidate feature expectation is '
                         'required')
    mu_expert = np.asarray(mu_expert, dtype=np.float64)
    differences = mu_expert[None, :] - np.atleast_2d(np.asarray(mus,
                                                                dtype=float))
    if differences.shape[1] != len(mu_expert):
        raise UsageError('Feature expectations differ in length')

    lam = min_norm_point(differences)
    v = lam @ differences
    norm_sq = float(v @ v)
    scale = max(1., float(np.max(np.abs(differences))))
    if norm_sq <= tol * scale ** 2:
        direction = differences.mean(axis=0)
        if np.linalg.norm(direction) > 0:
            direction = direction / np.linalg.norm(direction)
        raise Converged(QpSolution(direction,
                                   float(np.min(differences @ direction))))
    w = v / norm_sq
    return QpSolution(w, float(np.min(differences @ w)))


@dataclass
class IrlRecord:
    iteration: int
    mu: np.ndarray
    margin: float
    val_matching: float
    inducing_weights: Optional[np.ndarray] = None
    qp_weights: Optional[np.ndarray] = None
    qp_margin: Optional[float] = None
    estimate_flagged: bool = False
    solver_flagged: bool = False
    wall_time: float = 0.


@dataclass
class IrlHistory:
    mu_expert: np.ndarray
    records: List[IrlRecord] = field(default_factory=list)

    @property
    def mus(self) -> List[np.ndarray]:
        return [r.mu for r in self.records]

    def append(self, record: IrlRecord):
        if record.iteration != len(self.records):
            raise UsageError(f'Expected iteration {len(self.records)}, got '
                             f'{record.iteration}')
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_dataframe(self, include_time: bool = False) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {'iteration': r.iteration,
                   'margin': r.margin,
                   'val_matching': r.val_matching,
                   'qp_margin': r.qp_margin,
                   'estimate_flagged': int(r.estimate_flagged),
                   'solver_flagged': int(r.solver_flagged)}
            if include_time:
                row['wall_time'] = r.wall_time
            rows.append(row)
        return pd.DataFrame(rows)

    def save(self, csv_path: str, json_path: str):
        write_output(self.to_dataframe(include_time=True), csv_path)
        write_json({
            'mu_expert': as_list(self.mu_expert),
            'iterations': [{
                'iteration': r.iteration,
                'mu': as_list(r.mu),
                'inducing_weights': None if r.inducing_weights is None
                else as_list(r.inducing_weights),
                'qp_weights': None if r.qp_weights is None
                else as_list(r.qp_weights),
            } for r in self.records]
        }, json_path)


@dataclass
class IrlResult:
    """
    `weights` induced the policy with the smallest feature-expectation margin;
    `final_weights` is the last QP solution.
    """
    weights: np.ndarray
    policy: StochasticPolicy
    final_weights: np.ndarray
    history: IrlHistory
    policies: List[StochasticPolicy]
    best_iteration: int
    stop_reason: str

    @property
    def flagged(self) -> bool:
        return any(r.estimate_flagged or r.solver_flagged
                   for r in self.history.records)


def batch_irl(dataset: Dataset,
              initial_policy: StochasticPolicy,
              feature_map: FeatureMap,
              gamma: float,
              estimate_mu: MuEstimator,
              solve_mdp: MdpSolver,
              config: IrlConfig = IrlConfig(),
              val: Optional[Dataset] = None) -> IrlResult:
    """
    Runs batch max-margin IRL from `initial_policy`.

    Each iteration estimates `mu` of the current policy, solves the QP over
    all policies seen so far and solves the MDP under the new reward to get
    the next policy. The loop stops when `||mu_e - mu||` falls to
    `margin_threshold`, when top-1 action matching on `val` drops by more
    than `matching_drop` from one iteration to the next, when the QP becomes
    infeasible, or after `max_iterations` evaluated policies.

    The returned policy is the one with the smallest margin among those
    induced by a QP solution. The initial policy has no inducing weights, so
    it is returned only when the loop stops in its first iteration, even if
    its margin is the smallest seen.

    :param dataset: Dataset, the demonstrations used for `mu_e`
    :param initial_policy: StochasticPolicy, the warm start
    :param feature_map: FeatureMap
    :param gamma: float
    :param estimate_mu: MuEstimator
    :param solve_mdp: MdpSolver
    :param config: IrlConfig
    :param val: Dataset, held-out demonstrations for action matching
    :return: IrlResult
    """
    val = dataset if val is None or len(val) == 0 else val
    mu_expert = empirical_mu_expert(dataset, feature_map, gamma)
    history = IrlHistory(mu_expert)
    policies = [initial_policy]
    policy = initial_policy
    inducing = None
    final_weights = None
    stop_reason = 'iteration_cap'

    for i in range(config.max_iterations):
        start = time.perf_counter()
        mu, estimate_flagged = estimate_mu(policy, i)
        mu = np.asarray(mu, dtype=np.float64)
        record = IrlRecord(
            iteration=i,
            mu=mu,
            margin=float(np.linalg.norm(mu_expert - mu)),
            val_matching=action_matching(policy, val, 1),
            inducing_weights=inducing,
            estimate_flagged=bool(estimate_flagged)
        )
        history.append(record)

        stop = None
        if record.margin <= config.margin_threshold:
            stop = 'margin'
        elif i > 0 and history.records[i - 1].val_matching \
                - record.val_matching > config.matching_drop:
            stop = 'matching_drop'

        try:
            solution = solve_max_margin_qp(mu_expert, history.mus,
                                           config.qp_tolerance)
        except Converged as e:
            solution = e.solution
            stop = stop or 'qp_infeasible'
        record.qp_weights = solution.weights
        record.qp_margin = solution.margin
        final_weights = solution.weights
        logging.info(f'IRL iteration {i}: margin {record.margin:.4f}, '
                     f'val matching {record.val_matching:.3f}')

        if stop is None and i == config.max_iterations - 1:
            stop = 'iteration_cap'
        if stop is not None:
            record.wall_time = time.perf_counter() - start
            stop_reason = stop
            break

        policy, solver_flagged = solve_mdp(solution.weights, i)
        record.solver_flagged = bool(solver_flagged)
        record.wall_time = time.perf_counter() - start
        inducing = solution.weights
        policies.append(policy)

    candidates = [r for r in history.records if r.inducing_weights is not None]
    if candidates:
        best = min(candidates, key=lambda r: r.margin)
        weights, best_iteration = best.inducing_weights, best.iteration
    else:
        weights, best_iteration = final_weights, 0
    logging.info(f'IRL stopped ({stop_reason}) after {len(history)} '
                 f'iterations; best iteration {best_iteration}')
    return IrlResult(weights, policies[best_iteration], final_weights,
                     history, policies[:len(history)], best_iteration,
                     stop_reason)
