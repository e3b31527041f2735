import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import (Any, Dict, Iterator, List, Mapping, Optional, Tuple,
                    get_type_hints)

import confidence
import numpy as np
import yaml
from absl import logging
from sklearn.preprocessing import MinMaxScaler
from tqdm import tqdm

from dsfn_irl.baselines import (LspiResult, RbfFeatureMap, linear_q_policy,
                                lspi, lstd_mu, tril_basis)
from dsfn_irl.data import Dataset, split_train_val
from dsfn_irl.dsfn import DsfnConfig, DsfnNet, overall_mu, train_dsfn
from dsfn_irl.envs import ControlEnv, Environment, GridWorld, batch_only, \
    generate_batch
from dsfn_irl.evaluators import (MetricsRecord, action_matching, emit_summary,
                                 records_to_dataframe)
from dsfn_irl.exceptions import ConfigurationError
from dsfn_irl.features import FeatureMap
from dsfn_irl.irl import IrlConfig, IrlResult, batch_irl
from dsfn_irl.policies import StochasticPolicy
from dsfn_irl.solvers import (ExpertConfig, FqiConfig, QNet, batch_q_solver,
                              evaluate_rollout, online_dqn_expert)
from dsfn_irl.tril import FeatureEncoder, TrilConfig, TrilNet, train_tril
from dsfn_irl.utils import (append_output, config_hash, create_dataframe,
                            derive_rng, read_json, write_json, write_output)
from params import ENVS, EPISODES, METHODS, PARAMS, TRIALS

ENV_NAMES = tuple(e.value for e in Environment)
METHOD_NAMES = ('tril_dsfn', 'lstd_mu_lspi', 'imitation_only',
                'imitation_unregularized')
EPISODE_BUDGETS = (1, 10, 100, 1000)
BASELINE_FEATURES = ('tril', 'rbf')
RBF_CENTERS = ('grid', 'sampled')
TRANSITION_VARIANCES = ('fixed', 'learned')

ENUMERATED = {
    'env': ENV_NAMES,
    'method': METHOD_NAMES,
    'episodes': EPISODE_BUDGETS,
    'baseline_features': BASELINE_FEATURES,
    'rbf_centers': RBF_CENTERS,
    'transition_variance': TRANSITION_VARIANCES,
}

# Configuration keys that determine the expert, and so its cache key.
EXPERT_KEYS = ('env', 'seed', 'gamma', 'expert_max_steps',
               'expert_learning_rate', 'eval_episodes')


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Flat configuration of an experiment. Defaults are the published network
    hyperparameters; every key can be set in a JSON/YAML file and
    overridden on the command line.
    """
    env: str = 'CartPole-v0'
    episodes: int = 100
    method: str = 'tril_dsfn'
    seed: int = 0
    trials: int = 5
    gamma: float = .99
    eval_episodes: int = 100
    eval_greedy: bool = True
    train_ratio: float = .7
    learning_rate: float = 3e-4
    adam_epsilon: float = 1e-4

    tril_hidden_size: int = 128
    tril_regularization: float = 1.4
    tril_batch_size: int = 64
    tril_max_iterations: int = 50000
    tril_eval_every: int = 200
    tril_patience: int = 10
    tril_min_delta: float = 5e-3
    tril_fallback_iterations: int = 10000
    transition_variance: str = 'fixed'

    dsfn_hidden_size: int = 64
    dsfn_batch_size: int = 32
    dsfn_max_iterations: int = 50000
    dsfn_tau: float = .01
    dsfn_delta: float = 5e-3
    dsfn_eval_every: int = 100
    dsfn_patience: int = 3
    dsfn_settle_time: float = 5.
    dsfn_prioritized: bool = False
    dsfn_warm_start: bool = False

    dqn_hidden_size: int = 128
    dqn_batch_size: int = 64
    dqn_max_iterations: int = 30000
    dqn_tau: float = .01
    dqn_stop_threshold: float = 1e-2
    dqn_eval_every: int = 200
    dqn_stop_patience: int = 3
    dqn_settle_time: float = 5.
    dqn_prioritized: bool = True
    per_alpha: float = .6
    per_beta0: float = .9
    policy_temperature: float = .1
    divergence_patience: int = 5

    irl_max_iterations: int = 10
    irl_margin_threshold: float = .1
    irl_matching_drop: float = .05

    lstd_ridge: float = 1e-5
    lspi_max_iterations: int = 20
    baseline_features: str = 'tril'
    rbf_centers: str = 'grid'

    expert_max_steps: int = 300000
    expert_learning_rate: float = 1e-3
    expert_cache: bool = True
    dataset: str = ''
    verbose: bool = False

    def __post_init__(self):
        for key, allowed in ENUMERATED.items():
            if getattr(self, key) not in allowed:
                raise ConfigurationError(
                    f'{key} must be one of {allowed}, got '
                    f'{getattr(self, key)!r}')
        if not 0. <= self.gamma < 1.:
            raise ConfigurationError(f'gamma must lie in [0, 1), got '
                                     f'{self.gamma}')
        if not 0. < self.train_ratio <= 1.:
            raise ConfigurationError('train_ratio must lie in (0, 1]')
        for key in ('dsfn_tau', 'dqn_tau'):
            if not 0. < getattr(self, key) <= 1.:
                raise ConfigurationError(f'{key} must lie in (0, 1]')
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.endswith(('_iterations', '_every', '_size', '_steps',
                                '_patience', 'trials', 'eval_episodes')) \
                    and value <= 0:
                raise ConfigurationError(f'{f.name} must be positive')
        for key in ('tril_regularization', 'lstd_ridge', 'policy_temperature'):
            if getattr(self, key) < 0:
                raise ConfigurationError(f'{key} must be >= 0')
        if self.dsfn_delta <= 0:
            raise ConfigurationError('dsfn_delta must be positive')
        for prefix in ('tril', 'dsfn', 'dqn'):
            if getattr(self, f'{prefix}_eval_every') \
                    > getattr(self, f'{prefix}_max_iterations'):
                raise ConfigurationError(
                    f'{prefix}_eval_every must not exceed '
                    f'{prefix}_max_iterations')

    @classmethod
    def types(cls) -> Dict[str, type]:
        hints = get_type_hints(cls)
        return {f.name: hints[f.name] for f in fields(cls)}

    @classmethod
    def from_dict(cls, mapping: Mapping[str, Any]) -> 'ExperimentConfig':
        unknown = set(mapping) - set(cls.types())
        if unknown:
            raise ConfigurationError(
                f'Unknown configuration keys: {sorted(unknown)}')
        return cls(**dict(mapping))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def override(self, **kwargs) -> 'ExperimentConfig':
        return replace(self, **{k: v for k, v in kwargs.items()
                                if v is not None})

    @classmethod
    def schema(cls) -> Dict[str, Any]:
        """
        A JSON-schema document describing the flat configuration file.
        """
        json_types = {int: 'integer', float: 'number', bool: 'boolean',
                      str: 'string'}
        defaults = cls()
        properties = {}
        for name, t in cls.types().items():
            properties[name] = {'type': json_types[t],
                                'default': getattr(defaults, name)}
            if name in ENUMERATED:
                properties[name]['enum'] = list(ENUMERATED[name])
        return {'$schema': 'http://json-schema.org/draft-07/schema#',
                'title': 'ExperimentConfig',
                'type': 'object',
                'additionalProperties': False,
                'properties': properties}

    @property
    def expert_hash(self) -> str:
        return config_hash({k: getattr(self, k) for k in EXPERT_KEYS})

    @property
    def environment(self) -> Environment:
        return Environment.from_name(self.env)

    def tril(self) -> TrilConfig:
        return TrilConfig(
            regularization=0. if self.method == 'imitation_unregularized'
            else self.tril_regularization,
            hidden_size=self.tril_hidden_size,
            learning_rate=self.learning_rate,
            adam_epsilon=self.adam_epsilon,
            batch_size=self.tril_batch_size,
            max_iterations=self.tril_max_iterations,
            eval_every=self.tril_eval_every,
            patience=self.tril_patience,
            min_delta=self.tril_min_delta,
            fallback_iterations=self.tril_fallback_iterations,
            transition_variance=self.transition_variance,
            verbose=self.verbose)

    def dsfn(self) -> DsfnConfig:
        return DsfnConfig(
            hidden_size=self.dsfn_hidden_size,
            learning_rate=self.learning_rate,
            adam_epsilon=self.adam_epsilon,
            batch_size=self.dsfn_batch_size,
            max_iterations=self.dsfn_max_iterations,
            tau=self.dsfn_tau,
            delta=self.dsfn_delta,
            eval_every=self.dsfn_eval_every,
            patience=self.dsfn_patience,
            settle_time=self.dsfn_settle_time,
            prioritized=self.dsfn_prioritized,
            alpha=self.per_alpha,
            beta0=self.per_beta0,
            verbose=self.verbose)

    def fqi(self) -> FqiConfig:
        return FqiConfig(
            hidden_size=self.dqn_hidden_size,
            learning_rate=self.learning_rate,
            adam_epsilon=self.adam_epsilon,
            batch_size=self.dqn_batch_size,
            max_iterations=self.dqn_max_iterations,
            tau=self.dqn_tau,
            stop_threshold=self.dqn_stop_threshold,
            eval_every=self.dqn_eval_every,
            stop_patience=self.dqn_stop_patience,
            settle_time=self.dqn_settle_time,
            prioritized=self.dqn_prioritized,
            alpha=self.per_alpha,
            beta0=self.per_beta0,
            temperature=self.policy_temperature,
            divergence_patience=self.divergence_patience,
            verbose=self.verbose)

    def irl(self) -> IrlConfig:
        return IrlConfig(max_iterations=self.irl_max_iterations,
                         margin_threshold=self.irl_margin_threshold,
                         matching_drop=self.irl_matching_drop)

    def expert(self) -> ExpertConfig:
        return ExpertConfig(gamma=self.gamma,
                            learning_rate=self.expert_learning_rate,
                            max_steps=self.expert_max_steps,
                            eval_episodes=self.eval_episodes,
                            verbose=self.verbose)


def load_config(path: Optional[str] = None,
                **overrides) -> ExperimentConfig:
    """
    Builds an `ExperimentConfig` from the defaults, the flat JSON or YAML file
    at `path` (if any) and keyword overrides, in that order. Overrides that
    are None are ignored.
    """
    mapping = {}
    if path:
        with open(path) as f:
            mapping = yaml.safe_load(f) or {}
        if not isinstance(mapping, dict):
            raise ConfigurationError(f'{path} does not hold a flat mapping')
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(mapping)


def output_directory() -> str:
    """
    The root directory for all outputs: `$DSFN_IRL_OUTPUT` if set, otherwise
    `output.directory` from the `dsfn_irl` configuration, otherwise `output`.
    """
    if os.environ.get('DSFN_IRL_OUTPUT'):
        return os.environ['DSFN_IRL_OUTPUT']
    config = confidence.load_name('dsfn_irl')
    return config.get('output.directory', default='output')


def stream_seed(config: ExperimentConfig, stream: str, *keys: int) \
        -> int:
    return int(derive_rng(config.seed, stream, *keys).integers(2 ** 31 - 1))


@dataclass
class Experiment:
    config: ExperimentConfig
    trial: int
    param_set: str = 'default'

    def __str__(self):
        """
        Converts the configuration of this experiment to a string that can be
        used to generate file names for example.
        """
        env = self.config.environment.name.lower()
        return '_'.join(map(str, [self.config.method, env,
                                  self.config.episodes, self.param_set,
                                  self.config.seed, self.trial]))


class ExperimentalSetup:
    """
    The cartesian product of environments, episode budgets, methods and
    parameter sets, repeated for `num_trials` trials. Names that are not given
    are taken from the `current_set_up` entries in `params.py`.
    """

    def __init__(self,
                 env_names: Optional[List[str]] = None,
                 episode_budgets: Optional[List[int]] = None,
                 method_names: Optional[List[str]] = None,
                 param_names: Optional[List[str]] = None,
                 num_trials: Optional[int] = None,
                 base_config: Optional[ExperimentConfig] = None):
        self.envs = self._get_envs(env_names)
        self.episode_budgets = self._get_episodes(episode_budgets)
        self.methods = self._get_methods(method_names)
        self.params = self._get_params(param_names)
        self.base_config = base_config or ExperimentConfig()
        self.num_trials = num_trials or TRIALS
        self.experiments = self.prepare_experiments()

    @property
    def name(self) -> str:
        return config_hash({'envs': self.envs,
                            'episodes': self.episode_budgets,
                            'methods': self.methods,
                            'params': [p for p, _ in self.params],
                            'trials': self.num_trials,
                            'base': self.base_config.to_dict()})

    def prepare_experiments(self) -> List[Experiment]:
        """
        Returns a list of all experiments that fall under this setup, ordered
        by configuration and then by trial.

        :return: List[Experiment]
        """
        experiments = []
        for env in self.envs:
            for episodes in self.episode_budgets:
                for method in self.methods:
                    for param_set, overrides in self.params:
                        config = ExperimentConfig.from_dict({
                            **self.base_config.to_dict(),
                            **overrides,
                            'env': env,
                            'episodes': episodes,
                            'method': method,
                            'trials': self.num_trials,
                        })
                        for trial in range(self.num_trials):
                            experiments.append(
                                Experiment(config, trial, param_set))
        return experiments

    def __iter__(self) -> Iterator[Experiment]:
        return iter(self.experiments)

    def __len__(self) -> int:
        return len(self.experiments)

    @staticmethod
    def _get_envs(env_names: Optional[List[str]] = None) -> List[str]:
        if not env_names:
            env_names = ENVS['current_set_up']
        return [ENVS['all'].get(e, e) for e in env_names]

    @staticmethod
    def _get_episodes(budgets: Optional[List[int]] = None) -> List[int]:
        if not budgets:
            budgets = EPISODES['current_set_up']
        return [int(b) for b in budgets]

    @staticmethod
    def _get_methods(method_names: Optional[List[str]] = None) -> List[str]:
        if not method_names:
            method_names = METHODS['current_set_up']
        return [METHODS['all'].get(m, m) for m in method_names]

    @staticmethod
    def _get_params(param_names: Optional[List[str]] = None) \
            -> List[Tuple[str, Dict[str, Any]]]:
        """
        Parses a list of PARAMS configuration names and returns the
        corresponding overrides. If no names are given, the ones specified
        under `PARAMS['current_set_up']` are used.
        """
        if not param_names:
            param_names = PARAMS['current_set_up']
        return [(key, PARAMS['all'][key]) for key in param_names]


@dataclass
class ExpertBundle:
    policy: StochasticPolicy
    expert_return: float
    expert_standard_error: float


def expert_cache_path(config: ExperimentConfig, directory: str) -> str:
    env = config.environment.name.lower()
    return os.path.join(directory, 'experts',
                        f'expert-{env}_{config.seed}_{config.expert_hash}.json')


def get_expert(config: ExperimentConfig,
               env: ControlEnv,
               directory: str) -> ExpertBundle:
    """
    Returns the demonstrating expert for `config.env` and `config.seed`. The
    gridworld expert is exact; the control experts are trained with online
    DQN once and then loaded from the cache.
    """
    eval_seed = stream_seed(config, 'evaluate', 0)
    if isinstance(env, GridWorld):
        policy = env.expert()
    else:
        path = expert_cache_path(config, directory)
        if config.expert_cache and os.path.exists(path):
            logging.info(f'Loading cached expert from {path}')
            policy = QNet.load(path).policy()
        else:
            result = online_dqn_expert(env, config.expert(),
                                       stream_seed(config, 'expert'))
            result.net.save(path)
            policy = result.policy
    evaluation = evaluate_rollout(env, policy, config.eval_episodes,
                                  eval_seed, greedy=True)
    return ExpertBundle(policy, evaluation.mean, evaluation.standard_error)


def load_or_generate_batch(config: ExperimentConfig,
                           env: ControlEnv,
                           expert: StochasticPolicy,
                           trial: int) -> Dataset:
    """
    Reads the batch from `config.dataset` if set; otherwise rolls out the
    greedy expert for `config.episodes` episodes.
    """
    if config.dataset:
        return Dataset.from_csv(config.dataset)
    return generate_batch(env, expert, config.episodes,
                          stream_seed(config, 'generate', trial), greedy=True)


@dataclass
class PolicyCheckpoint:
    """
    Everything needed to save a learned policy: a network or linear
    coefficients plus what is needed to rebuild its features.
    """
    kind: str
    net: Any = None
    temperature: float = 0.
    coefficients: Optional[np.ndarray] = None
    basis: Optional[FeatureMap] = None
    tril: Optional[TrilNet] = None


def save_policy(checkpoint: PolicyCheckpoint, path: str):
    basename, _ = os.path.splitext(path)
    if checkpoint.kind == 'tril':
        checkpoint.net.save(path)
    elif checkpoint.kind == 'qnet':
        checkpoint.net.save(path, checkpoint.temperature)
    elif checkpoint.kind == 'linear':
        meta = {'kind': 'linear',
                'coefficients': checkpoint.coefficients.tolist()}
        if isinstance(checkpoint.basis, RbfFeatureMap):
            basis = checkpoint.basis
            meta['basis'] = {'type': 'rbf',
                             'data_min': basis.scaler.data_min_.tolist(),
                             'data_max': basis.scaler.data_max_.tolist(),
                             'centers': basis.centers.tolist(),
                             'bandwidths': list(basis.bandwidths),
                             'action_count': basis.action_count}
        else:
            tril_path = f'{basename}_tril.json'
            checkpoint.tril.save(tril_path)
            meta['basis'] = {'type': 'tril',
                             'tril': os.path.basename(tril_path)}
        write_json(meta, path)
    else:
        raise ConfigurationError(f'Unknown policy kind {checkpoint.kind}')


def load_policy(path: str) -> StochasticPolicy:
    """
    Rebuilds a policy saved with `save_policy()`.
    """
    meta = read_json(path)
    if meta['kind'] == 'tril':
        return TrilNet.load(path).policy()
    if meta['kind'] == 'qnet':
        return QNet.load(path).policy(meta['temperature'])
    if meta['kind'] == 'linear':
        spec = meta['basis']
        if spec['type'] == 'rbf':
            scaler = MinMaxScaler().fit(np.array([spec['data_min'],
                                                  spec['data_max']]))
            basis = RbfFeatureMap(scaler, np.array(spec['centers']),
                                  spec['bandwidths'], spec['action_count'])
        else:
            directory = os.path.dirname(os.path.abspath(path))
            tril = TrilNet.load(os.path.join(directory, spec['tril']))
            basis = tril_basis(tril.encoder())
        return linear_q_policy(basis, np.array(meta['coefficients']))
    raise ConfigurationError(f'Unknown policy kind {meta["kind"]}')


@dataclass
class MethodResult:
    policies: List[StochasticPolicy]
    checkpoints: List[PolicyCheckpoint]
    margins: List[float]
    best_iteration: int = 0
    irl: Optional[IrlResult] = None
    flag: str = ''


def run_tril_dsfn(config: ExperimentConfig,
                  experiment_trial: int,
                  trial_directory: str,
                  dataset: Dataset,
                  train: Dataset,
                  val: Dataset,
                  tril: TrilNet,
                  encoder: FeatureEncoder) -> MethodResult:
    checkpoints = [PolicyCheckpoint('tril', tril)]
    dsfn_nets: List[DsfnNet] = []
    initial_states = dataset.initial_states

    def estimate_mu(policy: StochasticPolicy, i: int):
        initial = dsfn_nets[-1] if config.dsfn_warm_start and dsfn_nets \
            else None
        result = train_dsfn(train, val, policy, encoder, config.gamma,
                            config.dsfn(),
                            derive_rng(config.seed, 'dsfn', experiment_trial,
                                       i),
                            initial=initial)
        dsfn_nets.append(result.net)
        append_output([{'irl_iteration': i, **row} for row in result.curve],
                      os.path.join(trial_directory, 'dsfn_curves.csv'))
        return overall_mu(result.net, initial_states, policy), \
            not result.converged

    def solve_mdp(weights: np.ndarray, i: int):
        result = batch_q_solver(train, val, weights, encoder, config.gamma,
                                config.fqi(),
                                derive_rng(config.seed, 'solver',
                                           experiment_trial, i))
        checkpoints.append(PolicyCheckpoint('qnet', result.net,
                                            config.policy_temperature))
        append_output([{'irl_iteration': i, **row} for row in result.curve],
                      os.path.join(trial_directory, 'solver_curves.csv'))
        return result.policy, result.flagged

    irl = batch_irl(dataset, tril.policy(), encoder, config.gamma,
                    estimate_mu, solve_mdp, config.irl(), val=val)
    return MethodResult(irl.policies, checkpoints,
                        [r.margin for r in irl.history.records],
                        irl.best_iteration, irl,
                        'irl_iteration_flagged' if irl.flagged else '')


def run_lstd_mu_lspi(config: ExperimentConfig,
                     experiment_trial: int,
                     dataset: Dataset,
                     val: Dataset,
                     tril: TrilNet,
                     encoder: FeatureEncoder) -> MethodResult:
    if config.baseline_features == 'rbf':
        features = RbfFeatureMap.fit(
            dataset.states, encoder.action_count, config.env,
            config.rbf_centers,
            rng=derive_rng(config.seed, 'baseline', experiment_trial))
        basis: FeatureMap = features
    else:
        features = encoder
        basis = tril_basis(encoder)
    checkpoints = [PolicyCheckpoint('tril', tril)]
    initial_states = dataset.initial_states
    previous: List[LspiResult] = []

    def estimate_mu(policy: StochasticPolicy, i: int):
        model = lstd_mu(dataset, policy, basis, features, config.gamma,
                        config.lstd_ridge)
        return model.overall(initial_states, policy), False

    def solve_mdp(weights: np.ndarray, i: int):
        result = lspi(dataset, weights, basis, features, config.gamma,
                      config.lstd_ridge, config.lspi_max_iterations,
                      previous[-1].policy if previous else None)
        previous.append(result)
        checkpoints.append(PolicyCheckpoint('linear',
                                            coefficients=result.coefficients,
                                            basis=basis, tril=tril))
        return result.policy, result.flagged

    irl = batch_irl(dataset, tril.policy(), features, config.gamma,
                    estimate_mu, solve_mdp, config.irl(), val=val)
    return MethodResult(irl.policies, checkpoints,
                        [r.margin for r in irl.history.records],
                        irl.best_iteration, irl,
                        'irl_iteration_flagged' if irl.flagged else '')


def perform_experiment(experiment: Experiment,
                       directory: str) -> List[MetricsRecord]:
    """
    Runs a single trial with pipeline:
    - Train (or load) the expert and collect the batch
    - Train TRIL on the batch
    - Run the chosen method without touching the simulator
    - Evaluate the policy of every IRL iteration with rollouts
    """
    config, trial = experiment.config, experiment.trial
    env = config.environment.make()
    expert = get_expert(config, env, directory)
    dataset = load_or_generate_batch(config, env, expert.policy, trial)
    train, val = split_train_val(dataset, config.train_ratio,
                                 stream_seed(config, 'split', trial))
    trial_directory = os.path.join(directory, str(experiment))

    with batch_only():
        result = train_tril(train, val, env.spec.action_count, config.tril(),
                            derive_rng(config.seed, 'tril', trial))
        tril, encoder = result.net, result.encoder
        tril.save(os.path.join(trial_directory, 'tril.json'))
        if config.method in ('imitation_only', 'imitation_unregularized'):
            method = MethodResult([tril.policy()],
                                  [PolicyCheckpoint('tril', tril)],
                                  [float('nan')])
        elif config.method == 'tril_dsfn':
            method = run_tril_dsfn(config, trial, trial_directory, dataset,
                                   train, val, tril, encoder)
        else:
            method = run_lstd_mu_lspi(config, trial, dataset, val, tril,
                                      encoder)
        if method.irl is not None:
            method.irl.history.save(
                os.path.join(trial_directory, 'irl_history.csv'),
                os.path.join(trial_directory, 'irl_history.json'))
        save_policy(method.checkpoints[method.best_iteration],
                    os.path.join(trial_directory, 'policy.json'))

    matching_data = val if len(val) > 0 else train
    top = min(3, env.spec.action_count)
    records = []
    for i, policy in enumerate(method.policies):
        evaluation = evaluate_rollout(env, policy, config.eval_episodes,
                                      stream_seed(config, 'evaluate', trial, i),
                                      greedy=config.eval_greedy)
        records.append(MetricsRecord(
            method=config.method,
            env=config.env,
            episodes=config.episodes,
            trial=trial,
            iteration=i,
            selected=int(i == method.best_iteration),
            margin=method.margins[i],
            mean_return=evaluation.mean,
            standard_error=evaluation.standard_error,
            top1_matching=action_matching(policy, matching_data, 1),
            top3_matching=action_matching(policy, matching_data, top),
            expert_return=expert.expert_return,
            flag=method.flag,
            wall_time=0.
        ))
    return records


def failed_record(experiment: Experiment, error: Exception) -> MetricsRecord:
    config = experiment.config
    nan = float('nan')
    return MetricsRecord(config.method, config.env, config.episodes,
                         experiment.trial, 0, 1, nan, nan, nan, nan, nan, nan,
                         flag=f'{type(error).__name__}: {error}')


@dataclass
class RunResult:
    records: List[MetricsRecord]
    directory: str
    flagged: bool = field(init=False)

    def __post_init__(self):
        self.flagged = any(r.flag for r in self.records)


def run_setup(setup: ExperimentalSetup,
              directory: Optional[str] = None) -> RunResult:
    """
    Runs every experiment of `setup`. A trial that raises is recorded with a
    flag and the run continues. Writes the metrics, timings, summary and
    plot files to the output directory of the setup.
    """
    directory = directory or os.path.join(output_directory(), setup.name)
    os.makedirs(directory, exist_ok=True)
    write_json(ExperimentConfig.schema(),
               os.path.join(directory, 'schema.json'))
    write_json(setup.base_config.to_dict(),
               os.path.join(directory, 'config.json'))
    records, timings = [], []
    for experiment in tqdm(setup, desc='trials'):
        start = time.perf_counter()
        try:
            trial_records = perform_experiment(experiment, directory)
        except Exception as e:
            logging.warning(f'Trial {experiment} failed: {e}')
            trial_records = [failed_record(experiment, e)]
        elapsed = time.perf_counter() - start
        for r in trial_records:
            r.wall_time = elapsed
        timings.append({'experiment': str(experiment), 'wall_time': elapsed})
        records.extend(trial_records)

    write_output(records_to_dataframe(records),
                 os.path.join(directory, 'metrics.csv'))
    write_output(create_dataframe(timings),
                 os.path.join(directory, 'timings.csv'))
    summary, plot, metadata = emit_summary(records)
    write_output(summary, os.path.join(directory, 'summary.csv'))
    write_output(plot, os.path.join(directory, 'plot.csv'))
    write_json(metadata, os.path.join(directory, 'plot.json'))
    return RunResult(records, directory)


def run_experiment(config: ExperimentConfig,
                   directory: Optional[str] = None) -> RunResult:
    """
    Runs `config.trials` trials of the single configuration `config`.
    """
    setup = ExperimentalSetup([config.env], [config.episodes],
                              [config.method], ['default'], config.trials,
                              base_config=config)
    return run_setup(setup, directory)
