"""How many trials to run for every configuration"""
TRIALS = 5

"""
Parameters to be used in an experiment, different/new sets can be added under
'all'. Every set is a mapping of `ExperimentConfig` keys to values that
override the base configuration. For the input of an experiment the
'current_set_up' list can be updated.
"""
PARAMS = {
    'current_set_up': ['default'],
    'all': {
        # Published network hyperparameters, unchanged.
        'default': {},
        # Prioritized replay for DSFN as well as for the Q-solver.
        'dsfn_per': {
            'dsfn_prioritized': True,
        },
        'dsfn_warm_start': {
            'dsfn_warm_start': True,
        },
        'learned_variance': {
            'transition_variance': 'learned',
        },
        'rbf': {
            'baseline_features': 'rbf',
        },
        'rbf_sampled': {
            'baseline_features': 'rbf',
            'rbf_centers': 'sampled',
        },
        # Small budgets for smoke tests on a laptop.
        'quick': {
            'tril_max_iterations': 2000,
            'dsfn_max_iterations': 2000,
            'dqn_max_iterations': 2000,
            'irl_max_iterations': 3,
            'eval_episodes': 10,
        },
    }
}

"""
Environments to run on. Keys are short names, values the names that
`ExperimentConfig.env` accepts.
"""
ENVS = {
    'current_set_up': ['cartpole'],
    'all': {
        'mountaincar': 'MountainCar-v0',
        'cartpole': 'CartPole-v0',
        'acrobot': 'Acrobot-v1',
        'gridworld': 'GridWorld',
    }
}

"""Numbers of demonstration episodes to collect"""
EPISODES = {
    'current_set_up': [1, 10, 100, 1000],
    'all': [1, 10, 100, 1000],
}

"""
Methods to compare. 'imitation_only' is TRIL without IRL,
'imitation_unregularized' is plain behavioral cloning.
"""
METHODS = {
    'current_set_up': ['tril_dsfn', 'lstd_mu_lspi', 'imitation_only'],
    'all': {
        'tril_dsfn': 'tril_dsfn',
        'lstd_mu_lspi': 'lstd_mu_lspi',
        'imitation_only': 'imitation_only',
        'imitation_unregularized': 'imitation_unregularized',
    }
}
