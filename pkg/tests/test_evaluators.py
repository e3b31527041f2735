import math

import numpy as np
import pytest

from dsfn_irl.data import Dataset
from dsfn_irl.evaluators import (METRIC_COLUMNS, MetricsRecord,
                                 action_matching, emit_summary,
                                 records_from_dataframe, records_to_dataframe,
                                 standard_error)
from dsfn_irl.exceptions import UsageError
from dsfn_irl.policies import ScorePolicy, UniformPolicy


def logged(actions) -> Dataset:
    n = len(actions)
    return Dataset(np.zeros((n, 1)), actions, np.zeros((n, 1)),
                   np.zeros(n, dtype=bool), np.zeros(n), np.arange(n))


def record(method='tril_dsfn', env='CartPole-v0', episodes=10, trial=0,
           iteration=0, selected=1, mean_return=100., flag='') \
        -> MetricsRecord:
    return MetricsRecord(method, env, episodes, trial, iteration, selected,
                         .5, mean_return, 1., .9, 1., 200., flag, 3.)


def test_action_matching_exact():
    def scores(states):
        return np.tile([0., 1., 0.], (len(states), 1))

    policy = ScorePolicy(scores, 3, 0.)
    assert action_matching(policy, logged([1, 1, 1])) == 1.
    assert action_matching(policy, logged([1, 0])) == .5


def test_action_matching_top_k_covers_all_actions():
    dataset = logged([0, 1, 2, 2])
    assert action_matching(UniformPolicy(3), dataset, 3) == 1.
    # Ties go to the lowest action index.
    assert action_matching(UniformPolicy(3), dataset, 1) == .25


def test_action_matching_validates_k():
    with pytest.raises(UsageError):
        action_matching(UniformPolicy(3), logged([0]), 0)
    with pytest.raises(UsageError):
        action_matching(UniformPolicy(3), logged([0]), 4)


def test_action_matching_empty_dataset():
    assert math.isnan(action_matching(UniformPolicy(2), Dataset.empty(1)))


def test_standard_error():
    assert standard_error([3., 3., 3.]) == 0.
    assert standard_error([1.]) == 0.
    assert standard_error([0., 2.]) == pytest.approx(1.)


def test_metrics_row_leaves_out_wall_time():
    row = record().to_row()
    assert tuple(row) == METRIC_COLUMNS
    assert 'wall_time' not in row


def test_records_are_sorted():
    df = records_to_dataframe([record(trial=1), record(trial=0)])
    assert list(df['trial']) == [0, 1]
    assert list(records_to_dataframe([]).columns) == list(METRIC_COLUMNS)


def test_summary_has_one_row_per_configuration():
    records = []
    for method in ('tril_dsfn', 'imitation_only'):
        for env in ('CartPole-v0', 'Acrobot-v1'):
            for episodes in (1, 10, 100):
                for trial in range(3):
                    records.append(record(method, env, episodes, trial,
                                          iteration=0, selected=0))
                    records.append(record(method, env, episodes, trial,
                                          iteration=1, mean_return=trial))
    summary, plot, metadata = emit_summary(records)
    assert len(summary) == 2 * 2 * 3
    assert set(summary['trials']) == {3}
    assert set(summary['mean_iterations']) == {2.}
    assert set(summary['mean_return']) == {1.}
    assert set(summary['standard_error']) == {standard_error([0., 1., 2.])}
    assert len(plot) == 4 * len(summary)
    assert metadata['x'] == 'episodes'
    assert metadata['x_scale'] == 'log'
    assert 'wall_time' not in metadata['columns']


def test_summary_counts_flagged_trials():
    summary, _, _ = emit_summary([record(trial=0, flag='diverged'),
                                  record(trial=1)])
    assert summary['flagged_trials'][0] == 1


def test_emit_summary_requires_records():
    with pytest.raises(UsageError):
        emit_summary([])


def test_records_from_dataframe():
    records = [record(trial=0), record(trial=1, flag='lspi_oscillation')]
    restored = records_from_dataframe(records_to_dataframe(records))
    assert [r.to_row() for r in restored] == [r.to_row() for r in records]
