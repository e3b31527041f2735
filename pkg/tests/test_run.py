import os

import numpy as np
import pandas as pd
import pytest

from dsfn_irl.envs import SIMULATOR
from dsfn_irl.evaluators import MetricsRecord, records_to_dataframe
from dsfn_irl.experiments import PolicyCheckpoint, save_policy
from dsfn_irl.tril import TrilNet, train_tril
from dsfn_irl.utils import read_json, write_output
import run
from run import main
from tests.src.util import scratch_dir


@pytest.fixture
def scratch():
    yield from scratch_dir('scratch/test_run')


def write_metrics(path: str, flag: str = ''):
    records = [MetricsRecord('imitation_only', 'GridWorld', 1, trial, 0, 1,
                             float('nan'), 1., 0., 1., 1., 1., flag)
               for trial in range(2)]
    write_output(records_to_dataframe(records), path)


def test_summarize(scratch):
    write_metrics(f'{scratch}/a/metrics.csv')
    write_metrics(f'{scratch}/b/metrics.csv')
    assert main(['summarize', '-m', f'{scratch}/a/metrics.csv',
                 f'{scratch}/b/metrics.csv']) == 0
    summary = pd.read_csv(f'{scratch}/a/summary.csv')
    assert list(summary['trials']) == [4]
    assert read_json(f'{scratch}/a/plot.json')['x'] == 'episodes'


def test_summarize_exit_code_on_flags(scratch):
    write_metrics(f'{scratch}/metrics.csv', flag='lspi_oscillation')
    assert main(['summarize', '-m', f'{scratch}/metrics.csv']) == 1


def test_evaluate_saved_policy(scratch):
    net = TrilNet.initialize(25, 4, np.random.default_rng(0), hidden_size=4)
    path = f'{scratch}/policy.json'
    save_policy(PolicyCheckpoint('tril', net), path)
    assert main(['evaluate', '--policy', path, '--env', 'GridWorld',
                 '--eval-episodes', '2']) == 0
    assert os.path.exists(path)


def test_train_tril_locks_the_simulator(scratch, monkeypatch):
    monkeypatch.setenv('DSFN_IRL_OUTPUT', scratch)
    locked = []

    def guarded(*args, **kwargs):
        locked.append(SIMULATOR.locked)
        return train_tril(*args, **kwargs)

    monkeypatch.setattr(run, 'train_tril', guarded)
    assert main(['train-tril', '--env', 'GridWorld', '--episodes', '10',
                 '--tril-hidden-size', '4', '--tril-max-iterations', '20',
                 '--tril-eval-every', '10']) == 0
    assert locked == [True]
    assert not SIMULATOR.locked
