from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from dsfn_irl.data import Dataset
from dsfn_irl.exceptions import UsageError
from dsfn_irl.policies import StochasticPolicy

# Columns of the metrics CSV. `wall_time` is left out so identical runs
# produce identical files; it is written to a separate timings file.
METRIC_COLUMNS = ('method', 'env', 'episodes', 'trial', 'iteration',
                  'selected', 'margin', 'mean_return', 'standard_error',
                  'top1_matching', 'top3_matching', 'expert_return', 'flag')


@dataclass
class MetricsRecord:
    """
    One evaluated policy: the policy of IRL iteration `iteration` in trial
    `trial`. `selected` marks the policy the method returned. `flag` is empty
    unless something went wrong in the trial.
    """
    method: str
    env: str
    episodes: int
    trial: int
    iteration: int
    selected: int
    margin: float
    mean_return: float
    standard_error: float
    top1_matching: float
    top3_matching: float
    expert_return: float
    flag: str = ''
    wall_time: float = 0.

    def to_row(self) -> Dict[str, Any]:
        row = asdict(self)
        return {k: row[k] for k in METRIC_COLUMNS}


def action_matching(policy: StochasticPolicy,
                    dataset: Dataset,
                    k: int = 1) -> float:
    """
    Fraction of transitions in `dataset` whose logged action is among the `k`
    most probable actions of `policy` (ties go to the lowest action index).
    """
    if not 1 <= k <= policy.action_count:
        raise UsageError(f'k must lie in [1, {policy.action_count}], got {k}')
    if len(dataset) == 0:
        return float('nan')
    top = policy.top_k(dataset.states, k)
    return float(np.mean(np.any(top == dataset.actions[:, None], axis=1)))


def standard_error(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def records_to_dataframe(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    if not records:
        return pd.DataFrame(columns=list(METRIC_COLUMNS))
    df = pd.DataFrame([r.to_row() for r in records])
    return df.sort_values(['method', 'env', 'episodes', 'trial', 'iteration'],
                          kind='mergesort').reset_index(drop=True)


def summarize_dataframe(df: pd.DataFrame) -> pd.DataFrame:
    """
    Aggregates the selected policy of every trial per (method, env, episodes):
    mean return over trials with its standard error, mean top-k matching and
    the mean number of IRL iterations that were evaluated.
    """
    iterations = df.groupby(['method', 'env', 'episodes', 'trial'])[
        'iteration'].max().add(1).rename('iterations').reset_index()
    selected = df[df['selected'] == 1].merge(
        iterations, on=['method', 'env', 'episodes', 'trial'])
    rows = []
    for (method, env, episodes), group in selected.groupby(
            ['method', 'env', 'episodes'], sort=True):
        rows.append({
            'method': method,
            'env': env,
            'episodes': episodes,
            'trials': len(group),
            'mean_return': float(group['mean_return'].mean()),
            'standard_error': standard_error(group['mean_return']),
            'mean_iterations': float(group['iterations'].mean()),
            'top1_matching': float(group['top1_matching'].mean()),
            'top3_matching': float(group['top3_matching'].mean()),
            'expert_return': float(group['expert_return'].mean()),
            'flagged_trials': int((group['flag'].fillna('') != '').sum()),
        })
    return pd.DataFrame(rows)


def long_format(summary: pd.DataFrame) -> pd.DataFrame:
    """
    One row per (method, env, episodes, metric) with the metric value and its
    standard error, ready for a line plot with episodes on the x-axis.
    """
    rows = []
    for _, row in summary.iterrows():
        for metric in ('mean_return', 'top1_matching', 'top3_matching',
                       'mean_iterations'):
            rows.append({
                'method': row['method'],
                'env': row['env'],
                'episodes': row['episodes'],
                'metric': metric,
                'value': row[metric],
                'standard_error': row['standard_error']
                if metric == 'mean_return' else 0.,
            })
    return pd.DataFrame(rows)


def emit_summary(records: Sequence[MetricsRecord]) \
        -> Tuple[pd.DataFrame, pd.DataFrame, Dict[str, Any]]:
    """
    Turns the metrics of a run into a summary table, a long-format table for
    plotting and the plot metadata.
    """
    if not records:
        raise UsageError('At least one metrics record is required')
    summary = summarize_dataframe(records_to_dataframe(records))
    metadata = {
        'x': 'episodes',
        'x_scale': 'log',
        'y': 'mean_return',
        'error_bars': 'one standard error over trials',
        'facets': ['env'],
        'series': 'method',
        'columns': [f.name for f in fields(MetricsRecord)
                    if f.name != 'wall_time'],
    }
    return summary, long_format(summary), metadata


def records_from_dataframe(df: pd.DataFrame) -> List[MetricsRecord]:
    df = df.fillna({'flag': ''})
    return [MetricsRecord(**{k: row[k] for k in METRIC_COLUMNS})
            for _, row in df.iterrows()]
