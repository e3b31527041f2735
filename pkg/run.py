#!/usr/bin/env python3
import os
import sys

import pandas as pd
from absl import logging

from dsfn_irl.data import split_train_val
from dsfn_irl.envs import batch_only
from dsfn_irl.evaluators import (emit_summary, records_from_dataframe,
                                 records_to_dataframe)
from dsfn_irl.experiments import (Experiment, ExperimentConfig,
                                  ExperimentalSetup, get_expert, load_config,
                                  load_or_generate_batch, load_policy,
                                  output_directory, perform_experiment,
                                  run_experiment, run_setup, stream_seed)
from dsfn_irl.solvers import evaluate_rollout
from dsfn_irl.tril import train_tril
from dsfn_irl.utils import derive_rng, parser_setup, write_json, write_output


def expert(config: ExperimentConfig) -> bool:
    env = config.environment.make()
    bundle = get_expert(config, env, output_directory())
    logging.info(f'Expert return on {config.env}: {bundle.expert_return:.2f} '
                 f'+- {bundle.expert_standard_error:.2f}')
    return False


def generate(config: ExperimentConfig) -> bool:
    env = config.environment.make()
    bundle = get_expert(config, env, output_directory())
    dataset = load_or_generate_batch(config, env, bundle.policy, 0)
    path = os.path.join(output_directory(), 'batches',
                        f'{config.environment.name.lower()}_'
                        f'{config.episodes}_{config.seed}.csv')
    dataset.to_csv(path)
    logging.info(f'Wrote {len(dataset)} transitions to {path}')
    return False


def train(config: ExperimentConfig) -> bool:
    env = config.environment.make()
    bundle = get_expert(config, env, output_directory())
    dataset = load_or_generate_batch(config, env, bundle.policy, 0)
    train_set, val = split_train_val(dataset, config.train_ratio,
                                     stream_seed(config, 'split', 0))
    with batch_only():
        result = train_tril(train_set, val, env.spec.action_count,
                            config.tril(), derive_rng(config.seed, 'tril', 0))
    path = os.path.join(output_directory(), 'tril',
                        f'{config.environment.name.lower()}_'
                        f'{config.episodes}_{config.seed}.json')
    result.net.save(path)
    logging.info(f'TRIL stopped after {result.iterations} iterations '
                 f'(best validation loss {result.best_val_loss}); saved to '
                 f'{path}')
    return False


def irl(config: ExperimentConfig) -> bool:
    experiment = Experiment(config, 0)
    directory = os.path.join(output_directory(), 'irl')
    records = perform_experiment(experiment, directory)
    write_output(records_to_dataframe(records),
                 os.path.join(directory, str(experiment), 'metrics.csv'))
    selected = next(r for r in records if r.selected)
    logging.info(f'Selected iteration {selected.iteration}: return '
                 f'{selected.mean_return:.2f} +- {selected.standard_error:.2f}')
    return any(r.flag for r in records)


def evaluate(config: ExperimentConfig, policy: str) -> bool:
    env = config.environment.make()
    result = evaluate_rollout(env, load_policy(policy), config.eval_episodes,
                              stream_seed(config, 'evaluate', 0),
                              greedy=config.eval_greedy)
    logging.info(f'Mean return over {config.eval_episodes} episodes: '
                 f'{result.mean:.2f} +- {result.standard_error:.2f}')
    return False


def run(config: ExperimentConfig, grid: bool) -> bool:
    if grid:
        result = run_setup(ExperimentalSetup(num_trials=config.trials,
                                             base_config=config))
    else:
        result = run_experiment(config)
    logging.info(f'Wrote {len(result.records)} metrics rows to '
                 f'{result.directory}')
    return result.flagged


def summarize(metrics) -> bool:
    records = records_from_dataframe(
        pd.concat([pd.read_csv(path) for path in metrics], ignore_index=True))
    summary, plot, metadata = emit_summary(records)
    directory = os.path.dirname(os.path.abspath(metrics[0]))
    write_output(summary, os.path.join(directory, 'summary.csv'))
    write_output(plot, os.path.join(directory, 'plot.csv'))
    write_json(metadata, os.path.join(directory, 'plot.json'))
    return any(r.flag for r in records)


def main(argv=None) -> int:
    parser = parser_setup(ExperimentConfig.types())
    args = vars(parser.parse_args(argv))
    command = args.pop('command')
    if command == 'summarize':
        flagged = summarize(args['metrics'])
    else:
        policy = args.pop('policy', None)
        grid = args.pop('grid', False)
        config = load_config(args.pop('config'), **args)
        if config.verbose:
            logging.set_verbosity(logging.DEBUG)
        if command == 'expert':
            flagged = expert(config)
        elif command == 'generate':
            flagged = generate(config)
        elif command == 'train-tril':
            flagged = train(config)
        elif command == 'irl':
            flagged = irl(config)
        elif command == 'evaluate':
            flagged = evaluate(config, policy)
        else:
            flagged = run(config, grid)
    return 1 if flagged else 0


if __name__ == '__main__':
    logging.set_verbosity(logging.INFO)
    sys.exit(main())
