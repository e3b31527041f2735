import argparse
import hashlib
import json
import os
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd

SUBCOMMANDS = ('expert', 'generate', 'train-tril', 'irl', 'evaluate', 'run',
               'summarize')

# Every stochastic draw of a trial comes from one of these streams. A stream
# is derived from the root seed, the trial index and the stream id, so adding
# draws to one phase never shifts the random numbers of another.
STREAMS = {
    'expert': 0,
    'generate': 1,
    'split': 2,
    'tril': 3,
    'dsfn': 4,
    'solver': 5,
    'baseline': 6,
    'evaluate': 7,
}


def derive_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """
    Returns an independent random generator for the named `stream`. Extra
    integer `keys` (trial index, IRL iteration, ...) further specialize the
    stream.

    :param seed: int, the root seed of the run
    :param stream: str, one of the keys of `STREAMS`
    :param keys: int
    :return: np.random.Generator
    """
    if stream not in STREAMS:
        raise ValueError(f'Unknown random stream {stream}')
    sequence = np.random.SeedSequence(
        entropy=seed,
        spawn_key=(STREAMS[stream], *keys)
    )
    return np.random.default_rng(sequence)


def md5(text: str) -> str:
    return hashlib.md5(text.encode()).hexdigest()


def config_hash(config: Mapping[str, Any]) -> str:
    """
    Returns a short, order-independent hash of a flat configuration mapping.
    """
    return md5(json.dumps(dict(config), sort_keys=True, default=str))[:10]


def checksum(*arrays: np.ndarray) -> str:
    """
    Returns a hex digest of the raw bytes of the given arrays. Used to verify
    that frozen parameters are never mutated.
    """
    h = hashlib.sha256()
    for array in arrays:
        h.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    return h.hexdigest()


def parser_setup(config_fields: Dict[str, type]) -> argparse.ArgumentParser:
    """
    Function that sets the different CL flags that can be used to run the
    project. Every subcommand accepts `--config` (a flat JSON or YAML file)
    and one flag per configuration key, e.g. `--dsfn-tau` for `dsfn_tau`.
    Flags override values from the file.

    :param config_fields: Dict[str, type], the configuration keys and types
    :return: parser (ArgumentParser object)
    """
    parser = argparse.ArgumentParser(
        description='Batch inverse reinforcement learning experiments')
    subparsers = parser.add_subparsers(dest='command', required=True)

    for command in SUBCOMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument('--config', '-c',
                         help='Path to a flat JSON/YAML configuration file')
        if command == 'evaluate':
            sub.add_argument('--policy', '-p', required=True,
                             help='Checkpoint (.json) of the policy to '
                                  'evaluate, as written by `train-tril` or '
                                  '`irl`')
        if command == 'run':
            sub.add_argument('--grid', action='store_true',
                             help='Expand the `current_set_up` grids of '
                                  'params.py around the configuration')
        if command == 'summarize':
            sub.add_argument('--metrics', '-m', nargs='+', required=True,
                             help='One or more metrics CSV files')
            continue
        for name, field_type in config_fields.items():
            flag = '--' + name.replace('_', '-')
            if field_type is bool:
                sub.add_argument(flag, dest=name, default=None,
                                 type=lambda v: v.lower() in ('1', 'true',
                                                              'yes'))
            else:
                sub.add_argument(flag, dest=name, default=None,
                                 type=field_type)
    return parser


def create_dataframe(records: Iterable[Any]) -> pd.DataFrame:
    """
    Turns a sequence of dataclass records (or plain dicts) into a DataFrame
    whose columns follow the field order of the records.
    """
    rows = [asdict(r) if is_dataclass(r) else dict(r) for r in records]
    return pd.DataFrame(rows)


def write_output(df: pd.DataFrame, path: str):
    """
    Writes `df` as CSV. The float format is fixed so that identical runs
    produce byte-identical files.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as f:
        df.to_csv(f, header=True, index=False, float_format='%.10g')


def append_output(rows: Sequence[Dict[str, Any]], path: str):
    """
    Appends `rows` to the CSV at `path`, writing a header if the file does not
    exist yet.
    """
    if not rows:
        return
    df = pd.DataFrame(list(rows))
    exists = os.path.exists(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'a', newline='') as f:
        df.to_csv(f, header=not exists, index=False, float_format='%.10g')


def write_json(obj: Any, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_to_builtin)


def read_json(path: str) -> Any:
    with open(path) as f:
        return json.load(f)


def _to_builtin(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if is_dataclass(obj):
        return asdict(obj)
    raise TypeError(f'Object of type {type(obj)} is not JSON serializable')


def as_list(values: Any) -> List[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]
