"""
Metrics export: CSV tables plus a YAML run summary.

Files written to the run directory:
    metrics.csv      step, loss, accuracy        (deterministic per seed)
    throughput.csv   step, examples_per_sec, elapsed
    evals.csv        step, success_rate, stderr, rollouts
    summary.yaml     config hash, seeds, results
    config.yaml      the full flat config
"""

import csv
import io
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from core.config import TrainConfig, dump_config
from core.errors import DataError
from training.metrics import RunMetrics


METRICS_COLUMNS = ('step', 'loss', 'accuracy')
THROUGHPUT_COLUMNS = ('step', 'examples_per_sec', 'elapsed')
EVAL_COLUMNS = ('step', 'success_rate', 'stderr', 'rollouts')


def _atomic_write(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(text, encoding='utf-8')
        os.replace(tmp, path)
    except OSError as e:
        raise DataError(f"Could not write {path}: {e}") from e
    return path


def format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return '' if value is None else str(value)


def write_csv(rows: Sequence[Dict], columns: Sequence[str], path: Union[str, Path]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in columns])
    return _atomic_write(Path(path), buffer.getvalue())


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        return []
    try:
        with path.open(newline='', encoding='utf-8') as f:
            return list(csv.DictReader(f))
    except (OSError, csv.Error) as e:
        raise DataError(f"Could not read {path}: {e}") from e


def write_yaml(data: Dict, path: Union[str, Path]) -> Path:
    return _atomic_write(Path(path), yaml.safe_dump(data, sort_keys=True, default_flow_style=False))


def export_metrics(run: RunMetrics, out_dir: Union[str, Path], cfg: Optional[TrainConfig] = None,
                   extra: Optional[Dict] = None) -> Dict[str, Path]:
    """Write every metrics file; re-exporting the same run rewrites identical files."""
    out = Path(out_dir)
    paths = {
        'metrics': write_csv(run.steps, METRICS_COLUMNS, out / 'metrics.csv'),
        'throughput': write_csv(run.throughput, THROUGHPUT_COLUMNS, out / 'throughput.csv'),
        'evals': write_csv(run.evals, EVAL_COLUMNS, out / 'evals.csv'),
    }
    summary = dict(run.summary, **(extra or {}))
    paths['summary'] = write_yaml(summary, out / 'summary.yaml')
    if cfg is not None:
        paths['config'] = _atomic_write(out / 'config.yaml', dump_config(cfg))
    return paths


def load_metrics(out_dir: Union[str, Path]) -> RunMetrics:
    """Read the CSVs and summary of a run directory back."""
    out = Path(out_dir)
    run = RunMetrics()
    for row in read_csv(out / 'metrics.csv'):
        run.record_step(int(row['step']), float(row['loss']), float(row['accuracy']))
    for row in read_csv(out / 'throughput.csv'):
        run.record_throughput(int(row['step']), float(row['examples_per_sec']), float(row['elapsed']))
    for row in read_csv(out / 'evals.csv'):
        run.record_eval(int(row['step']), {'success_rate': float(row['success_rate']),
                                           'stderr': float(row['stderr']),
                                           'rollouts': int(row['rollouts'])})
    summary_path = out / 'summary.yaml'
    if summary_path.exists():
        try:
            run.summary = yaml.safe_load(summary_path.read_text(encoding='utf-8')) or {}
        except (OSError, yaml.YAMLError) as e:
            raise DataError(f"Could not read {summary_path}: {e}") from e
    return run
