"""CSV and manifest writers.

Result CSVs hold nothing time-dependent so reruns with the same config and seed
are byte-identical; timestamps, wall time and memory live in the manifest.
"""
import csv
import io
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import psutil

from config.config import AppConfig
from config.experiment import ExperimentConfig
from .experiments import ExperimentResult, ResultRow

RESULT_COLUMNS = ("schema_version", "name", "value", "std_error", "method", "n_replicas", "target", "anchor")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_output_dir(app: AppConfig, config: Optional[ExperimentConfig] = None) -> Path:
    """Environment override, then the experiment file, then the app default"""
    env_dir = os.environ.get(app.output_dir_env)
    if env_dir:
        return Path(env_dir)
    if config is not None and config.output is not None:
        return config.output
    return app.output_dir


def results_csv(rows: Iterable[ResultRow], schema_version: int) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow([_cell(v) for v in (schema_version, row.name, row.value, row.std_error, row.method,
                                             row.n_replicas, row.target, row.anchor)])
    return buffer.getvalue()


def table_csv(header: Sequence[str], rows: Iterable[tuple]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(float(v) if isinstance(v, (int, float)) else v) for v in row])
    return buffer.getvalue()


class ResultWriter:
    """Writes one experiment's CSVs and manifest into a directory"""

    def __init__(self, output_dir: Path, schema_version: int = 1):
        self.output_dir = Path(output_dir)
        self.schema_version = schema_version
        self.logger = logging.getLogger(__name__)

    def paths(self, experiment: str) -> Dict[str, Path]:
        return {
            "results": self.output_dir / f"{experiment}_results.csv",
            "manifest": self.output_dir / f"{experiment}_manifest.json",
            "events": self.output_dir / f"{experiment}_events.jsonl",
        }

    def write(self, config: ExperimentConfig, result: ExperimentResult, wall_time: float,
              started_at: datetime, workers: int) -> Dict[str, Path]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        paths = self.paths(result.experiment)
        paths["results"].write_text(results_csv(result.rows, self.schema_version))

        for name, (header, rows) in result.tables.items():
            path = self.output_dir / f"{result.experiment}_{name}.csv"
            path.write_text(table_csv(header, rows))
            paths[f"table_{name}"] = path

        manifest = self.manifest(config, result, wall_time, started_at, workers)
        manifest["files"] = {k: p.name for k, p in paths.items() if k != "manifest" and p.exists()}
        paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.logger.info(f"Wrote {len(result.rows)} rows to {paths['results']}")
        return paths

    def manifest(self, config: ExperimentConfig, result: ExperimentResult, wall_time: float,
                 started_at: datetime, workers: int) -> dict:
        counts = result.replica_counts()
        return {
            "schema_version": self.schema_version,
            "experiment": result.experiment,
            "config": config.raw,
            "seed": config.seed,
            "started_at": started_at.astimezone(timezone.utc).isoformat(),
            "wall_time_seconds": round(wall_time, 3),
            "workers": workers,
            "replicas": {name: n for name, (n, _) in counts.items()},
            "aborted_replicas": {name: a for name, (_, a) in counts.items()},
            "max_aborted": result.n_aborted,
            "environment": config.environment.describe(),
            "perturbation": config.perturbation.describe(),
            "rss_bytes": psutil.Process().memory_info().rss,
        }
