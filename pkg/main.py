import argparse
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from config.config import AppConfig
from config.experiment import ExperimentConfig, load_experiment
from logic.bus import bus
from logic.coupled_sim import write_event_log
from logic.errors import BusyPerturbError
from logic.experiments import list_experiments, run_experiment
from logic.output import ResultWriter, resolve_output_dir


class BusyPerturbApp:
    def __init__(self, config_app: Optional[AppConfig] = None):
        self.config_app = config_app or AppConfig()
        self.config: Optional[ExperimentConfig] = None
        self.logger = logging.getLogger(__name__)

    def run(self, config_path: Path, workers: Optional[int] = None) -> dict:
        # 1. Load and validate the experiment (no files written on failure)
        self._load(config_path, workers)

        # 2. Wire progress events into the log for the length of the run
        self._setup_progress()

        # 3. Run the experiment
        started_at = datetime.now()
        start = time.perf_counter()
        try:
            result = run_experiment(self.config)
        finally:
            self._teardown_progress()
        wall_time = time.perf_counter() - start

        # 4. Write results and manifest
        writer = ResultWriter(resolve_output_dir(self.config_app, self.config), self.config_app.csv_schema_version)
        if self.config.event_log:
            self._write_event_log(writer)
        paths = writer.write(self.config, result, wall_time, started_at,
                             self.config.simulation.resolved_workers)
        self.logger.info(f"{self.config.experiment} finished in {wall_time:.1f}s")
        return paths

    def validate(self, config_path: Path) -> ExperimentConfig:
        self._load(config_path, None)
        self.logger.info(f"{config_path} is valid ({self.config.experiment})")
        return self.config

    def _load(self, config_path: Path, workers: Optional[int]):
        config = load_experiment(config_path)
        if workers is not None:
            config = replace(config, simulation=replace(config.simulation, workers=workers))
        self.config = config

    def _setup_progress(self):
        """Progress events logged at DEBUG"""
        bus.on("replicas:chunk_done", self._on_chunk_done)
        bus.on("sweep:point_done", self._on_sweep_point)

    def _teardown_progress(self):
        bus.off("replicas:chunk_done", self._on_chunk_done)
        bus.off("sweep:point_done", self._on_sweep_point)

    def _on_chunk_done(self, label: str = "", done: int = 0, total: int = 0, **_):
        self.logger.debug(f"{label}: {done}/{total} replicas")

    def _on_sweep_point(self, eps: float = 0.0, index: int = 0, total: int = 0, **_):
        self.logger.debug(f"sweep point {index + 1}/{total} (eps={eps:g}) done")

    def _write_event_log(self, writer: ResultWriter):
        path = writer.paths(self.config.experiment)["events"]
        path.parent.mkdir(parents=True, exist_ok=True)
        params = self.config.queue
        if params.epsilon == 0:
            params = params.with_epsilon(max(self.config.eps_grid))
        # one line per replica; capped so the log stays readable
        n = min(self.config.n_coefficient_replicas, 10_000)
        write_event_log(path, params, self.config.environment, self.config.perturbation, n, self.config.seed,
                        keys=(90,))


def _setup_logging(debug: bool):
    """Setup logging system"""
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="busyperturb",
                                     description="Busy periods of an M/M/1 queue with a randomly perturbed service rate")
    parser.add_argument("--debug", action="store_true", help="verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file")
    run.add_argument("config", type=Path)
    run.add_argument("--workers", type=int, default=None, help="worker processes (default: logical CPUs)")

    validate = sub.add_parser("validate", help="check an experiment file without running it")
    validate.add_argument("config", type=Path)

    sub.add_parser("list-experiments", help="print the experiment names")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    app_config = replace(AppConfig(), debug=args.debug)
    _setup_logging(app_config.debug)
    app = BusyPerturbApp(app_config)

    try:
        if args.command == "list-experiments":
            for name in list_experiments():
                print(name)
        elif args.command == "validate":
            app.validate(args.config)
        else:
            app.run(args.config, args.workers)
    except BusyPerturbError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logging.info("Run interrupted by user")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
