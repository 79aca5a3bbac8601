#!/usr/bin/env python3
"""
Command-line surface of the ViT stem laboratory.

Subcommands analyze model complexity, train one configuration, sweep lr/wd,
summarize stability, run the gradient-check suite and render reports. Results
go to stdout as a table, CSV or JSON; logs go to stderr and a timestamped file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from complexity import STEM_COLUMNS, STEM_MODELS, MODEL_COLUMNS, analyze, analyze_stem, write_csv
from errors import ConfigurationError, VitStemError
from report import write_report
from run_store import RunStore
from stability import (
    DELTA_COLUMNS,
    EDF_COLUMNS,
    GAP_COLUMNS,
    REFERENCE_HPARAMS,
    SweepSpec,
    compute_edf,
    delta_rows,
    gap_rows,
    sweep_spec_for,
)
from tensor_core import (
    RunningStats,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    cross_entropy,
    gelu,
    grad_check,
    layernorm,
    relu,
    softmax,
)
from trainer import ExperimentConfig, Trainer
from trial_planner import TrialPlanner, TrialSpec
from vit_models import PUBLISHED_NAMES, ModelConfig, canonical_config

COMMANDS = ("analyze", "train", "sweep", "stability", "gradcheck", "report")
GRADCHECK_TOLERANCE = 1e-4
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def default_out() -> Path:
    return Path(os.environ.get("VITSTEM_OUT", "runs"))


def default_parallel() -> int:
    return max(1, (os.cpu_count() or 2) // 2)


def setup_logger(name: str, log_dir: Path, *, log_to_file: bool = True) -> logging.Logger:
    """
    Route all package logging to the console and, optionally, a timestamped file.

    Args:
        name: Command name; used for the logger and the log file prefix.
        log_dir: Directory receiving ``<name>_YYYYmmdd_HHMMSS.log``.
        log_to_file: Whether to add the file handler.

    Returns:
        The command's logger.

    """
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for handler in [h for h in root.handlers if getattr(h, "_vitstem", False)]:
        root.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_to_file:
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / f"{name}_{datetime.now(timezone.utc).strftime('%Y%m%d_%H%M%S')}.log"
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setLevel(logging.INFO)
        handler.setFormatter(formatter)
        handler._vitstem = True  # noqa: SLF001
        root.addHandler(handler)
    return logging.getLogger(name)


class ExperimentRunner:
    """Owns the output directory, the run store and the sweep worker pool."""

    def __init__(
        self,
        out_dir: Path,
        max_workers: int = 1,
        *,
        show_progress: bool = True,
    ) -> None:
        """
        Initialize the runner.

        Args:
            out_dir: Output root; the store lives in ``<out_dir>/store``.
            max_workers: Maximum number of concurrent sweep trials.
            show_progress: Whether to show progress bars.

        """
        self.out_dir = Path(out_dir)
        self.max_workers = max_workers
        self.show_progress = show_progress
        self.logger = logging.getLogger("ExperimentRunner")
        self.store = RunStore(self.out_dir / "store")
        self.planner = TrialPlanner(self.store)

    def train(self, cfg: ExperimentConfig) -> dict[str, Any]:
        result = Trainer(cfg, self.store, show_progress=self.show_progress).run()
        return {
            "record": result.record.to_dict(),
            "initial_loss": result.initial_loss,
            "final_train_loss": result.final_train_loss,
            "curve": self.store.curve_path(result.record.run_id).as_posix(),
        }

    def _run_trial(self, cfg: ExperimentConfig, trial: TrialSpec) -> str:
        trial_cfg = cfg.with_trial(trial.optimizer, trial.lr, trial.wd, trial.epochs, trial.seed)
        try:
            Trainer(trial_cfg, self.store, show_progress=False).run()
        except (VitStemError, OSError, ValueError, KeyError):
            self.logger.exception("Trial %s failed", trial.trial_id)
            return "failed"
        return "success"

    def sweep(self, cfg: ExperimentConfig, specs: dict[str, SweepSpec]) -> dict[str, Any]:
        """
        Train every sampled (lr, wd) trial not already in the store.

        Args:
            cfg: Base configuration; each trial replaces optimizer, lr and wd.
            specs: Sweep specification per optimizer.

        Returns:
            Trial counts and the EDF files written.

        """
        planned: list[TrialSpec] = []
        for optimizer, spec in specs.items():
            planned.extend(self.planner.plan(cfg.model.name, optimizer, cfg.epochs, cfg.seed, spec, cfg.config_key))
        planned_ids = {t.trial_id for t in planned}
        pending = self.planner.pending(planned)

        success_count = 0
        failed_count = 0
        skipped_count = len(planned_ids) - len(pending)
        self.logger.info(
            "Starting %d trials of %s with %d workers (%d already stored)",
            len(pending),
            cfg.model.name,
            self.max_workers,
            skipped_count,
        )
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor, tqdm(
            total=len(pending),
            desc="Sweeping",
            disable=not self.show_progress,
        ) as pbar:
            future_to_trial = {executor.submit(self._run_trial, cfg, trial): trial for trial in pending}
            for future in as_completed(future_to_trial):
                if future.result() == "success":
                    success_count += 1
                else:
                    failed_count += 1
                pbar.update(1)
                pbar.set_postfix(
                    {
                        "success": success_count,
                        "failed": failed_count,
                        "skipped": skipped_count,
                    },
                )

        latest = {r.trial_id: r for r in self.store.get_all_records() if r.trial_id in planned_ids}
        records = list(latest.values())
        sweep_dir = self.out_dir / "sweeps" / cfg.model.name
        edf_files = []
        for optimizer in specs:
            errors = [r.final_top1_err for r in records if r.optimizer == optimizer]
            if errors:
                path = sweep_dir / f"edf_{optimizer}_{cfg.epochs:g}ep.csv"
                edf_files.append(write_csv(compute_edf(errors).rows(), EDF_COLUMNS, path).as_posix())
        scatter = [
            (r.optimizer, r.lr, r.wd, r.lr * r.wd, r.final_top1_err)
            for r in records
        ]
        write_csv(scatter, ("optimizer", "lr", "wd", "lr_wd", "top1_err"), sweep_dir / "lr_wd_scatter.csv")

        counts = {
            "success": success_count,
            "failed": failed_count,
            "skipped": skipped_count,
            "total": success_count + failed_count + skipped_count,
        }
        report_file = self._generate_sweep_report(counts, sweep_dir)
        return {"statistics": counts, "edf_files": edf_files, "report": report_file.as_posix()}

    def _generate_sweep_report(self, counts: dict[str, int], sweep_dir: Path) -> Path:
        """Generate a sweep report."""
        sweep_dir.mkdir(parents=True, exist_ok=True)
        timestamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")
        report_file = sweep_dir / f"sweep_report_{timestamp}.json"
        report = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "output_dir": self.out_dir.as_posix(),
            "statistics": counts,
            "config": {"max_workers": self.max_workers},
        }
        with report_file.open("w", encoding="utf-8") as f:
            json.dump(report, f, ensure_ascii=False, indent=2)
        self.logger.info("Sweep report saved to: %s", report_file)
        return report_file

    def stability(self, asymptotic_epochs: float | None = None) -> dict[str, Any]:
        """Write training-length and optimizer stability tables from the store."""
        records = self.store.get_all_records()
        deltas = delta_rows(records, asymptotic_epochs)
        gaps = gap_rows(records)
        stability_dir = self.out_dir / "stability"
        write_csv(deltas, DELTA_COLUMNS, stability_dir / "delta_to_asymptotic.csv")
        write_csv(gaps, GAP_COLUMNS, stability_dir / "optimizer_gap.csv")
        return {
            "delta_to_asymptotic": [dict(zip(DELTA_COLUMNS, row)) for row in deltas],
            "optimizer_gap": [dict(zip(GAP_COLUMNS, row)) for row in gaps],
        }

    def report(self) -> dict[str, Any]:
        written = write_report(self.store, self.out_dir / "report")
        return {kind: [p.as_posix() for p in paths] for kind, paths in written.items()}


def _gradcheck_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    def param(*shape: int) -> Tensor:
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def away_from_zero(*shape: int) -> Tensor:
        values = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return Tensor(values, requires_grad=True)

    b, n, d = (int(v) for v in rng.integers(2, 5, size=3))
    # layernorm gradients vanish on very short rows
    width = int(rng.integers(8, 17))
    channels, size = int(rng.integers(1, 4)), int(rng.integers(4, 7))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    targets = softmax(Tensor(rng.standard_normal((b, d)))).data
    return {
        "add": (lambda x, y: x + y, [param(b, n, d), param(n, d)]),
        "mul": (lambda x, y: x * y, [param(b, d), param(1, d)]),
        "div": (lambda x, y: x / y, [param(b, d), away_from_zero(b, d)]),
        "pow": (lambda x: x**3, [param(b, d)]),
        "matmul": (lambda x, y: x @ y, [param(b, n, d), param(d, n)]),
        "sum_mean": (lambda x: x.sum(axis=1, keepdims=True) + x.mean(axis=0, keepdims=True), [param(b, d)]),
        "reshape_transpose": (lambda x: x.reshape(b, n * d).transpose(1, 0), [param(b, n, d)]),
        "getitem": (lambda x: x[:, 0], [param(b, n, d)]),
        "concat": (lambda x, y: concat([x, y], axis=1), [param(b, 1, d), param(b, n, d)]),
        "conv2d": (
            lambda x, w, c: conv2d(x, w, c, stride=stride, padding=padding),
            [param(2, channels, size, size), param(3, channels, 3, 3), param(3)],
        ),
        "batchnorm2d": (
            lambda x, g, c: batchnorm2d(x, g, c, RunningStats.initial(channels, np.float64)),
            [param(3, channels, size, size), param(channels), param(channels)],
        ),
        "layernorm": (
            lambda x, g, c: layernorm(x, g, c),
            [param(b, n, width), away_from_zero(width), param(width)],
        ),
        "relu": (relu, [away_from_zero(b, d)]),
        "gelu": (gelu, [param(b, d)]),
        "softmax": (lambda x: softmax(x, axis=-1), [param(b, n, d)]),
        "cross_entropy": (lambda x: cross_entropy(x, targets), [param(b, d)]),
    }


def gradcheck_suite(seeds: Sequence[int] = tuple(range(20))) -> dict[str, dict[str, Any]]:
    """Worst relative error per differentiable op over random shapes, one draw per seed."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, inputs) in _gradcheck_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, inputs, seed=seed))
    return {
        name: {"max_rel_error": error, "passed": error < GRADCHECK_TOLERANCE}
        for name, error in worst.items()
    }


def cmd_analyze(args: argparse.Namespace, runner: ExperimentRunner) -> dict[str, Any]:
    """Complexity rows for the requested models and stems."""
    names: list[str] = []
    stems: list[str] = []
    if args.all_canonical:
        names.extend(PUBLISHED_NAMES)
        stems.extend(STEM_MODELS)
    if args.model:
        names.append(args.model)
    if args.stem:
        stems.append(args.stem)
    models: list[ModelConfig] = [canonical_config(name) for name in names]
    if args.config:
        models.append(ExperimentConfig.load(args.config).model)
    if not models and not stems:
        msg = "analyze needs --model, --stem, --config or --all-canonical"
        raise ConfigurationError(msg)
    for stem in stems:
        if stem not in STEM_MODELS:
            msg = f"unknown stem {stem!r}; valid stems: {', '.join(STEM_MODELS)}"
            raise ConfigurationError(msg)

    result: dict[str, Any] = {}
    if models:
        result["columns"] = list(MODEL_COLUMNS)
        result["rows"] = [list(analyze(config).model_row()) for config in models]
    if stems:
        result["stem_columns"] = list(STEM_COLUMNS)
        result["stem_rows"] = [list(analyze_stem(canonical_config(STEM_MODELS[s])).stem_row(s)) for s in stems]
    if args.all_canonical:
        analysis_dir = runner.out_dir / "analysis"
        write_csv(result["rows"], MODEL_COLUMNS, analysis_dir / "models.csv")
        write_csv(result["stem_rows"], STEM_COLUMNS, analysis_dir / "stems.csv")
    return result


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    if not args.config:
        msg = f"{args.command} needs --config"
        raise ConfigurationError(msg)
    cfg = ExperimentConfig.load(args.config)
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    return cfg


def cmd_train(args: argparse.Namespace, runner: ExperimentRunner) -> dict[str, Any]:
    return runner.train(_experiment(args))


def cmd_sweep(args: argparse.Namespace, runner: ExperimentRunner) -> dict[str, Any]:
    cfg = _experiment(args)
    specs: dict[str, SweepSpec] = {}
    for optimizer in args.optimizer or [cfg.optim.optimizer]:
        if args.source == "family" or (cfg.model.name, optimizer) in REFERENCE_HPARAMS:
            spec = sweep_spec_for(
                cfg.model.name,
                optimizer,
                source=args.source,
                n_samples=args.n_samples,
                seed=cfg.seed,
            )
        else:
            spec = SweepSpec(center_lr=cfg.optim.lr, center_wd=cfg.optim.wd, n_samples=args.n_samples, seed=cfg.seed)
        specs[optimizer] = spec
    return runner.sweep(cfg, specs)


def cmd_stability(args: argparse.Namespace, runner: ExperimentRunner) -> dict[str, Any]:
    return runner.stability(args.asymptotic_epochs)


def cmd_gradcheck(args: argparse.Namespace, runner: ExperimentRunner) -> dict[str, Any]:
    seeds = range(args.seed or 0, (args.seed or 0) + args.cases)
    summary = gradcheck_suite(tuple(seeds))
    failed = [name for name, entry in summary.items() if not entry["passed"]]
    if failed:
        runner.logger.error("Gradient check failed for: %s", ", ".join(failed))
    return {"ops": summary, "passed": not failed}


def cmd_report(args: argparse.Namespace, runner: ExperimentRunner) -> dict[str, Any]:
    return runner.report()


HANDLERS: dict[str, Callable[[argparse.Namespace, ExperimentRunner], dict[str, Any]]] = {
    "analyze": cmd_analyze,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "stability": cmd_stability,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def _tabular(result: dict[str, Any]) -> list[tuple[list[str], list[list[Any]]]]:
    tables = []
    if "rows" in result:
        tables.append((result["columns"], result["rows"]))
    if "stem_rows" in result:
        tables.append((result["stem_columns"], result["stem_rows"]))
    if "record" in result:
        record = result["record"]
        tables.append((list(record), [list(record.values())]))
    if "ops" in result:
        tables.append(
            (
                ["op", "max_rel_error", "passed"],
                [[name, e["max_rel_error"], e["passed"]] for name, e in result["ops"].items()],
            ),
        )
    for key in ("delta_to_asymptotic", "optimizer_gap"):
        if result.get(key):
            rows = result[key]
            tables.append((list(rows[0]), [list(row.values()) for row in rows]))
    return tables


def _cell(value: Any) -> str:
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def emit(command: str, result: dict[str, Any], fmt: str, stream: Any = None) -> None:
    """Print a command result as a table, CSV or a JSON envelope."""
    stream = stream or sys.stdout
    if fmt == "json":
        json.dump({"command": command, "status": "ok", "result": result}, stream, indent=2, default=str)
        stream.write("\n")
        return
    tables = _tabular(result)
    if not tables:
        json.dump(result, stream, indent=2, default=str)
        stream.write("\n")
        return
    for header, rows in tables:
        if fmt == "csv":
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(header)
            writer.writerows([_cell(v) for v in row] for row in rows)
            continue
        cells = [[str(h) for h in header]] + [[_cell(v) for v in row] for row in rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
        for row in cells:
            stream.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ViT patchify/conv stem laboratory.")
    parser.add_argument("command", choices=COMMANDS, help="Subcommand to run.")
    parser.add_argument("--model", help="Canonical model name, e.g. ViT_C-4GF.")
    parser.add_argument("--stem", help="Stem variant for analyze: P, C or S1-S4.")
    parser.add_argument("--config", help="Path to an experiment configuration file.")
    parser.add_argument("--seed", type=int, help="Override the configured seed.")
    parser.add_argument("--epochs", type=float, help="Override the configured schedule length.")
    parser.add_argument("--format", choices=("table", "csv", "json"), default="table", help="Output format.")
    parser.add_argument("--json", action="store_true", help="Shorthand for --format json.")
    parser.add_argument("--out", help="Output root (default: $VITSTEM_OUT or ./runs).")
    parser.add_argument("--parallel", type=int, default=default_parallel(), help="Concurrent sweep trials.")
    parser.add_argument("--all-canonical", action="store_true", help="Analyze every canonical model and stem.")
    parser.add_argument("--optimizer", action="append", choices=("adamw", "sgd", "adam"), help="Sweep optimizer; repeatable.")
    parser.add_argument("--n-samples", type=int, default=64, help="Sampled (lr, wd) pairs per optimizer.")
    parser.add_argument("--source", choices=("model", "family"), default="model", help="Sweep center source.")
    parser.add_argument("--asymptotic-epochs", type=float, help="Schedule treated as converged.")
    parser.add_argument("--cases", type=int, default=20, help="Random draws per op for gradcheck.")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars.")
    parser.add_argument("--no-log-file", action="store_true", help="Disable logging to a file.")
    return parser


def _resolve_out(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    if args.config and args.command in ("train", "sweep"):
        with Path(args.config).open(encoding="utf-8") as f:
            configured = json.load(f).get("output_dir")
        if configured:
            return Path(configured)
    return default_out()


def main(argv: Sequence[str] | None = None) -> int:
    """Run the main program."""
    args = build_parser().parse_args(argv)
    fmt = "json" if args.json else args.format

    try:
        out_dir = _resolve_out(args)
        logger = setup_logger(args.command, out_dir / "logs", log_to_file=not args.no_log_file)
        runner = ExperimentRunner(out_dir, max(1, args.parallel), show_progress=not args.no_progress)
        result = HANDLERS[args.command](args, runner)
        emit(args.command, result, fmt)
    except KeyboardInterrupt:
        logging.getLogger(args.command).info("Interrupted by user.")
        return 1
    except (OSError, ValueError, KeyError):
        logging.getLogger(args.command).exception("An error occurred")
        return 1

    if args.command == "gradcheck" and not result["passed"]:
        return 1
    if args.command == "sweep" and result["statistics"]["failed"] > 0:
        logger.warning("%d trials failed", result["statistics"]["failed"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
