"""
Optimizability metrics: error EDFs, lr/wd sampling and stability deltas.

Errors are top-1 error percentages. When a cell (model, optimizer, epochs) holds
several records, for example one per sampled (lr, wd), the lowest error of the
cell is used.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np
from scipy.stats import loguniform

from errors import AggregationError, ConfigurationError, InputError

logger = logging.getLogger(__name__)

DIVERGED_ERROR = 100.0
REFERENCE_WORKERS = 8

EDF_COLUMNS = ("delta", "cum_frac")
DELTA_COLUMNS = ("model", "optimizer", "epochs", "top1_err", "delta")
GAP_COLUMNS = ("model", "epochs", "adamw_err", "sgd_err", "gap", "fallback")

# Per-model optima at 50 epochs, lr normalized to a minibatch of 2048: (lr, wd).
REFERENCE_HPARAMS: dict[tuple[str, str], tuple[float, float]] = {
    ("ViT_P-1GF", "adamw"): (2.0e-3, 0.20),
    ("ViT_P-1GF", "sgd"): (1.9, 1.3e-5),
    ("ViT_P-4GF", "adamw"): (2.0e-3, 0.20),
    ("ViT_P-4GF", "sgd"): (1.9, 1.3e-5),
    ("ViT_P-18GF", "adamw"): (1.0e-3, 0.24),
    ("ViT_P-18GF", "sgd"): (1.1, 1.2e-5),
    ("ViT_C-1GF", "adamw"): (2.5e-3, 0.19),
    ("ViT_C-1GF", "sgd"): (1.9, 1.3e-5),
    ("ViT_C-4GF", "adamw"): (1.0e-3, 0.24),
    ("ViT_C-4GF", "sgd"): (1.3, 2.2e-5),
    ("ViT_C-18GF", "adamw"): (1.0e-3, 0.24),
    ("ViT_C-18GF", "sgd"): (1.1, 2.7e-5),
}

# Family-level sampling ranges: optimizer -> ((lr_low, lr_high), (wd_low, wd_high)).
FAMILY_INTERVALS: dict[str, tuple[tuple[float, float], tuple[float, float]]] = {
    "adamw": ((2.5e-4, 8.0e-3), (0.02, 0.8)),
    "sgd": ((0.1, 3.2), (4.0e-6, 1.2e-4)),
}

CellKey = tuple[str, str, float]


def trial_id(
    model_name: str,
    optimizer: str,
    lr: float,
    wd: float,
    epochs: float,
    seed: int,
    config_key: str = "",
) -> str:
    """
    Deterministic id of one trial.

    ``config_key`` fingerprints the rest of the experiment configuration, so runs
    differing only in augmentation, data or model structure get distinct ids.
    """
    key = f"{model_name}|{optimizer}|{lr:.10g}|{wd:.10g}|{epochs:g}|{seed}|{config_key}"
    return hashlib.new("md5", key.encode("utf-8"), usedforsecurity=False).hexdigest()[:16]


@dataclass(frozen=True)
class RunRecord:
    """
    Outcome of one training trial.

    ``run_id`` names one execution and is unique within a store; ``trial_id`` is
    shared by every execution of the same configuration and keys sweep resume.
    """

    model_name: str
    optimizer: str
    lr: float
    wd: float
    epochs: float
    seed: int
    final_top1_err: float
    best_top1_err: float
    used_ema: bool
    wall_time_seconds: float
    normalized_epoch_minutes: float
    run_id: str = ""
    raw_top1_err: float = math.nan
    ema_top1_err: float = math.nan
    ema_decay: float = 0.0
    diverged: bool = False
    fallback_epochs: float | None = None
    n_workers: int = 1
    config_key: str = ""

    def __post_init__(self) -> None:
        for name in ("final_top1_err", "best_top1_err"):
            value = getattr(self, name)
            if not 0 <= value <= 100:
                msg = f"{name} must be a percentage in [0, 100], got {value}"
                raise InputError(msg)
        if not self.wall_time_seconds > 0:
            msg = f"wall_time_seconds must be positive, got {self.wall_time_seconds}"
            raise InputError(msg)
        if not self.run_id:
            object.__setattr__(self, "run_id", self.trial_id)

    @property
    def trial_id(self) -> str:
        return trial_id(self.model_name, self.optimizer, self.lr, self.wd, self.epochs, self.seed, self.config_key)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ("raw_top1_err", "ema_top1_err"):
            if math.isnan(data[key]):
                data[key] = None
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunRecord:
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in data.items() if k in known}
        for key in ("raw_top1_err", "ema_top1_err"):
            if values.get(key) is None:
                values[key] = math.nan
        return cls(**values)


@dataclass(frozen=True)
class SweepSpec:
    """Log-uniform lr/wd sampling around a center."""

    center_lr: float
    center_wd: float
    low_factor: float = 1 / 8
    high_factor: float = 4.0
    n_samples: int = 64
    seed: int = 0
    wd_high_factor: float | None = None

    def validate(self) -> None:
        high_factors = (self.high_factor, self.wd_factors[1])
        if not (0 < self.low_factor <= 1 and all(h >= 1 for h in high_factors)):
            msg = f"factors must satisfy 0 < low_factor <= 1 <= high_factor, got {self.low_factor}, {self.high_factor}"
            raise ConfigurationError(msg)
        if self.center_lr <= 0 or self.center_wd <= 0:
            msg = "sweep centers must be positive"
            raise ConfigurationError(msg)
        if self.n_samples <= 0:
            msg = "n_samples must be positive"
            raise ConfigurationError(msg)

    @property
    def wd_factors(self) -> tuple[float, float]:
        high = self.high_factor if self.wd_high_factor is None else self.wd_high_factor
        return self.low_factor, high

    @property
    def lr_interval(self) -> tuple[float, float]:
        return self.center_lr * self.low_factor, self.center_lr * self.high_factor

    @property
    def wd_interval(self) -> tuple[float, float]:
        low, high = self.wd_factors
        return self.center_wd * low, self.center_wd * high

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepSpec:
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass(frozen=True)
class EDF:
    """Empirical distribution of error deltas relative to the best run in a set."""

    deltas: tuple[float, ...]
    cum_fracs: tuple[float, ...]

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.deltas, self.cum_fracs))


def _log_uniform(interval: tuple[float, float], n: int, rng: np.random.Generator) -> np.ndarray:
    low, high = interval
    if low == high:
        return np.full(n, low)
    return loguniform(low, high).rvs(size=n, random_state=rng)


def sample_lr_wd(spec: SweepSpec) -> list[tuple[float, float]]:
    """
    Draw ``n_samples`` (lr, wd) pairs, each coordinate log-uniform and independent.

    Args:
        spec: Sweep centers, interval factors, sample count and seed.

    Returns:
        The sampled pairs, identical for identical specs.

    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lrs = _log_uniform(spec.lr_interval, spec.n_samples, rng)
    wds = _log_uniform(spec.wd_interval, spec.n_samples, rng)
    return [(float(lr), float(wd)) for lr, wd in zip(lrs, wds)]


def sweep_spec_for(
    model_name: str,
    optimizer: str = "adamw",
    *,
    source: str = "model",
    n_samples: int = 64,
    seed: int = 0,
) -> SweepSpec:
    """
    Sweep around the published per-model optimum or across the family-level range.

    ``source="family"`` reproduces the family interval endpoints exactly, so its
    wd range may use a different high factor than its lr range.
    """
    if source == "model":
        if (model_name, optimizer) not in REFERENCE_HPARAMS:
            known = sorted({m for m, _ in REFERENCE_HPARAMS})
            msg = f"no reference hyperparameters for {model_name!r} with {optimizer}; known models: {known}"
            raise AggregationError(msg)
        lr, wd = REFERENCE_HPARAMS[(model_name, optimizer)]
        return SweepSpec(center_lr=lr, center_wd=wd, n_samples=n_samples, seed=seed)
    if source == "family":
        if optimizer not in FAMILY_INTERVALS:
            msg = f"no family interval for optimizer {optimizer!r}"
            raise ConfigurationError(msg)
        (lr_low, lr_high), (wd_low, wd_high) = FAMILY_INTERVALS[optimizer]
        low = 1 / 8
        return SweepSpec(
            center_lr=lr_low / low,
            center_wd=wd_low / low,
            low_factor=low,
            high_factor=lr_high * low / lr_low,
            wd_high_factor=wd_high * low / wd_low,
            n_samples=n_samples,
            seed=seed,
        )
    msg = f"source must be 'model' or 'family', got {source!r}"
    raise ConfigurationError(msg)


def compute_edf(errors: Iterable[float]) -> EDF:
    """
    Sort errors and express each as a delta to the best one.

    Raises:
        InputError: No errors were given.

    """
    values = np.sort(np.asarray(list(errors), dtype=np.float64))
    if values.size == 0:
        msg = "cannot build an EDF from an empty set of errors"
        raise InputError(msg)
    n = values.size
    deltas = values - values[0]
    fracs = np.arange(1, n + 1) / n
    return EDF(tuple(float(d) for d in deltas), tuple(float(f) for f in fracs))


def fraction_within(edf: EDF, delta: float) -> float:
    """Proportion of runs whose delta to the best is at most ``delta``."""
    count = int(np.searchsorted(np.asarray(edf.deltas), delta, side="right"))
    return count / len(edf.deltas)


def _cells(records: Iterable[RunRecord]) -> dict[CellKey, list[RunRecord]]:
    cells: dict[CellKey, list[RunRecord]] = defaultdict(list)
    for record in records:
        cells[(record.model_name, record.optimizer, float(record.epochs))].append(record)
    return cells


def resolve_fallback(
    model_name: str,
    optimizer: str,
    epochs: float,
    records: Iterable[RunRecord],
    *,
    lr: float | None = None,
    wd: float | None = None,
    config_key: str | None = None,
) -> tuple[float, float | None]:
    """
    Error reported for a diverged run: the best result of a shorter schedule.

    Args:
        model_name: Model of the diverged run.
        optimizer: Optimizer of the diverged run.
        epochs: Schedule length of the diverged run.
        records: Candidate records to copy from.
        lr: Optional lr the candidates must match.
        wd: Optional wd the candidates must match.
        config_key: Optional configuration fingerprint the candidates must match.

    Returns:
        (error, epochs it was copied from); (100, None) when nothing shorter exists.

    """
    candidates = [
        r
        for r in records
        if r.model_name == model_name
        and r.optimizer == optimizer
        and r.epochs < epochs
        and not r.diverged
        and (lr is None or math.isclose(r.lr, lr))
        and (wd is None or math.isclose(r.wd, wd))
        and (config_key is None or r.config_key == config_key)
    ]
    if not candidates:
        return DIVERGED_ERROR, None
    best = min(candidates, key=lambda r: (r.final_top1_err, -r.epochs))
    return best.final_top1_err, best.epochs


def _cell_error(key: CellKey, members: Sequence[RunRecord], records: Sequence[RunRecord]) -> tuple[float, bool]:
    finished = [r.final_top1_err for r in members if not r.diverged]
    if finished:
        return min(finished), False
    stored = [r for r in members if r.fallback_epochs is not None]
    if stored:
        return min(r.final_top1_err for r in stored), True
    error, _ = resolve_fallback(key[0], key[1], key[2], records)
    return error, True


def delta_to_asymptotic(
    records: Iterable[RunRecord],
    asymptotic_epochs: float | None = None,
) -> dict[CellKey, float]:
    """
    Training-length stability: error at each schedule minus the asymptotic error.

    Args:
        records: Runs of one or more models and optimizers.
        asymptotic_epochs: Schedule treated as converged; defaults to the
            longest schedule present for each (model, optimizer).

    Returns:
        Mapping (model, optimizer, epochs) -> delta in percentage points.

    Raises:
        AggregationError: A (model, optimizer) has no record at the asymptotic schedule.

    """
    records = list(records)
    cells = _cells(records)
    errors = {key: _cell_error(key, members, records)[0] for key, members in cells.items()}
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for model, optimizer, epochs in cells:
        groups[(model, optimizer)].append(epochs)

    deltas: dict[CellKey, float] = {}
    for (model, optimizer), schedules in sorted(groups.items()):
        target = max(schedules) if asymptotic_epochs is None else float(asymptotic_epochs)
        anchor = (model, optimizer, target)
        if anchor not in errors:
            msg = f"model {model} ({optimizer}) has no record at the asymptotic schedule of {target:g} epochs"
            raise AggregationError(msg)
        for epochs in sorted(schedules):
            deltas[(model, optimizer, epochs)] = errors[(model, optimizer, epochs)] - errors[anchor]
    return deltas


@dataclass(frozen=True)
class OptimizerGap:
    """SGD minus AdamW error for one (model, epochs)."""

    adamw_err: float
    sgd_err: float
    fallback: bool

    @property
    def gap(self) -> float:
        return self.sgd_err - self.adamw_err


def optimizer_gap(records: Iterable[RunRecord]) -> dict[tuple[str, float], OptimizerGap]:
    """
    Optimizer stability for every (model, epochs) trained with both AdamW and SGD.

    Diverged cells contribute their fallback error and mark the gap as a fallback.
    Cells trained with only one optimizer are skipped.
    """
    records = list(records)
    cells = _cells(records)
    resolved = {key: _cell_error(key, members, records) for key, members in cells.items()}
    gaps: dict[tuple[str, float], OptimizerGap] = {}
    for model, optimizer, epochs in sorted(cells):
        if optimizer != "adamw":
            continue
        sgd_key = (model, "sgd", epochs)
        if sgd_key not in resolved:
            logger.debug("No SGD counterpart for %s at %g epochs", model, epochs)
            continue
        adamw_err, adamw_fallback = resolved[(model, optimizer, epochs)]
        sgd_err, sgd_fallback = resolved[sgd_key]
        gaps[(model, epochs)] = OptimizerGap(adamw_err, sgd_err, adamw_fallback or sgd_fallback)
    return gaps


def normalized_epoch_minutes(
    wall_seconds: float,
    n_workers: int,
    epochs: float,
    reference_workers: int = REFERENCE_WORKERS,
) -> float:
    """
    Minutes per epoch as if trained on ``reference_workers`` workers.

    Actual time is multiplied by the number of workers used and divided by the
    reference count.

    Raises:
        InputError: ``epochs`` or a worker count is not positive.

    """
    if epochs <= 0:
        msg = "normalized epoch time is undefined for a schedule of 0 epochs"
        raise InputError(msg)
    if n_workers <= 0 or reference_workers <= 0:
        msg = "worker counts must be positive"
        raise InputError(msg)
    return wall_seconds / 60.0 * n_workers / reference_workers / epochs


def delta_rows(records: Iterable[RunRecord], asymptotic_epochs: float | None = None) -> list[tuple[Any, ...]]:
    """Rows for the training-length stability CSV."""
    records = list(records)
    cells = _cells(records)
    deltas = delta_to_asymptotic(records, asymptotic_epochs)
    rows = []
    for (model, optimizer, epochs), delta in deltas.items():
        error, _ = _cell_error((model, optimizer, epochs), cells[(model, optimizer, epochs)], records)
        rows.append((model, optimizer, epochs, error, delta))
    return rows


def gap_rows(records: Iterable[RunRecord]) -> list[tuple[Any, ...]]:
    """Rows for the optimizer stability CSV."""
    return [
        (model, epochs, g.adamw_err, g.sgd_err, g.gap, int(g.fallback))
        for (model, epochs), g in optimizer_gap(records).items()
    ]
