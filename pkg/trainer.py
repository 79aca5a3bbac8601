"""
Experiment configuration and the training engine.

A ``Trainer`` runs the full recipe on one model: per-step learning-rate schedule,
weight decay on weights only, AdamW/SGD/Adam updates, a weight EMA, and label
smoothing with mixup/CutMix. Results are returned as a ``RunRecord`` plus the
metric curve and, when a store is attached, persisted there.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from augment import AugmentConfig, AugmentPipeline, ImageDataset, load_image_folder, synth_dataset
from errors import ConfigurationError
from optim import ModelEMA, ModelOptimizer, OptimConfig, lr_at
from run_store import RunStore
from stability import RunRecord, normalized_epoch_minutes, resolve_fallback, trial_id
from tensor_core import Tensor, cross_entropy, no_grad
from vit_models import Model, ModelConfig, build, canonical_config, forward, scaled_config

DATASET_KINDS = ("synthetic", "folder")
EVAL_BATCH_SIZE = 256


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic class-conditional images or a directory of per-class folders."""

    kind: str = "synthetic"
    n: int = 5000
    num_classes: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    noise: float = 0.5
    path: str | None = None

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            msg = f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}"
            raise ConfigurationError(msg)
        if self.kind == "folder" and not self.path:
            msg = "a folder dataset needs a path"
            raise ConfigurationError(msg)
        if self.kind == "synthetic" and (self.num_classes < 2 or self.n < self.num_classes):
            msg = "a synthetic dataset needs num_classes >= 2 and n >= num_classes"
            raise ConfigurationError(msg)
        if not 0 < self.val_fraction < 1:
            msg = f"val_fraction must be in (0, 1), got {self.val_fraction}"
            raise ConfigurationError(msg)


def resolve_model(section: dict[str, Any] | str, num_classes: int) -> ModelConfig:
    """
    Expand a model section into a full configuration.

    A section is either a full ``ModelConfig`` dictionary or a canonical name,
    optionally with a ``scale`` block of ``scaled_config`` keyword arguments.
    The head is sized for ``num_classes``.
    """
    if isinstance(section, str):
        section = {"name": section}
    if "stem" in section:
        config = ModelConfig.from_dict(section)
        if config.encoder.num_classes != num_classes:
            config = replace(config, encoder=replace(config.encoder, num_classes=num_classes))
        config.validate()
        return config
    base = canonical_config(section["name"])
    return scaled_config(base, num_classes=num_classes, **section.get("scale", {}))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run depends on."""

    model: ModelConfig
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    epochs: float = 20.0
    eval_every: float = 1.0
    seed: int = 0
    batch_size: int = 64
    output_dir: str = ""

    @property
    def schedule(self) -> OptimConfig:
        """Optimizer settings with the schedule length and minibatch of this run."""
        return replace(self.optim, total_epochs=float(self.epochs), minibatch_size=self.batch_size)

    @property
    def config_key(self) -> str:
        """Fingerprint of everything except the output directory and the per-trial fields."""
        data = self.to_dict()
        for key in ("output_dir", "epochs", "seed"):
            data.pop(key)
        for key in ("optimizer", "lr", "wd"):
            data["optim"].pop(key)
        blob = json.dumps(data, sort_keys=True)
        return hashlib.new("md5", blob.encode("utf-8"), usedforsecurity=False).hexdigest()[:8]

    def validate(self) -> None:
        if not self.epochs > 0:
            msg = f"epochs must be positive, got {self.epochs}"
            raise ConfigurationError(msg)
        if not self.eval_every > 0:
            msg = f"eval_every must be positive, got {self.eval_every}"
            raise ConfigurationError(msg)
        if self.batch_size <= 0:
            msg = "batch_size must be positive"
            raise ConfigurationError(msg)
        self.model.validate()
        self.schedule.validate()
        self.augment.validate()
        self.dataset.validate()
        if self.dataset.kind == "synthetic" and self.model.encoder.num_classes != self.dataset.num_classes:
            msg = (
                f"model head has {self.model.encoder.num_classes} classes but the dataset "
                f"has {self.dataset.num_classes}"
            )
            raise ConfigurationError(msg)

    def with_trial(self, optimizer: str, lr: float, wd: float, epochs: float, seed: int) -> ExperimentConfig:
        """Copy with one sweep trial's optimizer, hyperparameters, schedule and seed."""
        optim = replace(self.optim, optimizer=optimizer, lr=lr, wd=wd)
        return replace(self, optim=optim, epochs=epochs, seed=seed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "optim": self.optim.to_dict(),
            "augment": self.augment.to_dict(),
            "dataset": asdict(self.dataset),
            "epochs": self.epochs,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        dataset = DatasetConfig(**data.get("dataset", {}))
        top = {k: data[k] for k in ("epochs", "eval_every", "seed", "batch_size", "output_dir") if k in data}
        config = cls(
            model=resolve_model(data["model"], dataset.num_classes),
            optim=OptimConfig(**data.get("optim", {})),
            augment=AugmentConfig(**data.get("augment", {})),
            dataset=dataset,
            **top,
        )
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        with Path(path).open(encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class TrainResult:
    """A finished run: its record, metric curve and loss endpoints."""

    record: RunRecord
    curve: list[tuple[float, float, float, float, float]]
    initial_loss: float
    final_train_loss: float


def load_dataset(cfg: DatasetConfig, image_size: int) -> ImageDataset:
    if cfg.kind == "synthetic":
        return synth_dataset(
            cfg.n,
            image_size,
            cfg.num_classes,
            cfg.seed,
            val_fraction=cfg.val_fraction,
            noise=cfg.noise,
        )
    return load_image_folder(cfg.path, image_size, val_fraction=cfg.val_fraction)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Top-1 error in percent, in eval mode and without recording a graph."""
    wrong = 0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            logits = forward(model, Tensor(images[start : start + batch_size]), mode="eval")
            wrong += int(np.sum(logits.data.argmax(axis=1) != labels[start : start + batch_size]))
    return 100.0 * wrong / len(labels)


class Trainer:
    """Runs one experiment configuration end to end."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        store: RunStore | None = None,
        *,
        show_progress: bool = True,
    ) -> None:
        """
        Initialize the Trainer.

        Args:
            cfg: Validated experiment configuration.
            store: Optional store the record and curve are written to; also the
                source of fallback errors for diverged runs.
            show_progress: Whether to display an epoch progress bar.

        """
        cfg.validate()
        self.cfg = cfg
        self.store = store
        self.show_progress = show_progress
        self.logger = logging.getLogger("Trainer")

    def run(self, dataset: ImageDataset | None = None) -> TrainResult:
        """
        Train, evaluate and record one model.

        Args:
            dataset: Preloaded data; loaded from the config when omitted.

        Returns:
            The run's record and metric curve.

        """
        cfg = self.cfg
        schedule = cfg.schedule
        if dataset is None:
            dataset = load_dataset(cfg.dataset, cfg.model.encoder.image_size)
        if dataset.num_classes != cfg.model.encoder.num_classes:
            msg = f"dataset has {dataset.num_classes} classes but the model head has {cfg.model.encoder.num_classes}"
            raise ConfigurationError(msg)
        steps_per_epoch = len(dataset.train_labels) // cfg.batch_size
        if steps_per_epoch == 0:
            msg = f"batch_size {cfg.batch_size} exceeds the {len(dataset.train_labels)} training examples"
            raise ConfigurationError(msg)

        model = build(cfg.model, seed=cfg.seed)
        optimizer = ModelOptimizer(model, schedule)
        ema = ModelEMA(model, schedule.ema_decay)
        pipeline = AugmentPipeline(cfg.augment, dataset.num_classes)
        rng = np.random.default_rng([cfg.seed, cfg.augment.rng_seed])

        total_steps = math.ceil(cfg.epochs * steps_per_epoch)
        eval_steps = {
            min(total_steps, math.ceil(k * cfg.eval_every * steps_per_epoch))
            for k in range(1, math.ceil(cfg.epochs / cfg.eval_every) + 1)
        }
        self.logger.info(
            "Training %s with %s (lr=%.3g, wd=%.3g) for %g epochs, %d steps per epoch",
            cfg.model.name,
            schedule.optimizer,
            schedule.lr,
            schedule.wd,
            cfg.epochs,
            steps_per_epoch,
        )

        curve: list[tuple[float, float, float, float, float]] = []
        losses: list[float] = []
        initial_loss = math.nan
        diverged = False
        step = 0
        start = time.perf_counter()
        progress = tqdm(total=total_steps, desc=cfg.model.name, unit="step", disable=not self.show_progress)
        while step < total_steps and not diverged:
            for images, labels in dataset.batches(cfg.batch_size, rng, drop_last=True):
                lr_t = lr_at(schedule, step / steps_per_epoch)
                batch = pipeline(images, labels, rng)
                optimizer.zero_grad()
                loss = cross_entropy(forward(model, batch.images, mode="train"), batch.targets)
                value = loss.item()
                if not math.isfinite(value):
                    self.logger.warning("Training loss became non-finite at step %d; stopping", step)
                    diverged = True
                    break
                loss.backward()
                optimizer.step(lr_t)
                ema.update(model)
                losses.append(value)
                if step == 0:
                    initial_loss = value
                step += 1
                progress.update(1)
                if step in eval_steps:
                    row = self._evaluate_point(step / steps_per_epoch, losses, lr_t, model, ema.model, dataset)
                    curve.append(row)
                    losses = []
                    progress.set_postfix(loss=f"{row[1]:.3f}", err=f"{row[2]:.1f}")
                if step >= total_steps:
                    break
        progress.close()
        wall = max(time.perf_counter() - start, 1e-9)

        record = self._record(curve, wall, diverged)
        final_loss = curve[-1][1] if curve else math.nan
        self.logger.info(
            "Finished %s: top-1 err %.2f%% (%s), %.1fs%s",
            cfg.model.name,
            record.final_top1_err,
            "EMA" if record.used_ema else "raw",
            wall,
            ", diverged" if diverged else "",
        )
        if self.store is not None:
            self.store.add_record(record)
            self.store.write_curve(record.run_id, curve)
        return TrainResult(record, curve, initial_loss, final_loss)

    def _evaluate_point(
        self,
        epoch: float,
        losses: list[float],
        lr_t: float,
        model: Model,
        ema_model: Model,
        dataset: ImageDataset,
    ) -> tuple[float, float, float, float, float]:
        val_err = evaluate(model, dataset.val_images, dataset.val_labels)
        ema_err = evaluate(ema_model, dataset.val_images, dataset.val_labels)
        train_loss = float(np.mean(losses)) if losses else math.nan
        self.logger.debug("Epoch %.2f: loss %.4f, val err %.2f%%, EMA val err %.2f%%", epoch, train_loss, val_err, ema_err)
        return (epoch, train_loss, val_err, ema_err, lr_t)

    def _record(self, curve: list[tuple[float, float, float, float, float]], wall: float, diverged: bool) -> RunRecord:
        cfg = self.cfg
        schedule = cfg.schedule
        trial = trial_id(
            cfg.model.name,
            schedule.optimizer,
            schedule.lr,
            schedule.wd,
            cfg.epochs,
            cfg.seed,
            cfg.config_key,
        )
        common = {
            "model_name": cfg.model.name,
            "optimizer": schedule.optimizer,
            "lr": schedule.lr,
            "wd": schedule.wd,
            "epochs": float(cfg.epochs),
            "seed": cfg.seed,
            "used_ema": schedule.eval_ema,
            "wall_time_seconds": wall,
            "normalized_epoch_minutes": normalized_epoch_minutes(wall, 1, cfg.epochs),
            "run_id": f"{trial}-{uuid.uuid4().hex[:8]}",
            "config_key": cfg.config_key,
            "ema_decay": schedule.ema_decay,
            "n_workers": 1,
        }
        if diverged:
            stored = self.store.get_all_records() if self.store is not None else []
            error, fallback_epochs = resolve_fallback(
                cfg.model.name,
                schedule.optimizer,
                float(cfg.epochs),
                stored,
                lr=schedule.lr,
                wd=schedule.wd,
                config_key=cfg.config_key,
            )
            return RunRecord(
                final_top1_err=error,
                best_top1_err=error,
                diverged=True,
                fallback_epochs=fallback_epochs,
                **common,
            )
        column = 3 if schedule.eval_ema else 2
        return RunRecord(
            final_top1_err=curve[-1][column],
            best_top1_err=min(row[column] for row in curve),
            raw_top1_err=curve[-1][2],
            ema_top1_err=curve[-1][3],
            **common,
        )
