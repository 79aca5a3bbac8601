"""
Static flops / parameter / activation accounting for ViT configurations.

Conventions:
    * flops count multiply-accumulates (one MAC is one flop);
    * activations count output scalars of convolutions and matrix
      multiplications, including the attention-score and attention-value
      products;
    * normalization, bias addition, softmax and GELU add neither flops nor
      activations, but their parameters are counted;
    * all counts are for a single image at the configured resolution.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import InputError, UndefinedCorrelationError
from tensor_core import conv_output_extent
from vit_models import IN_CHANNELS, PUBLISHED_NAMES, ModelConfig, canonical_config

logger = logging.getLogger(__name__)

MODEL_COLUMNS = ("name", "flops_B", "params_M", "acts_M")
STEM_COLUMNS = ("stem", "flops_M", "params_M", "acts_M")

# Published values: (flops B, params M, acts M, normalized epoch minutes).
REFERENCE_MODELS: dict[str, tuple[float, float, float, float]] = {
    "ViT_P-1GF": (1.1, 4.8, 5.5, 2.6),
    "ViT_P-4GF": (3.9, 18.5, 11.1, 3.8),
    "ViT_P-18GF": (17.5, 86.7, 24.0, 11.5),
    "ViT_P-36GF": (35.9, 178.4, 37.3, 18.8),
    "ViT_C-1GF": (1.1, 4.6, 5.7, 2.7),
    "ViT_C-4GF": (4.0, 17.8, 11.3, 3.9),
    "ViT_C-18GF": (17.7, 81.6, 24.1, 11.4),
    "ViT_C-36GF": (35.0, 167.8, 36.7, 18.6),
}

REFERENCE_TIMES: dict[str, float] = {name: row[3] for name, row in REFERENCE_MODELS.items()}

# Published stem-only values at the 4GF size: (flops M, params M, acts M).
REFERENCE_STEMS: dict[str, tuple[float, float, float]] = {
    "P": (58, 0.3, 0.8),
    "C": (435, 1.0, 1.2),
    "S1": (422, 0.8, 1.3),
    "S2": (422, 0.7, 1.1),
    "S3": (458, 0.7, 1.6),
    "S4": (407, 0.6, 2.9),
}

STEM_MODELS: dict[str, str] = {
    "P": "ViT_P-4GF",
    "C": "ViT_C-4GF",
    "S1": "S1@4GF",
    "S2": "S2@4GF",
    "S3": "S3@4GF",
    "S4": "S4@4GF",
}

# Published cells the counting conventions above do not reproduce.
FLAGGED_CELLS: tuple[tuple[str, str], ...] = (("P", "acts"), ("S1", "acts"), ("S1", "flops"))


@dataclass(frozen=True)
class LayerRecord:
    """Counts contributed by one layer."""

    name: str
    kind: str
    flops: int = 0
    params: int = 0
    acts: int = 0


@dataclass(frozen=True)
class ComplexityReport:
    """Totals plus the per-layer breakdown they are summed from."""

    name: str
    flops: int
    params: int
    acts: int
    breakdown: tuple[LayerRecord, ...]

    @classmethod
    def from_records(cls, name: str, records: Sequence[LayerRecord]) -> ComplexityReport:
        return cls(
            name=name,
            flops=sum(r.flops for r in records),
            params=sum(r.params for r in records),
            acts=sum(r.acts for r in records),
            breakdown=tuple(records),
        )

    def block_flops(self, index: int) -> int:
        """Flops of transformer block ``index``."""
        prefix = f"blocks.{index}."
        return sum(r.flops for r in self.breakdown if r.name.startswith(prefix))

    def model_row(self) -> tuple[str, float, float, float]:
        return (self.name, self.flops / 1e9, self.params / 1e6, self.acts / 1e6)

    def stem_row(self, stem: str) -> tuple[str, float, float, float]:
        return (stem, self.flops / 1e6, self.params / 1e6, self.acts / 1e6)

    def to_dict(self) -> dict[str, object]:
        return {
            "name": self.name,
            "flops": self.flops,
            "params": self.params,
            "acts": self.acts,
        }


@dataclass(frozen=True)
class CorrelationReport:
    """Pearson coefficient and least-squares line of y on x."""

    r: float
    slope: float
    intercept: float


def _stem_records(config: ModelConfig) -> list[LayerRecord]:
    stem = config.stem
    size = config.encoder.image_size
    in_channels = IN_CHANNELS
    records: list[LayerRecord] = []
    for i, (kernel, stride, pad, out_channels) in enumerate(
        zip(stem.kernel_sizes, stem.strides, stem.paddings, stem.channels),
    ):
        size = conv_output_extent(size, kernel, stride, pad)
        outputs = size * size * out_channels
        fan_in = in_channels * kernel * kernel
        norm = stem.layer_norm_kind(i)
        records.append(
            LayerRecord(
                name=f"stem.conv{i}",
                kind="conv",
                flops=outputs * fan_in,
                params=out_channels * fan_in + (out_channels if norm == "none" else 0),
                acts=outputs,
            ),
        )
        if norm != "none":
            records.append(LayerRecord(name=f"stem.norm{i}", kind=norm, params=2 * out_channels))
        in_channels = out_channels
    return records


def _block_records(config: ModelConfig, index: int) -> list[LayerRecord]:
    enc = config.encoder
    d, n, heads, mlp = enc.hidden_size, enc.num_tokens, enc.num_heads, enc.mlp_dim
    prefix = f"blocks.{index}"

    def linear(name: str, fan_in: int, fan_out: int) -> LayerRecord:
        return LayerRecord(
            name=f"{prefix}.{name}",
            kind="matmul",
            flops=n * fan_in * fan_out,
            params=fan_in * fan_out + fan_out,
            acts=n * fan_out,
        )

    return [
        LayerRecord(name=f"{prefix}.norm1", kind="ln", params=2 * d),
        linear("attn.qkv", d, 3 * d),
        LayerRecord(name=f"{prefix}.attn.scores", kind="matmul", flops=n * n * d, acts=heads * n * n),
        LayerRecord(name=f"{prefix}.attn.values", kind="matmul", flops=n * n * d, acts=n * d),
        linear("attn.proj", d, d),
        LayerRecord(name=f"{prefix}.norm2", kind="ln", params=2 * d),
        linear("mlp.fc1", d, mlp),
        linear("mlp.fc2", mlp, d),
    ]


def analyze(config: ModelConfig) -> ComplexityReport:
    """
    Count flops, parameters and activations of a configuration symbolically.

    Args:
        config: Any valid model configuration.

    Returns:
        The report with a per-layer breakdown.

    """
    config.validate()
    enc = config.encoder
    d = enc.hidden_size
    records = _stem_records(config)
    records.append(LayerRecord(name="encoder.embed", kind="embed", params=d + enc.num_tokens * d))
    for index in range(enc.num_blocks):
        records.extend(_block_records(config, index))
    records.append(LayerRecord(name="encoder.norm", kind="ln", params=2 * d))
    records.append(
        LayerRecord(
            name="head",
            kind="matmul",
            flops=d * enc.num_classes,
            params=d * enc.num_classes + enc.num_classes,
            acts=enc.num_classes,
        ),
    )
    return ComplexityReport.from_records(config.name, records)


def analyze_stem(config: ModelConfig) -> ComplexityReport:
    """Counts of the stem layers alone."""
    config.validate()
    return ComplexityReport.from_records(f"{config.name}:stem", _stem_records(config))


def complexity_table(names: Iterable[str] = PUBLISHED_NAMES) -> list[tuple[str, float, float, float]]:
    """Rows of (name, flops_B, params_M, acts_M) for canonical model names."""
    return [analyze(canonical_config(name)).model_row() for name in names]


def stem_table(stems: Iterable[str] = tuple(STEM_MODELS)) -> list[tuple[str, float, float, float]]:
    """Rows of (stem, flops_M, params_M, acts_M) for the 4GF stem variants."""
    return [analyze_stem(canonical_config(STEM_MODELS[stem])).stem_row(stem) for stem in stems]


def write_csv(rows: Iterable[Sequence[object]], header: Sequence[str], path: Path) -> Path:
    """Write rows with a header; ',' separator and LF line endings."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    logger.info("Wrote %s", path)
    return path


def _validated_pair(xs: Sequence[float], ys: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        msg = f"xs and ys must be 1-D sequences of equal length, got {x.shape} and {y.shape}"
        raise InputError(msg)
    if x.size < 2:
        msg = "at least two points are required"
        raise InputError(msg)
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """
    Pearson correlation coefficient.

    Raises:
        InputError: Fewer than two points or mismatched lengths.
        UndefinedCorrelationError: Either sample has zero variance.

    """
    x, y = _validated_pair(xs, ys)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        msg = "correlation is undefined when a sample has zero variance"
        raise UndefinedCorrelationError(msg)
    dx, dy = x - x.mean(), y - y.mean()
    r = float(np.dot(dx, dy) / np.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))
    return float(np.clip(r, -1.0, 1.0))


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Ordinary least-squares (slope, intercept) of ys on xs."""
    x, y = _validated_pair(xs, ys)
    if np.ptp(x) == 0:
        msg = "a line cannot be fit to a single x value"
        raise UndefinedCorrelationError(msg)
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def correlate(xs: Sequence[float], ys: Sequence[float]) -> CorrelationReport:
    """Pearson r together with the least-squares line."""
    slope, intercept = linear_fit(xs, ys)
    return CorrelationReport(r=pearson(xs, ys), slope=slope, intercept=intercept)


def runtime_correlations(names: Iterable[str] = PUBLISHED_NAMES) -> dict[str, CorrelationReport]:
    """Correlate each complexity measure with the published epoch times."""
    names = list(names)
    reports = [analyze(canonical_config(name)) for name in names]
    times = [REFERENCE_TIMES[name] for name in names]
    return {
        measure: correlate([getattr(r, measure) for r in reports], times)
        for measure in ("flops", "params", "acts")
    }
