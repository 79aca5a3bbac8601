"""
ViT model family with patchify and convolutional stems.

Configurations are immutable values; ``build`` turns one into a ``Model`` whose
parameters are initialized deterministically from a seed and tagged with a
parameter class used by the optimizer's weight-decay rule.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
from scipy.stats import truncnorm

from errors import ConfigurationError, InputError, UnknownModelError
from tensor_core import (
    DEFAULT_EPS,
    RunningStats,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    conv_output_extent,
    gelu,
    layernorm,
    relu,
    softmax,
)

logger = logging.getLogger(__name__)

IN_CHANNELS = 3
STEM_KINDS = ("patchify", "conv", "patchify_bn_relu", "custom")
NORM_KINDS = ("bn", "ln", "none")
PARAM_CLASSES = ("weight", "norm_gain", "bias")


@dataclass(frozen=True)
class StemSpec:
    """Layer-by-layer description of a stem; the last layer projects to width d."""

    kind: str
    kernel_sizes: tuple[int, ...]
    strides: tuple[int, ...]
    paddings: tuple[int, ...]
    channels: tuple[int, ...]
    norm: str = "bn"
    final_norm: str = "none"

    @property
    def num_layers(self) -> int:
        return len(self.kernel_sizes)

    @property
    def downsample(self) -> int:
        return math.prod(self.strides)

    def layer_norm_kind(self, index: int) -> str:
        """Normalization applied after layer ``index`` (always followed by ReLU)."""
        return self.final_norm if index == self.num_layers - 1 else self.norm

    def validate(self, hidden_size: int, image_size: int, patch_size: int) -> None:
        """
        Check the stem invariants against the encoder it feeds.

        Raises:
            ConfigurationError: Naming the first violated invariant.

        """
        lengths = {
            len(self.kernel_sizes),
            len(self.strides),
            len(self.paddings),
            len(self.channels),
        }
        if len(lengths) != 1 or self.num_layers < 1:
            msg = "stem kernel_sizes, strides, paddings and channels must have equal length >= 1"
            raise ConfigurationError(msg)
        if self.kind not in STEM_KINDS:
            msg = f"stem kind must be one of {STEM_KINDS}, got {self.kind!r}"
            raise ConfigurationError(msg)
        if self.norm not in NORM_KINDS or self.final_norm not in NORM_KINDS:
            msg = f"stem norm kinds must be one of {NORM_KINDS}"
            raise ConfigurationError(msg)
        if any(v <= 0 for v in (*self.kernel_sizes, *self.strides, *self.channels)):
            msg = "stem kernel sizes, strides and channels must be positive"
            raise ConfigurationError(msg)
        if self.channels[-1] != hidden_size:
            msg = (
                f"stem output channels {self.channels[-1]} must equal encoder hidden size "
                f"{hidden_size}"
            )
            raise ConfigurationError(msg)
        if self.kind in ("patchify", "patchify_bn_relu"):
            if (
                self.num_layers != 1
                or self.kernel_sizes[0] != patch_size
                or self.strides[0] != patch_size
                or self.paddings[0] != 0
            ):
                msg = "patchify stem must be a single layer with kernel == stride == patch size and padding 0"
                raise ConfigurationError(msg)
            if self.kind == "patchify" and self.final_norm != "none":
                msg = "patchify stem has no norm; use kind 'patchify_bn_relu'"
                raise ConfigurationError(msg)
            if self.kind == "patchify_bn_relu" and self.final_norm == "none":
                msg = "patchify_bn_relu stem requires a final norm"
                raise ConfigurationError(msg)
        if self.kind == "conv" and (self.kernel_sizes[-1] != 1 or self.strides[-1] != 1):
            msg = "conv stem must end in a stride-1 1x1 projection"
            raise ConfigurationError(msg)
        if self.downsample != patch_size:
            msg = f"stem downsampling {self.downsample} must equal patch size {patch_size}"
            raise ConfigurationError(msg)
        size = image_size
        for kernel, stride, pad in zip(self.kernel_sizes, self.strides, self.paddings):
            size = conv_output_extent(size, kernel, stride, pad)
            if size <= 0:
                msg = "stem produces a non-positive spatial extent"
                raise ConfigurationError(msg)
        if size != image_size // patch_size:
            msg = f"stem output grid {size} must equal image_size/patch_size = {image_size // patch_size}"
            raise ConfigurationError(msg)


@dataclass(frozen=True)
class EncoderSpec:
    """Transformer encoder and classification head dimensions."""

    hidden_size: int
    mlp_mult: float
    num_heads: int
    num_blocks: int
    image_size: int = 224
    patch_size: int = 16
    num_classes: int = 1000
    init_std: float = 0.02
    norm_eps: float = DEFAULT_EPS

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid + 1

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return round(self.hidden_size * self.mlp_mult)

    def validate(self) -> None:
        if self.hidden_size <= 0 or self.num_heads <= 0 or self.num_classes <= 0:
            msg = "hidden_size, num_heads and num_classes must be positive"
            raise ConfigurationError(msg)
        if self.hidden_size % self.num_heads:
            msg = f"num_heads {self.num_heads} must divide hidden_size {self.hidden_size}"
            raise ConfigurationError(msg)
        if self.mlp_mult <= 0 or not math.isclose(self.hidden_size * self.mlp_mult, self.mlp_dim):
            msg = f"mlp_mult {self.mlp_mult} must be positive and give an integer MLP width"
            raise ConfigurationError(msg)
        if self.num_blocks < 0:
            msg = "num_blocks must be non-negative"
            raise ConfigurationError(msg)
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            msg = f"patch_size {self.patch_size} must be a positive divisor of image_size {self.image_size}"
            raise ConfigurationError(msg)


@dataclass(frozen=True)
class ModelConfig:
    """A stem plus an encoder; fully determines a buildable network."""

    name: str
    stem: StemSpec
    encoder: EncoderSpec

    @property
    def multi_layer_stem(self) -> bool:
        return self.stem.num_layers > 1

    def validate(self) -> None:
        self.encoder.validate()
        self.stem.validate(
            self.encoder.hidden_size,
            self.encoder.image_size,
            self.encoder.patch_size,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        stem = dict(data["stem"])
        for key in ("kernel_sizes", "strides", "paddings", "channels"):
            stem[key] = tuple(int(v) for v in stem[key])
        return cls(
            name=str(data["name"]),
            stem=StemSpec(**stem),
            encoder=EncoderSpec(**data["encoder"]),
        )


def patchify_stem(patch_size: int, hidden_size: int, *, norm: str = "none") -> StemSpec:
    """Single stride-p p x p convolution, optionally followed by norm and ReLU."""
    return StemSpec(
        kind="patchify" if norm == "none" else "patchify_bn_relu",
        kernel_sizes=(patch_size,),
        strides=(patch_size,),
        paddings=(0,),
        channels=(hidden_size,),
        norm="none",
        final_norm=norm,
    )


def conv_stem(
    channels: tuple[int, ...],
    strides: tuple[int, ...],
    hidden_size: int,
    *,
    norm: str = "bn",
) -> StemSpec:
    """Stacked 3x3 convolutions (padding 1) ending in a 1x1 projection to ``hidden_size``."""
    return StemSpec(
        kind="conv",
        kernel_sizes=(3,) * len(channels) + (1,),
        strides=(*strides, 1),
        paddings=(1,) * len(channels) + (0,),
        channels=(*channels, hidden_size),
        norm=norm,
    )


def _encoder(hidden: int, mlp_mult: float, heads: int, blocks: int) -> EncoderSpec:
    return EncoderSpec(hidden_size=hidden, mlp_mult=mlp_mult, num_heads=heads, num_blocks=blocks)


_C1_STEM = ((24, 48, 96, 192), (2, 2, 2, 2))
_C4_STEM = ((48, 96, 192, 384), (2, 2, 2, 2))
# 36GF reuses the 18GF stem body.
_C18_STEM = ((64, 128, 128, 256, 256, 512), (2, 2, 1, 2, 1, 2))

_S_STEMS = {
    "S1": ((3, 3, 3, 2, 1), (2, 2, 2, 2, 1), (1, 1, 1, 0, 0), (42, 104, 208, 416, 384)),
    "S2": ((3, 3, 3, 4, 1), (2, 2, 1, 4, 1), (1, 1, 1, 0, 0), (32, 64, 128, 256, 384)),
    "S3": ((3, 3, 3, 8, 1), (2, 1, 1, 8, 1), (1, 1, 1, 0, 0), (17, 34, 68, 136, 384)),
    "S4": ((3, 3, 3, 16, 1), (1, 1, 1, 16, 1), (1, 1, 1, 0, 0), (8, 16, 32, 64, 384)),
}


def _canonical_table() -> dict[str, ModelConfig]:
    table: dict[str, ModelConfig] = {}
    sizes = {
        "1GF": (192, 3, 3, 12, 11, _C1_STEM),
        "4GF": (384, 3, 6, 12, 11, _C4_STEM),
        "18GF": (768, 4, 12, 12, 11, _C18_STEM),
        "36GF": (1024, 4, 16, 14, 13, _C18_STEM),
    }
    for size, (hidden, mlp, heads, p_blocks, c_blocks, (chans, strides)) in sizes.items():
        table[f"ViT_P-{size}"] = ModelConfig(
            f"ViT_P-{size}",
            patchify_stem(16, hidden),
            _encoder(hidden, mlp, heads, p_blocks),
        )
        table[f"ViT_C-{size}"] = ModelConfig(
            f"ViT_C-{size}",
            conv_stem(chans, strides, hidden),
            _encoder(hidden, mlp, heads, c_blocks),
        )
    base4 = _encoder(384, 3, 6, 11)
    for name, (kernels, strides, pads, chans) in _S_STEMS.items():
        table[f"{name}@4GF"] = ModelConfig(
            f"{name}@4GF",
            StemSpec("custom", kernels, strides, pads, chans, norm="bn"),
            base4,
        )
    table["ViT_P(bn)-4GF"] = ModelConfig(
        "ViT_P(bn)-4GF",
        patchify_stem(16, 384, norm="bn"),
        _encoder(384, 3, 6, 12),
    )
    for norm in ("ln", "none"):
        table[f"ViT_C({norm})-4GF"] = ModelConfig(
            f"ViT_C({norm})-4GF",
            conv_stem(*_C4_STEM, 384, norm=norm),
            base4,
        )
    table["ViT_P-16GF-48blk"] = ModelConfig(
        "ViT_P-16GF-48blk",
        patchify_stem(16, 384),
        _encoder(384, 3, 6, 48),
    )
    table["ViT_C-16GF-47blk"] = ModelConfig(
        "ViT_C-16GF-47blk",
        conv_stem(*_C4_STEM, 384),
        _encoder(384, 3, 6, 47),
    )
    return table


_CANONICAL = _canonical_table()
CANONICAL_NAMES: tuple[str, ...] = tuple(_CANONICAL)
PUBLISHED_NAMES: tuple[str, ...] = tuple(
    f"ViT_{kind}-{size}" for kind in ("P", "C") for size in ("1GF", "4GF", "18GF", "36GF")
)
CANONICAL_PAIRS: tuple[tuple[str, str], ...] = (
    *((f"ViT_P-{s}", f"ViT_C-{s}") for s in ("1GF", "4GF", "18GF", "36GF")),
    ("ViT_P-16GF-48blk", "ViT_C-16GF-47blk"),
)


def canonical_config(name: str) -> ModelConfig:
    """
    Look up one of the published model configurations.

    Args:
        name: A name from ``CANONICAL_NAMES``.

    Returns:
        The configuration exactly as published.

    Raises:
        UnknownModelError: If the name is not recognized.

    """
    try:
        return _CANONICAL[name]
    except KeyError:
        msg = f"Unknown model {name!r}; valid names: {', '.join(CANONICAL_NAMES)}"
        raise UnknownModelError(msg) from None


def _round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def _scaled_stem(stem: StemSpec, hidden: int, width_factor: float, patch_size: int, base_patch: int) -> StemSpec:
    kernels, strides, pads = list(stem.kernel_sizes), list(stem.strides), list(stem.paddings)
    channels = [max(1, _round_half_up(c * width_factor)) for c in stem.channels[:-1]]
    if patch_size != base_patch:
        if stem.kind in ("patchify", "patchify_bn_relu"):
            kernels, strides = [patch_size], [patch_size]
        elif stem.kind == "conv":
            body = None
            product = 1
            for index, stride in enumerate(stem.strides[:-1]):
                product *= stride
                if product == patch_size:
                    body = index + 1
                elif product > patch_size:
                    break
            if body is None:
                msg = f"cannot rescale conv stem of patch size {base_patch} to {patch_size}"
                raise ConfigurationError(msg)
            kernels = [*kernels[:body], kernels[-1]]
            strides = [*strides[:body], strides[-1]]
            pads = [*pads[:body], pads[-1]]
            channels = channels[:body]
        else:
            msg = f"cannot change the patch size of a {stem.kind} stem"
            raise ConfigurationError(msg)
    return replace(
        stem,
        kernel_sizes=tuple(kernels),
        strides=tuple(strides),
        paddings=tuple(pads),
        channels=(*channels, hidden),
    )


def scaled_config(
    base: ModelConfig,
    image_size: int | None = None,
    width_factor: float = 1.0,
    depth_factor: float = 1.0,
    *,
    patch_size: int | None = None,
    num_heads: int | None = None,
    num_classes: int | None = None,
    name: str | None = None,
) -> ModelConfig:
    """
    Shrink (or grow) a configuration while keeping its structural invariants.

    The hidden size is rounded to the nearest multiple of the head count. Models
    with a multi-layer stem keep exactly one block fewer than the patchify
    counterpart they were derived against, so their depth is scaled as
    ``round((L + 1) * depth_factor) - 1``. A conv stem asked for a smaller patch
    size keeps the longest prefix of its 3x3 layers whose strides multiply to
    the new patch size; inner stem channels scale with ``width_factor``.

    Args:
        base: Configuration to scale.
        image_size: New input resolution; defaults to the base resolution.
        width_factor: Multiplier on the hidden size and inner stem channels.
        depth_factor: Multiplier on the block count.
        patch_size: New total stem downsampling; defaults to the base value.
        num_heads: Optional head-count override applied before width rounding.
        num_classes: Optional number of classes for the head.
        name: Name of the result; derived from the base name when omitted.

    Returns:
        A validated configuration.

    """
    enc = base.encoder
    image = image_size or enc.image_size
    patch = patch_size or enc.patch_size
    heads = num_heads or enc.num_heads
    hidden = heads * max(1, _round_half_up(enc.hidden_size * width_factor / heads))
    if base.multi_layer_stem:
        blocks = max(0, _round_half_up((enc.num_blocks + 1) * depth_factor) - 1)
    else:
        blocks = max(0, _round_half_up(enc.num_blocks * depth_factor))
    encoder = replace(
        enc,
        hidden_size=hidden,
        num_heads=heads,
        num_blocks=blocks,
        image_size=image,
        patch_size=patch,
        num_classes=num_classes or enc.num_classes,
    )
    stem = _scaled_stem(base.stem, hidden, width_factor, patch, enc.patch_size)
    if encoder == enc and stem == base.stem:
        return base
    if name is None:
        name = f"{base.name}~d{hidden}-L{blocks}-{image}px-p{patch}"
    config = ModelConfig(name, stem, encoder)
    config.validate()
    return config


@dataclass(frozen=True)
class ParamSpec:
    """Name, shape, decay class and initializer of one parameter."""

    name: str
    shape: tuple[int, ...]
    param_class: str
    init: str

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def parameter_specs(config: ModelConfig) -> list[ParamSpec]:
    """List every parameter the built model will own, in initialization order."""
    specs: list[ParamSpec] = []
    enc, stem = config.encoder, config.stem
    d = enc.hidden_size

    def weight(name: str, shape: tuple[int, ...]) -> None:
        specs.append(ParamSpec(name, shape, "weight", "trunc_normal"))

    def bias(name: str, size: int) -> None:
        specs.append(ParamSpec(name, (size,), "bias", "zeros"))

    def norm(prefix: str, size: int) -> None:
        specs.append(ParamSpec(f"{prefix}.gain", (size,), "norm_gain", "ones"))
        bias(f"{prefix}.bias", size)

    in_channels = IN_CHANNELS
    for i, (kernel, out_channels) in enumerate(zip(stem.kernel_sizes, stem.channels)):
        weight(f"stem.conv{i}.weight", (out_channels, in_channels, kernel, kernel))
        if stem.layer_norm_kind(i) == "none":
            bias(f"stem.conv{i}.bias", out_channels)
        else:
            norm(f"stem.norm{i}", out_channels)
        in_channels = out_channels

    weight("encoder.cls_token", (1, 1, d))
    weight("encoder.pos_embed", (1, enc.num_tokens, d))
    for b in range(enc.num_blocks):
        prefix = f"blocks.{b}"
        norm(f"{prefix}.norm1", d)
        weight(f"{prefix}.attn.qkv.weight", (d, 3 * d))
        bias(f"{prefix}.attn.qkv.bias", 3 * d)
        weight(f"{prefix}.attn.proj.weight", (d, d))
        bias(f"{prefix}.attn.proj.bias", d)
        norm(f"{prefix}.norm2", d)
        weight(f"{prefix}.mlp.fc1.weight", (d, enc.mlp_dim))
        bias(f"{prefix}.mlp.fc1.bias", enc.mlp_dim)
        weight(f"{prefix}.mlp.fc2.weight", (enc.mlp_dim, d))
        bias(f"{prefix}.mlp.fc2.bias", d)
    norm("encoder.norm", d)
    weight("head.weight", (d, enc.num_classes))
    bias("head.bias", enc.num_classes)
    return specs


@dataclass
class Model:
    """A built network: parameters, their classes, and batch-norm state."""

    config: ModelConfig
    params: dict[str, Tensor]
    param_classes: dict[str, str]
    running_stats: dict[str, RunningStats] = field(default_factory=dict)
    last_token_shape: tuple[int, ...] | None = None

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def clone(self) -> Model:
        """Deep copy of parameters and running statistics, with no gradients."""
        return Model(
            config=self.config,
            params={
                name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
                for name, p in self.params.items()
            },
            param_classes=dict(self.param_classes),
            running_stats={
                name: RunningStats(s.mean.copy(), s.var.copy(), s.updates)
                for name, s in self.running_stats.items()
            },
        )

    def forward(self, images: Tensor, mode: str = "train") -> Tensor:
        return forward(self, images, mode)

    def embed(self, images: Tensor, mode: str = "train") -> Tensor:
        """Stem plus class token and position embeddings: (B, tokens, d)."""
        enc = self.config.encoder
        expected = (IN_CHANNELS, enc.image_size, enc.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            msg = f"expected images of shape (B, {', '.join(map(str, expected))}), got {images.shape}"
            raise InputError(msg)
        features = self._stem(images, mode)
        batch, width, grid_h, grid_w = features.shape
        patches = features.reshape(batch, width, grid_h * grid_w).transpose(0, 2, 1)
        cls = self.params["encoder.cls_token"] + np.zeros((batch, 1, width), dtype=patches.dtype)
        tokens = concat([cls, patches], axis=1) + self.params["encoder.pos_embed"]
        self.last_token_shape = tokens.shape
        return tokens

    def _stem(self, x: Tensor, mode: str) -> Tensor:
        stem = self.config.stem
        eps = self.config.encoder.norm_eps
        for i in range(stem.num_layers):
            x = conv2d(
                x,
                self.params[f"stem.conv{i}.weight"],
                self.params.get(f"stem.conv{i}.bias"),
                stride=stem.strides[i],
                padding=stem.paddings[i],
            )
            kind = stem.layer_norm_kind(i)
            if kind == "none":
                continue
            gain = self.params[f"stem.norm{i}.gain"]
            beta = self.params[f"stem.norm{i}.bias"]
            if kind == "bn":
                x = batchnorm2d(x, gain, beta, self.running_stats[f"stem.norm{i}"], mode, eps=eps)
            else:
                x = layernorm(x.transpose(0, 2, 3, 1), gain, beta, eps).transpose(0, 3, 1, 2)
            x = relu(x)
        return x

    def _block(self, x: Tensor, index: int) -> Tensor:
        p = self.params
        prefix = f"blocks.{index}"
        enc = self.config.encoder
        batch, tokens, width = x.shape
        heads, head_dim = enc.num_heads, enc.head_dim

        h = layernorm(x, p[f"{prefix}.norm1.gain"], p[f"{prefix}.norm1.bias"], enc.norm_eps)
        qkv = h @ p[f"{prefix}.attn.qkv.weight"] + p[f"{prefix}.attn.qkv.bias"]
        qkv = qkv.reshape(batch, tokens, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        attended = (softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, width)
        x = x + (attended @ p[f"{prefix}.attn.proj.weight"] + p[f"{prefix}.attn.proj.bias"])

        h = layernorm(x, p[f"{prefix}.norm2.gain"], p[f"{prefix}.norm2.bias"], enc.norm_eps)
        h = gelu(h @ p[f"{prefix}.mlp.fc1.weight"] + p[f"{prefix}.mlp.fc1.bias"])
        return x + (h @ p[f"{prefix}.mlp.fc2.weight"] + p[f"{prefix}.mlp.fc2.bias"])


def _initialize(spec: ParamSpec, rng: np.random.Generator, std: float, dtype: Any) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=dtype)
    values = truncnorm.rvs(-2.0, 2.0, scale=std, size=spec.shape, random_state=rng)
    return np.asarray(values, dtype=dtype)


def build(config: ModelConfig, seed: int = 0, dtype: Any = np.float32) -> Model:
    """
    Build a model with deterministic initialization.

    Args:
        config: Model configuration; validated before allocation.
        seed: Initialization seed.
        dtype: Parameter dtype (float64 for gradient checks).

    Returns:
        The built model.

    """
    config.validate()
    rng = np.random.default_rng(seed)
    std = config.encoder.init_std
    params: dict[str, Tensor] = {}
    classes: dict[str, str] = {}
    for spec in parameter_specs(config):
        params[spec.name] = Tensor(_initialize(spec, rng, std, dtype), requires_grad=True)
        classes[spec.name] = spec.param_class
    running = {
        f"stem.norm{i}": RunningStats.initial(config.stem.channels[i], dtype)
        for i in range(config.stem.num_layers)
        if config.stem.layer_norm_kind(i) == "bn"
    }
    model = Model(config, params, classes, running)
    logger.debug("Built %s with %d parameters", config.name, model.param_count)
    return model


def forward(model: Model, images: Tensor, mode: str = "train") -> Tensor:
    """
    Compute class logits.

    Args:
        model: A built model.
        images: Batch of shape (B, 3, H, W) at the configured resolution.
        mode: "train" or "eval"; only batch-norm stems behave differently.

    Returns:
        Logits of shape (B, num_classes).

    """
    if mode not in ("train", "eval"):
        msg = f"mode must be 'train' or 'eval', got {mode!r}"
        raise InputError(msg)
    p = model.params
    x = model.embed(images, mode)
    for index in range(model.config.encoder.num_blocks):
        x = model._block(x, index)
    x = layernorm(x, p["encoder.norm.gain"], p["encoder.norm.bias"], model.config.encoder.norm_eps)
    return x[:, 0] @ p["head.weight"] + p["head.bias"]
