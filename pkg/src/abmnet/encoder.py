"""Convolutional encoder producing per-pixel stacked feature descriptors.

Images run through a stack of conv -> batch-norm -> ReLU blocks (some
followed by 2x2 max-pooling); every active block's activation map is
upsampled back to input resolution and the maps are concatenated along the
feature axis, so each pixel carries one descriptor that mixes fine and
coarse context.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numcore import (
    BatchNormState,
    NumericsError,
    ShapeError,
    Tensor,
    batch_norm,
    concat,
    conv2d,
    max_pool2,
    normalize_rows,
    relu,
    reshape,
    select_index,
    transpose,
    upsample_nearest,
    xavier_uniform_init,
)


class ConfigError(ValueError):
    """An encoder configuration violates its invariants."""


ROLES = ("test", "ref")


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the feature extractor.

    Block ids are 1-based everywhere a user sees them: ``pool_after`` lists
    blocks whose output is 2x2 max-pooled, ``active_blocks`` selects which
    blocks contribute to the stacked descriptor (None means all).
    """

    height: int = 28
    width: int = 28
    channels: int = 1
    block_channels: tuple[int, ...] = (32, 64, 64, 64)
    pool_after: tuple[int, ...] = (1, 2)
    shared_weights: bool = True
    active_blocks: tuple[int, ...] | None = None
    normalize_per_block: bool = False

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError(f"bad input dims {self.height}x{self.width}x{self.channels}")
        if not self.block_channels:
            raise ConfigError("encoder needs at least one block")
        if any(c < 1 for c in self.block_channels):
            raise ConfigError(f"block channel counts must be positive, got {self.block_channels}")
        n = len(self.block_channels)
        for b in self.pool_after:
            if not 1 <= b <= n:
                raise ConfigError(f"pool_after references block {b} of {n}")
        if self.active_blocks is not None:
            if not self.active_blocks:
                raise ConfigError("active block mask may not be empty")
            for b in self.active_blocks:
                if not 1 <= b <= n:
                    raise ConfigError(f"active block {b} out of range 1..{n}")
            if len(set(self.active_blocks)) != len(self.active_blocks):
                raise ConfigError(f"duplicate active blocks in {self.active_blocks}")

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)

    def active(self) -> tuple[int, ...]:
        if self.active_blocks is None:
            return tuple(range(1, self.num_blocks + 1))
        return tuple(sorted(self.active_blocks))

    @property
    def hypercolumn_dim(self) -> int:
        return sum(self.block_channels[b - 1] for b in self.active())

    def with_mask(self, active_blocks: tuple[int, ...] | None) -> "EncoderConfig":
        return replace(self, active_blocks=active_blocks)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "block_channels": list(self.block_channels),
            "pool_after": list(self.pool_after),
            "shared_weights": self.shared_weights,
            "active_blocks": None if self.active_blocks is None else list(self.active_blocks),
            "normalize_per_block": self.normalize_per_block,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {
            "height",
            "width",
            "channels",
            "block_channels",
            "pool_after",
            "shared_weights",
            "active_blocks",
            "normalize_per_block",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("block_channels", "pool_after"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("active_blocks") is not None:
            d["active_blocks"] = tuple(d["active_blocks"])
        return cls(**d)


@dataclass
class Encoder:
    """Parameter collection for one (or a shared pair of) feature extractors."""

    config: EncoderConfig
    params: dict[str, Tensor]
    bn_states: dict[str, BatchNormState]
    dtype: np.dtype

    def role_key(self, role: str) -> str:
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        return "shared" if self.config.shared_weights else role

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def eval_ready(self) -> bool:
        return all(s.initialized for s in self.bn_states.values())


@dataclass
class HypercolumnField:
    """Per-pixel descriptors of one image: row i is pixel i in row-major order."""

    height: int
    width: int
    features: Tensor  # (H*W, D)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.height * self.width


def build_encoder(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Encoder:
    """Fresh parameters: Xavier conv kernels, zero biases, unit-gamma norms."""
    params: dict[str, Tensor] = {}
    states: dict[str, BatchNormState] = {}
    roles = ("shared",) if config.shared_weights else ROLES
    for role in roles:
        in_ch = config.channels
        for i, ch in enumerate(config.block_channels, start=1):
            params[f"{role}.b{i}.conv_w"] = xavier_uniform_init((ch, in_ch, 3, 3), rng, dtype)
            params[f"{role}.b{i}.conv_b"] = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
            params[f"{role}.b{i}.gamma"] = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
            params[f"{role}.b{i}.beta"] = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
            states[f"{role}.b{i}"] = BatchNormState.create(ch, dtype=dtype)
            in_ch = ch
    return Encoder(config=config, params=params, bn_states=states, dtype=np.dtype(dtype))


def _as_batch(images, config: EncoderConfig, dtype) -> Tensor:
    if isinstance(images, Tensor):
        x = images
    else:
        x = Tensor(np.asarray(images), dtype=dtype)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) images, got shape {x.shape}")
    n, c, h, w = x.shape
    if (c, h, w) != (config.channels, config.height, config.width):
        raise ShapeError(
            f"images are {c}x{h}x{w} but the encoder is configured for "
            f"{config.channels}x{config.height}x{config.width}"
        )
    return x


def run_blocks(images, encoder: Encoder, mode: str, role: str = "test") -> list[Tensor]:
    """Per-block activations for a batch of images.

    Each block's activation is taken before its pooling step, so block 1
    keeps full pixel resolution in the stacked descriptor; pooling only
    shrinks the input of the next block.
    """
    config = encoder.config
    key = encoder.role_key(role)
    h = _as_batch(images, config, encoder.dtype)
    acts: list[Tensor] = []
    for i in range(1, config.num_blocks + 1):
        p = encoder.params
        h = conv2d(h, p[f"{key}.b{i}.conv_w"], p[f"{key}.b{i}.conv_b"])
        h = batch_norm(h, p[f"{key}.b{i}.gamma"], p[f"{key}.b{i}.beta"], mode, encoder.bn_states[f"{key}.b{i}"])
        h = relu(h)
        acts.append(h)
        if i in config.pool_after:
            h = max_pool2(h)
    return acts


def encode_fields(images, encoder: Encoder, mode: str, role: str = "test") -> list[HypercolumnField]:
    """Hypercolumn fields for a batch, sharing one batch-norm pass.

    In train mode the batch statistics pool over every image given here, so
    callers control the normalization group by what they batch together.
    """
    config = encoder.config
    acts = run_blocks(images, encoder, mode, role)
    target = (config.height, config.width)
    ups = [upsample_nearest(acts[b - 1], target) for b in config.active()]
    n = ups[0].shape[0]
    num_px = config.height * config.width

    fields = []
    for img in range(n):
        pieces = []
        for a in ups:
            block = select_index(a, img, axis=0)  # (d, H, W)
            flat = transpose(reshape(block, (block.shape[0], num_px)))  # (HW, d)
            if config.normalize_per_block:
                flat = normalize_rows(flat)
            pieces.append(flat)
        feats = pieces[0] if len(pieces) == 1 else concat(pieces, axis=1)
        if not np.all(np.isfinite(feats.data)):
            raise NumericsError("hypercolumn features contain non-finite values")
        fields.append(HypercolumnField(config.height, config.width, feats))
    return fields


def encode_hypercolumn(image, encoder: Encoder, mode: str, role: str = "test") -> HypercolumnField:
    """Hypercolumn field of a single image."""
    return encode_fields(image, encoder, mode, role)[0]


def feature_at(field: HypercolumnField, index: int) -> np.ndarray:
    """The stacked descriptor of one pixel (row-major index)."""
    if not 0 <= index < field.num_pixels:
        raise IndexError(f"pixel index {index} out of range [0, {field.num_pixels})")
    return field.features.data[index].copy()
