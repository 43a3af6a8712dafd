"""Pixel-to-pixel alignment between images via sampled cost matrices.

A cost matrix holds negative cosine similarities between sampled pixels of
a test image and sampled pixels of a reference image. Aligners pick one
reference pixel per test pixel, either independently per row (greedy) or as
an injective minimum-cost assignment, and reduce the chosen costs to a
single alignment score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import min_cost_assignment
from .encoder import Encoder, HypercolumnField, encode_fields
from .numcore import (
    NumericsError,
    ShapeError,
    Tensor,
    gather_rows,
    matmul,
    neg,
    normalize_rows,
    reduce_min,
    softmax_np,
    take_pairs,
    tmean,
    transpose,
    tsum,
)

AGGREGATIONS = ("mean", "sum")


@dataclass(frozen=True)
class PixelSample:
    """A sorted subset of row-major pixel indices of one image."""

    height: int
    width: int
    indices: np.ndarray
    fraction: float

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class CostMatrix:
    """Sampled pairwise matching costs; entry (a, b) compares test pixel
    row_pixels[a] with reference pixel col_pixels[b]."""

    costs: Tensor
    row_pixels: np.ndarray
    col_pixels: np.ndarray

    @property
    def rows(self) -> int:
        return self.costs.shape[0]

    @property
    def cols(self) -> int:
        return self.costs.shape[1]


@dataclass
class AlignmentResult:
    """Chosen reference column and cost per test row, plus the aggregate."""

    columns: np.ndarray
    row_costs: np.ndarray
    zeta: float
    aggregation: str
    injective: bool
    zeta_node: Tensor  # differentiable aggregate, same value as zeta


def sample_pixels(
    dims: tuple[int, int],
    fraction: float,
    rng: np.random.Generator,
    forced=None,
) -> PixelSample:
    """Uniform sample without replacement of round(fraction * pixels) pixels.

    ``forced`` indices are always included (union). Rounding is half-up and
    the sample never goes below one pixel.
    """
    h, w = dims
    total = h * w
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    count = max(1, int(np.floor(fraction * total + 0.5)))
    chosen = rng.choice(total, size=count, replace=False)
    if forced is not None:
        forced = np.asarray(forced, dtype=np.intp)
        if forced.size and (forced.min() < 0 or forced.max() >= total):
            raise IndexError(f"forced pixel indices out of range [0, {total})")
        chosen = np.union1d(chosen, forced)
    return PixelSample(h, w, np.sort(np.unique(chosen)).astype(np.intp), fraction)


def cost_matrix(
    field_t: HypercolumnField,
    field_r: HypercolumnField,
    sample_t: PixelSample,
    sample_r: PixelSample,
    eps: float = 1e-12,
) -> CostMatrix:
    """Negative cosine similarity between every sampled pixel pair.

    Differentiable: gradients flow back into both fields. ``eps`` pads the
    norm of each descriptor so zero vectors divide cleanly.
    """
    if field_t.dim != field_r.dim:
        raise ShapeError(
            f"field dimensions differ: {field_t.dim} vs {field_r.dim}"
        )
    if (sample_t.height, sample_t.width) != (field_t.height, field_t.width):
        raise ShapeError("test sample dims do not match the test field")
    if (sample_r.height, sample_r.width) != (field_r.height, field_r.width):
        raise ShapeError("reference sample dims do not match the reference field")

    q = normalize_rows(gather_rows(field_t.features, sample_t.indices), eps=eps)
    r = normalize_rows(gather_rows(field_r.features, sample_r.indices), eps=eps)
    costs = neg(matmul(q, transpose(r)))
    if not np.all(np.isfinite(costs.data)):
        raise NumericsError("cost matrix contains non-finite entries")
    if np.abs(costs.data).max() > 1.0 + 1e-5:
        raise NumericsError("cosine costs left the [-1, 1] range")
    return CostMatrix(costs, sample_t.indices.copy(), sample_r.indices.copy())


def match_probabilities(cost_row) -> np.ndarray:
    """Match distribution over one row's candidates: softmax of negated costs."""
    row = np.asarray(cost_row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ShapeError(f"need a non-empty 1-d cost row, got shape {row.shape}")
    if not np.all(np.isfinite(row)):
        raise NumericsError("cost row contains non-finite entries")
    return softmax_np(-row)


def _aggregate(values: Tensor, aggregation: str) -> Tensor:
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    return tmean(values) if aggregation == "mean" else tsum(values)


def greedy_align(cost: CostMatrix, aggregation: str = "mean") -> AlignmentResult:
    """Independent per-row minimum; several rows may share a column."""
    minima, columns = reduce_min(cost.costs, axis=1)
    node = _aggregate(minima, aggregation)
    return AlignmentResult(
        columns=columns,
        row_costs=minima.data.copy(),
        zeta=float(node.data),
        aggregation=aggregation,
        injective=False,
        zeta_node=node,
    )


def hungarian_align(cost: CostMatrix, aggregation: str = "mean") -> AlignmentResult:
    """Injective minimum-total-cost assignment of rows to columns."""
    if cost.rows > cost.cols:
        raise ShapeError(
            f"assignment needs rows <= cols, got {cost.rows}x{cost.cols}"
        )
    columns = min_cost_assignment(cost.costs.data)
    chosen = take_pairs(cost.costs, np.arange(cost.rows), columns)
    node = _aggregate(chosen, aggregation)
    return AlignmentResult(
        columns=columns,
        row_costs=chosen.data.copy(),
        zeta=float(node.data),
        aggregation=aggregation,
        injective=True,
        zeta_node=node,
    )


ALIGNERS = {"greedy": greedy_align, "hungarian": hungarian_align}


def align_images(
    image_t,
    image_r,
    encoder: Encoder,
    fractions: tuple[float, float] = (0.10, 0.20),
    rng: np.random.Generator | None = None,
    method: str = "greedy",
    mode: str = "auto",
    aggregation: str = "mean",
) -> tuple[CostMatrix, AlignmentResult]:
    """Encode two images, sample pixels, and align the samples.

    Aligning an image with itself (pixel-equal inputs) forces every sampled
    test pixel into the reference sample, so the identity match is always
    available. ``mode`` "auto" uses running batch-norm statistics when they
    exist and batch statistics otherwise.
    """
    if method not in ALIGNERS:
        raise ValueError(f"method must be one of {sorted(ALIGNERS)}, got {method!r}")
    rng = rng or np.random.default_rng(0)
    if mode == "auto":
        mode = "eval" if encoder.eval_ready() else "train"

    image_t = np.asarray(image_t)
    image_r = np.asarray(image_r)
    self_alignment = image_t.shape == image_r.shape and np.array_equal(image_t, image_r)

    # one batch so train-mode normalization sees both images together
    batch = np.stack([image_t, image_r])
    if encoder.config.shared_weights:
        field_t, field_r = encode_fields(batch, encoder, mode, role="test")
    else:
        field_t = encode_fields(batch, encoder, mode, role="test")[0]
        field_r = encode_fields(batch, encoder, mode, role="ref")[1]

    dims = (encoder.config.height, encoder.config.width)
    sample_t = sample_pixels(dims, fractions[0], rng)
    forced = sample_t.indices if self_alignment else None
    sample_r = sample_pixels(dims, fractions[1], rng, forced=forced)
    matrix = cost_matrix(field_t, field_r, sample_t, sample_r)
    return matrix, ALIGNERS[method](matrix, aggregation)
