"""Classification heads over per-reference alignment costs.

Closed-set: softmax over the negated, scaled cost of aligning the query to
each reference. Open-set: one extra slot whose logit comes from a learnable
threshold; the query is called "none of the references" (label 0) exactly
when every alignment cost exceeds the threshold. Self-regularization pushes
each sampled pixel to match itself when an image is aligned against itself.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .alignment import ALIGNERS, PixelSample, cost_matrix, sample_pixels
from .encoder import Encoder, HypercolumnField, encode_fields, run_blocks
from .episodes import Episode, episode_image_batch
from .numcore import (
    Tensor,
    add,
    concat,
    exp,
    gather_rows,
    logsumexp,
    matmul,
    mul,
    neg,
    normalize_rows,
    reshape,
    softmax_np,
    stack_scalars,
    sub,
    take,
    take_pairs,
    tmean,
    transpose,
)

OPEN_LABEL = 0

HEAD_KINDS = ("alignment", "embedding")


@dataclass
class OpenSetHead:
    """Learnable rejection threshold and positive sharpness for the softmax.

    The sharpness is stored as its logarithm so it stays positive under
    unconstrained gradient steps.
    """

    tau: Tensor
    log_scale: Tensor

    @classmethod
    def create(cls, tau_init: float = 0.0, scale_init: float = 10.0, dtype=np.float32) -> "OpenSetHead":
        if not np.isfinite(scale_init) or scale_init <= 0.0:
            raise ValueError(f"scale_init must be positive and finite, got {scale_init}")
        if not np.isfinite(tau_init):
            raise ValueError(f"tau_init must be finite, got {tau_init}")
        tau = Tensor(np.asarray(tau_init, dtype=dtype), requires_grad=True)
        log_scale = Tensor(np.asarray(np.log(scale_init), dtype=dtype), requires_grad=True)
        return cls(tau, log_scale)

    @property
    def tau_value(self) -> float:
        return float(self.tau.data)

    @property
    def scale_value(self) -> float:
        return float(np.exp(self.log_scale.data))

    def scale_node(self) -> Tensor:
        return exp(self.log_scale)

    def parameters(self) -> dict[str, Tensor]:
        return {"head.tau": self.tau, "head.log_scale": self.log_scale}


@dataclass
class LabelPosterior:
    """Probabilities over candidate labels; label 0 is the open slot."""

    labels: np.ndarray
    probabilities: np.ndarray
    predicted: int


def _aggregate_labels(labels: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum probabilities of slots sharing a label; labels come out ascending."""
    uniq = np.unique(labels)
    if len(uniq) == len(labels):
        order = np.argsort(labels, kind="stable")
        return labels[order], probs[order]
    agg = np.array([probs[labels == u].sum() for u in uniq])
    return uniq, agg


def _check_zetas(zetas) -> np.ndarray:
    zetas = np.asarray(zetas, dtype=np.float64)
    if zetas.ndim != 1 or zetas.size == 0:
        raise ValueError(f"expected a non-empty 1-d cost vector, got shape {zetas.shape}")
    if not np.all(np.isfinite(zetas)):
        raise ValueError("alignment costs contain non-finite values")
    return zetas


def _check_labels(labels, n: int) -> np.ndarray:
    if labels is None:
        return np.arange(1, n + 1)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 1:
        raise ValueError("reference labels must be >= 1; label 0 is the open slot")
    return labels


def abm_posterior(zetas, scale: float, labels=None) -> LabelPosterior:
    """Closed-set posterior: softmax over negated, scaled alignment costs.

    Slots sharing a label pool their probability. Ties in the argmax go to
    the lowest label.
    """
    zetas = _check_zetas(zetas)
    if not np.isfinite(scale) or scale <= 0.0:
        raise ValueError(f"scale must be positive and finite, got {scale}")
    labels = _check_labels(labels, len(zetas))
    probs = softmax_np(-scale * zetas)
    out_labels, out_probs = _aggregate_labels(labels, probs)
    predicted = int(out_labels[int(np.argmax(out_probs))])
    return LabelPosterior(out_labels, out_probs, predicted)


def openmax_posterior(zetas, head: OpenSetHead, labels=None) -> LabelPosterior:
    """Posterior over (open slot, references): the threshold fills slot 0.

    The open slot wins exactly when every cost exceeds the threshold; the
    boundary (minimum cost equal to the threshold) stays with the references.
    """
    zetas = _check_zetas(zetas)
    labels = _check_labels(labels, len(zetas))
    scale = head.scale_value
    tau = head.tau_value
    logits = -scale * np.concatenate([[tau], zetas])
    probs = softmax_np(logits)
    full_labels = np.concatenate([[OPEN_LABEL], labels])
    out_labels, out_probs = _aggregate_labels(full_labels, probs)
    if zetas.min() > tau:
        predicted = OPEN_LABEL
    else:
        closed = out_labels != OPEN_LABEL
        closed_labels = out_labels[closed]
        predicted = int(closed_labels[int(np.argmax(out_probs[closed]))])
    return LabelPosterior(out_labels, out_probs, predicted)


def self_regularization_loss(field: HypercolumnField, sample: PixelSample, ref_sample: PixelSample) -> Tensor:
    """Mean negative log-probability that each sampled pixel matches itself.

    The image is aligned against itself: row i of the cost matrix compares
    sampled pixel i with every reference-sampled pixel, and the "right"
    column is pixel i's own slot, which must be present in ``ref_sample``.
    """
    present = np.isin(sample.indices, ref_sample.indices)
    if not present.all():
        missing = sample.indices[~present][:5]
        raise ValueError(f"identity columns missing from the reference sample: {missing.tolist()}")
    cm = cost_matrix(field, field, sample, ref_sample)
    # -log softmax(-C)[i, id(i)] = logsumexp(-C_i) + C[i, id(i)]
    lse = logsumexp(neg(cm.costs), axis=1)
    id_cols = np.searchsorted(ref_sample.indices, sample.indices)
    picked = take_pairs(cm.costs, np.arange(len(sample.indices)), id_cols)
    return tmean(add(lse, picked))


def baseline_embeddings(images, encoder: Encoder, mode: str, role: str = "test") -> Tensor:
    """Unit-norm global image descriptors: spatial mean of the final block."""
    final = run_blocks(images, encoder, mode, role)[-1]
    b, c, h, w = final.shape
    emb = tmean(reshape(final, (b, c, h * w)), axis=2)
    return normalize_rows(emb)


def baseline_posterior(
    query_image,
    support_images,
    encoder: Encoder,
    head: OpenSetHead,
    mode: str = "eval",
    labels=None,
    open_set: bool = False,
) -> LabelPosterior:
    """Whole-image matching head: costs are negated embedding cosines.

    Images are channel-first (C, H, W); the query is encoded in the same
    batch as the references.
    """
    batch = np.stack([np.asarray(query_image)] + [np.asarray(s) for s in support_images])
    embs = baseline_embeddings(batch, encoder, mode)
    sims = embs.data[0] @ embs.data[1:].T
    zetas = -sims
    if open_set:
        return openmax_posterior(zetas, head, labels)
    return abm_posterior(zetas, head.scale_value, labels)


@dataclass(frozen=True)
class LossConfig:
    """Knobs for the episodic objective.

    ``self_weight`` multiplies the self-match term; it only applies to the
    alignment head (the embedding head has no pixel correspondences).
    """

    fraction_test: float = 0.10
    fraction_ref: float = 0.20
    aggregation: str = "mean"
    method: str = "greedy"
    self_weight: float = 1.0
    head_kind: str = "alignment"

    def __post_init__(self):
        if self.method not in ALIGNERS:
            raise ValueError(f"unknown alignment method {self.method!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.self_weight < 0.0:
            raise ValueError(f"self_weight must be >= 0, got {self.self_weight}")


def _logits_from_zetas(zeta_vec: Tensor, head: OpenSetHead, open_slot: bool) -> Tensor:
    scale = head.scale_node()
    closed = neg(mul(zeta_vec, scale))
    if not open_slot:
        return closed
    slot0 = reshape(neg(mul(head.tau, scale)), (1,))
    return concat([slot0, closed], axis=0)


def _cross_entropy(logits: Tensor, slot_labels: np.ndarray, target: int) -> Tensor:
    """Negative log of the summed probability of slots carrying ``target``."""
    idx = np.flatnonzero(slot_labels == target)
    if idx.size == 0:
        raise ValueError(f"label {target} is outside the episode label set {sorted(set(slot_labels.tolist()))}")
    return sub(logsumexp(logits), logsumexp(take(logits, idx)))


def _posterior_from_logits(
    logits: np.ndarray,
    slot_labels: np.ndarray,
    open_slot: bool,
    zetas: np.ndarray,
    tau: float,
) -> LabelPosterior:
    probs = softmax_np(logits)
    out_labels, out_probs = _aggregate_labels(slot_labels, probs)
    if open_slot and zetas.min() > tau:
        predicted = OPEN_LABEL
    else:
        closed = out_labels != OPEN_LABEL
        closed_labels = out_labels[closed]
        predicted = int(closed_labels[int(np.argmax(out_probs[closed]))])
    return LabelPosterior(out_labels, out_probs, predicted)


def episode_loss(
    episode: Episode,
    encoder: Encoder,
    head: OpenSetHead,
    config: LossConfig = LossConfig(),
    rng: np.random.Generator | None = None,
    mode: str = "train",
) -> tuple[Tensor, list[LabelPosterior]]:
    """Mean query cross-entropy plus the weighted mean self-match term.

    Open-set episodes get the extra slot-0 logit from the threshold. Query
    labels must belong to the episode's label set. The returned posteriors
    (one per query) are detached reporting artifacts.
    """
    if rng is None:
        rng = np.random.default_rng()
    if not episode.queries:
        raise ValueError("episode has no queries")

    n_support = len(episode.supports)
    support_labels = np.array([lab for _, lab in episode.supports], dtype=np.int64)
    open_slot = episode.open_class is not None
    slot_labels = np.concatenate([[OPEN_LABEL], support_labels]) if open_slot else support_labels
    valid = set(slot_labels.tolist())
    for _, lab in episode.queries:
        if lab not in valid:
            raise ValueError(f"query label {lab} is outside the episode label set {sorted(valid)}")

    batch = episode_image_batch(episode)
    ce_terms: list[Tensor] = []
    self_terms: list[Tensor] = []
    posteriors: list[LabelPosterior] = []

    if config.head_kind == "embedding":
        embs = baseline_embeddings(batch, encoder, mode)
        sup = gather_rows(embs, np.arange(n_support))
        for qi, (_, lab) in enumerate(episode.queries):
            q = gather_rows(embs, np.array([n_support + qi]))
            zeta_vec = neg(reshape(matmul(q, transpose(sup)), (n_support,)))
            logits = _logits_from_zetas(zeta_vec, head, open_slot)
            ce_terms.append(_cross_entropy(logits, slot_labels, lab))
            posteriors.append(
                _posterior_from_logits(logits.data.copy(), slot_labels, open_slot, zeta_vec.data.copy(), head.tau_value)
            )
    else:
        fields = encode_fields(batch, encoder, mode)
        dims = (fields[0].height, fields[0].width)
        ref_samples = [sample_pixels(dims, config.fraction_ref, rng) for _ in range(n_support)]
        for qi, (_, lab) in enumerate(episode.queries):
            f_q = fields[n_support + qi]
            t_sample = sample_pixels(dims, config.fraction_test, rng)
            zeta_nodes = []
            for sj in range(n_support):
                cm = cost_matrix(f_q, fields[sj], t_sample, ref_samples[sj])
                zeta_nodes.append(ALIGNERS[config.method](cm, config.aggregation).zeta_node)
            zeta_vec = stack_scalars(zeta_nodes)
            logits = _logits_from_zetas(zeta_vec, head, open_slot)
            ce_terms.append(_cross_entropy(logits, slot_labels, lab))
            posteriors.append(
                _posterior_from_logits(logits.data.copy(), slot_labels, open_slot, zeta_vec.data.copy(), head.tau_value)
            )
            # drawn unconditionally so the rng stream does not depend on the weight
            r_sample = sample_pixels(dims, config.fraction_ref, rng, forced=t_sample.indices)
            if config.self_weight != 0.0:
                self_terms.append(self_regularization_loss(f_q, t_sample, r_sample))

    loss = tmean(stack_scalars(ce_terms))
    if self_terms:
        loss = add(loss, mul(tmean(stack_scalars(self_terms)), config.self_weight))
    return loss, posteriors


def closed_config(config: LossConfig) -> LossConfig:
    """The same objective without the self-match term."""
    return replace(config, self_weight=0.0)
