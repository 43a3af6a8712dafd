"""Episodic training loop and evaluation harness.

Training averages gradients over a batch of independently sampled episodes
and takes one Adam step per batch. Every episode's random stream is derived
from (run seed, epoch, batch, slot), so a divergence report names the exact
episode that blew up. Validation runs after every epoch; the best-validation
model is snapshotted.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .encoder import Encoder, EncoderConfig, build_encoder
from .episodes import Dataset, Episode, sample_episode
from .heads import LossConfig, OpenSetHead, closed_config, episode_loss
from .numcore import NonFiniteGradientError, OptimizerState, Tensor, adam_step

VAL_STREAM = 999_979  # keeps validation sampling off the training streams


class TrainingDivergedError(RuntimeError):
    """Loss or gradients left the reals; carries the offending episode seed."""

    def __init__(self, message: str, episode_seed: tuple[int, ...] | None = None):
        super().__init__(message)
        self.episode_seed = episode_seed


@dataclass(frozen=True)
class TrainConfig:
    way: int = 5
    shot: int = 1
    queries: int = 1
    open_set: bool = False
    episodes_per_epoch: int = 1000
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay: float = 1e-6
    val_episodes: int = 500
    test_episodes: int = 1000
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("way", "shot", "queries", "episodes_per_epoch", "epochs", "batch_size", "val_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class EvalResult:
    accuracy: float
    precision: float
    recall: float
    f1: float
    ci95: float
    episodes: int
    queries: int


@dataclass
class TrainResult:
    encoder: Encoder
    head: OpenSetHead
    optimizer: OptimizerState
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    best_path: str | None


def f1_open_set(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 for the rejection decision; empty ratios are 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def thread_count(override: int | None = None) -> int:
    if override is None:
        raw = os.environ.get("ABM_THREADS")
        if raw is None or raw == "":
            return 1
        try:
            override = int(raw)
        except ValueError:
            raise ValueError(f"ABM_THREADS must be an integer, got {raw!r}") from None
    if override < 1:
        raise ValueError(f"thread count must be >= 1, got {override}")
    return override


def make_predictor(encoder: Encoder, head: OpenSetHead, loss_config: LossConfig = LossConfig()):
    """Per-query label predictions from the current model, in eval mode."""
    cfg = closed_config(loss_config)  # the self term never moves predictions

    def predict(episode: Episode, rng: np.random.Generator) -> list[int]:
        _, posteriors = episode_loss(episode, encoder, head, cfg, rng=rng, mode="eval")
        return [p.predicted for p in posteriors]

    return predict


def evaluate(
    dataset: Dataset,
    predictor,
    way: int,
    shot: int,
    queries: int,
    open_set: bool,
    episodes: int,
    rng: np.random.Generator,
    threads: int | None = None,
) -> EvalResult:
    """Accuracy with a 95% interval over episodes, plus rejection P/R/F1.

    Episodes and per-episode streams are drawn sequentially first, so the
    result does not depend on the thread count.
    """
    if episodes < 1:
        raise ValueError(f"need at least one evaluation episode, got {episodes}")
    workers = thread_count(threads)

    jobs = []
    for _ in range(episodes):
        ep = sample_episode(dataset, way, shot, queries, open_set, rng)
        jobs.append((ep, np.random.default_rng(rng.integers(2**63))))

    def run(job):
        ep, erng = job
        preds = predictor(ep, erng)
        if len(preds) != len(ep.queries):
            raise ValueError(f"predictor returned {len(preds)} labels for {len(ep.queries)} queries")
        return ep, preds

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(job) for job in jobs]

    per_episode = []
    correct = total = tp = fp = fn = 0
    for ep, preds in outcomes:
        hits = 0
        for (_, truth), pred in zip(ep.queries, preds):
            hits += pred == truth
            tp += truth == 0 and pred == 0
            fp += truth != 0 and pred == 0
            fn += truth == 0 and pred != 0
        correct += hits
        total += len(ep.queries)
        per_episode.append(hits / len(ep.queries))

    precision, recall, f1 = f1_open_set(tp, fp, fn)
    acc = np.asarray(per_episode)
    ci95 = 1.96 * acc.std(ddof=1) / math.sqrt(len(acc)) if len(acc) > 1 else 0.0
    return EvalResult(
        accuracy=correct / total,
        precision=precision,
        recall=recall,
        f1=f1,
        ci95=float(ci95),
        episodes=episodes,
        queries=total,
    )


def evaluate_model(
    dataset: Dataset,
    encoder: Encoder,
    head: OpenSetHead,
    config: TrainConfig,
    episodes: int,
    rng: np.random.Generator,
    threads: int | None = None,
) -> EvalResult:
    predictor = make_predictor(encoder, head, config.loss)
    return evaluate(dataset, predictor, config.way, config.shot, config.queries, config.open_set, episodes, rng, threads)


def _accumulate_batch(
    batch: list[tuple[Episode, np.random.Generator, tuple[int, ...]]],
    encoder: Encoder,
    head: OpenSetHead,
    loss_config: LossConfig,
) -> float:
    """Backward each episode with weight 1/batch; returns the mean loss."""
    inv = 1.0 / len(batch)
    total = 0.0
    for ep, erng, seed in batch:
        loss, _ = episode_loss(ep, encoder, head, loss_config, rng=erng, mode="train")
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"episode loss is {value}; rerun with numpy.random.default_rng({list(seed)})",
                episode_seed=seed,
            )
        loss.backward(seed=np.asarray(inv, dtype=loss.data.dtype))
        total += value
    return total * inv


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def default_encoder_for(dataset: Dataset, seed: int, dtype=np.float32) -> Encoder:
    config = EncoderConfig(height=dataset.height, width=dataset.width, channels=dataset.channels)
    return build_encoder(config, np.random.default_rng([seed, 1]), dtype=dtype)


def train(
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    encoder: Encoder | None = None,
    head: OpenSetHead | None = None,
    out_dir: str | None = None,
    log_fn=None,
) -> TrainResult:
    """Run the full episodic loop; returns the trained model and history.

    When ``out_dir`` is given, an append-only JSONL log (one object per
    epoch) and the best-validation snapshot land there. ``log_fn`` receives
    each epoch's record, for progress printing.
    """
    if encoder is None:
        encoder = default_encoder_for(train_set, config.seed)
    if head is None:
        head = OpenSetHead.create(dtype=encoder.dtype)

    params = dict(encoder.parameters())
    params.update(head.parameters())
    optimizer = OptimizerState.for_params(
        params, lr=config.lr, weight_decay=config.weight_decay, lr_decay=config.lr_decay
    )

    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")

    predictor = make_predictor(encoder, head, config.loss)
    history: list[dict] = []
    best_acc = -1.0
    best_epoch = 0
    best_path = None

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        produced = 0
        batch_idx = 0
        loss_sum = 0.0
        while produced < config.episodes_per_epoch:
            size = min(config.batch_size, config.episodes_per_epoch - produced)
            batch = []
            for slot in range(size):
                seed = (config.seed, epoch, batch_idx, slot)
                erng = np.random.default_rng(list(seed))
                ep = sample_episode(
                    train_set, config.way, config.shot, config.queries, config.open_set, erng
                )
                batch.append((ep, erng, seed))
            _zero_grads(params)
            mean_loss = _accumulate_batch(batch, encoder, head, config.loss)
            try:
                adam_step(params, None, optimizer)
            except NonFiniteGradientError as e:
                raise TrainingDivergedError(
                    f"non-finite gradient in {e.parameter!r} at epoch {epoch}, batch {batch_idx}",
                    episode_seed=(config.seed, epoch, batch_idx, 0),
                ) from e
            loss_sum += mean_loss * size
            produced += size
            batch_idx += 1

        vrng = np.random.default_rng([config.seed, VAL_STREAM, epoch])
        val = evaluate(
            val_set, predictor, config.way, config.shot, config.queries, config.open_set,
            config.val_episodes, vrng,
        )
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / config.episodes_per_epoch,
            "val_accuracy": val.accuracy,
            "val_f1": val.f1,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if log_fn is not None:
            log_fn(record)

        if val.accuracy > best_acc:
            best_acc = val.accuracy
            best_epoch = epoch
            if out_dir is not None:
                best_path = os.path.join(out_dir, "best.ckpt")
                save_checkpoint(
                    best_path, encoder, head, optimizer,
                    metadata={"epoch": epoch, "val_accuracy": val.accuracy, "val_f1": val.f1},
                )

    return TrainResult(
        encoder=encoder,
        head=head,
        optimizer=optimizer,
        history=history,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        best_path=best_path,
    )
