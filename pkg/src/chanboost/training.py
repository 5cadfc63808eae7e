"""SGD with heavy-ball momentum, the epoch loop and hold-out evaluation."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .blocks import ModelParameters
from .data.dataset import SliceRecord, class_index
from .data.images import AugmentationSpec, augment
from .fileio import atomic_write_bytes
from .models import save_checkpoint
from .tensor import RngState, Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 12
    momentum: float = 0.90
    class_weights: tuple[float, ...] | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")


@dataclass
class SgdmState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgdm_step(params: ModelParameters, state: SgdmState, hp: HyperParams) -> None:
    """v <- momentum * v + grad; p <- p - lr * v. Gradients are cleared afterwards."""
    items = params.trainable_items()
    for name, p in items:
        if p.grad is None:
            raise TrainingError(f"no gradient for trainable parameter {name!r}")
    scale = 1.0
    if hp.clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(p.grad**2)) for _, p in items)))
        if norm > hp.clip_norm:
            scale = hp.clip_norm / norm
    for name, p in items:
        g = p.grad * scale if scale != 1.0 else p.grad
        v = state.velocity.get(name)
        v = g.copy() if v is None else hp.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - hp.learning_rate * v
        p.grad = None
    for _, p in params.frozen_items():
        p.grad = None


# --------------------------------------------------------------------------
# Batching


def _task(model) -> str:
    return "segmentation" if model.kind == "segmenter" else "detection"


def batch_arrays(records: Sequence[SliceRecord], task: str) -> tuple[Tensor, np.ndarray]:
    x = np.stack([r.image.transpose(2, 0, 1) for r in records])
    if task == "detection":
        y = np.array([class_index(r.label) for r in records], dtype=np.int64)
    else:
        if any(r.mask is None for r in records):
            raise EvaluationError("segmentation needs a mask on every record")
        y = np.stack([np.asarray(r.mask, dtype=np.int64) for r in records])
    return Tensor(x), y


def _accuracy(probs: np.ndarray, y: np.ndarray) -> tuple[int, int]:
    pred = probs.argmax(axis=1).reshape(y.shape)
    return int(np.sum(pred == y)), y.size


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class Predictions:
    task: str
    probabilities: np.ndarray  # (N, C) for detection, (N, C, H, W) for segmentation
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.probabilities)


def evaluate(model, records: Sequence[SliceRecord], mode: str | None = None, batch_size: int = 12,
             workers: int = 1) -> Predictions:
    """Eval-mode forward over fixed-size chunks.

    Chunking is independent of ``workers`` so results do not depend on the
    degree of parallelism.
    """
    task = mode or _task(model)
    if task not in ("detection", "segmentation"):
        raise ValueError(f"unknown evaluation mode {task!r}")
    for r in records:
        if task == "segmentation" and r.mask is None:
            raise EvaluationError(f"record {r.id} has no ground-truth mask")
        if r.label is None:
            raise EvaluationError(f"record {r.id} has no label")
    chunks = [records[i : i + batch_size] for i in range(0, len(records), batch_size)]

    def run(chunk):
        x, y = batch_arrays(chunk, task)
        with no_grad():
            p = model.forward(x, "eval").data
        return (p[:, :, 0, 0] if task == "detection" else p), y

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    if not results:
        raise EvaluationError("no records to evaluate")
    return Predictions(task, np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results]))


def _loss_and_accuracy(model, records, hp: HyperParams) -> tuple[float, float]:
    preds = evaluate(model, records, batch_size=hp.batch_size)
    probs = preds.probabilities
    if preds.task == "detection":
        probs = probs[:, :, None, None]
    loss = ops.cross_entropy_loss(Tensor(probs), preds.targets, hp.class_weights).item()
    hits, total = _accuracy(probs, preds.targets)
    return loss, hits / total


# --------------------------------------------------------------------------
# Training loop


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    steps: int


@dataclass
class TrainReport:
    epochs: list[EpochReport] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.epochs)


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


StepCallback = Callable[[int, object], bool]


def train(
    model,
    records: Sequence[SliceRecord],
    train_idx: Sequence[int],
    val_idx: Sequence[int],
    hp: HyperParams,
    seed: int,
    augmentation: AugmentationSpec | None = AugmentationSpec(),
    checkpoint_path=None,
    report_path=None,
    step_callback: StepCallback | None = None,
) -> TrainReport:
    """Run ``hp.epochs`` epochs of augmented mini-batch SGDM, validating after each.

    ``step_callback(step, model)`` runs after every optimizer step; returning
    True stops training early.
    """
    if not train_idx or not val_idx:
        raise TrainingError("training needs non-empty train and validation sets")
    task = _task(model)
    state = SgdmState()
    report = TrainReport()
    started = time.perf_counter()
    step = 0
    stop = False
    train_idx = list(train_idx)
    val_records = [records[i] for i in val_idx]
    for epoch in range(hp.epochs):
        order = RngState(seed, 100, epoch).generator.permutation(len(train_idx))
        losses, hits, seen = [], 0, 0
        for start in range(0, len(order), hp.batch_size):
            batch_ids = [train_idx[k] for k in order[start : start + hp.batch_size]]
            batch = [records[i] for i in batch_ids]
            if augmentation is not None:
                batch = [augment(records[i], augmentation, RngState(seed, 200, epoch, i)) for i in batch_ids]
            x, y = batch_arrays(batch, task)
            try:
                probs = model.forward(x, "train", RngState(seed, 300, epoch, step))
                loss = ops.cross_entropy_loss(probs, y, hp.class_weights)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {step}: {exc}", report) from exc
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", report)
            backward(loss)
            sgdm_step(model.params, state, hp)
            step += 1
            losses.append(loss.item())
            report.step_losses.append(loss.item())
            h, n = _accuracy(probs.data, y)
            hits, seen = hits + h, seen + n
            if step_callback is not None and step_callback(step, model):
                stop = True
                break
        val_loss, val_acc = _loss_and_accuracy(model, val_records, hp)
        entry = EpochReport(epoch + 1, float(np.mean(losses)), hits / seen, val_loss, val_acc, step)
        report.epochs.append(entry)
        log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f",
                 entry.epoch, entry.train_loss, entry.train_accuracy, entry.val_loss, entry.val_accuracy)
        if report_path is not None:
            atomic_write_bytes(report_path, report.to_jsonl().encode())
        if stop:
            break
    report.wall_clock = time.perf_counter() - started
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    return report
