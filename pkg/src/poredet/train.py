"""Patch-sampled SGD training with early stopping on validation patch F-score."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import DatasetSplit, PatchSampler, Sample, validation_centers
from .detect import infer_probability_map
from .model import BORDER, PoreModel, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    decay_rate: float = 0.96
    decay_steps: int = 2000
    batch_size: int = 256
    dropout_rate: float = 0.2
    weight_decay: float = 0.0
    pos_fraction: float = 0.5
    eval_every: int = 100
    patience: int = 10
    max_steps: int = 50_000
    seed: int = 0
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99

    def validate(self) -> None:
        for name in ("base_lr", "decay_rate", "decay_steps", "batch_size", "eval_every", "max_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.weight_decay < 0 or self.patience < 0:
            raise ValueError("weight_decay and patience must be nonnegative")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ValueError(f"pos_fraction must lie in [0, 1], got {self.pos_fraction}")


def precision_recall_f(predicted: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    predicted = np.asarray(predicted, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    tp = int(np.count_nonzero(predicted & labels))
    n_pred = int(np.count_nonzero(predicted))
    n_pos = int(np.count_nonzero(labels))
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_pos if n_pos else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def patch_fscore(model: PoreModel, patches: np.ndarray, labels: np.ndarray, threshold: float = 0.5,
                 chunk: int = 1024) -> tuple[float, float, float]:
    """Precision, recall and F-score of classifying 17x17 patches as pores (probability > threshold)."""
    patches = np.asarray(patches)
    if len(patches) == 0:
        raise ValueError("empty patch set")
    probs = np.concatenate([model.forward(patches[i:i + chunk])[:, 0, 0, 0]
                            for i in range(0, len(patches), chunk)])
    return precision_recall_f(probs > threshold, labels)


@dataclass
class ValidationPatches:
    """Fixed validation patch set, scored through one full-image pass per image."""

    samples: list[Sample]
    centers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def build(cls, samples: list[Sample], seed: int = 0) -> "ValidationPatches":
        return cls(samples, validation_centers(samples, seed))

    def probabilities(self, model: PoreModel) -> tuple[np.ndarray, np.ndarray]:
        probs, labels = [], []
        for s, (ctr, lab) in zip(self.samples, self.centers):
            pm = infer_probability_map(model, s.image)
            probs.append(pm.values[ctr[:, 0] - BORDER, ctr[:, 1] - BORDER])
            labels.append(lab)
        return np.concatenate(probs), np.concatenate(labels)

    def fscore(self, model: PoreModel, threshold: float = 0.5) -> tuple[float, float, float]:
        probs, labels = self.probabilities(model)
        if len(labels) == 0:
            raise ValueError("empty validation patch set")
        return precision_recall_f(probs > threshold, labels)


@dataclass
class LogEntry:
    step: int
    effective_lr: float
    loss: float
    val_fscore: float


@dataclass
class TrainResult:
    model: PoreModel
    best_step: int
    best_fscore: float
    log: list[LogEntry] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    stop_reason: str = ""


LOG_HEADER = "step,effective_lr,loss,val_fscore\n"


def format_log_entry(e: LogEntry) -> str:
    return f"{e.step},{e.effective_lr:.8g},{e.loss:.8f},{e.val_fscore:.6f}\n"


def train(model: PoreModel, split: DatasetSplit, config: TrainConfig | None = None,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place and return the best checkpoint seen on validation.

    Every ``eval_every`` steps the validation patch F-score is measured; the
    run stops once ``patience`` evaluations pass without improvement, or at
    ``max_steps``.
    """
    config = config or TrainConfig()
    config.validate()
    if not split.train or not split.validation:
        raise ValueError("training needs nonempty train and validation sets")
    model.dropout_rate = config.dropout_rate
    sample_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    sample_rng = np.random.default_rng(sample_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    sampler = PatchSampler(split.train, config.pos_fraction)
    val = ValidationPatches.build(split.validation, config.seed)
    opt = nn.OptimizerState(config.base_lr, config.decay_rate, config.decay_steps,
                            step_count=model.step_count, weight_decay=config.weight_decay)

    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_file = log_path.open("a", encoding="utf-8")
        if new:
            log_file.write(LOG_HEADER)

    result = TrainResult(model.copy(), model.step_count, -1.0)
    since_best = 0
    window: list[float] = []
    try:
        for i in range(config.max_steps):
            lr = opt.effective_lr
            batch = sampler.sample(config.batch_size, sample_rng)
            logits, cache = model.forward_train(batch.patches, dropout_rng)
            loss, grad = nn.bce_loss(logits.reshape(-1), batch.labels)
            mean_loss = float(loss.mean())
            if not np.isfinite(mean_loss):
                raise TrainingDivergedError(
                    f"loss became {mean_loss} at step {opt.step_count} (learning rate {lr:g})")
            grads = model.backward(cache, (grad / len(loss)).reshape(logits.shape))
            nn.sgd_step(model.trainable_arrays(), grads, opt)
            model.step_count = opt.step_count
            result.losses.append(mean_loss)
            window.append(mean_loss)

            if (i + 1) % config.eval_every and i + 1 != config.max_steps:
                continue
            _, _, f = val.fscore(model)
            entry = LogEntry(opt.step_count, lr, float(np.mean(window)), f)
            window = []
            result.log.append(entry)
            if log_file is not None:
                log_file.write(format_log_entry(entry))
                log_file.flush()
            log.info("step %d lr %.4g loss %.4f val_f %.4f", entry.step, lr, entry.loss, f)
            if f > result.best_fscore:
                result.model, result.best_step, result.best_fscore = model.copy(), opt.step_count, f
                since_best = 0
                if checkpoint_path is not None:
                    save_checkpoint(result.model, checkpoint_path)
            else:
                since_best += 1
            if since_best >= config.patience:
                result.stop_reason = f"no improvement in {config.patience} evaluations"
                break
        else:
            result.stop_reason = "max_steps reached"
    finally:
        if log_file is not None:
            log_file.close()
    return result
