"""Epoch training loop: shuffled mini-batches, Adam, plateau scheduling,
early stopping, and best-checkpoint tracking.

Each epoch shuffles with a seed derived as ``seed XOR epoch`` so a run is
fully reproducible from its config. The returned result carries the state
from the best validation epoch, not the last one, and checkpoints are
written on every new best.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_checkpoint
from .data import batches
from .layers import LayerMode, softmax_cross_entropy
from .model import Model
from .optim import AdamState, TrainConfig, adam_step, early_stop_check, plateau_scheduler_step
from .tensor import GradTape


class TrainingDiverged(RuntimeError):
    """Loss left the reals; names the offending epoch and batch."""


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float
    seconds: float

    def to_json_line(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "lr": self.lr,
            "seconds": self.seconds,
        })


@dataclass
class TrainResult:
    records: list[EpochRecord]
    best_epoch: int
    best_val_accuracy: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool


def evaluate_accuracy(model: Model, dataset, batch_size: int = 64) -> float:
    """Plain accuracy of argmax predictions, inference mode."""
    correct = 0
    for x, labels in batches(dataset, batch_size, epoch_seed=0):
        probs = model.predict_proba(x)
        correct += int((probs.argmax(axis=1) == labels).sum())
    return correct / len(dataset)


def _check_disjoint(train_set, val_set) -> None:
    train_recs = getattr(train_set, "records", None)
    val_recs = getattr(val_set, "records", None)
    if train_recs is None or val_recs is None:
        return
    overlap = {r.path for r in train_recs} & {r.path for r in val_recs}
    if overlap:
        raise ValueError(f"train and val sets overlap on {len(overlap)} records, "
                         f"e.g. {sorted(overlap)[0]}")


def train(model: Model, train_set, val_set, cfg: TrainConfig,
          checkpoint_path=None, log_path=None) -> TrainResult:
    """Run the full protocol and return the best-validation state.

    Writes a checkpoint file on every new validation best (when a path is
    given) and appends one JSON line per epoch to ``log_path``.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train: empty dataset")
    if cfg.batch_size > len(train_set):
        raise ValueError(f"train: batch_size {cfg.batch_size} exceeds train set size "
                         f"{len(train_set)}")
    _check_disjoint(train_set, val_set)

    params = model.named_params()
    adam = AdamState.for_params(params)
    uid_to_name = {t.uid: name for name, t in params.items()}
    lr = cfg.lr_init
    history: list[float] = []
    records: list[EpochRecord] = []
    best_state = model.state_snapshot()
    best_epoch = 0
    best_acc = -1.0
    stopped_early = False
    log_fh = open(log_path, "w") if log_path is not None else None

    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            epoch_seed = cfg.seed ^ epoch
            dropout_rng = np.random.default_rng(epoch_seed)
            loss_sum = 0.0
            batch_count = 0
            for batch_index, (x, labels) in enumerate(batches(train_set, cfg.batch_size,
                                                              epoch_seed)):
                with GradTape() as tape:
                    logits = model.forward(x, LayerMode.TRAIN, dropout_rng)
                    loss, _ = softmax_cross_entropy(logits, labels)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss {loss_value} at epoch {epoch}, batch {batch_index}"
                    )
                grads = tape.backward(loss)
                named_grads = {uid_to_name[uid]: g.data for uid, g in grads.items()
                               if uid in uid_to_name}
                adam_step(params, named_grads, adam, lr)
                loss_sum += loss_value
                batch_count += 1

            val_acc = evaluate_accuracy(model, val_set)
            history.append(val_acc)
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_state = model.state_snapshot()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model)

            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / batch_count,
                val_accuracy=val_acc,
                lr=lr,
                seconds=time.perf_counter() - started,
            )
            records.append(record)
            if log_fh is not None:
                log_fh.write(record.to_json_line() + "\n")
                log_fh.flush()

            lr = plateau_scheduler_step(history, lr, cfg)
            if early_stop_check(history, cfg):
                stopped_early = True
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    return TrainResult(
        records=records,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        best_state=best_state,
        stopped_early=stopped_early,
    )
