"""Adam updates plus the plateau scheduler and early-stopping rules.

The scheduler and the stopping rule are pure functions of the validation
accuracy history: "improvement" means strictly greater than every earlier
value, and staleness is counted from the epoch where the current best was
first reached. The learning rate halves whenever staleness hits a multiple
of the plateau patience, and never drops below the configured floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_init: float = 1e-3
    lr_min: float = 1e-10
    plateau_patience: int = 10
    lr_factor: float = 0.5
    early_stop_patience: int = 50
    max_epochs: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_init <= 0:
            raise ValueError(f"lr_init must be > 0, got {self.lr_init}")
        if self.lr_min > self.lr_init:
            raise ValueError(f"lr_min ({self.lr_min}) must not exceed lr_init ({self.lr_init})")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class AdamState:
    """First/second moment estimates mirroring the parameter shapes."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One in-place Adam update over every parameter that has a gradient.

    Parameters without a gradient entry (unused in the current loss) are
    left untouched, and so are their moments.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.data if isinstance(g, Tensor) else g
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


def epochs_since_best(history: Sequence[float]) -> int:
    """Epochs elapsed since the running best was first reached (ties are
    not improvements)."""
    if not history:
        return 0
    best_idx = int(np.argmax(history))  # first occurrence of the max
    return len(history) - 1 - best_idx


def plateau_scheduler_step(history: Sequence[float], current_lr: float,
                           cfg: TrainConfig) -> float:
    """New learning rate after this epoch's validation accuracy was appended."""
    if not history:
        raise ValueError("plateau_scheduler_step: history is empty")
    stale = epochs_since_best(history)
    if stale > 0 and stale % cfg.plateau_patience == 0:
        return max(current_lr * cfg.lr_factor, cfg.lr_min)
    return current_lr


def early_stop_check(history: Sequence[float], cfg: TrainConfig) -> bool:
    """True once the best validation accuracy is ``early_stop_patience``
    epochs old."""
    return epochs_since_best(history) >= cfg.early_stop_patience
