"""Stateful layers: batch normalization, dropout, ReLU, softmax cross-entropy.

Batch normalization and dropout change behavior on the train/inference flag
and nothing else. Batch norm uses the biased (population) variance to
normalize and stores the unbiased variance in its running statistics;
dropout is the inverted kind, so inference is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import ShapeError, Tensor, _tape_if_tracking


class LayerMode(Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass
class BatchNormState:
    """Per-channel scale/shift plus running statistics.

    The shift is named ``beta_shift`` to keep it apart from the channel
    reduction width also called beta elsewhere in this package.
    """

    gamma: Tensor
    beta_shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape[0]
        if not (self.beta_shift.shape == (c,) and self.running_mean.shape == (c,)
                and self.running_var.shape == (c,)):
            raise ShapeError("batch norm state fields must all have length C")
        if self.eps <= 0:
            raise ValueError(f"batch norm eps must be > 0, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1,
               dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), dtype=dtype, requires_grad=True),
            beta_shift=Tensor(np.zeros(channels), dtype=dtype, requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_axes(shape) -> tuple:
    if len(shape) == 4:
        return (0, 2, 3)
    if len(shape) == 2:
        return (0,)
    raise ShapeError(f"batch_norm: need (N, C) or (N, C, H, W) input, got {shape}")


def batch_norm(x: Tensor, state: BatchNormState, mode: LayerMode) -> Tensor:
    """Normalize per channel, then scale and shift.

    Train mode normalizes by the batch mean and biased variance and nudges
    the running statistics by ``momentum``; inference mode normalizes by
    the running statistics alone.
    """
    axes = _bn_axes(x.shape)
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"batch_norm: input has {c} channels, state has {state.channels}")
    bshape = (1, c) + (1,) * (len(x.shape) - 2)
    eps = x.dtype.type(state.eps)
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta_shift.data.reshape(bshape)

    if mode is LayerMode.TRAIN:
        m = int(np.prod([x.shape[a] for a in axes]))
        if m < 2:
            raise ValueError(
                "batch_norm: train mode needs at least 2 values per channel "
                f"(got batch shape {x.shape})"
            )
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)  # biased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv_std
        y = gamma * xhat + beta

        mom = state.momentum
        unbiased = var.reshape(c) * (m / (m - 1))
        state.running_mean[:] = (1.0 - mom) * state.running_mean + mom * mean.reshape(c)
        state.running_var[:] = (1.0 - mom) * state.running_var + mom * unbiased
    else:
        mean = state.running_mean.reshape(bshape)
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (x.data - mean) * inv_std
        y = gamma * xhat + beta

    out = Tensor._wrap(y.astype(x.dtype, copy=False))
    tape = _tape_if_tracking((x, state.gamma, state.beta_shift))
    if tape is not None:
        train = mode is LayerMode.TRAIN
        def backward(g, need):
            gx = ggamma = gbeta = None
            if need[1]:
                ggamma = (g * xhat).sum(axis=axes)
            if need[2]:
                gbeta = g.sum(axis=axes)
            if need[0]:
                if train:
                    g_mean = g.mean(axis=axes, keepdims=True)
                    gx_hat_mean = (g * xhat).mean(axis=axes, keepdims=True)
                    gx = gamma * inv_std * (g - g_mean - xhat * gx_hat_mean)
                else:
                    gx = g * gamma * inv_std
                gx = gx.astype(g.dtype, copy=False)
            return (gx, ggamma, gbeta)
        tape._record("batch_norm", (x, state.gamma, state.beta_shift), out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0))
    tape = _tape_if_tracking((x,))
    if tape is not None:
        mask = x.data > 0
        def backward(g, need):
            return (g * mask if need[0] else None,)
        tape._record("relu", (x,), out, backward)
    return out


def dropout(x: Tensor, rate: float, mode: LayerMode, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and rescale survivors
    by 1/(1-rate) in train mode; exact identity in inference mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode is LayerMode.INFERENCE or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode needs a seeded random generator")
    keep = (rng.random(x.shape) >= rate)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * scale
    out = Tensor._wrap(x.data * mask)
    tape = _tape_if_tracking((x,))
    if tape is not None:
        def backward(g, need):
            return (g * mask if need[0] else None,)
        tape._record("dropout", (x,), out, backward)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; no tape involvement."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean negative log-likelihood of integer labels under row softmax.

    Returns (scalar loss, probabilities). Computed as logsumexp(z) - z[label]
    so the loss stays finite for any finite logits.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: need (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} logit rows but labels shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"softmax_cross_entropy: labels must be integers in [0, {c}), got "
                         f"{np.unique(labels)}")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    probs = np.exp(z - lse)
    per_example = lse.reshape(n) - z[np.arange(n), labels]
    loss = Tensor._wrap(np.asarray(per_example.mean(), dtype=logits.dtype))

    tape = _tape_if_tracking((logits,))
    if tape is not None:
        def backward(g, need):
            if not need[0]:
                return (None,)
            gz = probs.copy()
            gz[np.arange(n), labels] -= 1.0
            gz *= g.reshape(()) / n
            return (gz.astype(probs.dtype, copy=False),)
        tape._record("softmax_cross_entropy", (logits,), loss, backward)
    return loss, Tensor._wrap(probs)
