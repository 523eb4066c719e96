"""Finite-difference verification of every backward rule.

``grad_check`` compares tape gradients against central differences. The
checks in ``LAYER_CHECKS`` run in float64, where central differences are
accurate to ~1e-8; float32 is far too noisy for tight tolerances.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers
from .tensor import GradTape, Tensor, conv2d, dense, maxpool2d, tensor_sum

WIDE_TOLERANCE = 1e-6


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between tape and central-difference gradients.

    ``fn`` must map ``x`` to a scalar tensor and be deterministic (dropout
    off, batch norm either frozen or fed the same batch every call). The
    error at each coordinate is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be > 0, got {eps}")
    was_required = x.requires_grad
    x.requires_grad = True
    try:
        with GradTape() as tape:
            loss = fn(x)
        grads = tape.backward(loss)
        analytic = grads[x].data if x in grads else np.zeros_like(x.data)
    finally:
        x.requires_grad = was_required

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(x).item()
        flat[i] = orig - eps
        f_minus = fn(x).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


def directional_grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                           directions: int = 3, seed: int = 0) -> float:
    """Relative error of <grad, d> against a central difference along random
    unit directions d.

    The projection is dominated by the well-conditioned gradient
    components, so this stays meaningful for deep compositions where
    individual coordinates have gradients near the float64 noise floor and
    the per-coordinate relative check of :func:`grad_check` saturates.
    """
    if eps <= 0:
        raise ValueError(f"directional_grad_check: eps must be > 0, got {eps}")
    was_required = x.requires_grad
    x.requires_grad = True
    try:
        with GradTape() as tape:
            loss = fn(x)
        grads = tape.backward(loss)
        analytic = grads[x].data if x in grads else np.zeros_like(x.data)
    finally:
        x.requires_grad = was_required

    rng = np.random.default_rng(seed)
    base = x.data.copy()
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(x.data.shape)
        d /= np.linalg.norm(d)
        projected = float((analytic * d).sum())
        x.data[...] = base + eps * d
        f_plus = fn(x).item()
        x.data[...] = base - eps * d
        f_minus = fn(x).item()
        x.data[...] = base
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(projected - numeric) / max(abs(projected), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def _check_all(fn_of, tensors: list[Tensor], eps: float = 1e-5) -> float:
    """Check the gradient with respect to each tensor in turn.

    eps = 1e-5 balances float64 rounding (~|f|*1e-16/eps) against
    truncation; the checked functions are at most mildly nonlinear.
    """
    worst = 0.0
    for t in tensors:
        worst = max(worst, grad_check(lambda _: fn_of(), t, eps=eps))
    return worst


def _conv_check(kernel: int) -> float:
    rng = np.random.default_rng(100 + kernel)
    pad = kernel // 2
    x = Tensor(rng.standard_normal((2, 3, 7, 7)), dtype=np.float64)
    w = Tensor(rng.standard_normal((4, 3, kernel, kernel)) * 0.5, dtype=np.float64,
               requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, dtype=np.float64, requires_grad=True)
    out_weights = Tensor(rng.standard_normal((2, 4, 7, 7)), dtype=np.float64)
    fn = lambda: tensor_sum(conv2d(x, w, b, stride=1, padding=pad) * out_weights)
    return _check_all(fn, [x, w, b])


def _maxpool_check() -> float:
    rng = np.random.default_rng(7)
    # Well-separated values keep finite differences away from argmax ties.
    x = Tensor(rng.permutation(4 * 6 * 6).reshape(1, 4, 6, 6) * 0.37 + 0.01,
               dtype=np.float64)
    weights = Tensor(rng.standard_normal((1, 4, 3, 3)), dtype=np.float64)
    def fn():
        pooled = maxpool2d(x, 2, 2)
        return tensor_sum(pooled * weights)
    return _check_all(fn, [x])


def _dense_check() -> float:
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
    w = Tensor(rng.standard_normal((8, 6)) * 0.4, dtype=np.float64, requires_grad=True)
    b = Tensor(rng.standard_normal(6) * 0.1, dtype=np.float64, requires_grad=True)
    w2 = Tensor(rng.standard_normal((6, 2)) * 0.4, dtype=np.float64, requires_grad=True)
    b2 = Tensor(np.zeros(2), dtype=np.float64, requires_grad=True)
    labels = rng.integers(0, 2, size=5)
    def fn():
        h = dense(x, w, b)
        logits = dense(layers.relu(h), w2, b2)
        loss, _ = layers.softmax_cross_entropy(logits, labels)
        return loss
    return _check_all(fn, [x, w, b, w2, b2])


def _batch_norm_check() -> float:
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 2.0 + 1.0, dtype=np.float64)
    state = layers.BatchNormState.create(3, dtype=np.float64)
    state.gamma.data[:] = rng.standard_normal(3) * 0.5 + 1.0
    state.beta_shift.data[:] = rng.standard_normal(3) * 0.2
    weights = Tensor(rng.standard_normal(x.shape), dtype=np.float64)
    def fn():
        y = layers.batch_norm(x, state, layers.LayerMode.TRAIN)
        return tensor_sum(y * weights)
    return _check_all(fn, [x, state.gamma, state.beta_shift])


def _softmax_ce_check() -> float:
    rng = np.random.default_rng(17)
    logits = Tensor(rng.standard_normal((6, 2)) * 2.0, dtype=np.float64)
    labels = rng.integers(0, 2, size=6)
    def fn():
        loss, _ = layers.softmax_cross_entropy(logits, labels)
        return loss
    return _check_all(fn, [logits])


def _inception_check() -> float:
    # Imported lazily: the model module depends on this one's siblings.
    from .model import InceptionBlock, InceptionBlockSpec

    rng = np.random.default_rng(19)
    block = InceptionBlock(in_channels=3, spec=InceptionBlockSpec(features=4, alpha=2, beta=2),
                           rng=np.random.default_rng(23), dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 3, 6, 6)), dtype=np.float64)
    def fn():
        return tensor_sum(block.forward(x, layers.LayerMode.TRAIN))
    # Conv biases are excluded: under train-mode batch norm their true
    # gradient is identically zero (the mean subtraction absorbs any
    # constant channel shift), so a relative FD error there only measures
    # noise. conv_bias_gradient_is_absorbed() checks them exactly instead.
    targets = [x] + [t for name, t in block.named_params("blk") if not name.endswith("conv.b")]
    return _check_all(fn, targets)


def conv_bias_gradient_is_absorbed() -> float:
    """Max |analytic conv-bias gradient| inside a train-mode BN block.

    Mathematically zero; anything above rounding noise means the batch-norm
    backward rule is wrong.
    """
    from .model import InceptionBlock, InceptionBlockSpec

    rng = np.random.default_rng(19)
    block = InceptionBlock(in_channels=3, spec=InceptionBlockSpec(features=4, alpha=2, beta=2),
                           rng=np.random.default_rng(23), dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 3, 6, 6)), dtype=np.float64)
    with GradTape() as tape:
        loss = tensor_sum(block.forward(x, layers.LayerMode.TRAIN))
    grads = tape.backward(loss)
    worst = 0.0
    for name, t in block.named_params("blk"):
        if name.endswith("conv.b") and t in grads:
            worst = max(worst, float(np.abs(grads[t].data).max()))
    return worst


LAYER_CHECKS: dict[str, Callable[[], float]] = {
    "conv2d_k1": lambda: _conv_check(1),
    "conv2d_k3": lambda: _conv_check(3),
    "conv2d_k5": lambda: _conv_check(5),
    "maxpool2d": _maxpool_check,
    "dense": _dense_check,
    "batch_norm": _batch_norm_check,
    "softmax_cross_entropy": _softmax_ce_check,
    "inception_block": _inception_check,
}


def run_layer_checks() -> dict[str, float]:
    """Run every registered check; returns {layer kind: max relative error}."""
    return {name: check() for name, check in LAYER_CHECKS.items()}
