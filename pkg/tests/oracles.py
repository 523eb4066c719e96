"""Independent brute-force references the tests check the library against.

These stay deliberately naive: explicit loops, iteration order stated by
the contracts, no shared code with the implementations under test.
"""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Quadruple-loop cross-correlation; accumulates in (c, ki, kj) order
    in the input dtype, bias added last."""
    n_batch, n_in, h, width = x.shape
    n_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((n_batch, n_out, out_h, out_w), dtype=x.dtype)
    zero = x.dtype.type(0.0)
    for n in range(n_batch):
        for k in range(n_out):
            for p in range(out_h):
                for q in range(out_w):
                    acc = zero
                    for c in range(n_in):
                        for i in range(kh):
                            for j in range(kw):
                                acc = x.dtype.type(
                                    acc + xp[n, c, p * stride + i, q * stride + j] * w[k, c, i, j]
                                )
                    out[n, k, p, q] = x.dtype.type(acc + b[k])
    return out


def naive_maxpool2d(x, k, stride):
    """Window-by-window enumeration."""
    n_batch, n_chan, h, w = x.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    out = np.empty((n_batch, n_chan, out_h, out_w), dtype=x.dtype)
    for n in range(n_batch):
        for c in range(n_chan):
            for p in range(out_h):
                for q in range(out_w):
                    window = x[n, c, p * stride:p * stride + k, q * stride:q * stride + k]
                    out[n, c, p, q] = window.max()
    return out


def naive_matmul(a, b):
    """Triple-loop matrix product in float64."""
    n, d = a.shape
    d2, m = b.shape
    assert d == d2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def counting_confusion(scores, labels, threshold):
    """One-sample-at-a-time tally."""
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        predicted = s >= threshold
        if predicted and y == 1:
            tp += 1
        elif predicted and y == 0:
            fp += 1
        elif not predicted and y == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def pairwise_auc(scores, labels):
    """Mann-Whitney concordance: fraction of (positive, negative) pairs
    ranked correctly, ties counted half. O(n^2)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    assert pos and neg
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def scalar_adam_reference(grad_sequence, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Step-by-step scalar Adam; returns the parameter value after each step."""
    m = v = 0.0
    x = x0
    values = []
    for t, g in enumerate(grad_sequence, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        values.append(x)
    return values


class ReferenceScheduleLoop:
    """Stateful counter-based reference for plateau halving and early stop."""

    def __init__(self, lr_init, lr_min, lr_factor, plateau_patience, early_stop_patience):
        self.lr = lr_init
        self.lr_min = lr_min
        self.lr_factor = lr_factor
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.best = None
        self.plateau_counter = 0
        self.stop_counter = 0
        self.stopped = False

    def observe(self, accuracy):
        """Feed one epoch's validation accuracy; returns (lr after, stop?)."""
        if self.best is None or accuracy > self.best:
            self.best = accuracy
            self.plateau_counter = 0
            self.stop_counter = 0
        else:
            self.plateau_counter += 1
            self.stop_counter += 1
            if self.plateau_counter >= self.plateau_patience:
                self.lr = max(self.lr * self.lr_factor, self.lr_min)
                self.plateau_counter = 0
        if self.stop_counter >= self.early_stop_patience:
            self.stopped = True
        return self.lr, self.stopped
