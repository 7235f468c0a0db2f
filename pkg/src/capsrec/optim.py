"""SGD and Adam with lazy sparse-row state for embedding tables.

Adam keeps one global step counter shared by every parameter group, so
bias correction is identical for dense weights and embedding rows; rows
never touched keep zero moments and are never written.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DomainError

OPTIMIZER_NAMES = ("adam", "sgd")


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    param -= lr * grad
    return param


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float, beta2: float, eps: float) -> np.ndarray:
    """One bias-corrected Adam update in place; t is the 1-based step count."""
    if t < 1:
        raise DomainError(f"adam step count must be >= 1, got {t}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class Optimizer:
    """Named-group optimizer; dense groups update whole arrays, sparse groups rows."""

    def __init__(self, kind: str = "adam", lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if kind not in OPTIMIZER_NAMES:
            raise ConfigError(f"unknown optimizer {kind!r}, expected one of {OPTIMIZER_NAMES}")
        if not (lr > 0.0 and math.isfinite(lr)):
            raise ConfigError(f"learning rate must be positive and finite, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if not eps > 0.0:
            raise ConfigError(f"adam eps must be positive, got {eps}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def begin_step(self) -> None:
        """Advance the shared step counter; call once per batch before updates."""
        self.t += 1

    def _moments(self, group: str, target: np.ndarray):
        m = self._m.get(group)
        if m is None:
            m = self._m[group] = np.zeros_like(target)
            self._v[group] = np.zeros_like(target)
        return m, self._v[group]

    def update_dense(self, group: str, target: np.ndarray, grad: np.ndarray) -> None:
        if self.kind == "sgd":
            sgd_step(target, grad, self.lr)
            return
        m, v = self._moments(group, target)
        adam_step(target, grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def update_rows(self, group: str, target: np.ndarray, rows: np.ndarray,
                    grads: np.ndarray) -> None:
        if rows.size == 0:
            return
        if self.kind == "sgd":
            target[rows] -= self.lr * grads
            return
        m, v = self._moments(group, target)
        m_rows = self.beta1 * m[rows] + (1.0 - self.beta1) * grads
        v_rows = self.beta2 * v[rows] + (1.0 - self.beta2) * np.square(grads)
        m[rows] = m_rows
        v[rows] = v_rows
        m_hat = m_rows / (1.0 - self.beta1 ** self.t)
        v_hat = v_rows / (1.0 - self.beta2 ** self.t)
        target[rows] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_items(self):
        """(group, m, v) triples for checkpointing, sorted for stable files."""
        for group in sorted(self._m):
            yield group, self._m[group], self._v[group]

    def load_state(self, t: int, entries) -> None:
        self.t = int(t)
        self._m.clear()
        self._v.clear()
        for group, m, v in entries:
            self._m[group] = np.array(m, dtype=np.float64)
            self._v[group] = np.array(v, dtype=np.float64)
