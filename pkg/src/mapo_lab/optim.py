"""Adam with per-row step counters so individual Gaussians can be reset."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, np.ndarray] = {}

    def _ensure(self, name: str, param: np.ndarray) -> None:
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            # One counter per leading row; scalars/vectors of nets share one.
            self.steps[name] = np.zeros(param.shape[:1] if param.ndim else (), dtype=np.int64)

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float,
               rows: bool = False) -> None:
        """In-place Adam step. ``rows`` gives each leading row its own counter."""
        self._ensure(name, param)
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        if rows:
            self.steps[name] += 1
            k = self.steps[name].reshape((-1,) + (1,) * (param.ndim - 1))
        else:
            self.steps[name][...] += 1
            k = int(self.steps[name].flat[0]) if self.steps[name].size else 1
        bc1 = 1.0 - self.beta1 ** k
        bc2 = 1.0 - self.beta2 ** k
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def forget(self, name: str) -> None:
        for d in (self.m, self.v, self.steps):
            d.pop(name, None)

    def reset_rows(self, name: str, rows) -> None:
        if name in self.m:
            self.m[name][rows] = 0.0
            self.v[name][rows] = 0.0
            self.steps[name][rows] = 0

    def grow_rows(self, name: str, n_new: int) -> None:
        """Append zero-state rows after the parameter gained ``n_new`` rows."""
        if name not in self.m:
            return
        m = self.m[name]
        pad = np.zeros((n_new,) + m.shape[1:])
        self.m[name] = np.concatenate([m, pad])
        self.v[name] = np.concatenate([self.v[name], pad])
        self.steps[name] = np.concatenate([self.steps[name], np.zeros(n_new, dtype=np.int64)])
