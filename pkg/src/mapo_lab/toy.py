"""Point-plus-MLP trajectory fitting on a 3D curve with a jump at t = 0.5.

Three modes are compared at equal optimizer steps:

* ``single``: one learnable point and one MLP over all of [0, 1).
* ``partitioned``: two point/MLP pairs, owning [0, 0.5) and [0.5, 1).
* ``consistency``: as ``partitioned``, plus, for samples within a few
  steps of the split, a term pulling each model toward the other model's
  prediction and a term fitting the *other* model to the target there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deformation import MLP
from .optim import Adam

MODES = ("single", "partitioned", "consistency")


@dataclass
class ToyCurveSpec:
    n_samples: int = 200
    kinked: bool = True
    window: int = 5          # boundary window, in samples
    hidden: int = 64
    lr: float = 3e-3
    lr_final_ratio: float = 0.1   # exponential decay over the run
    n_eval: int = 2000

    def curve(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        p = np.stack([np.sin(2 * np.pi * t), np.cos(2 * np.pi * t), 2 * t], axis=1)
        if self.kinked:
            late = t >= 0.5
            p[late, 2] = 2 - 2 * t[late]
            p[late, 0] += 0.5
        return p


class _PointMLP:
    def __init__(self, rng: np.random.Generator, hidden: int):
        self.point = np.zeros(3)
        self.net = MLP([1, hidden, hidden, 3], rng, zero_head=True)

    def forward(self, t: np.ndarray):
        y, cache = self.net.forward((2.0 * t - 1.0)[:, None])
        return self.point + y, cache

    def backward(self, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
        _, dW, db = self.net.backward(cache, dy)
        grads = {"point": dy.sum(axis=0)}
        for k in range(len(dW)):
            grads[f"W{k}"] = dW[k]
            grads[f"b{k}"] = db[k]
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {"point": self.point}
        out.update({k.split(".")[1]: v for k, v in self.net.parameters("n").items()})
        return out


def _mse_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


@dataclass
class ToyResult:
    mode: str
    mse: float
    boundary_gap: float
    t_eval: np.ndarray
    target: np.ndarray
    predictions: list[np.ndarray]     # one per model, over the whole grid
    combined: np.ndarray              # owner model's prediction at each t


def toy_fit(spec: ToyCurveSpec, mode: str, iterations: int, seed: int = 0) -> ToyResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    t = np.arange(spec.n_samples) / spec.n_samples
    target = spec.curve(t)
    n_models = 1 if mode == "single" else 2
    models = [_PointMLP(rng, spec.hidden) for _ in range(n_models)]
    owner = np.zeros(t.size, dtype=int) if n_models == 1 else (t >= 0.5).astype(int)
    half = spec.n_samples // 2
    near = np.abs(np.arange(spec.n_samples) - half) <= spec.window
    opt = Adam()

    for it in range(iterations):
        lr = spec.lr * spec.lr_final_ratio ** (it / max(iterations - 1, 1))
        grads = [None] * n_models
        for m, model in enumerate(models):
            sel = owner == m
            pred, cache = model.forward(t[sel])
            _, d = _mse_grad(pred, target[sel])
            grads[m] = model.backward(cache, d)
        if mode == "consistency":
            for m, model in enumerate(models):
                other = models[1 - m]
                sel = near & (owner == m)
                if not sel.any():
                    continue
                own, c_own = model.forward(t[sel])
                par, c_par = other.forward(t[sel])
                _, d_cur = _mse_grad(own, par)
                _, d_gt = _mse_grad(par, target[sel])
                g_own = model.backward(c_own, 0.5 * d_cur)
                g_par = other.backward(c_par, -0.5 * d_cur + d_gt)
                for k in g_own:
                    grads[m][k] = grads[m][k] + g_own[k]
                    grads[1 - m][k] = grads[1 - m][k] + g_par[k]
        for m, model in enumerate(models):
            params = model.params()
            for k, g in grads[m].items():
                opt.update(f"{m}.{k}", params[k], g, lr)

    t_eval = np.arange(spec.n_eval) / spec.n_eval
    tgt = spec.curve(t_eval)
    preds = [model.forward(t_eval)[0] for model in models]
    own = np.zeros(t_eval.size, dtype=int) if n_models == 1 else (t_eval >= 0.5).astype(int)
    combined = np.where(own[:, None] == 0, preds[0], preds[-1])
    mse = float(np.mean((combined - tgt) ** 2))
    at_half = np.array([0.5])
    left = models[0].forward(at_half)[0][0]
    right = models[-1].forward(at_half)[0][0]
    gap = float(np.linalg.norm(left - right))
    return ToyResult(mode, mse, gap, t_eval, tgt, preds, combined)
