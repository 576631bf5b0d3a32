"""Embedding-driven coarse + fine deformation networks with manual backprop.

Each Gaussian owns an embedding ``z_g``; each frame is represented by a
coarse embedding (linearly interpolated between knots) and a fine embedding
(one table row per frame). Two small ReLU MLPs map the concatenated inputs
to a 14-wide delta, and the two predictions are summed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .core import GaussianParams

DELTA_DIM = 14
# Column slices of a packed delta row.
SL_MU = slice(0, 3)
SL_ROT = slice(3, 7)
SL_SCALE = slice(7, 10)
SL_OPACITY = 10
SL_COLOR = slice(11, 14)


class MLP:
    """ReLU multilayer perceptron operating on row-batched inputs."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, *, zero_head: bool = True):
        self.sizes = list(sizes)
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            if last and zero_head:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.W.append(W)
            self.b.append(np.zeros(fan_out))

    def forward(self, X: np.ndarray):
        acts = [X]
        pre = []
        h = X
        for k in range(len(self.W)):
            z = h @ self.W[k] + self.b[k]
            pre.append(z)
            h = np.maximum(z, 0.0) if k < len(self.W) - 1 else z
            acts.append(h)
        return h, (acts, pre)

    def backward(self, cache, dY: np.ndarray):
        acts, pre = cache
        dW = [None] * len(self.W)
        db = [None] * len(self.W)
        g = dY
        for k in reversed(range(len(self.W))):
            if k < len(self.W) - 1:
                g = g * (pre[k] > 0)
            dW[k] = acts[k].T @ g
            db[k] = g.sum(axis=0)
            g = g @ self.W[k].T
        return g, dW, db

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in range(len(self.W)):
            out[f"{prefix}.W{k}"] = self.W[k]
            out[f"{prefix}.b{k}"] = self.b[k]
        return out


@dataclass
class TemporalEmbeddings:
    coarse_table: np.ndarray   # (N_coarse, D_tc)
    fine_table: np.ndarray     # (N_frames, D_tf)

    def __post_init__(self) -> None:
        if self.coarse_table.shape[0] < 2:
            raise ValueError("need at least two coarse knots")

    @property
    def n_frames(self) -> int:
        return self.fine_table.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.coarse_table.shape[0]

    @classmethod
    def create(cls, n_frames: int, rng: np.random.Generator, *, d_coarse: int = 8,
               d_fine: int = 8, n_coarse: int | None = None, init_std: float = 0.1) -> TemporalEmbeddings:
        if n_coarse is None:
            n_coarse = max(2, n_frames // 10)
        return cls(rng.normal(0.0, init_std, (n_coarse, d_coarse)),
                   rng.normal(0.0, init_std, (n_frames, d_fine)))

    def knot_weights(self, t: int) -> tuple[int, float]:
        """Left knot index and the weight of the right knot for frame ``t``.

        Knots sit at k * T / (N_coarse - 1) over the whole sequence.
        """
        T = self.n_frames
        if not 0 <= t < T:
            raise ValueError(f"frame {t} outside [0, {T})")
        u = t * (self.n_coarse - 1) / T
        k = min(int(np.floor(u)), self.n_coarse - 2)
        return k, u - k


def temporal_embed(t: int, emb: TemporalEmbeddings) -> tuple[np.ndarray, np.ndarray]:
    k, w = emb.knot_weights(t)
    z_tc = (1.0 - w) * emb.coarse_table[k] + w * emb.coarse_table[k + 1]
    return z_tc, emb.fine_table[t].copy()


@dataclass
class DeformationDelta:
    """Packed (N, 14) delta rows: d_mu, d_rot, d_log_scale, d_opacity_logit, d_color."""

    vector: np.ndarray

    @property
    def d_mu(self) -> np.ndarray:
        return self.vector[:, SL_MU]

    @property
    def d_rot(self) -> np.ndarray:
        return self.vector[:, SL_ROT]

    @property
    def d_log_scale(self) -> np.ndarray:
        return self.vector[:, SL_SCALE]

    @property
    def d_opacity_logit(self) -> np.ndarray:
        return self.vector[:, SL_OPACITY]

    @property
    def d_color(self) -> np.ndarray:
        return self.vector[:, SL_COLOR]

    @classmethod
    def zeros(cls, n: int) -> DeformationDelta:
        return cls(np.zeros((n, DELTA_DIM)))


@dataclass
class DeformNet:
    """Coarse/fine network pair plus the temporal tables for one segment."""

    coarse: MLP
    fine: MLP
    temporal: TemporalEmbeddings
    network_id: int = 0
    segment_range: tuple[int, int] = (0, 0)
    d_gauss: int = field(default=16)

    @classmethod
    def create(cls, n_frames: int, rng: np.random.Generator, *, d_gauss: int = 16,
               d_coarse: int = 8, d_fine: int = 8, hidden: tuple[int, ...] = (64, 64),
               n_coarse: int | None = None, network_id: int = 0,
               segment_range: tuple[int, int] | None = None) -> DeformNet:
        temporal = TemporalEmbeddings.create(n_frames, rng, d_coarse=d_coarse, d_fine=d_fine,
                                             n_coarse=n_coarse)
        coarse = MLP([d_gauss + d_coarse, *hidden, DELTA_DIM], rng)
        fine = MLP([d_gauss + d_fine, *hidden, DELTA_DIM], rng)
        return cls(coarse, fine, temporal, network_id,
                   segment_range if segment_range is not None else (0, n_frames), d_gauss)

    def replicate(self, network_id: int, segment_range: tuple[int, int]) -> DeformNet:
        twin = copy.deepcopy(self)
        twin.network_id = network_id
        twin.segment_range = (int(segment_range[0]), int(segment_range[1]))
        return twin

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, keyed by stable names."""
        out = self.coarse.parameters("coarse")
        out.update(self.fine.parameters("fine"))
        out["temporal.coarse"] = self.temporal.coarse_table
        out["temporal.fine"] = self.temporal.fine_table
        return out

    def header(self) -> dict:
        return {
            "network_id": self.network_id,
            "segment_range": list(self.segment_range),
            "d_gauss": self.d_gauss,
            "coarse_sizes": self.coarse.sizes,
            "fine_sizes": self.fine.sizes,
        }


def deform(z_g: np.ndarray, z_tc: np.ndarray, z_tf: np.ndarray, net: DeformNet) -> DeformationDelta:
    """Sum of coarse and fine network predictions for each row of ``z_g``."""
    delta, _ = _deform_forward(np.atleast_2d(z_g), np.asarray(z_tc), np.asarray(z_tf), net)
    return delta


def _deform_forward(z_g, z_tc, z_tf, net: DeformNet):
    n = z_g.shape[0]
    if z_g.shape[1] != net.d_gauss:
        raise ValueError(f"Gaussian embedding has dim {z_g.shape[1]}, net expects {net.d_gauss}")
    if z_tc.shape[-1] + net.d_gauss != net.coarse.sizes[0]:
        raise ValueError("coarse temporal embedding dimension mismatch")
    if z_tf.shape[-1] + net.d_gauss != net.fine.sizes[0]:
        raise ValueError("fine temporal embedding dimension mismatch")
    Xc = np.concatenate([z_g, np.broadcast_to(z_tc, (n, z_tc.shape[-1]))], axis=1)
    Xf = np.concatenate([z_g, np.broadcast_to(z_tf, (n, z_tf.shape[-1]))], axis=1)
    yc, cache_c = net.coarse.forward(Xc)
    yf, cache_f = net.fine.forward(Xf)
    return DeformationDelta(yc + yf), (cache_c, cache_f)


@dataclass
class DeformCache:
    t: int
    knot: int
    w: float
    caches: tuple


def deform_at(z_g: np.ndarray, t: int, net: DeformNet) -> tuple[DeformationDelta, DeformCache]:
    """Deform at frame ``t`` and keep what the backward pass needs."""
    k, w = net.temporal.knot_weights(t)
    z_tc, z_tf = temporal_embed(t, net.temporal)
    delta, caches = _deform_forward(np.atleast_2d(z_g), z_tc, z_tf, net)
    return delta, DeformCache(t, k, w, caches)


def deform_backward(cache: DeformCache, net: DeformNet, d_delta: np.ndarray
                    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Return (dL/dz_g, gradients keyed like ``net.parameters()``)."""
    cache_c, cache_f = cache.caches
    dXc, dWc, dbc = net.coarse.backward(cache_c, d_delta)
    dXf, dWf, dbf = net.fine.backward(cache_f, d_delta)
    dg = net.d_gauss
    dz_g = dXc[:, :dg] + dXf[:, :dg]
    d_tc = dXc[:, dg:].sum(axis=0)
    d_tf = dXf[:, dg:].sum(axis=0)
    grads: dict[str, np.ndarray] = {}
    for k in range(len(dWc)):
        grads[f"coarse.W{k}"] = dWc[k]
        grads[f"coarse.b{k}"] = dbc[k]
    for k in range(len(dWf)):
        grads[f"fine.W{k}"] = dWf[k]
        grads[f"fine.b{k}"] = dbf[k]
    g_coarse = np.zeros_like(net.temporal.coarse_table)
    g_coarse[cache.knot] += (1.0 - cache.w) * d_tc
    g_coarse[cache.knot + 1] += cache.w * d_tc
    g_fine = np.zeros_like(net.temporal.fine_table)
    g_fine[cache.t] = d_tf
    grads["temporal.coarse"] = g_coarse
    grads["temporal.fine"] = g_fine
    return dz_g, grads


def apply_delta(params: GaussianParams, delta: DeformationDelta) -> GaussianParams:
    v = delta.vector
    return GaussianParams(
        params.mu + v[:, SL_MU],
        params.rot + v[:, SL_ROT],
        params.log_scale + v[:, SL_SCALE],
        params.opacity_logit + v[:, SL_OPACITY],
        params.color + v[:, SL_COLOR],
        params.lineage_id.copy(),
    )


def net_from_arrays(header: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> DeformNet:
    def mlp(name: str, sizes: list[int]) -> MLP:
        m = MLP.__new__(MLP)
        m.sizes = list(sizes)
        m.W = [arrays[f"{prefix}{name}.W{k}"].copy() for k in range(len(sizes) - 1)]
        m.b = [arrays[f"{prefix}{name}.b{k}"].copy() for k in range(len(sizes) - 1)]
        return m

    temporal = TemporalEmbeddings(arrays[f"{prefix}temporal.coarse"].copy(),
                                  arrays[f"{prefix}temporal.fine"].copy())
    return DeformNet(mlp("coarse", header["coarse_sizes"]), mlp("fine", header["fine_sizes"]),
                     temporal, int(header["network_id"]), tuple(header["segment_range"]),
                     int(header["d_gauss"]))


def save_net(path: str | Path, net: DeformNet) -> None:
    save_arrays(path, net.parameters(), {"kind": "deform_net", **net.header()})


def load_net(path: str | Path) -> DeformNet:
    header, arrays = load_arrays(path)
    return net_from_arrays(header, arrays)
