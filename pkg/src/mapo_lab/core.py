"""Gaussian parameterization, activations and covariance construction.

All containers are struct-of-arrays: a ``GaussianParams`` with N entries
holds ``mu`` of shape (N, 3), ``rot`` of shape (N, 4) and so on. A single
Gaussian is simply N == 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_EPS = 1e-12


class DegenerateRotationError(ValueError):
    """Raised when a raw quaternion is too close to zero to normalize."""


@dataclass
class GaussianParams:
    """Raw, unconstrained per-Gaussian parameters.

    Scales live in log space and opacity as a logit so that additive
    deformation deltas always map back to valid activated values.
    """

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    lineage_id: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.rot = np.atleast_2d(np.asarray(self.rot, dtype=np.float64))
        self.log_scale = np.atleast_2d(np.asarray(self.log_scale, dtype=np.float64))
        self.opacity_logit = np.atleast_1d(np.asarray(self.opacity_logit, dtype=np.float64))
        self.color = np.atleast_2d(np.asarray(self.color, dtype=np.float64))
        n = self.mu.shape[0]
        if self.lineage_id is None:
            self.lineage_id = np.arange(n, dtype=np.int64)
        self.lineage_id = np.atleast_1d(np.asarray(self.lineage_id, dtype=np.int64))
        shapes = {
            "mu": (self.mu.shape, (n, 3)),
            "rot": (self.rot.shape, (n, 4)),
            "log_scale": (self.log_scale.shape, (n, 3)),
            "opacity_logit": (self.opacity_logit.shape, (n,)),
            "color": (self.color.shape, (n, 3)),
            "lineage_id": (self.lineage_id.shape, (n,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")

    def __len__(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> GaussianParams:
        return GaussianParams(
            self.mu.copy(),
            self.rot.copy(),
            self.log_scale.copy(),
            self.opacity_logit.copy(),
            self.color.copy(),
            self.lineage_id.copy(),
        )

    def take(self, idx) -> GaussianParams:
        idx = np.asarray(idx)
        return GaussianParams(
            self.mu[idx],
            self.rot[idx],
            self.log_scale[idx],
            self.opacity_logit[idx],
            self.color[idx],
            self.lineage_id[idx],
        )

    @staticmethod
    def concat(parts: list[GaussianParams]) -> GaussianParams:
        return GaussianParams(
            np.concatenate([p.mu for p in parts]).reshape(-1, 3),
            np.concatenate([p.rot for p in parts]).reshape(-1, 4),
            np.concatenate([p.log_scale for p in parts]).reshape(-1, 3),
            np.concatenate([p.opacity_logit for p in parts]),
            np.concatenate([p.color for p in parts]).reshape(-1, 3),
            np.concatenate([p.lineage_id for p in parts]),
        )

    @staticmethod
    def single(mu, rot=(1.0, 0.0, 0.0, 0.0), log_scale=(0.0, 0.0, 0.0),
               opacity_logit=0.0, color=(0.5, 0.5, 0.5), lineage_id=0) -> GaussianParams:
        return GaussianParams(
            np.asarray(mu, dtype=np.float64)[None],
            np.asarray(rot, dtype=np.float64)[None],
            np.asarray(log_scale, dtype=np.float64)[None],
            np.asarray([opacity_logit], dtype=np.float64),
            np.asarray(color, dtype=np.float64)[None],
            np.asarray([lineage_id], dtype=np.int64),
        )


@dataclass
class ActivatedGaussian:
    mu: np.ndarray        # (N, 3)
    R: np.ndarray         # (N, 3, 3)
    S_diag: np.ndarray    # (N, 3), strictly positive
    alpha: np.ndarray     # (N,), in (0, 1)
    rgb: np.ndarray       # (N, 3), in [0, 1]
    lineage_id: np.ndarray
    quat: np.ndarray      # (N, 4) unit quaternion, kept for the backward pass

    def __len__(self) -> int:
        return self.mu.shape[0]


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split on sign so large |x| never overflows exp.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) of shape (N, 4) to rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to dL/dq for unit quaternions ``q``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0]
              - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def activate(params: GaussianParams) -> ActivatedGaussian:
    norms = np.linalg.norm(params.rot, axis=1)
    if np.any(norms < QUAT_EPS):
        bad = np.flatnonzero(norms < QUAT_EPS)
        raise DegenerateRotationError(f"quaternion norm below {QUAT_EPS} at indices {bad.tolist()}")
    q = params.rot / norms[:, None]
    return ActivatedGaussian(
        mu=params.mu.copy(),
        R=quat_to_rotmat(q),
        S_diag=np.exp(params.log_scale),
        alpha=sigmoid(params.opacity_logit),
        rgb=np.clip(params.color, 0.0, 1.0),
        lineage_id=params.lineage_id.copy(),
        quat=q,
    )


def covariance(ag: ActivatedGaussian) -> np.ndarray:
    """World-space covariances R diag(s^2) R^T, shape (N, 3, 3)."""
    M = ag.R * ag.S_diag[:, None, :]
    cov = M @ np.swapaxes(M, 1, 2)
    # Symmetrize to remove round-off asymmetry.
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))

