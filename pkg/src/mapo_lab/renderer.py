"""Differentiable orthographic splatting with front-to-back compositing.

Forward and backward passes are vectorized over (splat, pixel) pairs. The
camera is orthographic, so the view Jacobian is constant and the projected
covariance is exact (no EWA linearization).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ActivatedGaussian, GaussianParams, activate, covariance, rotmat_grad_to_quat

COV2D_REG = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
FOOTPRINT_MAHA2 = 9.0  # 3 sigma
T_STOP = 1e-4


@dataclass
class OrthoCamera:
    view_rot: np.ndarray
    view_trans: np.ndarray
    pixels_per_unit: float
    width: int
    height: int

    def __post_init__(self) -> None:
        self.view_rot = np.asarray(self.view_rot, dtype=np.float64).reshape(3, 3)
        self.view_trans = np.asarray(self.view_trans, dtype=np.float64).reshape(3)
        self.pixels_per_unit = float(self.pixels_per_unit)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.pixels_per_unit <= 0:
            raise ValueError("pixels_per_unit must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        err = np.abs(self.view_rot.T @ self.view_rot - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"view_rot is not orthonormal (max error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    def to_dict(self) -> dict:
        return {
            "view_rot": self.view_rot.tolist(),
            "view_trans": self.view_trans.tolist(),
            "pixels_per_unit": self.pixels_per_unit,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> OrthoCamera:
        return cls(d["view_rot"], d["view_trans"], d["pixels_per_unit"], d["width"], d["height"])

    @classmethod
    def looking_from(cls, yaw_deg: float, pitch_deg: float = 0.0, *, distance: float = 5.0,
                     pixels_per_unit: float, width: int, height: int) -> OrthoCamera:
        """Camera orbiting the origin; yaw about world y, then pitch about view x."""
        a, b = np.radians(yaw_deg), np.radians(pitch_deg)
        ry = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(b), -np.sin(b)], [0.0, np.sin(b), np.cos(b)]])
        return cls(rx @ ry, [0.0, 0.0, distance], pixels_per_unit, width, height)


@dataclass
class Splat2D:
    """Projected splats, one row per Gaussian."""

    mean2d: np.ndarray   # (N, 2) pixels
    cov2d: np.ndarray    # (N, 2, 2) pixels^2, regularized
    depth: np.ndarray    # (N,)
    alpha: np.ndarray    # (N,)
    rgb: np.ndarray      # (N, 3)
    key: np.ndarray      # (N,) tie-break key for equal depths (lineage id)

    def __len__(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    alpha: np.ndarray
    rgb: np.ndarray


@dataclass
class ParamGrads:
    """Gradients with respect to raw ``GaussianParams`` fields."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> ParamGrads:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def as_delta_vector(self) -> np.ndarray:
        """Pack into (N, 14) rows in deformation-delta order."""
        return np.concatenate(
            [self.mu, self.rot, self.log_scale, self.opacity_logit[:, None], self.color], axis=1
        )


def project(ag: ActivatedGaussian, cam: OrthoCamera) -> Splat2D:
    p = ag.mu @ cam.view_rot.T + cam.view_trans
    J = cam.view_rot[:2]
    s = cam.pixels_per_unit
    mean2d = s * p[:, :2] + cam.center
    cov2d = (s * s) * (J @ covariance(ag) @ J.T) + COV2D_REG * np.eye(2)
    return Splat2D(mean2d, cov2d, p[:, 2].copy(), ag.alpha.copy(), ag.rgb.copy(), ag.lineage_id.copy())


def pixel_grid(cam: OrthoCamera) -> np.ndarray:
    """Pixel-center coordinates (x = column, y = row), shape (H*W, 2)."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


@dataclass
class _RenderCache:
    order: np.ndarray
    conic: np.ndarray     # (N, 2, 2) sorted
    d: np.ndarray         # (N, P, 2) pixel minus mean, sorted
    g: np.ndarray         # (N, P)
    alpha: np.ndarray     # (N,) sorted
    rgb: np.ndarray       # (N, 3) sorted
    a: np.ndarray         # effective alpha' (0 where skipped or stopped)
    grad_mask: np.ndarray  # where d a / d (alpha g) == 1
    T_excl: np.ndarray    # transmittance before each splat
    T_final: np.ndarray   # (P,)
    background: np.ndarray
    shape: tuple[int, int]


def _forward(splats: Splat2D, cam: OrthoCamera, background, cutoffs: bool):
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    P = H * W
    n = len(splats)
    if n == 0:
        img = np.broadcast_to(bg, (H, W, 3)).copy()
        return img, None
    order = np.lexsort((splats.key, splats.depth))
    mean = splats.mean2d[order]
    cov = splats.cov2d[order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    if np.any(det <= 0) or not np.all(np.isfinite(det)):
        raise FloatingPointError("non-invertible 2D covariance after regularization")
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det
    conic[:, 0, 1] = -cov[:, 0, 1] / det
    conic[:, 1, 0] = -cov[:, 1, 0] / det

    d = pixel_grid(cam)[None, :, :] - mean[:, None, :]
    dx, dy = d[..., 0], d[..., 1]
    maha = (conic[:, 0, 0, None] * dx * dx
            + (conic[:, 0, 1, None] + conic[:, 1, 0, None]) * dx * dy
            + conic[:, 1, 1, None] * dy * dy)
    g = np.exp(-0.5 * maha)
    alpha = splats.alpha[order]
    raw = alpha[:, None] * g
    a = np.minimum(raw, ALPHA_MAX)
    included = np.ones_like(a, dtype=bool)
    if cutoffs:
        included &= (a >= ALPHA_MIN) & (maha <= FOOTPRINT_MAHA2)
        a = np.where(included, a, 0.0)
    T_incl = np.cumprod(1.0 - a, axis=0)
    T_excl = np.vstack([np.ones((1, P)), T_incl[:-1]])
    if cutoffs:
        live = T_excl >= T_STOP
        if not live.all():
            included &= live
            a = np.where(included, a, 0.0)
            T_incl = np.cumprod(1.0 - a, axis=0)
            T_excl = np.vstack([np.ones((1, P)), T_incl[:-1]])
    T_final = T_incl[-1]
    rgb = splats.rgb[order]
    w = a * T_excl
    img = (w.T @ rgb + T_final[:, None] * bg[None, :]).reshape(H, W, 3)
    cache = _RenderCache(
        order=order, conic=conic, d=d, g=g, alpha=alpha, rgb=rgb, a=a,
        grad_mask=included & (raw < ALPHA_MAX), T_excl=T_excl, T_final=T_final,
        background=bg, shape=(H, W),
    )
    return img, cache


def render(splats: Splat2D, cam: OrthoCamera, background, *, cutoffs: bool = True) -> np.ndarray:
    """Composite splats front to back; returns an (H, W, 3) float image."""
    img, _ = _forward(splats, cam, background, cutoffs)
    return img


def _backward(cache: _RenderCache | None, n: int, dL_dimage: np.ndarray) -> SplatGrads:
    if cache is None:
        return SplatGrads(np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros(n), np.zeros((n, 3)))
    H, W = cache.shape
    if dL_dimage.shape != (H, W, 3):
        raise ValueError(f"gradient image has shape {dL_dimage.shape}, expected {(H, W, 3)}")
    G = dL_dimage.reshape(-1, 3)
    a, T_excl = cache.a, cache.T_excl
    w = a * T_excl
    gc = cache.rgb @ G.T                      # (N, P): G . c_i
    d_rgb = w @ G
    contrib = w * gc
    # suffix[i] = sum_{j > i} contrib_j + T_final * (G . bg)
    tail = np.cumsum(contrib[::-1], axis=0)[::-1]
    suffix = tail - contrib + (cache.T_final * (G @ cache.background))[None, :]
    d_a = T_excl * gc - suffix / (1.0 - a)
    d_raw = np.where(cache.grad_mask, d_a, 0.0)

    d_alpha = (d_raw * cache.g).sum(axis=1)
    d_power = d_raw * cache.alpha[:, None] * cache.g   # power = -maha / 2
    d_maha = -0.5 * d_power
    dx, dy = cache.d[..., 0], cache.d[..., 1]
    d_conic = np.empty((a.shape[0], 2, 2))
    d_conic[:, 0, 0] = (d_maha * dx * dx).sum(axis=1)
    d_conic[:, 1, 1] = (d_maha * dy * dy).sum(axis=1)
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = (d_maha * dx * dy).sum(axis=1)
    C = cache.conic
    # d maha / d mean = -2 conic @ d
    Cd_x = C[:, 0, 0, None] * dx + C[:, 0, 1, None] * dy
    Cd_y = C[:, 1, 0, None] * dx + C[:, 1, 1, None] * dy
    d_mean = -2.0 * np.stack([(d_maha * Cd_x).sum(axis=1), (d_maha * Cd_y).sum(axis=1)], axis=1)
    d_cov = -C @ d_conic @ C

    inv = np.empty_like(cache.order)
    inv[cache.order] = np.arange(cache.order.size)
    return SplatGrads(d_mean[inv], d_cov[inv], d_alpha[inv], d_rgb[inv])


def render_backward(splats: Splat2D, cam: OrthoCamera, background, dL_dimage: np.ndarray,
                    *, cutoffs: bool = True) -> SplatGrads:
    """Gradients of a scalar loss w.r.t. each splat's 2D parameters.

    The forward pass is recomputed. Skipped splats, early termination and the
    alpha clamp (when saturated) contribute zero gradient.
    """
    if dL_dimage.shape != (cam.height, cam.width, 3):
        raise ValueError(f"gradient image has shape {dL_dimage.shape}, expected "
                         f"{(cam.height, cam.width, 3)}")
    _, cache = _forward(splats, cam, background, cutoffs)
    return _backward(cache, len(splats), dL_dimage)


def splat_grads_to_params(ag: ActivatedGaussian, params: GaussianParams, cam: OrthoCamera,
                          sg: SplatGrads) -> ParamGrads:
    """Chain 2D splat gradients through projection and activation."""
    s = cam.pixels_per_unit
    J = cam.view_rot[:2]
    d_mu = s * sg.mean2d @ J
    d_Sigma = (s * s) * (J.T @ sg.cov2d @ J)
    M = ag.R * ag.S_diag[:, None, :]
    d_M = (d_Sigma + np.swapaxes(d_Sigma, 1, 2)) @ M
    d_R = d_M * ag.S_diag[:, None, :]
    d_S = (d_M * ag.R).sum(axis=1)
    d_log_scale = d_S * ag.S_diag
    d_qhat = rotmat_grad_to_quat(ag.quat, d_R)
    norms = np.linalg.norm(params.rot, axis=1)
    q = ag.quat
    d_rot = (d_qhat - q * (q * d_qhat).sum(axis=1, keepdims=True)) / norms[:, None]
    d_opacity = sg.alpha * ag.alpha * (1.0 - ag.alpha)
    inside = (params.color >= 0.0) & (params.color <= 1.0)
    d_color = np.where(inside, sg.rgb, 0.0)
    return ParamGrads(d_mu, d_rot, d_log_scale, d_opacity, d_color)


@dataclass
class RenderResult:
    image: np.ndarray
    activated: ActivatedGaussian
    splats: Splat2D
    cache: _RenderCache | None


def render_gaussians(params: GaussianParams, cam: OrthoCamera, background, *,
                     cutoffs: bool = True) -> RenderResult:
    ag = activate(params)
    splats = project(ag, cam)
    img, cache = _forward(splats, cam, background, cutoffs)
    return RenderResult(img, ag, splats, cache)


def render_gaussians_backward(result: RenderResult, params: GaussianParams, cam: OrthoCamera,
                              dL_dimage: np.ndarray) -> ParamGrads:
    if dL_dimage.shape != result.image.shape:
        raise ValueError(f"gradient image has shape {dL_dimage.shape}, expected {result.image.shape}")
    sg = _backward(result.cache, len(params), dL_dimage)
    return splat_grads_to_params(result.activated, params, cam, sg)


def to_ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(to_ppm_bytes(img))


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 file back into floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / maxval
