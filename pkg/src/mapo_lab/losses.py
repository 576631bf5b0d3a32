"""Photometric losses, the boundary consistency terms, and PSNR / SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d, convolve2d

WINDOW_RADIUS = 5
CURRENT_WEIGHT = 0.5
GT_WEIGHT = 1.0
PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over pixels and channels."""
    _check_same(a, b)
    return float(np.abs(a - b).mean())


def l1_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """dL1/da; the derivative w.r.t. b is the negation."""
    _check_same(a, b)
    return np.sign(a - b) / a.size


@dataclass
class BoundaryWindow:
    boundaries: list[int] = field(default_factory=list)
    radius: int = WINDOW_RADIUS

    def __post_init__(self) -> None:
        self.boundaries = sorted(int(b) for b in set(self.boundaries))


def boundary_partner(t: int, window: BoundaryWindow) -> int | None:
    """Nearest frame across the nearest boundary within the window, or None."""
    best = None
    for b in window.boundaries:   # ascending, so ties keep the smaller boundary
        dist = abs(t - b)
        if dist <= window.radius and (best is None or dist < abs(t - best)):
            best = b
    if best is None:
        return None
    return best if t < best else best - 1


@dataclass
class LossReport:
    l_main: float = 0.0
    l_current: float = 0.0
    l_gt: float = 0.0
    l_cross: float = 0.0
    total: float = 0.0


@dataclass
class CrossTerms:
    l_current: float
    l_gt: float
    l_cross: float
    d_current_render: np.ndarray    # d l_cross / d I_t(G_t)
    d_partner_render: np.ndarray    # d l_cross / d I_t(G_t')


def cross_frame_loss(render_current: np.ndarray, render_partner: np.ndarray, gt: np.ndarray, *,
                     use_current: bool = True, use_gt: bool = True) -> CrossTerms:
    """Consistency between the two segments' renders of one frame, plus GT anchoring.

    ``render_partner`` is the partner segment's Gaussians deformed at the
    current frame. Disabled terms are still reported but carry no weight.
    """
    _check_same(render_current, render_partner)
    _check_same(render_current, gt)
    l_cur = l1_loss(render_current, render_partner)
    l_gt = l1_loss(render_partner, gt)
    d_cur = np.zeros_like(render_current)
    d_par = np.zeros_like(render_current)
    total = 0.0
    if use_current:
        g = l1_grad(render_current, render_partner)
        d_cur += CURRENT_WEIGHT * g
        d_par -= CURRENT_WEIGHT * g
        total += CURRENT_WEIGHT * l_cur
    if use_gt:
        d_par += GT_WEIGHT * l1_grad(render_partner, gt)
        total += GT_WEIGHT * l_gt
    return CrossTerms(l_cur, l_gt, total, d_cur, d_par)


def psnr(a: np.ndarray, gt: np.ndarray) -> float:
    _check_same(a, gt)
    mse = float(np.mean((a - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x: np.ndarray, y: np.ndarray, w: np.ndarray, need_grad: bool):
    f = lambda img: correlate2d(img, w, mode="valid")  # noqa: E731
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    if not need_grad:
        return smap.mean(), None
    n = smap.size
    # Partials of the per-window value, averaged over windows.
    dmx = (2 * my * a2 / (b1 * b2) - smap * 2 * mx / b1) / n
    dsxx = -smap / b2 / n
    dsxy = 2 * a1 / (b1 * b2) / n
    # sxx = E[x^2] - mx^2, sxy = E[xy] - mx my; pull window means back to pixels.
    back = lambda m: convolve2d(m, w, mode="full")  # noqa: E731
    grad = back(dmx - 2 * dsxx * mx - dsxy * my) + 2 * x * back(dsxx) + y * back(dsxy)
    return smap.mean(), grad


def ssim(a: np.ndarray, gt: np.ndarray, *, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid windows, averaged over channels."""
    _check_same(a, gt)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    vals = [_ssim_channel(a[..., c], gt[..., c], w, False)[0] for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_grad(a: np.ndarray, gt: np.ndarray, *, window: int = 11,
                   sigma: float = 1.5) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``a``."""
    _check_same(a, gt)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    C = a.shape[2]
    grad = np.empty_like(a)
    vals = []
    for c in range(C):
        v, g = _ssim_channel(a[..., c], gt[..., c], w, True)
        vals.append(v)
        grad[..., c] = g / C
    return float(np.mean(vals)), grad
