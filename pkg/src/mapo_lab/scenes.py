"""Synthetic dynamic scenes with analytic ground-truth trajectories.

A scene is a handful of Gaussian blobs, each moving along a closed-form
trajectory, observed by orthographic cameras. Ground-truth frames are
rendered with the same splatting renderer used for training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GaussianParams
from .renderer import OrthoCamera, render_gaussians

TRAJECTORY_KINDS = ("static", "sinusoid", "reversal")


@dataclass
class Trajectory:
    kind: str = "static"
    amplitude: float = 0.0
    frequency: float = 1.0
    reversal_frame: int | None = None
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("trajectory direction must be non-zero")
        self.direction = tuple((d / n).tolist())

    def offset(self, t: int, n_frames: int) -> np.ndarray:
        d = np.asarray(self.direction)
        if self.kind == "static":
            return np.zeros(3)
        if self.kind == "sinusoid":
            return self.amplitude * np.sin(2 * np.pi * self.frequency * t / n_frames) * d
        rf = self.reversal_frame if self.reversal_frame is not None else n_frames // 2
        if t < rf:
            s = t / rf
        else:
            s = 1.0 - (t - rf) / max(n_frames - rf, 1)
        return self.amplitude * s * d

    def to_dict(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude, "frequency": self.frequency,
                "reversal_frame": self.reversal_frame, "direction": list(self.direction)}


@dataclass
class Blob:
    params: GaussianParams       # one row
    trajectory: Trajectory


@dataclass
class SceneSpec:
    n_frames: int
    blobs: list[Blob]
    cameras: list[OrthoCamera]
    train_views: list[int]
    heldout_view: int
    crop: tuple[int, int, int, int]          # x0, y0, x1, y1, half-open pixels
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.n_frames < 2:
            raise ValueError("scene needs at least two frames")
        if len(self.train_views) < 1:
            raise ValueError("scene needs at least one training view")
        cam = self.cameras[self.heldout_view]
        x0, y0, x1, y1 = self.crop
        if not (0 <= x0 < x1 <= cam.width and 0 <= y0 < y1 <= cam.height):
            raise ValueError(f"crop {self.crop} outside the {cam.width}x{cam.height} image")

    def to_dict(self) -> dict:
        blobs = []
        for b in self.blobs:
            p = b.params
            blobs.append({
                "params": {"mu": p.mu[0].tolist(), "rot": p.rot[0].tolist(),
                           "log_scale": p.log_scale[0].tolist(),
                           "opacity_logit": float(p.opacity_logit[0]), "color": p.color[0].tolist()},
                "trajectory": b.trajectory.to_dict(),
            })
        cams = []
        for k, c in enumerate(self.cameras):
            role = "heldout" if k == self.heldout_view else ("train" if k in self.train_views else "unused")
            cams.append({**c.to_dict(), "role": role})
        return {"T": self.n_frames, "background": self.background.tolist(), "blobs": blobs,
                "cameras": cams, "crop": list(self.crop)}

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        allowed = {"T", "background", "blobs", "cameras", "crop"}
        unknown = set(d) - allowed
        if unknown:
            raise KeyError(f"unknown scene key(s): {sorted(unknown)}")
        blobs = []
        for k, b in enumerate(d["blobs"]):
            p = b["params"]
            params = GaussianParams.single(p["mu"], p.get("rot", (1, 0, 0, 0)),
                                           p.get("log_scale", (0, 0, 0)), p.get("opacity_logit", 0.0),
                                           p.get("color", (0.5, 0.5, 0.5)), lineage_id=k)
            blobs.append(Blob(params, Trajectory(**b.get("trajectory", {}))))
        cams, train, held = [], [], None
        for k, c in enumerate(d["cameras"]):
            cams.append(OrthoCamera.from_dict(c))
            role = c.get("role", "train")
            if role == "heldout":
                held = k
            elif role == "train":
                train.append(k)
        if held is None:
            raise KeyError("scene has no camera with role 'heldout'")
        return cls(int(d["T"]), blobs, cams, train, held, tuple(int(v) for v in d["crop"]),
                    np.asarray(d.get("background", (0, 0, 0)), dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> SceneSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Scene:
    """A generated scene: per-frame ground-truth parameters plus cached GT images."""

    def __init__(self, spec: SceneSpec, gt_params: list[GaussianParams]):
        self.spec = spec
        self.gt_params = gt_params
        self._frames: dict[tuple[int, int], np.ndarray] = {}

    @property
    def n_frames(self) -> int:
        return self.spec.n_frames

    @property
    def cameras(self) -> list[OrthoCamera]:
        return self.spec.cameras

    def initial_params(self) -> GaussianParams:
        return self.gt_params[0].copy()


def gen_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> Scene:
    """Evaluate every blob's trajectory at every frame.

    Trajectories are deterministic; ``rng`` is accepted for generators that
    jitter blobs and is unused here.
    """
    base = GaussianParams.concat([b.params for b in spec.blobs])
    base.lineage_id = np.arange(len(base), dtype=np.int64)
    frames = []
    for t in range(spec.n_frames):
        p = base.copy()
        for k, b in enumerate(spec.blobs):
            p.mu[k] = p.mu[k] + b.trajectory.offset(t, spec.n_frames)
        frames.append(p)
    return Scene(spec, frames)


def gt_frame(scene: Scene, t: int, view: int) -> np.ndarray:
    if not 0 <= t < scene.n_frames:
        raise ValueError(f"frame {t} outside [0, {scene.n_frames})")
    key = (t, view)
    img = scene._frames.get(key)
    if img is None:
        img = render_gaussians(scene.gt_params[t], scene.cameras[view], scene.spec.background).image
        img.setflags(write=False)
        scene._frames[key] = img
    return img


def reference_scene_spec(n_frames: int = 120, size: int = 32) -> SceneSpec:
    """Stationary background blobs, one slow sinusoid, one fast blob reversing at T/2."""
    ppu = size / 4.0
    blobs: list[Blob] = []
    palette = [(0.85, 0.25, 0.2), (0.2, 0.7, 0.3), (0.25, 0.35, 0.9), (0.9, 0.8, 0.2),
               (0.7, 0.3, 0.8), (0.2, 0.8, 0.8)]
    k = 0
    for gy in (-1.2, 0.0, 1.2):
        for gx in (-1.3, -0.45, 0.45, 1.3):
            if gy == 0.0 and gx in (-0.45, 0.45):
                continue
            z = 0.6 + 0.15 * (k % 3)
            blobs.append(Blob(GaussianParams.single(
                (gx, gy, z), (1.0, 0.1 * (k % 2), 0.0, 0.05 * k), (np.log(0.28), np.log(0.2), np.log(0.25)),
                1.5, palette[k % len(palette)], lineage_id=k), Trajectory("static")))
            k += 1
    # Two extra stationary blobs near the middle, behind the movers.
    for gx in (-0.5, 0.5):
        blobs.append(Blob(GaussianParams.single(
            (gx, 0.0, 1.0), (1, 0, 0, 0), (np.log(0.22),) * 3, 1.0, (0.6, 0.6, 0.6), lineage_id=k),
            Trajectory("static")))
        k += 1
    blobs.append(Blob(GaussianParams.single(
        (0.0, -0.6, -0.3), (1, 0, 0, 0), (np.log(0.18),) * 3, 2.5, (0.95, 0.55, 0.1), lineage_id=k),
        Trajectory("sinusoid", amplitude=0.35, frequency=1.0, direction=(1.0, 0.0, 0.0))))
    k += 1
    blobs.append(Blob(GaussianParams.single(
        (-0.8, 0.5, -0.6), (1, 0, 0, 0), (np.log(0.16),) * 3, 3.0, (0.95, 0.95, 0.95), lineage_id=k),
        Trajectory("reversal", amplitude=1.6, reversal_frame=n_frames // 2, direction=(1.0, 0.0, 0.0))))
    cams = [
        OrthoCamera.looking_from(-30, 10, pixels_per_unit=ppu, width=size, height=size),
        OrthoCamera.looking_from(0, -12, pixels_per_unit=ppu, width=size, height=size),
        OrthoCamera.looking_from(30, 8, pixels_per_unit=ppu, width=size, height=size),
        OrthoCamera.looking_from(12, 3, pixels_per_unit=ppu, width=size, height=size),
    ]
    # Crop follows the fast blob's sweep in the held-out view.
    crop = _sweep_crop(blobs[-1], cams[3], n_frames, margin=4)
    return SceneSpec(n_frames, blobs, cams, [0, 1, 2], 3, crop, np.array([0.05, 0.05, 0.08]))


def _grow(lo: int, hi: int, size: int, limit: int) -> tuple[int, int]:
    # Widen [lo, hi) to at least ``size`` pixels without leaving [0, limit).
    while hi - lo < min(size, limit):
        if lo > 0 and (hi - lo) % 2 == 0 or hi >= limit:
            lo -= 1
        else:
            hi += 1
    return lo, hi


def _sweep_crop(blob: Blob, cam: OrthoCamera, n_frames: int, margin: int,
                min_size: int = 11) -> tuple[int, int, int, int]:
    """Bounding box of the blob's projected sweep, at least ``min_size`` square so SSIM applies."""
    pts = []
    for t in range(n_frames):
        mu = blob.params.mu[0] + blob.trajectory.offset(t, n_frames)
        p = cam.view_rot @ mu + cam.view_trans
        pts.append(cam.pixels_per_unit * p[:2] + cam.center)
    pts = np.array(pts)
    x0 = max(0, int(np.floor(pts[:, 0].min())) - margin)
    y0 = max(0, int(np.floor(pts[:, 1].min())) - margin)
    x1 = min(cam.width, int(np.ceil(pts[:, 0].max())) + margin + 1)
    y1 = min(cam.height, int(np.ceil(pts[:, 1].max())) + margin + 1)
    x0, x1 = _grow(x0, x1, min_size, cam.width)
    y0, y1 = _grow(y0, y1, min_size, cam.height)
    return x0, y0, x1, y1
