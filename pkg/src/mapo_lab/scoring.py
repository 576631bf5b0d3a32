"""Per-Gaussian motion statistics and the harmonic-mean dynamic score."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCORE_EPS = 1e-6


class PositionHistory:
    """Fixed-capacity ring buffer of (iteration, position) records."""

    def __init__(self, capacity: int = 16):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[tuple[int, np.ndarray]] = deque(maxlen=capacity)

    def record(self, mu, iteration: int) -> PositionHistory:
        mu = np.asarray(mu, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(mu)):
            raise ValueError("cannot record a non-finite position")
        self._buf.append((int(iteration), mu.copy()))
        return self

    def clear(self) -> None:
        self._buf.clear()

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def full(self) -> bool:
        return len(self._buf) == self.capacity

    @property
    def iterations(self) -> list[int]:
        return [it for it, _ in self._buf]

    @property
    def positions(self) -> np.ndarray:
        if not self._buf:
            return np.zeros((0, 3))
        return np.stack([p for _, p in self._buf])

    def copy(self) -> PositionHistory:
        out = PositionHistory(self.capacity)
        for it, p in self._buf:
            out._buf.append((it, p.copy()))
        return out


def record(history: PositionHistory, mu, iteration: int) -> PositionHistory:
    return history.record(mu, iteration)


def _positions(history) -> np.ndarray:
    if isinstance(history, PositionHistory):
        return history.positions
    return np.asarray(history, dtype=np.float64).reshape(-1, 3)


def max_displacement(history) -> float:
    """Diagonal length of the axis-aligned bounding box of the recorded positions."""
    pos = _positions(history)
    if pos.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))


def variance(history) -> float:
    pos = _positions(history)
    if pos.shape[0] == 0:
        raise ValueError("variance of an empty history")
    centered = pos - pos.mean(axis=0)
    return float((centered * centered).sum(axis=1).mean())


def percentile_normalize(values) -> np.ndarray:
    """Fraction of the 100 nearest-rank percentiles each value reaches."""
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    if n == 0:
        raise ValueError("cannot normalize an empty list")
    srt = np.sort(v)
    ranks = np.array([math.ceil(k * n / 100) - 1 for k in range(1, 101)])
    q = srt[ranks]
    # q is nondecreasing, so the count of q(k) <= value is a right bisection.
    return np.searchsorted(q, v, side="right") / 100.0


def dynamic_score(r_tilde, v_tilde, eps: float = SCORE_EPS):
    r = np.asarray(r_tilde, dtype=np.float64) + eps
    v = np.asarray(v_tilde, dtype=np.float64) + eps
    s = 2.0 / (1.0 / r + 1.0 / v)
    return float(s) if s.ndim == 0 else s


@dataclass
class ScoreBatch:
    r: np.ndarray
    v: np.ndarray
    r_tilde: np.ndarray
    v_tilde: np.ndarray
    S: np.ndarray

    def __len__(self) -> int:
        return self.r.size


def score_histories(histories: list[PositionHistory], *, use_variance: bool = True) -> ScoreBatch:
    """Score a population; ``use_variance=False`` scores on displacement alone."""
    r = np.array([max_displacement(h) for h in histories])
    v = np.array([variance(h) for h in histories])
    r_t = percentile_normalize(r)
    v_t = percentile_normalize(v)
    S = dynamic_score(r_t, v_t) if use_variance else r_t.copy()
    return ScoreBatch(r, v, r_t, v_t, np.atleast_1d(S))


SCORE_CSV_COLUMNS = ["lineage_id", "segment_start", "segment_end", "level", "r", "v",
                     "r_tilde", "v_tilde", "S"]


def write_score_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_CSV_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in SCORE_CSV_COLUMNS})
