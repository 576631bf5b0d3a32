"""Hierarchical temporal partitioning of Gaussians and static identification.

Every Gaussian instance owns a half-open frame range ``[start, end)``. A
lineage starts as one instance covering ``[0, T)``; a split keeps the left
half on the original instance and appends a replica for the right half.
Deformation networks are keyed by range, so all instances sharing a range
share one network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GaussianParams
from .deformation import DeformNet, apply_delta, deform_at
from .scoring import PositionHistory, ScoreBatch

Range = tuple[int, int]


@dataclass
class PartitionConfig:
    tau_levels: list[float] = field(default_factory=lambda: [0.9])
    max_level: int = 3
    tau_static: float = 0.2
    # Fractions of total iterations at which scoring runs.
    check_fractions: list[float] = field(default_factory=lambda: [0.4, 0.6, 0.8])
    static_check_fractions: list[float] = field(default_factory=lambda: [0.4])
    history_capacity: int = 16
    record_every: int = 50
    score_mode: str = "harmonic"   # or "max_displacement"

    def __post_init__(self) -> None:
        if self.max_level < 0:
            raise ValueError("max_level must be >= 0")
        if not self.tau_levels:
            raise ValueError("tau_levels must not be empty")
        if self.score_mode not in ("harmonic", "max_displacement"):
            raise ValueError(f"unknown score_mode {self.score_mode!r}")
        if self.record_every < 1 or self.history_capacity < 1:
            raise ValueError("record_every and history_capacity must be >= 1")

    def tau(self, level: int) -> float:
        return self.tau_levels[min(level, len(self.tau_levels) - 1)]

    def check_iterations(self, total: int) -> list[int]:
        return sorted({int(round(f * total)) for f in self.check_fractions})

    def static_iterations(self, total: int) -> list[int]:
        return sorted({int(round(f * total)) for f in self.static_check_fractions})


@dataclass
class PartitionEvent:
    lineage_id: int
    original: int          # instance index keeping the left half
    replica: int           # new instance index for the right half
    parent: Range
    left: Range
    right: Range
    level: int             # level of both children


@dataclass
class SplitReport:
    events: list[PartitionEvent] = field(default_factory=list)
    skipped_max_level: int = 0


@dataclass
class ActiveSet:
    t: int
    indices: np.ndarray                      # every active instance, ascending
    static: np.ndarray
    dynamic: dict[Range, np.ndarray]         # segment range -> instance indices

    @property
    def n_dynamic(self) -> int:
        return int(sum(v.size for v in self.dynamic.values()))


class PartitionedCloud:
    """Gaussian instances with their segments, embeddings, histories and networks."""

    def __init__(self, params: GaussianParams, z_g: np.ndarray, root_net: DeformNet,
                 n_frames: int, history_capacity: int = 16):
        n = len(params)
        self.params = params
        self.z_g = np.asarray(z_g, dtype=np.float64).reshape(n, -1)
        self.n_frames = int(n_frames)
        self.seg = np.tile(np.array([0, self.n_frames], dtype=np.int64), (n, 1))
        self.level = np.zeros(n, dtype=np.int64)
        self.is_static = np.zeros(n, dtype=bool)
        self.bake_t = np.full(n, -1, dtype=np.int64)
        self.last_score = np.full(n, np.nan)
        self.history_capacity = history_capacity
        self.histories = [PositionHistory(history_capacity) for _ in range(n)]
        root_net.segment_range = (0, self.n_frames)
        self.nets: dict[Range, DeformNet] = {(0, self.n_frames): root_net}
        self.next_net_id = root_net.network_id + 1

    def __len__(self) -> int:
        return len(self.params)

    def segment_of(self, i: int) -> Range:
        return int(self.seg[i, 0]), int(self.seg[i, 1])

    def net_for(self, i: int) -> DeformNet:
        return self.nets[self.segment_of(i)]

    def boundaries(self) -> list[int]:
        """All interior split points currently present in the tree."""
        starts = np.unique(self.seg[:, 0])
        return [int(b) for b in starts if 0 < b < self.n_frames]

    def eligible(self) -> np.ndarray:
        """Dynamic instances whose history buffer is full."""
        return np.array([i for i in range(len(self)) if not self.is_static[i]
                         and self.histories[i].full], dtype=np.int64)

    def prune_nets(self) -> None:
        # Static members keep their range, so their net stays addressable too.
        used = {self.segment_of(i) for i in range(len(self))}
        for key in list(self.nets):
            if key not in used:
                del self.nets[key]

    def to_records(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            s, e = self.segment_of(i)
            score = float(self.last_score[i])
            out.append({
                "lineage_id": int(self.params.lineage_id[i]),
                "t_start": s,
                "t_end": e,
                "level": int(self.level[i]),
                "network_id": int(self.nets[(s, e)].network_id),
                "is_static": bool(self.is_static[i]),
                "last_score": None if np.isnan(score) else score,
            })
        return out

    def dump_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_records(), indent=1) + "\n")


def active_set(cloud: PartitionedCloud, t: int) -> ActiveSet:
    if not 0 <= t < cloud.n_frames:
        raise ValueError(f"frame {t} outside [0, {cloud.n_frames})")
    mask = (cloud.seg[:, 0] <= t) & (t < cloud.seg[:, 1])
    idx = np.flatnonzero(mask)
    static = idx[cloud.is_static[idx]]
    dyn = idx[~cloud.is_static[idx]]
    groups: dict[Range, list[int]] = {}
    for i in dyn:
        groups.setdefault(cloud.segment_of(int(i)), []).append(int(i))
    return ActiveSet(t, idx, static, {k: np.array(v, dtype=np.int64) for k, v in sorted(groups.items())})


def _append_instance(cloud: PartitionedCloud, src: int) -> int:
    cloud.params = GaussianParams.concat([cloud.params, cloud.params.take([src])])
    cloud.z_g = np.vstack([cloud.z_g, cloud.z_g[src:src + 1]])
    cloud.seg = np.vstack([cloud.seg, cloud.seg[src:src + 1]])
    cloud.level = np.append(cloud.level, cloud.level[src])
    cloud.is_static = np.append(cloud.is_static, cloud.is_static[src])
    cloud.bake_t = np.append(cloud.bake_t, cloud.bake_t[src])
    cloud.last_score = np.append(cloud.last_score, cloud.last_score[src])
    cloud.histories.append(PositionHistory(cloud.history_capacity))
    return len(cloud) - 1


def _child_net(cloud: PartitionedCloud, parent: Range, child: Range) -> None:
    if child not in cloud.nets:
        cloud.nets[child] = cloud.nets[parent].replicate(cloud.next_net_id, child)
        cloud.next_net_id += 1


def split_instance(cloud: PartitionedCloud, i: int) -> PartitionEvent:
    """Split instance ``i`` at the midpoint of its range (rounded down to a frame)."""
    s, e = cloud.segment_of(i)
    if e - s < 2:
        raise ValueError(f"segment [{s}, {e}) is too short to split")
    mid = (s + e) // 2
    _child_net(cloud, (s, e), (s, mid))
    _child_net(cloud, (s, e), (mid, e))
    j = _append_instance(cloud, i)
    cloud.seg[i] = (s, mid)
    cloud.seg[j] = (mid, e)
    cloud.level[i] += 1
    cloud.level[j] = cloud.level[i]
    cloud.histories[i].clear()
    cloud.histories[j].clear()
    return PartitionEvent(int(cloud.params.lineage_id[i]), i, j, (s, e), (s, mid), (mid, e),
                          int(cloud.level[i]))


def check_and_split(cloud: PartitionedCloud, idx: np.ndarray, scores: ScoreBatch,
                    cfg: PartitionConfig) -> SplitReport:
    """Split every scored dynamic instance whose score exceeds its level's threshold.

    ``idx[k]`` is the instance that ``scores`` row ``k`` belongs to.
    """
    report = SplitReport()
    for k, i in enumerate(np.asarray(idx, dtype=np.int64)):
        i = int(i)
        if cloud.is_static[i]:
            continue
        cloud.last_score[i] = scores.S[k]
        lvl = int(cloud.level[i])
        if not scores.S[k] > cfg.tau(lvl):
            continue
        s, e = cloud.segment_of(i)
        if lvl >= cfg.max_level or e - s < 2:
            report.skipped_max_level += 1
            continue
        report.events.append(split_instance(cloud, i))
    if report.events:
        cloud.prune_nets()
    return report


def identify_static(cloud: PartitionedCloud, idx: np.ndarray, scores: ScoreBatch,
                    cfg: PartitionConfig, rng: np.random.Generator) -> list[int]:
    """Flag low-score instances static and bake their deformation at a random frame."""
    baked = []
    for k, i in enumerate(np.asarray(idx, dtype=np.int64)):
        i = int(i)
        if cloud.is_static[i]:
            continue
        cloud.last_score[i] = scores.S[k]
        if not scores.S[k] < cfg.tau_static:
            continue
        s, e = cloud.segment_of(i)
        t = int(rng.integers(s, e))
        net = cloud.nets[(s, e)]
        delta, _ = deform_at(cloud.z_g[i:i + 1], t, net)
        cloud.params = _assign_row(cloud.params, i, apply_delta(cloud.params.take([i]), delta))
        cloud.is_static[i] = True
        cloud.bake_t[i] = t
        baked.append(i)
    return baked


def _assign_row(params: GaussianParams, i: int, row: GaussianParams) -> GaussianParams:
    params.mu[i] = row.mu[0]
    params.rot[i] = row.rot[0]
    params.log_scale[i] = row.log_scale[0]
    params.opacity_logit[i] = row.opacity_logit[0]
    params.color[i] = row.color[0]
    return params


def lineage_coverage(cloud: PartitionedCloud) -> dict[int, list[Range]]:
    out: dict[int, list[Range]] = {}
    for i in range(len(cloud)):
        out.setdefault(int(cloud.params.lineage_id[i]), []).append(cloud.segment_of(i))
    return {k: sorted(v) for k, v in out.items()}
