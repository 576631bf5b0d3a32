"""Optimization loop: deform, render, compare, backpropagate, partition."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .core import GaussianParams
from .deformation import DeformNet, apply_delta, deform_at, deform_backward, net_from_arrays
from .losses import (BoundaryWindow, LossReport, boundary_partner, cross_frame_loss, l1_grad,
                     l1_loss, psnr, ssim, ssim_with_grad)
from .optim import Adam
from .partition import (ActiveSet, PartitionConfig, PartitionedCloud, active_set, check_and_split,
                        identify_static)
from .renderer import ParamGrads, render_gaussians, render_gaussians_backward, write_ppm
from .scenes import Scene, SceneSpec, gen_scene, gt_frame
from .scoring import PositionHistory, score_histories, write_score_csv

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["iteration", "t", "view_id", "l_main", "l_current", "l_gt", "l_cross", "psnr", "ssim"]


class NumericalFailure(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class LearningRates:
    position: float = 1.6e-3
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    embedding: float = 1e-3
    network: float = 1e-3


@dataclass
class TrainConfig:
    total_iterations: int = 4000
    lr: LearningRates = field(default_factory=LearningRates)
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    enable_partition: bool = True
    enable_static: bool = True
    use_current: bool = True
    use_gt: bool = True
    cross_weight: float = 1.0
    use_dssim: bool = False
    dssim_weight: float = 0.2
    d_gauss: int = 16
    d_coarse: int = 8
    d_fine: int = 8
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    n_coarse: int | None = None
    lr_final_ratio: float = 0.01  # exponential decay of every rate; 1 = constant
    lr_decay_start: float = 0.5   # fraction of the run before decay begins
    log_every: int = 10
    cutoffs: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_iterations < 1:
            raise ConfigError("total_iterations: must be >= 1")
        for f in fields(LearningRates):
            if getattr(self.lr, f.name) < 0:
                raise ConfigError(f"lr.{f.name}: must be non-negative")
        if not 0 < self.lr_final_ratio <= 1:
            raise ConfigError("lr_final_ratio: must be in (0, 1]")
        if not 0 <= self.lr_decay_start < 1:
            raise ConfigError("lr_decay_start: must be in [0, 1)")
        if self.log_every < 1:
            raise ConfigError("log_every: must be >= 1")

    @property
    def consistency(self) -> bool:
        return self.use_current or self.use_gt

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        """Strict parse: unknown keys raise ``ConfigError`` naming the key."""
        d = dict(d)
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"{k}: unknown config key")
        sub = {}
        for name, typ in (("lr", LearningRates), ("partition", PartitionConfig)):
            if name in d:
                inner = d.pop(name)
                if not isinstance(inner, dict):
                    raise ConfigError(f"{name}: expected an object")
                ok = {f.name for f in fields(typ)}
                for k in inner:
                    if k not in ok:
                        raise ConfigError(f"{name}.{k}: unknown config key")
                try:
                    sub[name] = typ(**inner)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{name}: {exc}") from exc
        try:
            return cls(**d, **sub)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def ablation_row(cls, name: str, base: TrainConfig | None = None) -> TrainConfig:
        """One rung of the progressive ablation ladder."""
        cfg = TrainConfig.from_dict(base.to_dict()) if base is not None else cls()
        ladder = {
            "Baseline": dict(enable_partition=False, enable_static=False, use_current=False,
                             use_gt=False),
            "+Max Dis": dict(enable_partition=True, enable_static=False, use_current=False,
                             use_gt=False, score_mode="max_displacement"),
            "+Var": dict(enable_partition=True, enable_static=False, use_current=False, use_gt=False),
            "+Static": dict(enable_partition=True, enable_static=True, use_current=False,
                            use_gt=False),
            "+L_current": dict(enable_partition=True, enable_static=True, use_current=True,
                               use_gt=False),
            "+L_gt": dict(enable_partition=True, enable_static=True, use_current=True, use_gt=True),
        }
        if name not in ladder:
            raise ConfigError(f"unknown ablation row {name!r}")
        opts = dict(ladder[name])
        cfg.partition.score_mode = opts.pop("score_mode", "harmonic")
        for k, v in opts.items():
            setattr(cfg, k, v)
        return cfg


ABLATION_ROWS = ["Baseline", "+Max Dis", "+Var", "+Static", "+L_current", "+L_gt"]


@dataclass
class Composite:
    """Active Gaussians materialized at one evaluation time."""

    params: GaussianParams
    rows: np.ndarray                         # instance index of each row
    groups: list[tuple[tuple[int, int], slice, np.ndarray, object]]
    n_deformed: int


class Trainer:
    def __init__(self, scene: Scene, cfg: TrainConfig, *, cloud: PartitionedCloud | None = None):
        self.scene = scene
        self.cfg = cfg
        init_ss, sample_ss, bake_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        init_rng = np.random.default_rng(init_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.bake_rng = np.random.default_rng(bake_ss)
        if cloud is None:
            params = scene.initial_params()
            n = len(params)
            z_g = init_rng.normal(0.0, 0.1, (n, cfg.d_gauss))
            net = DeformNet.create(scene.n_frames, init_rng, d_gauss=cfg.d_gauss, d_coarse=cfg.d_coarse,
                                   d_fine=cfg.d_fine, hidden=tuple(cfg.hidden), n_coarse=cfg.n_coarse)
            cloud = PartitionedCloud(params, z_g, net, scene.n_frames, cfg.partition.history_capacity)
        self.cloud = cloud
        self.adam = Adam(cfg.beta1, cfg.beta2, cfg.eps_opt)
        self.iteration = 0
        self.deform_calls = 0
        self.partner_deform_calls = 0
        self.deform_log: list[tuple[int, int, int]] = []   # (network_id, eval t, rows)
        self.calls_per_step: list[int] = []
        self.metric_rows: list[dict] = []
        self.score_rows: list[dict] = []
        self.events: list[dict] = []
        self.first_static_iteration: int | None = None
        self.static_fraction = 0.0

    # ------------------------------------------------------------------ forward
    def compose(self, active: ActiveSet, t_eval: int) -> Composite:
        cloud = self.cloud
        parts = [cloud.params.take(active.static)]
        rows = [active.static]
        groups = []
        start = len(active.static)
        n_def = 0
        for key, idx in active.dynamic.items():
            net = cloud.nets[key]
            delta, cache = deform_at(cloud.z_g[idx], t_eval, net)
            parts.append(apply_delta(cloud.params.take(idx), delta))
            rows.append(idx)
            groups.append((key, slice(start, start + idx.size), idx, cache))
            start += idx.size
            n_def += idx.size
            self.deform_log.append((net.network_id, t_eval, idx.size))
        return Composite(GaussianParams.concat(parts), np.concatenate(rows), groups, n_def)

    def render_at(self, t: int, view: int, *, members_from: int | None = None) -> np.ndarray:
        """Render frame ``t``; ``members_from`` selects the active set of another frame."""
        active = active_set(self.cloud, t if members_from is None else members_from)
        comp = self.compose(active, t)
        cam = self.scene.cameras[view]
        return render_gaussians(comp.params, cam, self.scene.spec.background,
                                cutoffs=self.cfg.cutoffs).image

    # ----------------------------------------------------------------- backward
    def _backprop(self, comp: Composite, pg: ParamGrads, acc: dict) -> None:
        r = comp.rows
        acc["mu"][r] += pg.mu
        acc["rot"][r] += pg.rot
        acc["log_scale"][r] += pg.log_scale
        acc["opacity_logit"][r] += pg.opacity_logit
        acc["color"][r] += pg.color
        packed = pg.as_delta_vector()
        for key, sl, idx, cache in comp.groups:
            net = self.cloud.nets[key]
            dz, grads = deform_backward(cache, net, packed[sl])
            acc["z_g"][idx] += dz
            net_acc = acc["nets"].setdefault(key, {})
            for name, g in grads.items():
                if name in net_acc:
                    net_acc[name] += g
                else:
                    net_acc[name] = g.copy()

    def _apply_updates(self, acc: dict) -> None:
        lr = self.cfg.lr
        p = self.cloud.params
        decay = self.decay_factor()
        groups = [("gauss.mu", p.mu, acc["mu"], lr.position * decay),
                  ("gauss.rot", p.rot, acc["rot"], lr.rotation * decay),
                  ("gauss.log_scale", p.log_scale, acc["log_scale"], lr.scale * decay),
                  ("gauss.opacity_logit", p.opacity_logit, acc["opacity_logit"], lr.opacity * decay),
                  ("gauss.color", p.color, acc["color"], lr.color * decay),
                  ("gauss.z_g", self.cloud.z_g, acc["z_g"], lr.embedding * decay)]
        for name, param, grad, rate in groups:
            self.adam.update(name, param, grad, rate, rows=True)
        for key, grads in acc["nets"].items():
            net = self.cloud.nets[key]
            params = net.parameters()
            for name, g in grads.items():
                rate = decay * (lr.embedding if name.startswith("temporal.") else lr.network)
                self.adam.update(f"net{net.network_id}.{name}", params[name], g, rate)

    def decay_factor(self) -> float:
        total = self.cfg.total_iterations
        start = int(round(self.cfg.lr_decay_start * total))
        if self.cfg.lr_final_ratio == 1.0 or self.iteration <= start or total - 1 <= start:
            return 1.0
        frac = (min(self.iteration, total - 1) - start) / (total - 1 - start)
        return float(self.cfg.lr_final_ratio ** frac)

    def _zero_acc(self) -> dict:
        n = len(self.cloud)
        return {"mu": np.zeros((n, 3)), "rot": np.zeros((n, 4)), "log_scale": np.zeros((n, 3)),
                "opacity_logit": np.zeros(n), "color": np.zeros((n, 3)),
                "z_g": np.zeros_like(self.cloud.z_g), "nets": {}}

    # --------------------------------------------------------------------- step
    def train_step(self, t: int, view: int) -> LossReport:
        cfg = self.cfg
        cam = self.scene.cameras[view]
        bg = self.scene.spec.background
        active = active_set(self.cloud, t)
        comp = self.compose(active, t)
        self.deform_calls += comp.n_deformed
        self.calls_per_step.append(comp.n_deformed)
        res = render_gaussians(comp.params, cam, bg, cutoffs=cfg.cutoffs)
        gt = gt_frame(self.scene, t, view)

        report = LossReport()
        if cfg.use_dssim:
            l1 = l1_loss(res.image, gt)
            s, gs = ssim_with_grad(res.image, gt)
            w = cfg.dssim_weight
            report.l_main = (1 - w) * l1 + w * (1.0 - s)
            d_img = (1 - w) * l1_grad(res.image, gt) - w * gs
        else:
            report.l_main = l1_loss(res.image, gt)
            d_img = l1_grad(res.image, gt)

        partner = None
        if cfg.consistency:
            tp = boundary_partner(t, BoundaryWindow(self.cloud.boundaries()))
            if tp is not None:
                comp_p = self.compose(active_set(self.cloud, tp), t)
                self.partner_deform_calls += comp_p.n_deformed
                res_p = render_gaussians(comp_p.params, cam, bg, cutoffs=cfg.cutoffs)
                terms = cross_frame_loss(res.image, res_p.image, gt, use_current=cfg.use_current,
                                         use_gt=cfg.use_gt)
                report.l_current, report.l_gt, report.l_cross = terms.l_current, terms.l_gt, terms.l_cross
                d_img = d_img + cfg.cross_weight * terms.d_current_render
                partner = (comp_p, res_p, cfg.cross_weight * terms.d_partner_render)
        report.total = report.l_main + cfg.cross_weight * report.l_cross

        if not np.isfinite(report.total):
            raise NumericalFailure(self._diagnose(t, view, report))

        acc = self._zero_acc()
        self._backprop(comp, render_gaussians_backward(res, comp.params, cam, d_img), acc)
        if partner is not None:
            comp_p, res_p, d_p = partner
            self._backprop(comp_p, render_gaussians_backward(res_p, comp_p.params, cam, d_p), acc)
        for name in ("mu", "rot", "log_scale", "opacity_logit", "color", "z_g"):
            if not np.all(np.isfinite(acc[name])):
                raise NumericalFailure(self._diagnose(t, view, report, group=name))
        self._apply_updates(acc)

        if self.iteration % cfg.partition.record_every == 0:
            for key, sl, idx, _ in comp.groups:
                mus = comp.params.mu[sl]
                for row, i in enumerate(idx):
                    self.cloud.histories[i].record(mus[row], self.iteration)

        if self.iteration % cfg.log_every == 0:
            self.metric_rows.append({
                "iteration": self.iteration, "t": t, "view_id": view,
                "l_main": report.l_main, "l_current": report.l_current, "l_gt": report.l_gt,
                "l_cross": report.l_cross, "psnr": psnr(res.image, gt),
                "ssim": ssim(res.image, gt) if min(gt.shape[:2]) >= 11 else float("nan"),
            })
        self.iteration += 1
        return report

    def _diagnose(self, t, view, report, group: str | None = None) -> str:
        p = self.cloud.params
        if group is None:
            for name in ("mu", "rot", "log_scale", "opacity_logit", "color"):
                if not np.all(np.isfinite(getattr(p, name))):
                    group = name
                    break
        return (f"non-finite loss at iteration {self.iteration}, t={t}, view={view}, "
                f"loss={report.total!r}, parameter group={group or 'unknown'}")

    # --------------------------------------------------------------- structure
    def score_and_partition(self) -> None:
        cfg = self.cfg
        it = self.iteration
        static_due = cfg.enable_static and it in cfg.partition.static_iterations(cfg.total_iterations)
        split_due = cfg.enable_partition and it in cfg.partition.check_iterations(cfg.total_iterations)
        if not (static_due or split_due):
            return
        cloud = self.cloud
        idx = cloud.eligible()
        if idx.size == 0:
            return
        scores = score_histories([cloud.histories[i] for i in idx],
                                 use_variance=cfg.partition.score_mode == "harmonic")
        for k, i in enumerate(idx):
            s, e = cloud.segment_of(i)
            self.score_rows.append({
                "iteration": it, "lineage_id": int(cloud.params.lineage_id[i]), "segment_start": s,
                "segment_end": e, "level": int(cloud.level[i]), "r": scores.r[k], "v": scores.v[k],
                "r_tilde": scores.r_tilde[k], "v_tilde": scores.v_tilde[k], "S": scores.S[k]})
        if static_due:
            baked = identify_static(cloud, idx, scores, cfg.partition, self.bake_rng)
            if self.first_static_iteration is None:
                self.first_static_iteration = it
            self.static_fraction = float(cloud.is_static.mean())
            self.events.extend({"iteration": it, "kind": "static", "instance": i} for i in baked)
        if split_due:
            n_before = len(cloud)
            nets_before = {k: n.network_id for k, n in cloud.nets.items()}
            report = check_and_split(cloud, idx, scores, cfg.partition)
            grown = len(cloud) - n_before
            for name in ("gauss.mu", "gauss.rot", "gauss.log_scale", "gauss.opacity_logit",
                         "gauss.color", "gauss.z_g"):
                self.adam.grow_rows(name, grown)
                touched = [ev.original for ev in report.events] + [ev.replica for ev in report.events]
                if touched:
                    self.adam.reset_rows(name, np.array(touched))
            for key, nid in nets_before.items():
                if key not in cloud.nets:
                    for name in [k for k in self.adam.m if k.startswith(f"net{nid}.")]:
                        self.adam.forget(name)
            for ev in report.events:
                self.events.append({"iteration": it, "kind": "split", "lineage_id": ev.lineage_id,
                                    "parent": list(ev.parent), "left": list(ev.left),
                                    "right": list(ev.right), "level": ev.level})

    # ---------------------------------------------------------------------- run
    def run(self, out_dir: str | Path | None = None) -> dict:
        cfg = self.cfg
        T = self.scene.n_frames
        train_views = self.scene.spec.train_views
        while self.iteration < cfg.total_iterations:
            self.score_and_partition()
            t = int(self.sample_rng.integers(T))
            view = int(train_views[self.sample_rng.integers(len(train_views))])
            self.train_step(t, view)
        summary = self.summary()
        if out_dir is not None:
            self.write_outputs(Path(out_dir), summary)
        return summary

    # --------------------------------------------------------------- evaluation
    def evaluate(self, view: int | None = None) -> dict:
        spec = self.scene.spec
        view = spec.heldout_view if view is None else view
        x0, y0, x1, y1 = spec.crop
        rows = []
        for t in range(self.scene.n_frames):
            img = self.render_at(t, view)
            gt = gt_frame(self.scene, t, view)
            ci, cg = img[y0:y1, x0:x1], gt[y0:y1, x0:x1]
            rows.append({
                "t": t, "psnr": psnr(img, gt), "ssim": ssim(img, gt),
                "crop_psnr": psnr(ci, cg),
                "crop_ssim": ssim(ci, cg) if min(ci.shape[:2]) >= 11 else float("nan"),
            })
        return {
            "per_frame": rows,
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "crop_psnr": float(np.mean([r["crop_psnr"] for r in rows])),
            "crop_ssim": _nanmean([r["crop_ssim"] for r in rows]),
        }

    def seam_metrics(self, view: int | None = None) -> dict[int, float]:
        """L1 between left- and right-segment renders of each boundary frame."""
        view = self.scene.spec.heldout_view if view is None else view
        out = {}
        for b in self.cloud.boundaries():
            left = self.render_at(b, view, members_from=b - 1)
            right = self.render_at(b, view, members_from=b)
            out[b] = l1_loss(left, right)
        return out

    def summary(self) -> dict:
        ev = self.evaluate()
        seams = self.seam_metrics()
        after = None
        if self.first_static_iteration is not None:
            after = float(np.mean(self.calls_per_step[self.first_static_iteration:] or [0]))
        static_its = self.cfg.partition.static_iterations(self.cfg.total_iterations)
        ref_it = static_its[0] if static_its else 0
        return {
            "psnr": ev["psnr"], "ssim": ev["ssim"], "crop_psnr": ev["crop_psnr"],
            "crop_ssim": ev["crop_ssim"],
            "deform_calls_total": int(self.deform_calls),
            "partner_deform_calls_total": int(self.partner_deform_calls),
            "deform_calls_per_step": float(np.mean(self.calls_per_step)) if self.calls_per_step else 0.0,
            "deform_calls_per_step_after_static_check": (
                after if after is not None else
                float(np.mean(self.calls_per_step[ref_it:] or [0]))),
            "static_fraction": self.static_fraction,
            "n_instances": len(self.cloud),
            "n_static": int(self.cloud.is_static.sum()),
            "n_networks": len(self.cloud.nets),
            "boundaries": self.cloud.boundaries(),
            "seams": {str(k): v for k, v in seams.items()},
            "scene_hash": self.scene.spec.digest(),
            "iterations": self.iteration,
        }

    # ------------------------------------------------------------------ outputs
    def write_outputs(self, out: Path, summary: dict) -> None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for row in self.metric_rows:
                w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        self.cloud.dump_json(out / "partition.json")
        write_score_csv(out / "scores.csv", self.score_rows)
        save_checkpoint(out / "checkpoint.bin", self)
        manifest = {"iteration": self.iteration, "rng_state": self.sample_rng.bit_generator.state,
                    "bake_rng_state": self.bake_rng.bit_generator.state,
                    "partition_tree": self.cloud.to_records(), "checkpoint": "checkpoint.bin"}
        (out / "checkpoint.json").write_text(json.dumps(manifest, indent=1) + "\n")
        frames = out / "eval"
        frames.mkdir(exist_ok=True)
        view = self.scene.spec.heldout_view
        for t in range(0, self.scene.n_frames, max(1, self.scene.n_frames // 8)):
            write_ppm(frames / f"frame_{t:04d}_view{view}.ppm", self.render_at(t, view))
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    return float(arr.mean()) if arr.size else float("nan")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    cloud = trainer.cloud
    p = cloud.params
    arrays = {"gauss.mu": p.mu, "gauss.rot": p.rot, "gauss.log_scale": p.log_scale,
              "gauss.opacity_logit": p.opacity_logit, "gauss.color": p.color,
              "gauss.lineage_id": p.lineage_id.astype(np.float64), "gauss.z_g": cloud.z_g,
              "gauss.seg": cloud.seg.astype(np.float64), "gauss.level": cloud.level.astype(np.float64),
              "gauss.is_static": cloud.is_static.astype(np.float64),
              "gauss.bake_t": cloud.bake_t.astype(np.float64)}
    nets = []
    for key, net in sorted(cloud.nets.items()):
        nets.append(net.header())
        for name, arr in net.parameters().items():
            arrays[f"net{net.network_id}.{name}"] = arr
    header = {"kind": "mapo_checkpoint", "iteration": trainer.iteration, "n_frames": cloud.n_frames,
              "history_capacity": cloud.history_capacity, "next_net_id": cloud.next_net_id,
              "nets": nets, "scene": trainer.scene.spec.to_dict(), "config": trainer.cfg.to_dict()}
    save_arrays(path, arrays, header)


def load_checkpoint(path: str | Path) -> Trainer:
    """Rebuild a trainer (scene, config, cloud) from a checkpoint file."""
    header, arrays = load_arrays(path)
    if header.get("kind") != "mapo_checkpoint":
        raise ValueError("not a training checkpoint")
    spec = SceneSpec.from_dict(header["scene"])
    cfg = TrainConfig.from_dict(header["config"])
    scene = gen_scene(spec)
    params = GaussianParams(arrays["gauss.mu"], arrays["gauss.rot"], arrays["gauss.log_scale"],
                            arrays["gauss.opacity_logit"], arrays["gauss.color"],
                            arrays["gauss.lineage_id"].astype(np.int64))
    nets = {}
    for h in header["nets"]:
        net = net_from_arrays(h, arrays, prefix=f"net{h['network_id']}.")
        nets[tuple(net.segment_range)] = net
    n_frames = int(header["n_frames"])
    root = nets.get((0, n_frames)) or next(iter(nets.values())).replicate(-1, (0, n_frames))
    cloud = PartitionedCloud(params, arrays["gauss.z_g"], root, n_frames, int(header["history_capacity"]))
    cloud.nets = nets
    cloud.seg = arrays["gauss.seg"].astype(np.int64)
    cloud.level = arrays["gauss.level"].astype(np.int64)
    cloud.is_static = arrays["gauss.is_static"].astype(bool)
    cloud.bake_t = arrays["gauss.bake_t"].astype(np.int64)
    cloud.next_net_id = int(header["next_net_id"])
    cloud.histories = [PositionHistory(cloud.history_capacity) for _ in range(len(params))]
    for i in range(len(params)):
        if cloud.segment_of(i) not in nets:
            raise ValueError(f"instance {i} references missing network for {cloud.segment_of(i)}")
    trainer = Trainer(scene, cfg, cloud=cloud)
    trainer.iteration = int(header["iteration"])
    return trainer
