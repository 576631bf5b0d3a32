"""Command-line entry point: ``mapo-lab <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or corrupt input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("mapo_lab")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("MAPO_LAB_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


class _OutputDir:
    """Stage outputs in a sibling temp dir and move into place on success."""

    def __init__(self, target: str | Path, force: bool):
        self.target = Path(target)
        if self.target.exists() and not force:
            raise CliError(EXIT_IO, f"output directory {self.target} exists (use --force to overwrite)")
        self.force = force
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.staging = Path(tempfile.mkdtemp(prefix=f".{self.target.name}-", dir=self.target.parent))

    def commit(self) -> None:
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.staging, self.target)

    def abort(self) -> None:
        shutil.rmtree(self.staging, ignore_errors=True)


def _read_json(path: str | Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{what} {path} is not valid JSON: {exc}") from exc


def _load_scene(path: str | Path):
    from .scenes import SceneSpec, gen_scene

    data = _read_json(path, "scene file")
    try:
        return gen_scene(SceneSpec.from_dict(data))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad scene file {path}: {exc}") from exc


def _load_config(path: str | None, seed: int | None):
    from .trainer import ConfigError, TrainConfig

    data = _read_json(path, "config file") if path else {}
    try:
        cfg = TrainConfig.from_dict(data)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"bad config: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    return cfg


def _run_id(*parts) -> str:
    h = hashlib.sha1()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:12]


def _clean(obj):
    """Replace NaN with None so the JSON stays standard."""
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def cmd_train(args) -> int:
    from .trainer import NumericalFailure, Trainer

    scene = _load_scene(args.scene)
    cfg = _load_config(args.config, args.seed)
    if args.no_partition:
        cfg.enable_partition = False
    if args.no_static:
        cfg.enable_static = False
    if args.no_consistency:
        cfg.use_current = cfg.use_gt = False
    out = _OutputDir(args.out, args.force)
    timings = {}
    try:
        t0 = time.perf_counter()
        trainer = Trainer(scene, cfg)
        timings["setup"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        try:
            summary = trainer.run()
        except NumericalFailure as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from exc
        timings["train_and_eval"] = time.perf_counter() - t0
        summary = _clean(summary)
        t0 = time.perf_counter()
        trainer.write_outputs(out.staging, summary)
        timings["write"] = time.perf_counter() - t0
        manifest = {
            "command": "train", "config": args.config, "scene": args.scene, "seed": cfg.seed,
            "output_dir": str(out.target), "run_id": _run_id(cfg.to_dict(), scene.spec.to_dict()),
            "timings_s": timings,
        }
        (out.staging / "run_manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
        out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps({k: summary[k] for k in ("psnr", "ssim", "crop_psnr", "deform_calls_total")}))
    return EXIT_OK


def cmd_toy(args) -> int:
    from .toy import MODES, ToyCurveSpec, toy_fit

    mode = {"consistency": "consistency", "single": "single", "partitioned": "partitioned"}.get(args.mode)
    if mode is None:
        raise CliError(EXIT_CONFIG, f"unknown mode {args.mode!r}; expected one of {MODES}")
    spec = ToyCurveSpec(kinked=not args.smooth)
    res = toy_fit(spec, mode, args.iters, seed=args.seed)
    out = _OutputDir(args.out, args.force)
    try:
        with open(out.staging / "trajectory.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["t", "target_x", "target_y", "target_z"]
            for m in range(len(res.predictions)):
                header += [f"model{m}_x", f"model{m}_y", f"model{m}_z"]
            w.writerow(header)
            for k, t in enumerate(res.t_eval):
                row = [repr(float(t))] + [repr(float(v)) for v in res.target[k]]
                for pred in res.predictions:
                    row += [repr(float(v)) for v in pred[k]]
                w.writerow(row)
        result = {"mode": mode, "iterations": args.iters, "seed": args.seed, "mse": res.mse,
                  "boundary_gap": res.boundary_gap}
        (out.staging / "result.json").write_text(json.dumps(result, indent=1) + "\n")
        out.commit()
    except BaseException:
        out.abort()
        raise
    print(json.dumps(result))
    return EXIT_OK


ABLATION_COLUMNS = ["row", "psnr", "ssim", "crop_psnr", "crop_ssim", "deform_calls_per_step",
                    "deform_calls_per_step_after_static_check", "static_fraction", "n_instances",
                    "n_networks", "mean_seam", "scene_hash"]


def run_ablation(scene, base_cfg, progress=None) -> list[dict]:
    from .trainer import ABLATION_ROWS, TrainConfig, Trainer

    rows = []
    for name in ABLATION_ROWS:
        cfg = TrainConfig.ablation_row(name, base_cfg)
        trainer = Trainer(scene, cfg)
        summary = _clean(trainer.run())
        seams = summary["seams"]
        rows.append({"row": name, **summary,
                     "mean_seam": (sum(seams.values()) / len(seams)) if seams else None})
        if progress:
            progress(name, summary)
    return rows


def cmd_ablate(args) -> int:
    from .trainer import NumericalFailure

    scene = _load_scene(args.scene)
    cfg = _load_config(args.config, args.seed)
    if args.iters is not None:
        cfg.total_iterations = args.iters
    out = _OutputDir(args.out, args.force)
    try:
        try:
            rows = run_ablation(scene, cfg, progress=lambda n, s: log.info("%s: psnr %.3f crop %.3f",
                                                                          n, s["psnr"], s["crop_psnr"]))
        except NumericalFailure as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from exc
        with open(out.staging / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow(r)
        (out.staging / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
        out.commit()
    except BaseException:
        out.abort()
        raise
    for r in rows:
        print(f"{r['row']:<12} psnr={r['psnr']:.3f} crop_psnr={r['crop_psnr']:.3f} "
              f"calls/step={r['deform_calls_per_step_after_static_check']:.2f}")
    return EXIT_OK


def _load_ckpt(path):
    from .checkpoint import CorruptCheckpointError
    from .trainer import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"checkpoint not found: {path}") from exc
    except (CorruptCheckpointError, KeyError, ValueError, TypeError) as exc:
        raise CliError(EXIT_IO, f"corrupt checkpoint {path}: {exc}") from exc


def cmd_render(args) -> int:
    from .renderer import write_ppm

    trainer = _load_ckpt(args.checkpoint)
    if not 0 <= args.frame < trainer.scene.n_frames:
        raise CliError(EXIT_CONFIG, f"frame {args.frame} outside [0, {trainer.scene.n_frames})")
    view = trainer.scene.spec.heldout_view if args.view is None else args.view
    if not 0 <= view < len(trainer.scene.cameras):
        raise CliError(EXIT_CONFIG, f"view {view} does not exist")
    trainer.deform_log.clear()
    img = trainer.render_at(args.frame, view)
    write_ppm(args.out, img)
    if args.call_log:
        calls = [{"network_id": nid, "t": t, "rows": n} for nid, t, n in trainer.deform_log]
        Path(args.call_log).write_text(json.dumps(calls, indent=1) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Trainer

    trained = _load_ckpt(args.checkpoint)
    scene = _load_scene(args.scene) if args.scene else trained.scene
    evaluator = Trainer(scene, trained.cfg, cloud=trained.cloud)
    ev = evaluator.evaluate()
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "psnr", "ssim", "crop_psnr", "crop_ssim"])
        for r in ev["per_frame"]:
            w.writerow([r["t"]] + [repr(float(r[k])) for k in ("psnr", "ssim", "crop_psnr", "crop_ssim")])
    print(json.dumps(_clean({k: ev[k] for k in ("psnr", "ssim", "crop_psnr", "crop_ssim")})))
    return EXIT_OK


def cmd_make_scene(args) -> int:
    from .scenes import reference_scene_spec

    spec = reference_scene_spec(n_frames=args.frames)
    if Path(args.out).exists() and not args.force:
        raise CliError(EXIT_IO, f"{args.out} exists (use --force to overwrite)")
    spec.save(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapo-lab", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (overrides MAPO_LAB_THREADS); 1 is fully deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-consistency", action="store_true")
    t.add_argument("--no-static", action="store_true")
    t.add_argument("--no-partition", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    y = sub.add_parser("toy", help="toy curve fitting experiment")
    y.add_argument("--mode", required=True)
    y.add_argument("--iters", type=int, default=2000)
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--smooth", action="store_true", help="fit the curve without the jump")
    y.add_argument("--force", action="store_true")
    y.set_defaults(func=cmd_toy)

    a = sub.add_parser("ablate", help="run the six-row component ablation")
    a.add_argument("--scene", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--view", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--call-log", help="write the deformation calls made to this JSON file")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="per-frame PSNR/SSIM on the held-out view")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("make-scene", help="write the reference synthetic scene as JSON")
    m.add_argument("--out", required=True)
    m.add_argument("--frames", type=int, default=120)
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_make_scene)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
