"""Command-line entry point: render | fit | edit | metrics.

Every command reads a strict JSON config, honors --seed/--out/--ablate
overrides, writes a resolved-config copy next to its outputs, and is
deterministic under a fixed seed.  Exit codes: 0 success, 2 usage/config
errors, 3 numerical failure, 4 undefined metric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import fusion, geometry
from .config import JOB_TYPES, load_job, write_resolved
from .distill import DiffusionSchedule, GaussianOracleScoreModel, LatentCodec, mask_color_mean, weight_sigma_sq
from .errors import ConfigError, InputError, MetricUndefined, NumericsError
from .field import DensityParams
from .fit import run_fit
from .render import (
    CATMASK_PALETTE,
    default_palette,
    load_mask_png,
    orbit_camera,
    render_mask,
    render_scene,
    save_depth_raw,
    save_image_png,
    save_image_ppm,
    save_mask_png,
)
from .scenes import resolve_scene
from .triplane import is_checkpoint, load_checkpoint

WORKERS_ENV = "SEMSDF_WORKERS"

METRICS_SCHEMA = {
    "type": "object",
    "required": ["chamfer_l1", "normal_consistency", "miou"],
    "properties": {
        "chamfer_l1": {"type": "number", "minimum": 0},
        "normal_consistency": {"type": "number", "minimum": 0, "maximum": 1},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "inputs": {"type": "object"},
    },
    "additionalProperties": True,
}


def setup_workers() -> int:
    """Thread count: SEMSDF_WORKERS env override, else all available cores."""
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        workers = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    workers = max(1, workers)
    torch.set_num_threads(workers)
    return workers


def load_field(spec: str, alpha: float | None):
    """Scene spec or tri-plane checkpoint -> (field, density params)."""
    path = Path(spec)
    if path.exists() and is_checkpoint(path):
        field = load_checkpoint(path)
        params = DensityParams(alpha=alpha) if alpha is not None else DensityParams()
        return field, params
    field, params = resolve_scene(spec)
    if alpha is not None:
        params = DensityParams(alpha=alpha)
    return field, params


def palette_for(n_classes: int):
    return CATMASK_PALETTE if n_classes + 1 <= len(CATMASK_PALETTE) else default_palette(n_classes)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_render(job, out: Path) -> None:
    field, params = load_field(job.scene, job.alpha)
    palette = palette_for(field.n_classes)
    write_resolved(job, out, "render")
    for i, spec in enumerate(job.cameras):
        cam = orbit_camera(
            spec.yaw_deg, spec.pitch_deg, spec.distance, fov_y_deg=spec.fov_y_deg,
            width=job.resolution, height=job.resolution,
        )
        with torch.no_grad():
            res = render_scene(field, cam, params, samples_per_ray=job.samples_per_ray,
                               with_normals=job.with_normals)
        stem = f"view{i:02d}"
        save_image_png(out / f"{stem}_image.png", res.image)
        save_mask_png(out / f"{stem}_mask.png", render_mask(res, palette), palette)
        if job.with_normals:
            save_image_png(out / f"{stem}_normal.png", res.normal)
        if job.write_depth:
            save_depth_raw(out / f"{stem}_depth.raw", res.depth)
        if job.write_ppm:
            save_image_ppm(out / f"{stem}_image.ppm", res.image)
    if job.mesh_resolution:
        geometry.save_obj(out / "scene_mesh.obj", geometry.extract_mesh(field, job.mesh_resolution))
    print(f"render: wrote {len(job.cameras)} view(s) to {out}")


def cmd_fit(job, out: Path) -> None:
    write_resolved(job, out, "fit")
    result = run_fit(job, out)
    print(f"fit: {job.steps} steps, front mIoU {result.summary.get('front_miou', float('nan')):.4f}, "
          f"checkpoint {result.summary['checkpoint']}")


def cmd_edit(job, out: Path) -> None:
    frozen, params = load_field(job.checkpoint, job.alpha)
    palette = palette_for(frozen.n_classes)
    reference_field = None
    if job.target_mask:
        s_target = load_mask_png(job.target_mask)
    else:
        reference_field, _ = resolve_scene(job.target_scene)
        if reference_field.n_classes != frozen.n_classes:
            raise ConfigError("target scene and frozen generator disagree on class count")
        cam = orbit_camera(0.0, 0.0, job.camera_distance, fov_y_deg=job.fov_y_deg,
                           width=job.resolution, height=job.resolution)
        with torch.no_grad():
            ref_out = render_scene(reference_field, cam, params,
                                   samples_per_ray=job.samples_per_ray, with_normals=False)
        s_target = render_mask(ref_out, palette)
        save_mask_png(out / "target_mask.png", s_target, palette)

    update_cadence = None if job.ablate == "no-condition-update" else job.update_cadence
    state = fusion.init_edit(
        frozen,
        s_target,
        params,
        y=job.y,
        palette=palette,
        edit_classes=job.edit_classes,
        samples_per_ray=job.samples_per_ray,
        camera_distance=job.camera_distance,
        fov_y_deg=job.fov_y_deg,
        yaw_range=tuple(job.yaw_range),
        pitch_range=tuple(job.pitch_range),
        lr=job.lr,
        seed=job.seed,
        codec=LatentCodec(job.latent_pool),
        schedule=DiffusionSchedule(),
        update_cadence=update_cadence,
        mask_source=job.mask_source,
        gradient_combination=job.ablate != "no-gradient-combination",
        symmetric_blend=job.symmetric_blend,
        shared_sample=job.shared_sample,
        w_fn=weight_sigma_sq if job.weighting == "sigma_sq" else None,
    )
    model = GaussianOracleScoreModel(
        state.schedule, {job.y: mask_color_mean(state.codec, palette)}, job.oracle_scale
    )
    write_resolved(job, out, "edit")
    fusion.run_edit(state, model, job.weights, job.steps, out_dir=out,
                    checkpoint_every=job.checkpoint_every, log_every=job.log_every)
    metrics = fusion.evaluate_edit(
        state,
        reference_field=reference_field,
        mesh_resolution=job.eval_mesh_resolution,
        mesh_samples=job.eval_mesh_samples,
        seed=job.seed,
    )
    _write_json(out / "edit_metrics.json", metrics)
    print(f"edit: {job.steps} steps, front mIoU {metrics['front_miou']:.4f}, "
          f"locality ratio {metrics['locality_ratio']:.4f}")


def _metric_mesh(field, which: str, classes, grid_resolution: int):
    if which == "global":
        return geometry.extract_mesh(field, grid_resolution)
    ids = classes if classes else list(range(field.n_classes))
    return geometry.union_mesh(
        geometry.extract_mesh(field, grid_resolution, which=c) for c in ids
    )


def cmd_metrics(job, out: Path) -> None:
    field_a, params = load_field(job.scene_a, job.alpha)
    field_b, params_b = load_field(job.scene_b, job.alpha)
    if field_a.n_classes != field_b.n_classes:
        raise ConfigError("metrics inputs disagree on class count")
    mesh_a = _metric_mesh(field_a, job.which_a, job.classes, job.grid_resolution)
    mesh_b = _metric_mesh(field_b, job.which_b, job.classes, job.grid_resolution)
    if mesh_a.is_empty or mesh_b.is_empty:
        raise MetricUndefined("an input produced an empty mesh")
    cam = orbit_camera(
        job.camera.yaw_deg, job.camera.pitch_deg, job.camera.distance,
        fov_y_deg=job.camera.fov_y_deg, width=job.resolution, height=job.resolution,
    )
    palette = palette_for(field_a.n_classes)
    with torch.no_grad():
        mask_a = render_mask(render_scene(field_a, cam, params, samples_per_ray=job.samples_per_ray,
                                          with_normals=False), palette)
        mask_b = render_mask(render_scene(field_b, cam, params_b, samples_per_ray=job.samples_per_ray,
                                          with_normals=False), palette)
    metrics = {
        "chamfer_l1": geometry.chamfer_l1(mesh_a, mesh_b, job.num_samples, seed=job.seed),
        "normal_consistency": geometry.normal_consistency(mesh_a, mesh_b, job.num_samples, seed=job.seed),
        "miou": geometry.miou(mask_a, mask_b, field_a.n_classes + 1),
        "inputs": {"scene_a": job.scene_a, "scene_b": job.scene_b,
                   "which_a": job.which_a, "which_b": job.which_b},
    }
    write_resolved(job, out, "metrics")
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))


COMMANDS = {"render": cmd_render, "fit": cmd_fit, "edit": cmd_edit, "metrics": cmd_metrics}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semsdf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in JOB_TYPES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="job config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--ablate", default=None, help="named ablation arm")
        if name == "render":
            p.add_argument("--resolution", type=int, default=None)
            p.add_argument("--samples", type=int, default=None)
        if name in ("fit", "edit"):
            p.add_argument("--steps", type=int, default=None)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        setup_workers()
        job = load_job(args.command, args.config)
        if args.seed is not None:
            job.seed = args.seed
        if args.out is not None:
            job.out_dir = args.out
        if args.ablate is not None:
            if not hasattr(job, "ablate"):
                raise ConfigError(f"{args.command} does not support --ablate")
            job = dataclasses.replace(job, ablate=args.ablate)
        if getattr(args, "resolution", None) is not None:
            job.resolution = args.resolution
        if getattr(args, "samples", None) is not None:
            job.samples_per_ray = args.samples
        if getattr(args, "steps", None) is not None:
            job.steps = args.steps
        torch.manual_seed(job.seed)
        out = Path(job.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](job, out)
        return 0
    except (ConfigError, InputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except MetricUndefined as e:
        print(f"metric undefined: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
