"""Localized editing by blending a frozen field with a learnable copy.

A 3D semantic mask (share of the editable classes' semantic responses) weighs
a convex combination of the two fields — at the tri-plane feature level when
both fields are tri-plane-backed with shared decoders, at the output level
otherwise.  The edit loop optimizes only the learnable copy under a two-branch
distillation term, a masked photometric identity term, and a front-view
segmentation term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import distill, geometry
from .errors import ConfigError, InputError
from .field import (
    DTYPE,
    FD_STEP_FRACTION,
    CompositeField,
    DensityParams,
    SdfSamples,
    as_points,
    fd_gradient,
    sdf_to_semantic,
)
from .losses import identity_proxy, segmentation_loss
from .render import (
    Camera,
    default_palette,
    orbit_camera,
    render_mask,
    render_scene,
    save_image_png,
    save_mask_png,
    semantic_probs_with_background,
)
from .triplane import TriPlanePair, save_checkpoint

CANONICAL_EVAL_YAWS = (-30.0, -10.0, 10.0, 30.0)
SEM_MASK_TINY = 1e-300  # keeps the response ratio defined when all locals underflow


def semantic_3d_mask(field, points, edit_classes, params: DensityParams) -> Tensor:
    """Per-point blend weight: editable share of the semantic responses.

    m(x) = sum_{i in edit_classes} s_i(x) / sum_all s_i(x) from the field's
    local SDFs; empty edit_classes short-circuits to zeros (no-op edit).
    """
    pts = as_points(points)
    ids = sorted(set(int(c) for c in edit_classes))
    if not ids:
        return torch.zeros(pts.shape[0], dtype=DTYPE)
    s = sdf_to_semantic(field.eval_points(pts).d_local, params)
    if ids[0] < 0 or ids[-1] >= s.shape[1]:
        raise InputError(f"edit classes {ids} out of range for {s.shape[1]} classes")
    return s[:, ids].sum(dim=1) / s.sum(dim=1).clamp(min=SEM_MASK_TINY)


def _blend(base: Tensor, other: Tensor, m: Tensor) -> Tensor:
    """Convex combination that is bit-exact at m = 0, m = 1, and base == other."""
    return torch.where(m == 1.0, other, base + m * (other - base))


class FusedField:
    """Frozen + learnable fields blended by the 3D semantic mask.

    Evaluates like any other field (``eval_points`` / ``sdf_gradient``), so the
    standard renderer, losses, and mesh extraction apply unchanged.
    """

    def __init__(
        self,
        frozen,
        learnable,
        edit_classes,
        params: DensityParams,
        *,
        mask_source: str = "learnable",
        mask_override=None,
    ):
        if frozen.n_classes != learnable.n_classes:
            raise ConfigError("frozen and learnable fields disagree on class count")
        if abs(float(frozen.extent) - float(learnable.extent)) > 1e-12:
            raise ConfigError("frozen and learnable fields disagree on extent")
        if mask_source not in ("learnable", "max"):
            raise ConfigError(f"unknown mask_source {mask_source!r}")
        self.frozen = frozen
        self.learnable = learnable
        self.edit_classes = tuple(sorted(set(int(c) for c in edit_classes)))
        if self.edit_classes and not (0 <= self.edit_classes[0] and self.edit_classes[-1] < frozen.n_classes):
            raise ConfigError(f"edit classes {self.edit_classes} out of range")
        self.params = params
        self.mask_source = mask_source
        self.mask_override = mask_override
        both_planes = isinstance(frozen, TriPlanePair) and isinstance(learnable, TriPlanePair)
        self.feature_level = bool(
            both_planes
            and frozen.shape.features == learnable.shape.features
            and frozen.texture.features == learnable.texture.features
            and learnable.shape_decoder is frozen.shape_decoder
            and learnable.color_decoder is frozen.color_decoder
        )

    @property
    def extent(self) -> float:
        return self.frozen.extent

    @property
    def n_classes(self) -> int:
        return self.frozen.n_classes

    def blend_weights(self, points) -> Tensor:
        pts = as_points(points)
        if self.mask_override is not None:
            if callable(self.mask_override):
                return torch.as_tensor(self.mask_override(pts), dtype=DTYPE)
            return torch.full((pts.shape[0],), float(self.mask_override), dtype=DTYPE)
        if not self.edit_classes:
            return torch.zeros(pts.shape[0], dtype=DTYPE)
        m = semantic_3d_mask(self.learnable, pts, self.edit_classes, self.params)
        if self.mask_source == "max":
            m = torch.maximum(m, semantic_3d_mask(self.frozen, pts, self.edit_classes, self.params))
        return m

    def eval_points(self, points) -> SdfSamples:
        pts = as_points(points)
        m = self.blend_weights(pts)
        if self.feature_level:
            col = m.unsqueeze(-1)
            shape_feats = _blend(self.frozen.shape.sample(pts), self.learnable.shape.sample(pts), col)
            tex_feats = _blend(self.frozen.texture.sample(pts), self.learnable.texture.sample(pts), col)
            sdf = self.frozen.shape_decoder(shape_feats)
            color = torch.sigmoid(self.frozen.color_decoder(tex_feats)[:, :3])
            return SdfSamples(position=pts, d_g=sdf[:, 0], d_local=sdf[:, 1:], color=color)
        a = self.frozen.eval_points(pts)
        b = self.learnable.eval_points(pts)
        col = m.unsqueeze(-1)
        return SdfSamples(
            position=pts,
            d_g=_blend(a.d_g, b.d_g, m),
            d_local=_blend(a.d_local, b.d_local, col),
            color=_blend(a.color, b.color, col),
        )

    def sdf_gradient(self, points) -> Tensor:
        pts = as_points(points)
        h = FD_STEP_FRACTION * float(self.extent)
        return fd_gradient(lambda q: self.eval_points(q).d_g, pts, h)


def fuse(state: "EditState", points) -> SdfSamples:
    """Sample the state's fused field (functional form of eval_points)."""
    return state.fused_field.eval_points(points)


# --------------------------------------------------------------------------
# edit loop
# --------------------------------------------------------------------------


@dataclass
class EditWeights:
    """Editing-phase loss weights (reference recipe defaults)."""

    lambda_cdgt: float = 0.001
    lambda_id: float = 0.5
    lambda_seg: float = 1.0

    def to_dict(self):
        return {"lambda_cdgt": self.lambda_cdgt, "lambda_id": self.lambda_id, "lambda_seg": self.lambda_seg}


@dataclass
class EditState:
    """Everything one edit run owns; ``frozen`` parameters never change."""

    frozen: object
    learnable: object
    fused_field: FusedField
    edit_classes: tuple
    s_target: np.ndarray
    y: object
    front_camera: Camera
    i_origin: Tensor
    frozen_front_mask: np.ndarray
    edit_region: np.ndarray
    params: DensityParams
    palette: tuple
    codec: distill.LatentCodec
    schedule: distill.DiffusionSchedule
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    samples_per_ray: int
    camera_distance: float
    fov_y_deg: float
    yaw_range: tuple
    pitch_range: tuple
    update_cadence: int | None
    gradient_combination: bool
    symmetric_blend: bool
    shared_sample: bool
    w_fn: object
    condition_mask: np.ndarray
    train_camera: Camera
    step: int = 0


def infer_edit_classes(target_mask, frozen_mask, n_classes: int, threshold: float = 0.02) -> tuple:
    """Classes whose pixel count changes by more than ``threshold`` of the image."""
    target = np.asarray(target_mask)
    frozen = np.asarray(frozen_mask)
    if target.shape != frozen.shape:
        raise InputError("target and frozen masks must have the same shape")
    budget = threshold * target.size
    out = []
    for class_id in range(n_classes):
        label = class_id + 1
        if abs(int((target == label).sum()) - int((frozen == label).sum())) > budget:
            out.append(class_id)
    return tuple(out)


def _trainable_copy(field: CompositeField) -> CompositeField:
    copy = CompositeField.from_dict(field.to_dict())
    for p in copy.tensors():
        p.requires_grad_(True)
    return copy


def init_edit(
    frozen,
    s_target,
    params: DensityParams,
    *,
    y="edit",
    palette=None,
    edit_classes=None,
    edit_region=None,
    front_camera: Camera | None = None,
    samples_per_ray: int = 48,
    camera_distance: float = 3.2,
    fov_y_deg: float = 45.0,
    yaw_range: tuple = (-35.0, 35.0),
    pitch_range: tuple = (-15.0, 15.0),
    lr: float = 3e-3,
    seed: int = 0,
    codec: distill.LatentCodec | None = None,
    schedule: distill.DiffusionSchedule | None = None,
    update_cadence: int | None = 1,
    mask_source: str = "learnable",
    gradient_combination: bool = True,
    symmetric_blend: bool = False,
    shared_sample: bool = False,
    w_fn=None,
    infer_threshold: float = 0.02,
) -> EditState:
    """Build an edit run: clone the generator, cache front-view references.

    The learnable copy starts bit-identical to the frozen field; for tri-plane
    generators the decoders are shared and only plane cells are optimized, for
    analytic composites the primitive parameters are optimized.
    """
    if not isinstance(frozen, (TriPlanePair, CompositeField)):
        raise ConfigError(f"cannot edit fields of type {type(frozen).__name__}")
    s_target = np.asarray(s_target, dtype=np.int64)
    if s_target.ndim != 2:
        raise InputError("target mask must be a 2D label image")
    n = frozen.n_classes
    if s_target.max(initial=0) > n:
        raise InputError(f"target mask uses labels above {n}")
    palette = tuple(palette) if palette is not None else default_palette(n)
    if front_camera is None:
        front_camera = orbit_camera(
            0.0, 0.0, camera_distance, fov_y_deg=fov_y_deg,
            width=s_target.shape[1], height=s_target.shape[0],
        )
    if (front_camera.height, front_camera.width) != s_target.shape:
        raise ConfigError("target mask resolution must match the front camera")

    if isinstance(frozen, TriPlanePair):
        learnable = frozen.clone(share_decoders=True)
        for p in frozen.plane_parameters():
            p.requires_grad_(False)
        for dec in (frozen.shape_decoder, frozen.color_decoder):
            for p in dec.parameters():
                p.requires_grad_(False)
        opt_params = [p.requires_grad_(True) for p in learnable.plane_parameters()]
    elif isinstance(frozen, CompositeField):
        learnable = _trainable_copy(frozen)
        opt_params = learnable.parameters()
    else:
        raise ConfigError(f"cannot edit fields of type {type(frozen).__name__}")

    with torch.no_grad():
        front = render_scene(frozen, front_camera, params, samples_per_ray=samples_per_ray, with_normals=False)
    i_origin = front.image.detach().clone()
    frozen_front_mask = render_mask(front, palette)

    if edit_classes is None:
        edit_classes = infer_edit_classes(s_target, frozen_front_mask, n, infer_threshold)
    edit_classes = tuple(sorted(set(int(c) for c in edit_classes)))

    if edit_region is None:
        edit_labels = np.array([c + 1 for c in edit_classes], dtype=np.int64)
        edit_region = (
            (s_target != frozen_front_mask)
            | np.isin(s_target, edit_labels)
            | np.isin(frozen_front_mask, edit_labels)
        )
    edit_region = np.asarray(edit_region, dtype=bool)
    if edit_region.shape != s_target.shape:
        raise InputError("edit region must match the target mask shape")

    fused = FusedField(frozen, learnable, edit_classes, params, mask_source=mask_source)
    return EditState(
        frozen=frozen,
        learnable=learnable,
        fused_field=fused,
        edit_classes=edit_classes,
        s_target=s_target,
        y=y,
        front_camera=front_camera,
        i_origin=i_origin,
        frozen_front_mask=frozen_front_mask,
        edit_region=edit_region,
        params=params,
        palette=palette,
        codec=codec if codec is not None else distill.LatentCodec(),
        schedule=schedule if schedule is not None else distill.DiffusionSchedule(),
        optimizer=torch.optim.Adam(opt_params, lr=lr),
        rng=np.random.default_rng(seed),
        samples_per_ray=samples_per_ray,
        camera_distance=camera_distance,
        fov_y_deg=fov_y_deg,
        yaw_range=tuple(yaw_range),
        pitch_range=tuple(pitch_range),
        update_cadence=update_cadence,
        gradient_combination=gradient_combination,
        symmetric_blend=symmetric_blend,
        shared_sample=shared_sample,
        w_fn=w_fn,
        condition_mask=s_target.copy(),
        train_camera=front_camera,
    )


def edit_step(state: EditState, score_model, weights: EditWeights, rng=None) -> dict:
    """One optimization step on the learnable field; returns the loss report.

    Per step: sample a training camera, refresh the condition mask (unless the
    cadence disables it), distill on that view's color/normal renders, then add
    the front-view segmentation and identity terms.
    """
    rng = state.rng if rng is None else rng
    yaw = float(rng.uniform(*state.yaw_range))
    pitch = float(rng.uniform(*state.pitch_range))
    state.train_camera = orbit_camera(
        yaw, pitch, state.camera_distance, fov_y_deg=state.fov_y_deg,
        width=state.front_camera.width, height=state.front_camera.height,
    )
    if state.update_cadence and state.step % state.update_cadence == 0:
        distill.update_condition(state)

    report = {"step": state.step, "yaw": yaw, "pitch": pitch}
    total = torch.zeros((), dtype=DTYPE)

    if weights.lambda_cdgt > 0:
        train = render_scene(
            state.fused_field, state.train_camera, state.params,
            samples_per_ray=state.samples_per_ray, with_normals=state.gradient_combination,
        )
        if state.gradient_combination:
            res = distill.cdgt_grad(
                score_model, train.image.detach(), train.normal.detach(),
                state.condition_mask, state.y, rng, state.w_fn,
                codec=state.codec, schedule=state.schedule,
                shared_sample=state.shared_sample, symmetric_blend=state.symmetric_blend,
            )
            surrogate = (train.image * res.image_grad).sum() + (train.normal * res.normal_grad).sum()
            report["mu"] = res.mu
        else:
            lat = state.codec.encode(train.image.detach())
            res = distill.sds_grad(
                score_model, lat, state.y, state.condition_mask, rng, state.w_fn,
                schedule=state.schedule,
            )
            surrogate = (train.image * state.codec.adjoint(res.grad)).sum()
        total = total + weights.lambda_cdgt * surrogate
        report["cdgt"] = float(surrogate.detach())

    if weights.lambda_seg > 0 or weights.lambda_id > 0:
        front = render_scene(
            state.fused_field, state.front_camera, state.params,
            samples_per_ray=state.samples_per_ray, with_normals=False,
        )
        if weights.lambda_seg > 0:
            seg = segmentation_loss(semantic_probs_with_background(front), state.s_target)
            total = total + weights.lambda_seg * seg
            report["seg"] = float(seg.detach())
        if weights.lambda_id > 0:
            ident = identity_proxy(front.image, state.i_origin, state.edit_region)
            total = total + weights.lambda_id * ident
            report["identity"] = float(ident.detach())

    report["total"] = float(total.detach())
    if total.requires_grad:
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
    state.step += 1
    return report


def _save_learnable(state: EditState, path: Path) -> None:
    if isinstance(state.learnable, TriPlanePair):
        save_checkpoint(path.with_suffix(".ckpt"), state.learnable)
    else:
        from .field import save_scene

        save_scene(path.with_suffix(".json"), state.learnable, state.params)


def _render_views(state: EditState, out_dir: Path, tag: str, yaws=CANONICAL_EVAL_YAWS) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for yaw in yaws:
        cam = orbit_camera(
            yaw, 0.0, state.camera_distance, fov_y_deg=state.fov_y_deg,
            width=state.front_camera.width, height=state.front_camera.height,
        )
        with torch.no_grad():
            out = render_scene(state.fused_field, cam, state.params, samples_per_ray=state.samples_per_ray)
        stem = f"{tag}_yaw{yaw:+.0f}"
        save_image_png(out_dir / f"{stem}_image.png", out.image)
        save_image_png(out_dir / f"{stem}_normal.png", out.normal)
        save_mask_png(out_dir / f"{stem}_mask.png", render_mask(out, state.palette), state.palette)


def run_edit(
    state: EditState,
    score_model,
    weights: EditWeights,
    steps: int,
    *,
    out_dir=None,
    checkpoint_every: int = 200,
    log_every: int = 10,
) -> list[dict]:
    """Drive edit_step for a step budget with periodic checkpoints and a JSONL log."""
    out_path = Path(out_dir) if out_dir is not None else None
    log_lines = []
    reports = []
    for i in range(steps):
        report = edit_step(state, score_model, weights)
        reports.append(report)
        if i % log_every == 0 or i == steps - 1:
            log_lines.append(json.dumps(report, sort_keys=True))
        if out_path is not None and checkpoint_every and (i + 1) % checkpoint_every == 0:
            tag = f"step{i + 1:06d}"
            _save_learnable(state, out_path / f"checkpoint_{tag}")
            _render_views(state, out_path / "views", tag)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "edit_log.jsonl").write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
        _save_learnable(state, out_path / "checkpoint_final")
        _render_views(state, out_path / "views", "final")
    return reports


def photometric_locality(state: EditState, image: Tensor) -> dict:
    """Mean squared change inside/outside the edit region (outside = foreground only)."""
    delta = (image.detach() - state.i_origin).square().mean(dim=-1).numpy()
    foreground = state.frozen_front_mask > 0
    inside = state.edit_region
    outside = foreground & ~state.edit_region
    change_in = float(delta[inside].mean()) if inside.any() else 0.0
    change_out = float(delta[outside].mean()) if outside.any() else 0.0
    ratio = change_out / change_in if change_in > 0 else float("inf") if change_out > 0 else 0.0
    return {"photo_change_in": change_in, "photo_change_out": change_out, "locality_ratio": ratio}


def evaluate_edit(
    state: EditState,
    *,
    reference_field=None,
    eval_yaws=CANONICAL_EVAL_YAWS,
    mesh_resolution: int = 64,
    mesh_samples: int = 8000,
    samples_per_ray: int | None = None,
    seed: int = 0,
) -> dict:
    """Edit quality report: front mIoU, locality, cross-view mIoU, mesh drift.

    ``reference_field`` (the analytic ground truth of the edited scene, when
    one exists) enables the cross-view mask comparison at the canonical yaws.
    """
    spr = samples_per_ray if samples_per_ray is not None else state.samples_per_ray
    with torch.no_grad():
        front = render_scene(state.fused_field, state.front_camera, state.params,
                             samples_per_ray=spr, with_normals=False)
    front_mask = render_mask(front, state.palette)
    n_labels = state.fused_field.n_classes + 1
    metrics = {
        "steps": state.step,
        "edit_classes": list(state.edit_classes),
        "front_miou": geometry.miou(front_mask, state.s_target, n_labels),
        "identity": float(identity_proxy(front.image, state.i_origin, state.edit_region).detach()),
    }
    metrics.update(photometric_locality(state, front.image))

    if reference_field is not None:
        scores = []
        for yaw in eval_yaws:
            cam = orbit_camera(
                yaw, 0.0, state.camera_distance, fov_y_deg=state.fov_y_deg,
                width=state.front_camera.width, height=state.front_camera.height,
            )
            with torch.no_grad():
                ours = render_mask(render_scene(state.fused_field, cam, state.params,
                                                samples_per_ray=spr, with_normals=False), state.palette)
                ref = render_mask(render_scene(reference_field, cam, state.params,
                                               samples_per_ray=spr, with_normals=False), state.palette)
            scores.append(geometry.miou(ours, ref, n_labels))
        metrics["cross_view_miou"] = float(np.mean(scores))
        metrics["cross_view_miou_per_yaw"] = [float(s) for s in scores]

    if mesh_resolution:
        pre = geometry.extract_mesh(state.frozen, mesh_resolution)
        post = geometry.extract_mesh(state.fused_field, mesh_resolution)
        if not (pre.is_empty or post.is_empty):
            metrics["chamfer_pre_post"] = geometry.chamfer_l1(pre, post, mesh_samples, seed=seed)
            metrics["normal_consistency_pre_post"] = geometry.normal_consistency(pre, post, mesh_samples, seed=seed)
    return metrics
