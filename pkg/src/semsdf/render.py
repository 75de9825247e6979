"""Semantic volume rendering of SDF scenes.

Pinhole cameras cast one ray per pixel center; each ray is sampled with
stratified-uniform quadrature between its bounding-cube entry and exit, the
SDF is mapped to density and per-class semantic responses, and everything is
alpha-composited with the usual transmittance recursion

    alpha_j = 1 - exp(-sigma_j * delta_j)
    T_j     = prod_{k<j} (1 - alpha_k)
    w_j     = T_j * alpha_j

which conserves weight: sum_j w_j + T_final = 1.

Outputs per pixel: color, normalized semantic probabilities, an encoded
normal map (n*0.5+0.5 over a (0.5, 0.5, 1.0) background), expected depth,
and accumulated opacity.  ``render_mask`` reduces semantics to a label image
(0 = background, i+1 = class i).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor
from PIL import Image

from .errors import ConfigError, InputError
from .field import DTYPE, DensityParams, as_points, sdf_to_density, sdf_to_semantic, sdf_gradient

EPS_SEMANTIC_NORM = 1e-8
BACKGROUND_NORMAL = (0.5, 0.5, 1.0)

# label-image palette for the bundled face-like scenes:
# background, skin, ears, eyes, nose, mouth
CATMASK_PALETTE = (
    (0, 0, 0),
    (230, 184, 143),
    (255, 107, 87),
    (66, 135, 245),
    (255, 201, 71),
    (214, 64, 145),
)


def default_palette(n_classes: int):
    """A palette with one entry per label value (background + n classes)."""
    if n_classes + 1 <= len(CATMASK_PALETTE):
        return CATMASK_PALETTE[: n_classes + 1]
    rng = np.random.default_rng(12345)
    extra = [tuple(int(v) for v in rng.integers(40, 255, 3)) for _ in range(n_classes + 1 - len(CATMASK_PALETTE))]
    return CATMASK_PALETTE + tuple(extra)


# --------------------------------------------------------------------------
# cameras and rays
# --------------------------------------------------------------------------


@dataclass
class Camera:
    position: tuple
    look_at: tuple
    up: tuple = (0.0, 1.0, 0.0)
    fov_y_deg: float = 45.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not (0.0 < self.fov_y_deg < 180.0):
            raise ConfigError(f"fov_y_deg must be in (0, 180), got {self.fov_y_deg}")
        if self.width < 1 or self.height < 1:
            raise ConfigError("camera resolution must be positive")
        p = torch.as_tensor(self.position, dtype=DTYPE)
        t = torch.as_tensor(self.look_at, dtype=DTYPE)
        if float(torch.linalg.norm(t - p)) < 1e-12:
            raise ConfigError("camera position and look_at coincide")

    def basis(self):
        pos = torch.as_tensor(self.position, dtype=DTYPE)
        fwd = torch.as_tensor(self.look_at, dtype=DTYPE) - pos
        fwd = fwd / torch.linalg.norm(fwd)
        up_hint = torch.as_tensor(self.up, dtype=DTYPE)
        right = torch.linalg.cross(fwd, up_hint)
        nr = torch.linalg.norm(right)
        if float(nr) < 1e-12:
            raise ConfigError("camera up vector is parallel to the view direction")
        right = right / nr
        up = torch.linalg.cross(right, fwd)
        return pos, fwd, right, up


def orbit_camera(
    yaw_deg: float,
    pitch_deg: float,
    distance: float,
    *,
    fov_y_deg: float = 45.0,
    width: int = 64,
    height: int = 64,
    target=(0.0, 0.0, 0.0),
) -> Camera:
    """Camera on a sphere around ``target``; yaw 0 / pitch 0 looks down -z from +z."""
    yaw = math.radians(yaw_deg)
    pitch = math.radians(pitch_deg)
    tx, ty, tz = (float(c) for c in target)
    pos = (
        tx + distance * math.sin(yaw) * math.cos(pitch),
        ty + distance * math.sin(pitch),
        tz + distance * math.cos(yaw) * math.cos(pitch),
    )
    return Camera(pos, (tx, ty, tz), fov_y_deg=fov_y_deg, width=width, height=height)


@dataclass
class RayBatch:
    origins: Tensor  # (N, 3)
    directions: Tensor  # (N, 3), unit
    near: Tensor  # (N,)
    far: Tensor  # (N,)
    samples_per_ray: int

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ConfigError("samples_per_ray must be >= 2")
        norms = torch.linalg.norm(self.directions, dim=-1)
        if float((norms - 1.0).abs().max()) > 1e-9:
            raise InputError("ray directions must be unit length")
        if bool((self.far <= self.near).any()):
            raise InputError("each ray needs near < far")

    def __len__(self):
        return self.origins.shape[0]


def _cube_intersection(origins: Tensor, dirs: Tensor, extent: float):
    """Slab test against [-extent/2, extent/2]^3; returns (t0, t1, hit)."""
    half = extent / 2.0
    inv = torch.where(dirs.abs() > 1e-12, 1.0 / dirs, torch.full_like(dirs, 1e12))
    ta = (-half - origins) * inv
    tb = (half - origins) * inv
    t0 = torch.minimum(ta, tb).max(dim=-1).values
    t1 = torch.maximum(ta, tb).min(dim=-1).values
    hit = t1 > torch.clamp(t0, min=0.0)
    return t0, t1, hit


def camera_rays(camera: Camera, extent: float = 4.0, samples_per_ray: int = 96) -> RayBatch:
    """One ray per pixel center, row-major from the top-left pixel.

    Near/far come from the bounding-cube intersection; rays that miss the cube
    get the camera-to-origin fallback interval (they composite ~nothing for
    scenes contained in the cube).
    """
    pos, fwd, right, up = camera.basis()
    W, H = camera.width, camera.height
    tan_y = math.tan(math.radians(camera.fov_y_deg) / 2.0)
    tan_x = tan_y * (W / H)
    xs = (2.0 * (torch.arange(W, dtype=DTYPE) + 0.5) / W - 1.0) * tan_x
    ys = (1.0 - 2.0 * (torch.arange(H, dtype=DTYPE) + 0.5) / H) * tan_y
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    dirs = fwd + gx.reshape(-1, 1) * right + gy.reshape(-1, 1) * up
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = pos.expand_as(dirs).contiguous()

    t0, t1, hit = _cube_intersection(origins, dirs, extent)
    dist = float(torch.linalg.norm(pos))
    pad = math.sqrt(3.0) * extent / 2.0
    fb_near = max(dist - pad, 1e-3)
    fb_far = dist + pad
    near = torch.where(hit, torch.clamp(t0, min=1e-3), torch.full_like(t0, fb_near))
    far = torch.where(hit, t1, torch.full_like(t1, fb_far))
    far = torch.maximum(far, near + 1e-6)
    return RayBatch(origins=origins, directions=dirs, near=near, far=far, samples_per_ray=samples_per_ray)


def sample_along_rays(batch: RayBatch, jitter_rng: np.random.Generator | None = None):
    """Stratified-uniform sample distances; bin midpoints unless jittered.

    Returns (t, points, deltas): t (N,S), points (N,S,3), deltas (N,S).
    """
    N, S = len(batch), batch.samples_per_ray
    span = (batch.far - batch.near).unsqueeze(-1)
    if jitter_rng is None:
        offs = (torch.arange(S, dtype=DTYPE) + 0.5) / S
        t = batch.near.unsqueeze(-1) + span * offs
        deltas = span.expand(N, S) / S
    else:
        u = torch.as_tensor(jitter_rng.uniform(size=(N, S)), dtype=DTYPE)
        offs = (torch.arange(S, dtype=DTYPE) + u) / S
        t = batch.near.unsqueeze(-1) + span * offs
        deltas = torch.cat([t[:, 1:] - t[:, :-1], (batch.far.unsqueeze(-1) - t[:, -1:])], dim=-1)
        deltas = deltas.clamp(min=1e-12)
    points = batch.origins.unsqueeze(1) + t.unsqueeze(-1) * batch.directions.unsqueeze(1)
    return t, points, deltas


# --------------------------------------------------------------------------
# compositing
# --------------------------------------------------------------------------


def composite(values: Tensor, densities: Tensor, deltas: Tensor):
    """Alpha-composite per-sample payloads along each ray.

    values: (N, S, C) or (N, S); densities, deltas: (N, S).
    Returns (composited (N, C) or (N,), weights (N, S), transmittance (N,)).
    """
    if not torch.isfinite(densities).all():
        raise InputError("densities contain non-finite values")
    if bool((densities < 0).any()):
        raise InputError("densities must be non-negative")
    if bool((deltas <= 0).any()):
        raise InputError("deltas must be positive")
    alpha = 1.0 - torch.exp(-densities * deltas)
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    t_excl = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = t_excl * alpha
    squeeze = values.ndim == 2
    if squeeze:
        values = values.unsqueeze(-1)
    comp = (weights.unsqueeze(-1) * values).sum(dim=1)
    if squeeze:
        comp = comp.squeeze(-1)
    return comp, weights, trans[..., -1]


# --------------------------------------------------------------------------
# scene rendering
# --------------------------------------------------------------------------


@dataclass
class RenderOutput:
    image: Tensor  # (H, W, 3) in [0, 1]
    semantic: Tensor  # (H, W, n) normalized probabilities
    normal: Tensor  # (H, W, 3) encoded in [0, 1]
    depth: Tensor  # (H, W)
    accumulation: Tensor  # (H, W)

    @property
    def n_classes(self) -> int:
        return self.semantic.shape[-1]


def render_rays(
    field,
    batch: RayBatch,
    params: DensityParams,
    *,
    with_normals: bool = True,
    normal_weight_threshold: float = 1e-4,
    jitter_rng: np.random.Generator | None = None,
    eps_norm: float = EPS_SEMANTIC_NORM,
) -> dict:
    """Render a ray batch; returns per-ray color/semantic/normal/depth/acc tensors."""
    N, S = len(batch), batch.samples_per_ray
    t, points, deltas = sample_along_rays(batch, jitter_rng)
    flat = points.reshape(-1, 3)
    samples = field.eval_points(flat)
    sigma = sdf_to_density(samples.d_g, params).reshape(N, S)
    sem_raw = sdf_to_semantic(samples.d_local, params).reshape(N, S, -1)
    n_cls = sem_raw.shape[-1]
    color = samples.color.reshape(N, S, 3)

    payload = torch.cat([color, sem_raw, t.unsqueeze(-1)], dim=-1)
    comp, weights, t_final = composite(payload, sigma, deltas)
    out = {
        "color": comp[:, :3],
        "depth": comp[:, 3 + n_cls],
        "acc": 1.0 - t_final,
        "weights": weights,
    }
    sem_comp = comp[:, 3 : 3 + n_cls]
    out["semantic"] = sem_comp / (sem_comp.sum(dim=-1, keepdim=True) + eps_norm)

    if with_normals:
        # evaluate gradients only where the (detached) weight can matter
        wdet = weights.detach().reshape(-1)
        sel = (wdet > normal_weight_threshold).nonzero(as_tuple=True)[0]
        grads_flat = torch.zeros(N * S, 3, dtype=DTYPE)
        if sel.numel():
            g = sdf_gradient(field, flat[sel])
            g = -g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp(min=1e-12)
            grads_flat = grads_flat.index_put((sel,), g)
        comp_n = (weights.unsqueeze(-1) * grads_flat.reshape(N, S, 3)).sum(dim=1)
        nrm = torch.linalg.norm(comp_n, dim=-1, keepdim=True)
        unit = comp_n / nrm.clamp(min=1e-12)
        unit = torch.where(nrm > 1e-12, unit, torch.zeros_like(unit))
        enc = unit * 0.5 + 0.5
        bg = torch.tensor(BACKGROUND_NORMAL, dtype=DTYPE)
        acc = out["acc"].unsqueeze(-1)
        out["normal"] = acc * enc + (1.0 - acc) * bg
    return out


def render_scene(
    field,
    camera: Camera,
    params: DensityParams,
    *,
    samples_per_ray: int = 96,
    with_normals: bool = True,
    normal_weight_threshold: float = 1e-4,
    jitter_rng: np.random.Generator | None = None,
    chunk: int = 16384,
    extent: float | None = None,
) -> RenderOutput:
    """Render a full camera view of any field object."""
    ext = float(extent if extent is not None else getattr(field, "extent", 4.0))
    batch = camera_rays(camera, extent=ext, samples_per_ray=samples_per_ray)
    keys = ["color", "semantic", "depth", "acc"] + (["normal"] if with_normals else [])
    parts = {k: [] for k in keys}
    for start in range(0, len(batch), chunk):
        sub = RayBatch(
            origins=batch.origins[start : start + chunk],
            directions=batch.directions[start : start + chunk],
            near=batch.near[start : start + chunk],
            far=batch.far[start : start + chunk],
            samples_per_ray=batch.samples_per_ray,
        )
        res = render_rays(
            field,
            sub,
            params,
            with_normals=with_normals,
            normal_weight_threshold=normal_weight_threshold,
            jitter_rng=jitter_rng,
        )
        for k in keys:
            parts[k].append(res[k])
    H, W = camera.height, camera.width
    cat = {k: torch.cat(v, dim=0) for k, v in parts.items()}
    n_cls = cat["semantic"].shape[-1]
    return RenderOutput(
        image=cat["color"].reshape(H, W, 3).clamp(0.0, 1.0),
        semantic=cat["semantic"].reshape(H, W, n_cls),
        normal=(cat["normal"].reshape(H, W, 3).clamp(0.0, 1.0) if with_normals
                else torch.tensor(BACKGROUND_NORMAL, dtype=DTYPE).expand(H, W, 3).clone()),
        depth=cat["depth"].reshape(H, W),
        accumulation=cat["acc"].reshape(H, W),
    )


def render_mask(output: RenderOutput, palette=None) -> np.ndarray:
    """Label image from a render: argmax class + 1, or 0 where acc < 0.5."""
    n = output.n_classes
    if palette is not None and len(palette) < n + 1:
        raise ConfigError(f"palette needs >= {n + 1} entries, got {len(palette)}")
    arg = output.semantic.detach().argmax(dim=-1).numpy()
    fg = output.accumulation.detach().numpy() >= 0.5
    return np.where(fg, arg + 1, 0).astype(np.uint8)


def semantic_probs_with_background(output: RenderOutput) -> Tensor:
    """(H, W, n+1) probabilities: channel 0 = 1-acc, channel i+1 = acc*p_i."""
    acc = output.accumulation.unsqueeze(-1)
    return torch.cat([1.0 - acc, acc * output.semantic], dim=-1)


def labels_to_color(labels: np.ndarray, palette) -> np.ndarray:
    """Map a label image through a palette to a float color image in [0, 1]."""
    pal = np.asarray(palette, dtype=np.float64) / 255.0
    if labels.max(initial=0) >= len(pal):
        raise ConfigError("label image contains values outside the palette")
    return pal[labels]


# --------------------------------------------------------------------------
# image files
# --------------------------------------------------------------------------


def to_uint8(img: Tensor | np.ndarray) -> np.ndarray:
    arr = img.detach().numpy() if isinstance(img, Tensor) else np.asarray(img)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_image_png(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(str(path), format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image_ppm(path, img) -> None:
    arr = to_uint8(img)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def save_mask_png(path, labels: np.ndarray, palette) -> None:
    """Paletted (mode P) PNG of a label image."""
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.max(initial=0) >= len(palette):
        raise ConfigError("label image contains values outside the palette")
    im = Image.fromarray(labels, mode="P")
    flat = []
    for rgb in palette:
        flat.extend(int(v) for v in rgb)
    flat.extend([0] * (768 - len(flat)))
    im.putpalette(flat)
    im.save(path if hasattr(path, "write") else str(path), format="PNG")


def load_mask_png(path_or_file) -> np.ndarray:
    with Image.open(path_or_file) as im:
        if im.mode != "P":
            raise ConfigError("mask PNG must be paletted (mode P)")
        return np.asarray(im, dtype=np.int64)


def save_depth_raw(path, depth) -> None:
    """Raw little-endian float32, row-major, with a JSON sidecar for the dims."""
    arr = depth.detach().numpy() if isinstance(depth, Tensor) else np.asarray(depth)
    arr = arr.astype("<f4")
    Path(path).write_bytes(arr.tobytes())
    meta = {"width": int(arr.shape[1]), "height": int(arr.shape[0]), "dtype": "<f4", "order": "row-major"}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_depth_raw(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return arr.reshape(meta["height"], meta["width"]).astype(np.float64)
