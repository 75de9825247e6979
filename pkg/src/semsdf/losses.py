"""Training losses for composite SDF generators.

Consistency terms tie the global SDF to the locals (value-level and
density-level); eikonal / minimal-surface / density-smoothness regularize the
geometry; segmentation cross-entropy and a masked photometric identity proxy
supervise renders.  Everything is a plain mean over the supplied batch and
differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import Tensor

from .errors import InputError
from .field import DTYPE, DensityParams, SdfSamples, as_points, sdf_to_density, sdf_gradient

MIN_SURFACE_SHARPNESS = 100.0
JITTER_FRACTION = 0.004
CE_FLOOR = 1e-8


@dataclass
class LossWeights:
    """Default weights follow the reference training recipe; the adversarial
    term is replaced desk-scale by photometric + mask fitting terms."""

    lambda_sdf: float = 0.1
    lambda_density: float = 0.001
    lambda_eikonal: float = 0.05
    lambda_surface: float = 0.1
    lambda_reg: float = 1.0
    lambda_photo: float = 1.0
    lambda_mask: float = 1.0

    def to_dict(self):
        return asdict(self)


def sdf_consistency(samples: SdfSamples) -> Tensor:
    """mean (d_g - min_i d_li)^2 — zero iff the global is the hard min of locals."""
    return (samples.d_g - samples.d_local.min(dim=1).values).square().mean()


def density_consistency(samples: SdfSamples, params: DensityParams) -> Tensor:
    """mean (K(d_g) - sum_i K(d_li))^2 with K the SDF->density transform."""
    sigma_g = sdf_to_density(samples.d_g, params)
    sigma_sum = sdf_to_density(samples.d_local, params).sum(dim=1)
    return (sigma_g - sigma_sum).square().mean()


def eikonal_loss(gradients: Tensor) -> Tensor:
    """mean (|grad d| - 1)^2 over probe gradients."""
    return (torch.linalg.norm(gradients, dim=-1) - 1.0).square().mean()


def minimal_surface_loss(d_g: Tensor, sharpness: float = MIN_SURFACE_SHARPNESS) -> Tensor:
    """mean exp(-sharpness * |d_g|): discourages spurious near-zero SDF regions."""
    return torch.exp(-sharpness * d_g.abs()).mean()


def density_regularization(
    field,
    points,
    params: DensityParams,
    *,
    jitter: float | None = None,
    seed: int = 0,
) -> Tensor:
    """mean |sigma(x) - sigma(x + delta)| with delta ~ N(0, jitter^2 I), seeded."""
    pts = as_points(points)
    if jitter is None:
        jitter = JITTER_FRACTION * float(getattr(field, "extent", 4.0))
    rng = np.random.default_rng(seed)
    delta = torch.as_tensor(rng.standard_normal((pts.shape[0], 3)) * jitter, dtype=DTYPE)
    sig_a = sdf_to_density(field.eval_points(pts).d_g, params)
    sig_b = sdf_to_density(field.eval_points(pts + delta).d_g, params)
    return (sig_a - sig_b).abs().mean()


def segmentation_loss(probs: Tensor, labels, floor: float = CE_FLOOR) -> Tensor:
    """Mean cross-entropy -log p[label], probabilities floored at ``floor``.

    probs: (..., K) probabilities; labels: (...) integer class indices.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != probs.shape[:-1]:
        raise InputError(f"label shape {tuple(labels.shape)} does not match probs {tuple(probs.shape)}")
    if labels.min() < 0 or labels.max() >= probs.shape[-1]:
        raise InputError("labels out of range for the probability map")
    picked = probs.reshape(-1, probs.shape[-1])[torch.arange(labels.numel()), labels.reshape(-1)]
    return -torch.log(picked.clamp(min=floor)).mean()


def identity_proxy(image: Tensor, reference: Tensor, edit_region) -> Tensor:
    """Mean squared color difference outside the edit region (True = editable)."""
    region = torch.as_tensor(edit_region, dtype=torch.bool)
    if region.shape != image.shape[:-1]:
        raise InputError("edit_region must match the image spatially")
    keep = ~region
    if not bool(keep.any()):
        return torch.zeros((), dtype=DTYPE)
    diff = (image - torch.as_tensor(reference, dtype=DTYPE)).square()
    return diff[keep].mean()


def sample_probes(
    field,
    params: DensityParams,
    count: int,
    rng: np.random.Generator,
    *,
    near_fraction: float = 0.25,
    extent: float | None = None,
) -> Tensor:
    """Probe positions: uniform in the bounding cube + a near-surface share.

    Near-surface points are rejection-sampled at |d_g| < 2*alpha; if the field
    has little surface inside the cube the shortfall falls back to uniforms.
    """
    ext = float(extent if extent is not None else getattr(field, "extent", 4.0))
    half = ext / 2.0
    n_near = int(round(count * near_fraction))
    n_uni = count - n_near
    uni = torch.as_tensor(rng.uniform(-half, half, (n_uni, 3)), dtype=DTYPE)
    found = []
    remaining = n_near
    for _ in range(20):
        if remaining <= 0:
            break
        pool = torch.as_tensor(rng.uniform(-half, half, (max(remaining * 8, 256), 3)), dtype=DTYPE)
        with torch.no_grad():
            d = field.eval_points(pool).d_g
        close = pool[d.abs() < 2.0 * params.alpha]
        if len(close):
            found.append(close[:remaining])
            remaining -= len(found[-1])
    filler = torch.as_tensor(rng.uniform(-half, half, (max(remaining, 0), 3)), dtype=DTYPE)
    parts = [uni] + found + ([filler] if remaining > 0 else [])
    return torch.cat(parts, dim=0)


def generator_losses(
    field,
    probes,
    params: DensityParams,
    weights: LossWeights,
    *,
    photo: tuple | None = None,  # (predicted image/colors, reference)
    mask: tuple | None = None,  # (probability map (..., K), label map)
    surface_sharpness: float = MIN_SURFACE_SHARPNESS,
    reg_seed: int = 0,
) -> tuple[Tensor, dict]:
    """Weighted total of all generator terms plus the per-term breakdown."""
    pts = as_points(probes)
    samples = field.eval_points(pts)
    grads = sdf_gradient(field, pts)
    parts = {
        "sdf_consistency": sdf_consistency(samples),
        "density_consistency": density_consistency(samples, params),
        "eikonal": eikonal_loss(grads),
        "minimal_surface": minimal_surface_loss(samples.d_g, surface_sharpness),
        "density_reg": density_regularization(field, pts, params, seed=reg_seed),
    }
    total = (
        weights.lambda_sdf * parts["sdf_consistency"]
        + weights.lambda_density * parts["density_consistency"]
        + weights.lambda_eikonal * parts["eikonal"]
        + weights.lambda_surface * parts["minimal_surface"]
        + weights.lambda_reg * parts["density_reg"]
    )
    if photo is not None:
        pred, ref = photo
        parts["photometric"] = (pred - torch.as_tensor(ref, dtype=DTYPE)).square().mean()
        total = total + weights.lambda_photo * parts["photometric"]
    if mask is not None:
        probs, labels = mask
        parts["mask_ce"] = segmentation_loss(probs, labels)
        total = total + weights.lambda_mask * parts["mask_ce"]
    parts["total"] = total
    return total, parts
