"""Signed-distance fields with per-part semantics.

A scene is a set of *local* SDF primitives, each tagged with a semantic class
id and a color, plus a *global* SDF that is either the exact hard minimum of
the locals (``GlobalMode.EXACT_COMPOSITE``) or an independent field of its own
(``GlobalMode.INDEPENDENT``, the learned-generator case).

Contents
--------
* primitives: ``Sphere``, ``Ellipsoid``, ``Capsule``, ``RoundedBox``,
  ``HalfSpace`` — all exact Euclidean SDFs with analytic gradients
* ``CompositeField`` — locals + global mode + colors
* ``SdfSamples`` — batched field evaluations (positions, d_g, per-class d, color)
* ``DensityParams`` and the pointwise SDF→density / SDF→semantic transforms
* ``sdf_gradient`` — analytic where available, central differences otherwise
* scene description file I/O (JSON, lossless round-trip)

All math runs in float64 torch tensors so the same code path serves both the
analytic scenes and the learned fields, and gradient checks have headroom.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import Tensor

from .errors import ConfigError, InputError

DTYPE = torch.float64

# Finite-difference step for fields without analytic gradients, as a fraction
# of the scene extent.
FD_STEP_FRACTION = 1e-4

SCENE_FORMAT = "sdf-scene-v1"


def as_points(points) -> Tensor:
    """Coerce an (N, 3) array-like to a float64 tensor, validating finiteness."""
    pts = torch.as_tensor(points, dtype=DTYPE)
    if pts.ndim == 1 and pts.numel() == 3:
        pts = pts.unsqueeze(0)
    if pts.ndim != 2 or pts.shape[-1] != 3:
        raise InputError(f"points must have shape (N, 3), got {tuple(pts.shape)}")
    if not torch.isfinite(pts).all():
        raise InputError("points contain non-finite coordinates")
    return pts


def _vec3(value, name: str) -> Tensor:
    v = torch.as_tensor(value, dtype=DTYPE).reshape(-1)
    if v.numel() != 3:
        raise ConfigError(f"{name} must have 3 components")
    return v


# --------------------------------------------------------------------------
# density / semantic transforms
# --------------------------------------------------------------------------


@dataclass
class DensityParams:
    """Sharpness parameters for the SDF→density and SDF→semantic transforms.

    ``alpha`` controls the density logistic (density at the surface is
    1/(2·alpha)); ``gamma`` controls the semantic logistic and defaults to
    8/alpha so the two transition bands track each other.
    """

    alpha: float = 0.04
    gamma: float | None = None

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.gamma is None:
            self.gamma = 8.0 / self.alpha
        if not (self.gamma > 0):
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")


def sdf_to_density(d, params: DensityParams) -> Tensor:
    """density = Sigmoid(-d/alpha)/alpha; strictly decreasing, range (0, 1/alpha)."""
    d = torch.as_tensor(d, dtype=DTYPE)
    return torch.sigmoid(-d / params.alpha) / params.alpha


def sdf_to_semantic(d_local, params: DensityParams) -> Tensor:
    """Per-class semantic response s_i = gamma / (1 + exp(gamma * d_i)).

    Equals gamma/2 on the class surface and satisfies s(d) + s(-d) = gamma.
    """
    d_local = torch.as_tensor(d_local, dtype=DTYPE)
    return params.gamma * torch.sigmoid(-params.gamma * d_local)


# --------------------------------------------------------------------------
# sample batches
# --------------------------------------------------------------------------


@dataclass
class SdfSamples:
    """Batched field evaluation: one row per query point."""

    position: Tensor  # (N, 3)
    d_g: Tensor  # (N,)
    d_local: Tensor  # (N, n_classes)
    color: Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.position.shape[0]

    @property
    def n_classes(self) -> int:
        return self.d_local.shape[1]


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


class Primitive:
    """Base for exact-SDF primitives carrying a semantic class id and a color."""

    kind = "primitive"

    def __init__(self, class_id: int, color, trainable: bool = False):
        if class_id < 0:
            raise ConfigError(f"class_id must be >= 0, got {class_id}")
        self.class_id = int(class_id)
        self.color = _vec3(color, "color")
        self.trainable = bool(trainable)

    def _param(self, value, n=None) -> Tensor:
        t = torch.as_tensor(value, dtype=DTYPE).reshape(-1) if n else torch.as_tensor(
            value, dtype=DTYPE
        )
        if n is not None and t.numel() != n:
            raise ConfigError(f"expected {n} components, got {t.numel()}")
        if self.trainable:
            t = t.clone().requires_grad_(True)
        return t

    def distance(self, points: Tensor) -> Tensor:  # (N,3) -> (N,)
        raise NotImplementedError

    def gradient(self, points: Tensor) -> Tensor:  # (N,3) -> (N,3)
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [t for t in self._tensors() if t.requires_grad]

    def _tensors(self) -> list[Tensor]:
        return []

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _base_dict(self) -> dict:
        return {
            "kind": self.kind,
            "class_id": self.class_id,
            "color": [float(c) for c in self.color],
        }


class Sphere(Primitive):
    kind = "sphere"

    def __init__(self, center, radius, class_id=0, color=(0.5, 0.5, 0.5), trainable=False):
        super().__init__(class_id, color, trainable)
        self.center = self._param(center, 3)
        self.radius = self._param(float(radius))

    def distance(self, points):
        return torch.linalg.norm(points - self.center, dim=-1) - self.radius

    def gradient(self, points):
        v = points - self.center
        n = torch.linalg.norm(v, dim=-1, keepdim=True)
        safe = torch.where(n > 1e-12, n, torch.ones_like(n))
        g = v / safe
        # at the exact center the gradient is undefined; pick +x
        fallback = torch.zeros_like(g)
        fallback[:, 0] = 1.0
        return torch.where(n > 1e-12, g, fallback)

    def _tensors(self):
        return [self.center, self.radius]

    def to_dict(self):
        d = self._base_dict()
        d["center"] = [float(c) for c in self.center.detach()]
        d["radius"] = float(self.radius.detach())
        return d


class Ellipsoid(Primitive):
    """Axis-aligned ellipsoid with *exact* Euclidean distance.

    The closest surface point solves x_i = p_i r_i^2 / (r_i^2 + t) with the
    multiplier t found by 20 safeguarded Newton iterations on
    f(t) = sum_i (p_i r_i / (r_i^2 + t))^2 - 1.  Interior points near the
    medial axis (where f has no root above -min r_i^2) take the analytic
    bound-constrained branch along the shortest semi-axis instead.
    """

    kind = "ellipsoid"
    NEWTON_STEPS = 20

    def __init__(self, center, radii, class_id=0, color=(0.5, 0.5, 0.5), trainable=False):
        super().__init__(class_id, color, trainable)
        self.center = self._param(center, 3)
        self.radii = self._param(radii, 3)
        if not bool((torch.as_tensor(radii, dtype=DTYPE) > 0).all()):
            raise ConfigError("ellipsoid radii must be positive")

    def _closest_point(self, q: Tensor) -> Tensor:
        """Closest surface point to q, q in the closed positive octant."""
        r = self.radii.detach()
        r2 = r * r
        u = q * r  # (N,3)
        k = int(torch.argmin(r))
        t_lo = -float(r2[k])

        def f_and_fp(t):
            den = r2 + t.unsqueeze(-1)
            w = (u / den) ** 2
            fv = w.sum(-1) - 1.0
            fp = (-2.0 * w / den).sum(-1)
            return fv, fp

        eps = 1e-12 * float(r2[k]) + 1e-300
        no_root = f_and_fp(torch.full((q.shape[0],), t_lo + 1e-9 * float(r2[k]), dtype=DTYPE))[0] <= 0

        # --- medial-axis branch: multiplier pinned at -r_k^2, x_k freed ---
        others = [i for i in range(3) if i != k]
        xm = torch.zeros_like(q)
        s2 = torch.ones(q.shape[0], dtype=DTYPE)
        for i in others:
            den = float(r2[i] - r2[k])
            xi = q[:, i] * float(r2[i]) / den if abs(den) > 1e-12 else torch.zeros_like(q[:, i])
            xm[:, i] = xi
            s2 = s2 - (xi / float(r[i])) ** 2
        xm[:, k] = float(r[k]) * torch.sqrt(torch.clamp(s2, min=0.0))
        medial_ok = no_root & (s2 >= 0)

        # --- Newton branch with bisection safeguard ---
        lo = torch.full((q.shape[0],), t_lo + eps, dtype=DTYPE)
        hi = torch.linalg.norm(u, dim=-1) + float(r2.max())  # f(hi) <= 0
        t = torch.clamp(torch.linalg.norm(u, dim=-1) - float(r2[k]), min=0.0)
        t = torch.clamp(t, min=t_lo + eps)
        for _ in range(self.NEWTON_STEPS):
            fv, fp = f_and_fp(t)
            lo = torch.where(fv > 0, t, lo)
            hi = torch.where(fv <= 0, t, hi)
            step = torch.where(fp.abs() > 1e-300, fv / fp, torch.zeros_like(fv))
            tn = t - step
            bad = (tn <= lo) | (tn >= hi) | ~torch.isfinite(tn)
            t = torch.where(bad, 0.5 * (lo + hi), tn)
        xn = q * r2 / (r2 + t.unsqueeze(-1))
        return torch.where(medial_ok.unsqueeze(-1), xm, xn)

    def _signed(self, points: Tensor):
        p = points - self.center
        sign_fold = torch.where(p < 0, -torch.ones_like(p), torch.ones_like(p))
        q = p.abs()
        x = self._closest_point(q)
        inside = ((q / self.radii) ** 2).sum(-1) < 1.0
        diff = q - x
        dist = torch.linalg.norm(diff, dim=-1)
        d = torch.where(inside, -dist, dist)
        return d, diff, dist, inside, sign_fold, q

    def distance(self, points):
        # detached closest point; distance itself is exact (and this primitive's
        # parameters are not meant to be optimized through the Newton solve)
        d, *_ = self._signed(points)
        return d

    def gradient(self, points):
        d, diff, dist, inside, sign_fold, q = self._signed(points)
        sgn = torch.where(inside, -torch.ones_like(dist), torch.ones_like(dist))
        g = diff / torch.where(dist > 1e-12, dist, torch.ones_like(dist)).unsqueeze(-1)
        g = g * sgn.unsqueeze(-1)
        # on-surface fallback: implicit-function gradient
        gi = 2.0 * q / (self.radii**2)
        gi = gi / torch.linalg.norm(gi, dim=-1, keepdim=True).clamp(min=1e-300)
        g = torch.where((dist > 1e-12).unsqueeze(-1), g, gi)
        return g * sign_fold

    def _tensors(self):
        return [self.center, self.radii]

    def to_dict(self):
        d = self._base_dict()
        d["center"] = [float(c) for c in self.center.detach()]
        d["radii"] = [float(c) for c in self.radii.detach()]
        return d


class Capsule(Primitive):
    kind = "capsule"

    def __init__(self, a, b, radius, class_id=0, color=(0.5, 0.5, 0.5), trainable=False):
        super().__init__(class_id, color, trainable)
        self.a = self._param(a, 3)
        self.b = self._param(b, 3)
        self.radius = self._param(float(radius))

    def _axis_offset(self, points):
        ab = self.b - self.a
        t = ((points - self.a) @ ab) / (ab @ ab).clamp(min=1e-300)
        t = t.clamp(0.0, 1.0)
        closest = self.a + t.unsqueeze(-1) * ab
        return points - closest

    def distance(self, points):
        v = self._axis_offset(points)
        return torch.linalg.norm(v, dim=-1) - self.radius

    def gradient(self, points):
        v = self._axis_offset(points)
        n = torch.linalg.norm(v, dim=-1, keepdim=True)
        g = v / n.clamp(min=1e-12)
        fallback = torch.zeros_like(g)
        fallback[:, 0] = 1.0
        return torch.where(n > 1e-12, g, fallback)

    def _tensors(self):
        return [self.a, self.b, self.radius]

    def to_dict(self):
        d = self._base_dict()
        d["a"] = [float(c) for c in self.a.detach()]
        d["b"] = [float(c) for c in self.b.detach()]
        d["radius"] = float(self.radius.detach())
        return d


class RoundedBox(Primitive):
    kind = "rounded_box"

    def __init__(self, center, half_extents, radius, class_id=0, color=(0.5, 0.5, 0.5), trainable=False):
        super().__init__(class_id, color, trainable)
        self.center = self._param(center, 3)
        self.half_extents = self._param(half_extents, 3)
        self.radius = self._param(float(radius))

    def distance(self, points):
        q = (points - self.center).abs() - self.half_extents
        outside = torch.linalg.norm(q.clamp(min=0.0), dim=-1)
        inside = q.max(dim=-1).values.clamp(max=0.0)
        return outside + inside - self.radius

    def gradient(self, points):
        p = points - self.center
        sign_fold = torch.where(p < 0, -torch.ones_like(p), torch.ones_like(p))
        q = p.abs() - self.half_extents
        qpos = q.clamp(min=0.0)
        n = torch.linalg.norm(qpos, dim=-1, keepdim=True)
        g_out = qpos / n.clamp(min=1e-12)
        # interior: closest face is the largest (least negative) component
        idx = q.argmax(dim=-1)
        g_in = torch.zeros_like(p)
        g_in[torch.arange(p.shape[0]), idx] = 1.0
        g = torch.where(n > 1e-12, g_out, g_in)
        return g * sign_fold

    def _tensors(self):
        return [self.center, self.half_extents, self.radius]

    def to_dict(self):
        d = self._base_dict()
        d["center"] = [float(c) for c in self.center.detach()]
        d["half_extents"] = [float(c) for c in self.half_extents.detach()]
        d["radius"] = float(self.radius.detach())
        return d


class HalfSpace(Primitive):
    kind = "half_space"

    def __init__(self, origin, normal, class_id=0, color=(0.5, 0.5, 0.5), trainable=False):
        super().__init__(class_id, color, trainable)
        self.origin = self._param(origin, 3)
        n = _vec3(normal, "normal")
        nn = float(torch.linalg.norm(n))
        if nn < 1e-12:
            raise ConfigError("half_space normal must be nonzero")
        self.normal = self._param([float(c) / nn for c in n], 3)

    def distance(self, points):
        n = self.normal / torch.linalg.norm(self.normal).clamp(min=1e-300)
        return (points - self.origin) @ n

    def gradient(self, points):
        n = self.normal / torch.linalg.norm(self.normal).clamp(min=1e-300)
        return n.expand_as(points).clone()

    def _tensors(self):
        return [self.origin, self.normal]

    def to_dict(self):
        d = self._base_dict()
        d["origin"] = [float(c) for c in self.origin.detach()]
        d["normal"] = [float(c) for c in self.normal.detach()]
        return d


class Union(Primitive):
    """Hard union of child primitives, all sharing this primitive's class id.

    The distance is the minimum over children (exact wherever children do not
    overlap); the gradient follows the achieving child, ties to the first.
    """

    kind = "union"

    def __init__(self, children: Sequence[Primitive], class_id=0, color=(0.5, 0.5, 0.5), trainable=False):
        super().__init__(class_id, color, trainable)
        if not children:
            raise ConfigError("union needs at least one child")
        self.children = list(children)

    def _child_distances(self, points):
        return torch.stack([c.distance(points) for c in self.children], dim=1)

    def distance(self, points):
        return self._child_distances(points).min(dim=1).values

    def gradient(self, points):
        d = self._child_distances(points).detach()
        n = d.shape[1]
        d_min = d.min(dim=1, keepdim=True).values
        ar = torch.arange(n, dtype=torch.long).expand_as(d)
        idx = torch.where(d == d_min, ar, torch.full_like(ar, n)).min(dim=1).values
        grads = torch.stack([c.gradient(points) for c in self.children], dim=1)
        return grads[torch.arange(points.shape[0]), idx]

    def _tensors(self):
        out = []
        for c in self.children:
            out.extend(c._tensors())
        return out

    def to_dict(self):
        d = self._base_dict()
        d["children"] = [c.to_dict() for c in self.children]
        return d


PRIMITIVE_KINDS = {
    cls.kind: cls for cls in (Sphere, Ellipsoid, Capsule, RoundedBox, HalfSpace, Union)
}

_PRIMITIVE_FIELDS = {
    "sphere": ("center", "radius"),
    "ellipsoid": ("center", "radii"),
    "capsule": ("a", "b", "radius"),
    "rounded_box": ("center", "half_extents", "radius"),
    "half_space": ("origin", "normal"),
    "union": ("children",),
}


def primitive_from_dict(d: dict) -> Primitive:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in PRIMITIVE_KINDS:
        raise ConfigError(f"unknown primitive kind: {kind!r}")
    class_id = d.pop("class_id", 0)
    color = d.pop("color", (0.5, 0.5, 0.5))
    expected = _PRIMITIVE_FIELDS[kind]
    unknown = set(d) - set(expected)
    if unknown:
        raise ConfigError(f"unknown keys for {kind}: {sorted(unknown)}")
    missing = set(expected) - set(d)
    if missing:
        raise ConfigError(f"missing keys for {kind}: {sorted(missing)}")
    if kind == "union":
        children = [primitive_from_dict(c) for c in d.pop("children")]
        return Union(children, class_id=class_id, color=color)
    return PRIMITIVE_KINDS[kind](**d, class_id=class_id, color=color)


# --------------------------------------------------------------------------
# composite field
# --------------------------------------------------------------------------


class GlobalMode(enum.Enum):
    EXACT_COMPOSITE = "exact_composite"
    INDEPENDENT = "independent"


@dataclass
class CompositeField:
    """Locals (one per semantic class) plus a global SDF.

    In EXACT_COMPOSITE mode the global distance is the hard minimum of the
    locals (bit-exact, so the SDF consistency loss is identically zero). In
    INDEPENDENT mode an explicit ``global_field`` primitive supplies it.
    """

    locals: list  # list[Primitive]
    global_mode: GlobalMode = GlobalMode.EXACT_COMPOSITE
    global_field: Primitive | None = None
    extent: float = 4.0

    def __post_init__(self):
        if isinstance(self.global_mode, str):
            self.global_mode = GlobalMode(self.global_mode)
        if not self.locals:
            raise ConfigError("a composite field needs at least one local")
        ids = sorted(p.class_id for p in self.locals)
        if ids != list(range(len(self.locals))):
            raise ConfigError(f"class ids must cover 0..n-1 exactly once, got {ids}")
        self.locals = sorted(self.locals, key=lambda p: p.class_id)
        if self.global_mode is GlobalMode.INDEPENDENT and self.global_field is None:
            raise ConfigError("INDEPENDENT mode requires an explicit global_field")
        if not (self.extent > 0):
            raise ConfigError("extent must be positive")

    @property
    def n_classes(self) -> int:
        return len(self.locals)

    def _local_distances(self, pts: Tensor) -> Tensor:
        return torch.stack([p.distance(pts) for p in self.locals], dim=1)

    def _first_min_index(self, d_local: Tensor) -> Tensor:
        """Index of the minimal local per row; ties go to the lowest class id."""
        n = d_local.shape[1]
        d_min = d_local.min(dim=1, keepdim=True).values
        ar = torch.arange(n, dtype=torch.long).expand_as(d_local)
        return torch.where(d_local == d_min, ar, torch.full_like(ar, n)).min(dim=1).values

    def eval_points(self, points) -> SdfSamples:
        pts = as_points(points)
        d_local = self._local_distances(pts)
        if self.global_mode is GlobalMode.EXACT_COMPOSITE:
            d_g = d_local.min(dim=1).values
        else:
            d_g = self.global_field.distance(pts)
        idx = self._first_min_index(d_local.detach())
        colors = torch.stack([p.color for p in self.locals], dim=0)
        color = colors[idx]
        return SdfSamples(position=pts, d_g=d_g, d_local=d_local, color=color)

    def sdf_gradient(self, points) -> Tensor:
        pts = as_points(points)
        if self.global_mode is GlobalMode.INDEPENDENT:
            return self.global_field.gradient(pts)
        d_local = self._local_distances(pts).detach()
        idx = self._first_min_index(d_local)
        grads = torch.stack([p.gradient(pts) for p in self.locals], dim=1)
        return grads[torch.arange(pts.shape[0]), idx]

    def tensors(self) -> list[Tensor]:
        out = []
        for p in self.locals:
            out.extend(p._tensors())
        if self.global_field is not None:
            out.extend(self.global_field._tensors())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.tensors() if t.requires_grad]

    # -- scene description file -------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "format": SCENE_FORMAT,
            "extent": float(self.extent),
            "global_mode": self.global_mode.value,
            "primitives": [p.to_dict() for p in self.locals],
        }
        if self.global_field is not None:
            d["global_field"] = self.global_field.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CompositeField":
        d = dict(d)
        fmt = d.pop("format", None)
        if fmt != SCENE_FORMAT:
            raise ConfigError(f"unsupported scene format: {fmt!r}")
        extent = d.pop("extent", 4.0)
        mode = d.pop("global_mode", "exact_composite")
        prims = [primitive_from_dict(p) for p in d.pop("primitives", [])]
        gf = d.pop("global_field", None)
        d.pop("density", None)  # handled by load_scene
        if d:
            raise ConfigError(f"unknown scene keys: {sorted(d)}")
        return cls(
            locals=prims,
            global_mode=GlobalMode(mode),
            global_field=primitive_from_dict(gf) if gf else None,
            extent=extent,
        )


def eval_field(field, points) -> SdfSamples:
    """Evaluate any field object (composite, tri-plane pair, fused) at points."""
    return field.eval_points(points)


def fd_gradient(distance_fn, points: Tensor, h: float) -> Tensor:
    """Central-difference spatial gradient of a scalar field, one axis at a time."""
    cols = []
    for axis in range(3):
        offset = torch.zeros(3, dtype=DTYPE)
        offset[axis] = h
        cols.append((distance_fn(points + offset) - distance_fn(points - offset)) / (2.0 * h))
    return torch.stack(cols, dim=-1)


def sdf_gradient(field, points) -> Tensor:
    """Spatial gradient of the global SDF.

    Analytic for primitive-backed composites; central finite differences at
    step FD_STEP_FRACTION × extent for learned / fused fields.
    """
    pts = as_points(points)
    if hasattr(field, "sdf_gradient"):
        return field.sdf_gradient(pts)
    h = FD_STEP_FRACTION * float(getattr(field, "extent", 4.0))
    return fd_gradient(lambda q: field.eval_points(q).d_g, pts, h)


# --------------------------------------------------------------------------
# scene files
# --------------------------------------------------------------------------


def save_scene(path, field: CompositeField, params: DensityParams | None = None) -> None:
    d = field.to_dict()
    if params is not None:
        d["density"] = {"alpha": params.alpha, "gamma": params.gamma}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_scene(path) -> tuple[CompositeField, DensityParams]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"scene file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"scene file is not valid JSON: {e}") from e
    dens = d.get("density", {})
    unknown = set(dens) - {"alpha", "gamma"}
    if unknown:
        raise ConfigError(f"unknown density keys: {sorted(unknown)}")
    params = DensityParams(alpha=dens.get("alpha", 0.04), gamma=dens.get("gamma"))
    return CompositeField.from_dict(d), params
