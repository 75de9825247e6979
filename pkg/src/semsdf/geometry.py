"""Mesh extraction and decompositional geometry metrics.

Zero-level-set triangulation (marching cubes over a dense SDF grid, vertex
normals from the SDF gradient), area-uniform surface sampling, symmetric
nearest-neighbor chamfer distance, normal-consistency, and label-map mIoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

from .errors import InputError, MetricUndefined
from .field import DTYPE, fd_gradient, sdf_gradient

DEGENERATE_AREA_FRACTION = 1e-12


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, 1e-300)


@dataclass
class Mesh:
    """Triangle mesh with per-vertex unit normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.vertex_normals is None:
            self.vertex_normals = np.zeros_like(self.vertices)
        self.vertex_normals = _unit(np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3))
        if len(self.vertex_normals) != len(self.vertices):
            raise InputError("need one normal per vertex")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InputError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))


def _field_scalar(field, which):
    """Scalar SDF selector: the global distance or one local class distance."""
    if which == "global":
        return lambda pts: field.eval_points(pts).d_g
    class_id = int(which)
    if not 0 <= class_id < field.n_classes:
        raise InputError(f"class id {class_id} out of range")
    return lambda pts: field.eval_points(pts).d_local[:, class_id]


def extract_mesh(field, grid_resolution: int, iso: float = 0.0, which="global", *,
                 extent: float | None = None, chunk: int = 100000) -> Mesh:
    """Triangulate an iso-surface of the chosen SDF over its bounding cube.

    Vertex normals come from the SDF gradient at the vertices (outward, since
    distance increases away from the surface); an empty level set gives an
    empty mesh.  Degenerate (zero-area) triangles are dropped.
    """
    if grid_resolution < 8:
        raise InputError("grid resolution must be >= 8")
    ext = float(extent if extent is not None else getattr(field, "extent", 4.0))
    half = ext / 2.0
    axis = np.linspace(-half, half, grid_resolution)
    spacing = axis[1] - axis[0]
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    scalar = _field_scalar(field, which)
    values = []
    with torch.no_grad():
        for start in range(0, len(grid), chunk):
            pts = torch.as_tensor(grid[start : start + chunk], dtype=DTYPE)
            values.append(scalar(pts).numpy())
    volume = np.concatenate(values).reshape(grid_resolution, grid_resolution, grid_resolution)
    if volume.min() >= iso or volume.max() <= iso:
        return empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(
        volume, level=iso, spacing=(spacing, spacing, spacing), gradient_direction="ascent"
    )
    verts = verts + np.array([-half, -half, -half])

    areas = 0.5 * np.linalg.norm(
        np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]]),
        axis=-1,
    )
    faces = faces[areas > DEGENERATE_AREA_FRACTION * spacing * spacing]
    if len(faces) == 0:
        return empty_mesh()

    verts_t = torch.as_tensor(verts, dtype=DTYPE)
    with torch.no_grad():
        if which == "global":
            grads = sdf_gradient(field, verts_t).numpy()
        else:
            h = 1e-4 * ext
            grads = fd_gradient(scalar, verts_t, h).numpy()
    return Mesh(vertices=verts, triangles=faces, vertex_normals=_unit(grads))


def union_mesh(meshes) -> Mesh:
    """Concatenation of meshes (no CSG) — the per-class union for metrics."""
    parts = [m for m in meshes if not m.is_empty]
    if not parts:
        return empty_mesh()
    verts, tris, normals, offset = [], [], [], 0
    for m in parts:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        normals.append(m.vertex_normals)
        offset += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(normals))


def sample_mesh(mesh: Mesh, num_samples: int, seed: int = 0):
    """Area-uniform surface samples with barycentric-interpolated normals.

    One seeded generator per mesh: identical meshes sampled with the same seed
    give identical point sets (so self-chamfer is exactly zero).
    """
    if mesh.is_empty:
        raise MetricUndefined("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise MetricUndefined("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(areas), size=num_samples, p=areas / total)
    uv = rng.random((num_samples, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    u, v = uv[:, 0:1], uv[:, 1:2]
    tri = mesh.triangles[idx]
    a, b, c = mesh.vertices[tri[:, 0]], mesh.vertices[tri[:, 1]], mesh.vertices[tri[:, 2]]
    points = a + u * (b - a) + v * (c - a)
    na, nb, nc = (mesh.vertex_normals[tri[:, i]] for i in range(3))
    normals = _unit((1.0 - u - v) * na + u * nb + v * nc)
    return points, normals


def chamfer_l1(mesh_a: Mesh, mesh_b: Mesh, num_samples: int = 20000, seed: int = 0) -> float:
    """Symmetric mean nearest-neighbor distance between surface samples."""
    pa, _ = sample_mesh(mesh_a, num_samples, seed)
    pb, _ = sample_mesh(mesh_b, num_samples, seed)
    d_ab = cKDTree(pb).query(pa, workers=1)[0]
    d_ba = cKDTree(pa).query(pb, workers=1)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def normal_consistency(mesh_a: Mesh, mesh_b: Mesh, num_samples: int = 20000, seed: int = 0) -> float:
    """Symmetric mean |n_a . n_nn(a)| under nearest-neighbor correspondence."""
    pa, na = sample_mesh(mesh_a, num_samples, seed)
    pb, nb = sample_mesh(mesh_b, num_samples, seed)
    ia = cKDTree(pb).query(pa, workers=1)[1]
    ib = cKDTree(pa).query(pb, workers=1)[1]
    fwd = np.abs((na * nb[ia]).sum(axis=1)).mean()
    bwd = np.abs((nb * na[ib]).sum(axis=1)).mean()
    return float(0.5 * (fwd + bwd))


def miou(label_a, label_b, n_classes: int) -> float:
    """Mean IoU over the classes present in either map (absent classes skipped)."""
    a = np.asarray(label_a)
    b = np.asarray(label_b)
    if a.shape != b.shape:
        raise InputError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    if n_classes < 1:
        raise InputError("need at least one class")
    ious = []
    for c in range(n_classes):
        in_a = a == c
        in_b = b == c
        union = int((in_a | in_b).sum())
        if union == 0:
            continue
        ious.append(int((in_a & in_b).sum()) / union)
    if not ious:
        raise MetricUndefined("no class present in either label map")
    return float(np.mean(ious))


def save_obj(path, mesh: Mesh) -> None:
    """Wavefront OBJ with vertices, vertex normals, and v//vn faces."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for n in mesh.vertex_normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1}//{t[0] + 1} {t[1] + 1}//{t[1] + 1} {t[2] + 1}//{t[2] + 1}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
