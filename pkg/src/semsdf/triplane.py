"""Tri-plane feature fields and their decoders.

A ``TriPlane`` holds three axis-aligned feature grids (XY, XZ, YZ planes, each
R x R x F).  A 3D point is projected onto each plane, features are sampled
bilinearly, and the three results are summed — the usual tri-plane convention.
Out-of-bounds projections clamp to the grid edge.

A ``TriPlanePair`` bundles a texture tri-plane and a shape tri-plane with two
small decoders:

* shape decoder: features -> (1 + n) signed distances (global first, then one
  per semantic class)
* color decoder: features -> 3 sigmoid-squashed color channels (plus optional
  extra low-resolution feature channels)

Everything lives in float64 and is differentiable with respect to the plane
cells and decoder weights.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigError, InputError
from .field import DTYPE, FD_STEP_FRACTION, SdfSamples, as_points, fd_gradient

CHECKPOINT_MAGIC = b"SSTP"
CHECKPOINT_VERSION = 1

# plane index -> which point coordinates it sees
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


class TriPlane(nn.Module):
    """Three R x R x F feature grids over the cube [-extent/2, extent/2]^3."""

    def __init__(self, resolution: int, features: int, extent: float = 4.0, init: Tensor | None = None):
        super().__init__()
        if resolution < 2:
            raise ConfigError("tri-plane resolution must be >= 2")
        if features < 1:
            raise ConfigError("tri-plane feature count must be >= 1")
        if not extent > 0:
            raise ConfigError("extent must be positive")
        self.resolution = int(resolution)
        self.features = int(features)
        self.extent = float(extent)
        if init is None:
            init = torch.zeros(3, resolution, resolution, features, dtype=DTYPE)
        else:
            init = torch.as_tensor(init, dtype=DTYPE)
            if init.shape != (3, resolution, resolution, features):
                raise ConfigError(f"bad init shape {tuple(init.shape)}")
        self.planes = nn.Parameter(init.clone())

    def node_coords(self) -> Tensor:
        """1D grid node positions along any axis."""
        half = self.extent / 2.0
        return torch.linspace(-half, half, self.resolution, dtype=DTYPE)

    def sample(self, points: Tensor) -> Tensor:
        """Bilinearly sample each plane at the projected point and sum. (N,3)->(N,F)."""
        R = self.resolution
        half = self.extent / 2.0
        out = None
        for p, (ax0, ax1) in enumerate(PLANE_AXES):
            uv = torch.stack([points[:, ax0], points[:, ax1]], dim=-1)
            g = (uv + half) / self.extent * (R - 1)
            g = g.clamp(0.0, float(R - 1))
            i0 = g.floor().long().clamp(max=R - 2)
            frac = g - i0
            i1 = i0 + 1
            plane = self.planes[p]
            v00 = plane[i0[:, 0], i0[:, 1]]
            v10 = plane[i1[:, 0], i0[:, 1]]
            v01 = plane[i0[:, 0], i1[:, 1]]
            v11 = plane[i1[:, 0], i1[:, 1]]
            fx = frac[:, 0:1]
            fy = frac[:, 1:2]
            val = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
            out = val if out is None else out + val
        return out


def sample_triplane(plane_set: TriPlane, points) -> Tensor:
    """Functional wrapper around :meth:`TriPlane.sample` with input validation."""
    return plane_set.sample(as_points(points))


class Decoder(nn.Module):
    """Affine map, optionally with one hidden softplus layer of width ``hidden``."""

    def __init__(self, in_features: int, out_features: int, hidden: int = 0):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.hidden = int(hidden)
        if hidden:
            self.lin1 = nn.Linear(in_features, hidden, dtype=DTYPE)
            self.lin2 = nn.Linear(hidden, out_features, dtype=DTYPE)
        else:
            self.lin = nn.Linear(in_features, out_features, dtype=DTYPE)

    def forward(self, feats: Tensor) -> Tensor:
        if self.hidden:
            return self.lin2(torch.nn.functional.softplus(self.lin1(feats)))
        return self.lin(feats)


class TriPlanePair(nn.Module):
    """Texture + shape tri-planes with their decoders; evaluates like a field.

    ``eval_points`` returns :class:`~semsdf.field.SdfSamples`, so a pair can be
    used anywhere a composite field can (rendering, losses, mesh extraction).
    """

    def __init__(
        self,
        n_classes: int,
        resolution: int = 33,
        features: int = 8,
        extent: float = 4.0,
        shape_hidden: int = 16,
        color_hidden: int = 0,
        color_extra: int = 0,
        seed: int = 0,
    ):
        super().__init__()
        if n_classes < 1:
            raise ConfigError("need at least one semantic class")
        self.color_extra = int(color_extra)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.texture = TriPlane(resolution, features, extent)
            self.shape = TriPlane(resolution, features, extent)
            self.shape_decoder = Decoder(features, 1 + n_classes, hidden=shape_hidden)
            self.color_decoder = Decoder(features, 3 + color_extra, hidden=color_hidden)

    @property
    def extent(self) -> float:
        return self.shape.extent

    @property
    def n_classes(self) -> int:
        return self.shape_decoder.out_features - 1

    def decode_sdf(self, points: Tensor) -> Tensor:
        """(N,3) -> (N, 1+n): global distance then per-class distances."""
        return self.shape_decoder(self.shape.sample(points))

    def eval_points(self, points) -> SdfSamples:
        pts = as_points(points)
        sdf = self.decode_sdf(pts)
        color = torch.sigmoid(self.color_decoder(self.texture.sample(pts))[:, :3])
        return SdfSamples(position=pts, d_g=sdf[:, 0], d_local=sdf[:, 1:], color=color)

    def sdf_gradient(self, points) -> Tensor:
        pts = as_points(points)
        h = FD_STEP_FRACTION * self.extent
        return fd_gradient(lambda q: self.decode_sdf(q)[:, 0], pts, h)

    def plane_parameters(self) -> list[nn.Parameter]:
        """The plane cells only — what editing optimizes (decoders stay shared)."""
        return [self.texture.planes, self.shape.planes]

    def clone(self, share_decoders: bool = False) -> "TriPlanePair":
        """Deep copy; with ``share_decoders`` the decoder modules are shared objects."""
        other = TriPlanePair(
            self.n_classes,
            self.shape.resolution,
            self.shape.features,
            self.extent,
            shape_hidden=self.shape_decoder.hidden,
            color_hidden=self.color_decoder.hidden,
            color_extra=self.color_extra,
        )
        with torch.no_grad():
            other.texture.planes.copy_(self.texture.planes)
            other.shape.planes.copy_(self.shape.planes)
        if share_decoders:
            other.shape_decoder = self.shape_decoder
            other.color_decoder = self.color_decoder
        else:
            other.shape_decoder.load_state_dict(self.shape_decoder.state_dict())
            other.color_decoder.load_state_dict(self.color_decoder.state_dict())
        return other


def decode(pair: TriPlanePair, points) -> SdfSamples:
    """Decode a tri-plane pair at 3D points (functional form of ``eval_points``)."""
    return pair.eval_points(points)


# --------------------------------------------------------------------------
# sphere initialization
# --------------------------------------------------------------------------


def init_triplane_sphere(
    radius: float,
    n_classes: int,
    resolution: int = 33,
    features: int = 8,
    extent: float = 4.0,
    shape_hidden: int = 16,
    color_hidden: int = 0,
    local_offsets=None,
    noise: float = 1e-3,
    seed: int = 0,
) -> TriPlanePair:
    """A pair whose decoded global SDF approximates a centered sphere.

    Channel 0 of the shape planes carries the split squared radius
    (x^2+y^2 on the XY plane, z^2 on the XZ plane), so the summed feature is a
    piecewise-bilinear approximation of |p|^2.  The hidden shape decoder is
    then least-squares fitted on a probe lattice to map that channel through
    sqrt(.) - radius.  Local distances start as the global plus a small
    per-class offset.  Remaining channels hold low-amplitude noise so the
    optimizer has somewhere to go.

    Prefer an odd ``resolution``: it puts a grid node exactly at the origin,
    where bilinear interpolation of |p|^2 is otherwise ambiguous and the
    decoded center value sags.
    """

    if radius <= 0:
        raise ConfigError("radius must be positive")
    if radius >= extent / 2.0:
        raise ConfigError("sphere radius must fit inside the cube (radius < extent/2)")
    if shape_hidden < 4:
        raise ConfigError("sphere init needs a hidden shape decoder (width >= 4)")
    pair = TriPlanePair(
        n_classes,
        resolution,
        features,
        extent,
        shape_hidden=shape_hidden,
        color_hidden=color_hidden,
        seed=seed,
    )
    half = extent / 2.0
    rng = np.random.default_rng(seed)
    nodes = pair.shape.node_coords()

    with torch.no_grad():
        for tp in (pair.texture, pair.shape):
            tp.planes.copy_(
                torch.as_tensor(
                    rng.standard_normal(tuple(tp.planes.shape)) * noise, dtype=DTYPE
                )
            )
        # split |p|^2 across the XY and XZ planes on channel 0
        xx = nodes[:, None] ** 2
        yy = nodes[None, :] ** 2
        pair.shape.planes[0, :, :, 0] = xx + yy  # f(x, y) = x^2 + y^2
        pair.shape.planes[1, :, :, 0] = yy.expand(len(nodes), -1)  # f(x, z) = z^2
        pair.shape.planes[2, :, :, 0] = 0.0

        # hidden layer: softplus hinges along channel 0, spanning u in [0, u_max].
        # sqrt(u) curves hardest near u = 0, so the knots are quadratically
        # spaced (dense near 0) and each hinge is sharpened to its local gap;
        # the sharpness cap keeps the design matrix below well conditioned.
        u_max = 3.0 * half * half
        knots = u_max * torch.linspace(0.0, 1.0, shape_hidden, dtype=DTYPE) ** 2
        gaps = torch.diff(knots).clamp(min=u_max / (32.0 * (shape_hidden - 1)))
        sharp = 4.0 / torch.cat([gaps, gaps[-1:]])
        w1 = torch.zeros(shape_hidden, features, dtype=DTYPE)
        w1[:, 0] = sharp
        pair.shape_decoder.lin1.weight.copy_(w1)
        pair.shape_decoder.lin1.bias.copy_(-sharp * knots)

        # least-squares output layer on a probe set: a cube lattice, a shell
        # around the target surface, and a core cluster (the lattice alone has
        # almost no samples at small radius, starving the fit near the center)
        grid = torch.linspace(-half, half, 13, dtype=DTYPE)
        lattice = torch.cartesian_prod(grid, grid, grid)
        shell_dirs = torch.as_tensor(rng.standard_normal((800, 3)), dtype=DTYPE)
        shell_dirs = shell_dirs / torch.linalg.norm(shell_dirs, dim=-1, keepdim=True)
        shell_r = radius + torch.as_tensor(rng.uniform(-0.2, 0.2, 800), dtype=DTYPE)
        core_dirs = torch.as_tensor(rng.standard_normal((400, 3)), dtype=DTYPE)
        core_dirs = core_dirs / torch.linalg.norm(core_dirs, dim=-1, keepdim=True)
        core_r = torch.as_tensor(rng.uniform(0.0, 0.6 * radius, 400), dtype=DTYPE)
        probes = torch.cat(
            [
                lattice,
                shell_dirs * shell_r.unsqueeze(-1),
                core_dirs * core_r.unsqueeze(-1),
                torch.zeros(8, 3, dtype=DTYPE),
            ],
            dim=0,
        )
        feats = pair.shape.sample(probes)
        hidden_out = torch.nn.functional.softplus(pair.shape_decoder.lin1(feats))
        design = torch.cat([hidden_out, torch.ones(len(probes), 1, dtype=DTYPE)], dim=1)
        radii_p = torch.linalg.norm(probes, dim=-1)
        target = radii_p - radius
        # emphasize the center: it is covered by few probes yet is where the
        # feature-to-distance map bends hardest
        row_w = (1.0 + 6.0 * torch.exp(-((radii_p / (0.4 * radius)) ** 2))).unsqueeze(-1)
        design_w = design * row_w
        target_w = target.unsqueeze(-1) * row_w
        # ridge-regularized normal equations: nearly-parallel hinge columns make
        # a plain least-squares solve unstable (solution blows up along the
        # near-null space and varies between BLAS runs)
        gram = design_w.T @ design_w
        gram = gram + 1e-8 * float(gram.diagonal().mean()) * torch.eye(
            gram.shape[0], dtype=DTYPE
        )
        sol = torch.linalg.solve(gram, design_w.T @ target_w).squeeze(-1)

        if local_offsets is None:
            local_offsets = [0.05 * (i + 1) for i in range(n_classes)]
        if len(local_offsets) != n_classes:
            raise ConfigError("need one local offset per class")
        w2 = sol[:-1].unsqueeze(0).repeat(1 + n_classes, 1)
        b2 = torch.full((1 + n_classes,), float(sol[-1]), dtype=DTYPE)
        for i, off in enumerate(local_offsets):
            b2[1 + i] += float(off)
        pair.shape_decoder.lin2.weight.copy_(w2)
        pair.shape_decoder.lin2.bias.copy_(b2)

        # neutral gray color to start
        for lin in (
            [pair.color_decoder.lin] if not pair.color_decoder.hidden
            else [pair.color_decoder.lin1, pair.color_decoder.lin2]
        ):
            lin.weight.zero_()
            lin.bias.zero_()
    return pair


# --------------------------------------------------------------------------
# checkpoint I/O (binary, little-endian, versioned magic)
# --------------------------------------------------------------------------
#
# layout:
#   magic  (4 bytes)  "SSTP"
#   u32    version
#   u32    resolution, u32 features, u32 n_classes
#   u32    shape_hidden, u32 color_hidden, u32 color_extra
#   f64    extent
#   then, in order, raw little-endian float64 tensors:
#     texture.planes (3*R*R*F), shape.planes (3*R*R*F),
#     shape decoder tensors, color decoder tensors
#   decoder tensor order: hidden? [lin1.weight, lin1.bias, lin2.weight, lin2.bias]
#                         affine? [lin.weight, lin.bias]

_HEADER = struct.Struct("<4sIIIIIIId")


def _decoder_tensors(dec: Decoder) -> list[Tensor]:
    if dec.hidden:
        return [dec.lin1.weight, dec.lin1.bias, dec.lin2.weight, dec.lin2.bias]
    return [dec.lin.weight, dec.lin.bias]


def save_checkpoint(path, pair: TriPlanePair) -> None:
    head = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        pair.shape.resolution,
        pair.shape.features,
        pair.n_classes,
        pair.shape_decoder.hidden,
        pair.color_decoder.hidden,
        pair.color_extra,
        pair.extent,
    )
    chunks = [head]
    tensors = [pair.texture.planes, pair.shape.planes]
    tensors += _decoder_tensors(pair.shape_decoder) + _decoder_tensors(pair.color_decoder)
    for t in tensors:
        chunks.append(t.detach().numpy().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def is_checkpoint(path) -> bool:
    p = Path(path)
    if not p.is_file():
        return False
    with open(p, "rb") as f:
        return f.read(4) == CHECKPOINT_MAGIC


def load_checkpoint(path) -> TriPlanePair:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if len(blob) < _HEADER.size:
        raise ConfigError(f"checkpoint too short: {p}")
    magic, version, R, F, n, sh, ch, cx, extent = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a tri-plane checkpoint (bad magic): {p}")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    pair = TriPlanePair(
        n, R, F, extent, shape_hidden=sh, color_hidden=ch, color_extra=cx
    )
    tensors = [pair.texture.planes, pair.shape.planes]
    tensors += _decoder_tensors(pair.shape_decoder) + _decoder_tensors(pair.color_decoder)
    expected = _HEADER.size + 8 * sum(t.numel() for t in tensors)
    if len(blob) != expected:
        raise ConfigError(
            f"checkpoint size mismatch: {p} has {len(blob)} bytes, header implies {expected}"
        )
    offset = _HEADER.size
    with torch.no_grad():
        for t in tensors:
            count = t.numel()
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += count * 8
            t.copy_(torch.from_numpy(arr.reshape(tuple(t.shape)).copy()))
    return pair
