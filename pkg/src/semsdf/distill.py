"""Score distillation machinery.

A variance-preserving diffusion schedule, closed-form oracle score models
(Gaussian prior / perfect denoiser), a mean-pooling latent codec, single-branch
score-distillation gradients, and the two-branch variant that blends image and
normal-map latents with a random factor and routes the blended residual to the
normal branch.  Also houses the condition-updating step (re-rendering the
semantic mask that conditions the score model) and a length-prefixed binary
protocol for out-of-process score models.

Convention: every gradient returned here is a *descent* direction for the
distillation objective; callers apply it through a surrogate inner product
``(render * grad).sum()`` so autograd carries it onto field parameters.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, InputError
from .field import DTYPE
from .render import labels_to_color, render_mask, render_scene, save_mask_png, load_mask_png


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


@dataclass
class DiffusionSchedule:
    """Variance-preserving mixing coefficients from a linear beta ramp.

    ``alpha_sigma(t)`` interpolates log cumulative-alpha over ``virtual_steps``
    discrete steps, so t is continuous in [0, 1] and alpha(t)^2 + sigma(t)^2 = 1.
    """

    beta_start: float = 1e-4
    beta_end: float = 0.02
    virtual_steps: int = 1000
    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.virtual_steps < 2:
            raise ConfigError("virtual_steps must be >= 2")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ConfigError("need 0 <= t_min < t_max <= 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.virtual_steps)
        self._grid = np.arange(self.virtual_steps, dtype=np.float64)
        self._log_alpha_bar = np.cumsum(np.log1p(-betas))

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise InputError(f"t must be in [0, 1], got {t}")
        log_ab = float(np.interp(t * (self.virtual_steps - 1), self._grid, self._log_alpha_bar))
        alpha_bar = np.exp(log_ab)
        return float(np.sqrt(alpha_bar)), float(np.sqrt(1.0 - alpha_bar))

    def sample_t(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.t_min, self.t_max))


def add_noise(z0: Tensor, eps: Tensor, t: float, schedule: DiffusionSchedule) -> Tensor:
    """z_t = alpha_t * z0 + sigma_t * eps."""
    z0 = torch.as_tensor(z0, dtype=DTYPE)
    eps = torch.as_tensor(eps, dtype=DTYPE)
    if z0.shape != eps.shape:
        raise InputError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    alpha, sigma = schedule.alpha_sigma(t)
    return alpha * z0 + sigma * eps


def weight_one(t: float, schedule: DiffusionSchedule) -> float:
    return 1.0


def weight_sigma_sq(t: float, schedule: DiffusionSchedule) -> float:
    return schedule.alpha_sigma(t)[1] ** 2


# --------------------------------------------------------------------------
# latent codec
# --------------------------------------------------------------------------


@dataclass
class LatentCodec:
    """Mean pooling over factor x factor blocks; decode is nearest upsampling.

    ``adjoint`` is the exact transpose of ``encode`` (decode divided by the
    block size), used to route latent-space residuals back to pixels.
    """

    factor: int = 4

    def __post_init__(self):
        if self.factor < 1:
            raise ConfigError("pooling factor must be >= 1")

    def _check(self, image: Tensor) -> Tensor:
        image = torch.as_tensor(image, dtype=DTYPE)
        if image.ndim != 3:
            raise InputError("expected an (H, W, C) image")
        h, w = image.shape[:2]
        if h % self.factor or w % self.factor:
            raise InputError(f"image size {h}x{w} not divisible by factor {self.factor}")
        return image

    def encode(self, image) -> Tensor:
        img = self._check(image)
        h, w, c = img.shape
        f = self.factor
        return img.reshape(h // f, f, w // f, f, c).mean(dim=(1, 3))

    def decode(self, latent) -> Tensor:
        lat = torch.as_tensor(latent, dtype=DTYPE)
        if lat.ndim != 3:
            raise InputError("expected an (h, w, C) latent")
        return lat.repeat_interleave(self.factor, dim=0).repeat_interleave(self.factor, dim=1)

    def adjoint(self, latent_grad) -> Tensor:
        return self.decode(latent_grad) / float(self.factor * self.factor)


# --------------------------------------------------------------------------
# score models
# --------------------------------------------------------------------------


class ScoreModel:
    """Deterministic noise predictor: (z_t, condition token, mask, t) -> eps_hat."""

    def predict(self, z_t: Tensor, y, S, t: float) -> Tensor:
        raise NotImplementedError


class GaussianOracleScoreModel(ScoreModel):
    """Exact noise predictor for a per-condition Gaussian prior N(m(y, S), c^2 I).

    ``means`` maps a condition token to either a fixed latent tensor or a
    callable building the mean from the current condition mask; the posterior
    noise estimate is sigma*(z_t - alpha*m) / (alpha^2 c^2 + sigma^2).
    """

    def __init__(self, schedule: DiffusionSchedule, means: dict, scale: float):
        if scale < 0:
            raise ConfigError("scale must be >= 0")
        self.schedule = schedule
        self.means = dict(means)
        self.scale = float(scale)

    def mean_for(self, y, S) -> Tensor:
        try:
            mean = self.means[y]
        except KeyError:
            raise InputError(f"unknown condition token {y!r}") from None
        if callable(mean):
            mean = mean(S)
        return torch.as_tensor(mean, dtype=DTYPE)

    def predict(self, z_t: Tensor, y, S, t: float) -> Tensor:
        z_t = torch.as_tensor(z_t, dtype=DTYPE)
        alpha, sigma = self.schedule.alpha_sigma(t)
        mean = self.mean_for(y, S)
        if mean.shape != z_t.shape:
            raise InputError(f"condition mean {tuple(mean.shape)} does not match latent {tuple(z_t.shape)}")
        return sigma * (z_t - alpha * mean) / (alpha * alpha * self.scale**2 + sigma * sigma)


class PerfectDenoiser(ScoreModel):
    """Inverts the noising of a known clean latent: eps_hat = (z_t - alpha*z0)/sigma."""

    def __init__(self, schedule: DiffusionSchedule, clean: Tensor):
        self.schedule = schedule
        self.clean = torch.as_tensor(clean, dtype=DTYPE)

    def predict(self, z_t: Tensor, y, S, t: float) -> Tensor:
        z_t = torch.as_tensor(z_t, dtype=DTYPE)
        if self.clean.shape != z_t.shape:
            raise InputError("clean latent shape does not match z_t")
        alpha, sigma = self.schedule.alpha_sigma(t)
        return (z_t - alpha * self.clean) / sigma


class ConstantScoreModel(ScoreModel):
    """Always predicts a fixed tensor; the exact-cancellation test harness."""

    def __init__(self, eps_hat: Tensor):
        self.eps_hat = torch.as_tensor(eps_hat, dtype=DTYPE)

    def predict(self, z_t: Tensor, y, S, t: float) -> Tensor:
        return self.eps_hat


def mask_color_mean(codec: LatentCodec, palette):
    """Condition-mean builder: label mask -> pooled latent of its palette colors."""

    def build(mask) -> Tensor:
        if mask is None:
            raise InputError("this condition requires a mask")
        img = torch.as_tensor(labels_to_color(np.asarray(mask), palette), dtype=DTYPE)
        return codec.encode(img)

    return build


# --------------------------------------------------------------------------
# distillation gradients
# --------------------------------------------------------------------------


@dataclass
class SdsResult:
    grad: Tensor  # descent gradient in the input's space (latent for sds_grad)
    t: float
    noise: Tensor


@dataclass
class CdgtResult:
    image_grad: Tensor  # (H, W, C) descent gradient for the color render
    normal_grad: Tensor  # (H, W, C) descent gradient for the normal render
    mu: float
    t_image: float
    t_blend: float


def sds_grad(
    model: ScoreModel,
    z,
    y,
    S,
    rng: np.random.Generator,
    w_fn=None,
    *,
    schedule: DiffusionSchedule,
    t: float | None = None,
    noise: Tensor | None = None,
) -> SdsResult:
    """Single-sample score-distillation descent gradient w(t)(eps_hat - eps) wrt z.

    Draw order (one t, then one standard-normal field) is part of the contract:
    the two-branch variant reproduces it per branch on spawned child streams.
    The caller chains this latent-space gradient onto pixels/parameters through
    the codec adjoint and the renderer.
    """
    z = torch.as_tensor(z, dtype=DTYPE)
    if not bool(torch.isfinite(z).all()):
        raise InputError("latent contains non-finite values")
    if t is None:
        t = schedule.sample_t(rng)
    if noise is None:
        noise = torch.as_tensor(rng.standard_normal(tuple(z.shape)), dtype=DTYPE)
    else:
        noise = torch.as_tensor(noise, dtype=DTYPE)
    z_t = add_noise(z, noise, t, schedule)
    eps_hat = model.predict(z_t, y, S, t)
    w = 1.0 if w_fn is None else float(w_fn(t, schedule))
    return SdsResult(grad=w * (eps_hat - noise), t=float(t), noise=noise)


def cdgt_grad(
    model: ScoreModel,
    image,
    normal,
    S,
    y,
    rng: np.random.Generator,
    w_fn=None,
    *,
    codec: LatentCodec,
    schedule: DiffusionSchedule,
    mu: float | None = None,
    shared_sample: bool = False,
    symmetric_blend: bool = False,
) -> CdgtResult:
    """Two-branch distillation over a color render and a normal-map render.

    The image branch is plain single-branch distillation on enc(image).  The
    blend branch noises z_hat = mu*enc(image) + (1-mu)*enc(normal) and routes
    its residual to the normal render scaled by d(z_hat)/d(normal) = 1 - mu
    (``symmetric_blend`` additionally routes mu times it to the image).  Child
    rng streams are spawned *before* mu is drawn, so pinning ``mu`` leaves both
    branch streams unchanged: at mu = 0/1 the blend branch equals single-branch
    distillation on the pure normal/image latent bit for bit.
    """
    image = torch.as_tensor(image, dtype=DTYPE)
    normal = torch.as_tensor(normal, dtype=DTYPE)
    if image.shape != normal.shape:
        raise InputError(f"image {tuple(image.shape)} and normal {tuple(normal.shape)} must match")
    z_image = codec.encode(image)
    z_normal = codec.encode(normal)
    rng_image, rng_blend = rng.spawn(2)
    if mu is None:
        mu = float(rng.uniform(0.0, 1.0))
    elif not 0.0 <= mu <= 1.0:
        raise InputError(f"mu must be in [0, 1], got {mu}")

    image_branch = sds_grad(model, z_image, y, S, rng_image, w_fn, schedule=schedule)
    z_hat = mu * z_image + (1.0 - mu) * z_normal
    if shared_sample:
        blend_branch = sds_grad(
            model, z_hat, y, S, rng_blend, w_fn, schedule=schedule,
            t=image_branch.t, noise=image_branch.noise,
        )
    else:
        blend_branch = sds_grad(model, z_hat, y, S, rng_blend, w_fn, schedule=schedule)

    image_grad = codec.adjoint(image_branch.grad)
    normal_grad = (1.0 - mu) * codec.adjoint(blend_branch.grad)
    if symmetric_blend:
        image_grad = image_grad + mu * codec.adjoint(blend_branch.grad)
    return CdgtResult(
        image_grad=image_grad,
        normal_grad=normal_grad,
        mu=float(mu),
        t_image=image_branch.t,
        t_blend=blend_branch.t,
    )


def update_condition(state) -> np.ndarray:
    """Re-render the condition mask from the state's current training camera.

    Duck-typed over the edit state: needs ``fused_field``, ``train_camera``,
    ``params``, ``palette``, ``samples_per_ray``; stores the fresh mask on
    ``state.condition_mask`` and returns it.
    """
    out = render_scene(
        state.fused_field,
        state.train_camera,
        state.params,
        samples_per_ray=state.samples_per_ray,
        with_normals=False,
    )
    mask = render_mask(out, state.palette)
    state.condition_mask = mask
    return mask


# --------------------------------------------------------------------------
# out-of-process score models: length-prefixed binary frames
# --------------------------------------------------------------------------

_U32 = struct.Struct("<I")


def _read_exact(stream, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def write_frame(stream, header: dict, *payloads: bytes) -> None:
    """[u32 frame length][u32 header length][header JSON][payload bytes...]."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _U32.pack(len(head)) + head + b"".join(payloads)
    stream.write(_U32.pack(len(body)) + body)
    stream.flush()


def read_frame(stream) -> tuple[dict, bytes] | None:
    """Inverse of write_frame; None on clean EOF."""
    raw = _read_exact(stream, _U32.size)
    if raw is None:
        return None
    body = _read_exact(stream, _U32.unpack(raw)[0])
    if body is None:
        raise InputError("truncated frame")
    head_len = _U32.unpack(body[: _U32.size])[0]
    header = json.loads(body[_U32.size : _U32.size + head_len].decode("utf-8"))
    return header, body[_U32.size + head_len :]


def _tensor_bytes(t: Tensor) -> bytes:
    return t.detach().to(DTYPE).numpy().astype("<f8").tobytes()


def _bytes_tensor(raw: bytes, shape) -> Tensor:
    arr = np.frombuffer(raw, dtype="<f8").reshape(tuple(shape)).copy()
    return torch.from_numpy(arr)


def send_predict_request(stream, z_t: Tensor, y, S, t: float, palette=None) -> None:
    z_bytes = _tensor_bytes(torch.as_tensor(z_t, dtype=DTYPE))
    if S is None:
        mask_bytes = b""
    else:
        mask = np.asarray(S)
        if palette is None:
            palette = [(0, 0, 0)] * (int(mask.max(initial=0)) + 1)
        buf = io.BytesIO()
        save_mask_png(buf, mask, palette)
        mask_bytes = buf.getvalue()
    header = {
        "op": "predict",
        "t": float(t),
        "y": y,
        "shape": list(torch.as_tensor(z_t).shape),
        "latent_bytes": len(z_bytes),
        "mask_bytes": len(mask_bytes),
    }
    write_frame(stream, header, z_bytes, mask_bytes)


def serve_score_model(model: ScoreModel, rin, rout) -> int:
    """Answer predict frames on (rin, rout) until EOF or a close frame.

    Returns the number of predictions served.
    """
    served = 0
    while True:
        frame = read_frame(rin)
        if frame is None:
            return served
        header, payload = frame
        op = header.get("op")
        if op == "close":
            write_frame(rout, {"op": "closed"})
            return served
        if op != "predict":
            write_frame(rout, {"op": "error", "message": f"unknown op {op!r}"})
            continue
        z_t = _bytes_tensor(payload[: header["latent_bytes"]], header["shape"])
        mask = None
        if header["mask_bytes"]:
            mask = load_mask_png(io.BytesIO(payload[header["latent_bytes"] :]))
        eps_hat = model.predict(z_t, header["y"], mask, header["t"])
        write_frame(rout, {"op": "epsilon", "shape": list(eps_hat.shape)}, _tensor_bytes(eps_hat))
        served += 1


class RemoteScoreModel(ScoreModel):
    """Client side of the frame protocol; drop-in ScoreModel over a stream pair."""

    def __init__(self, rin, rout, palette=None):
        self.rin = rin
        self.rout = rout
        self.palette = palette

    def predict(self, z_t: Tensor, y, S, t: float) -> Tensor:
        send_predict_request(self.rout, z_t, y, S, t, self.palette)
        frame = read_frame(self.rin)
        if frame is None:
            raise InputError("score-model stream closed mid-request")
        header, payload = frame
        if header.get("op") != "epsilon":
            raise InputError(f"score-model error: {header.get('message', header)}")
        return _bytes_tensor(payload, header["shape"])

    def close(self) -> None:
        write_frame(self.rout, {"op": "close"})
        read_frame(self.rin)
