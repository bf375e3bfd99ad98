"""Volumetric renderer for a neural field.

Points inside a bounding sphere are encoded with an integrated positional
encoding, fed to a residual MLP that predicts density and albedo, shaded with
a Lambertian model using normals from the density gradient, and alpha
composited over a background predicted from the ray direction.

Normals need ``d tau / d mu`` inside the reverse-mode graph. Instead of
nesting reverse mode, the field carries forward-mode tangents (one per input
axis) built from ordinary graph ops, so gradients of the normals w.r.t. the
weights come out of the same single backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import ndgrad as nd
from . import nn
from .diffusion import SingularityError

BLOB_SCALE = 5.0
BLOB_WIDTH = 0.2
SPHERE_RADIUS = 1.4
MODES = ("albedo", "shaded", "textureless")
NORMAL_EPS = 1e-8
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class IpeConfig:
    """Frequency count and the linear anneal of the encoding scale ``lambda_sigma``."""

    L: int = 8
    lambda_sigma_start: float = 5e-2
    lambda_sigma_end: float = 2e-3
    anneal_steps: int = 5000

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("IPE needs L >= 1")
        if not (self.lambda_sigma_start >= self.lambda_sigma_end > 0):
            raise ValueError("need lambda_sigma_start >= lambda_sigma_end > 0")
        if self.anneal_steps < 0:
            raise ValueError("anneal_steps must be >= 0")

    def lambda_sigma(self, step: int) -> float:
        f = 1.0 if self.anneal_steps == 0 else min(max(step, 0) / self.anneal_steps, 1.0)
        return self.lambda_sigma_start * (1.0 - f) + self.lambda_sigma_end * f


@dataclass(frozen=True)
class FieldConfig:
    width: int = 128
    blocks: int = 5
    L: int = 8
    bg_width: int = 64
    bg_layers: int = 3
    bg_freqs: int = 4
    blob_scale: float = BLOB_SCALE
    blob_width: float = BLOB_WIDTH


@dataclass(frozen=True)
class RenderConfig:
    samples: int = 64
    radius: float = SPHERE_RADIUS
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    ipe: IpeConfig = dc_field(default_factory=IpeConfig)
    whiten_background: bool = False     # textureless renders keep the learned background by default


@dataclass(frozen=True)
class LightSpec:
    position: np.ndarray
    diffuse: tuple = (0.9, 0.9, 0.9)
    ambient: tuple = (0.1, 0.1, 0.1)

    def __post_init__(self):
        for c in (self.diffuse, self.ambient):
            if np.any(np.asarray(c) < 0) or np.any(np.asarray(c) > 1):
                raise ValueError(f"light colours must lie in [0, 1], got {c}")


# --------------------------------------------------------------------------
# encoding

def _ipe_parts(mu: np.ndarray, lambda_sigma: float, L: int):
    scales = 2.0 ** np.arange(L)
    x = mu[..., None, :] * scales[:, None]                    # (..., L, 3)
    damp = np.exp(-0.5 * (scales * lambda_sigma) ** 2)[:, None]
    return scales, x, damp


def integrated_pos_enc(mu, lambda_sigma: float, L: int = 8) -> np.ndarray:
    """Expected sin/cos features of ``N(mu, lambda_sigma^2 I)``; shape ``(..., 6L)``.

    Feature layout is ``[sin | cos]``, each ``(L, 3)`` frequency-major.
    """
    if lambda_sigma < 0:
        raise ValueError("lambda_sigma must be >= 0")
    mu = np.asarray(mu, np.float64)
    _, x, damp = _ipe_parts(mu, lambda_sigma, L)
    return np.stack([np.sin(x) * damp, np.cos(x) * damp], axis=-3).reshape(*mu.shape[:-1], 6 * L)


def ipe_jacobian(mu, lambda_sigma: float, L: int = 8) -> np.ndarray:
    """``d features / d mu`` laid out as three tangents, shape ``(3, ..., 6L)``."""
    mu = np.asarray(mu, np.float64)
    scales, x, damp = _ipe_parts(mu, lambda_sigma, L)
    lead = mu.shape[:-1]
    jac = np.zeros((3,) + lead + (2, L, 3))
    for d in range(3):
        jac[d, ..., 0, :, d] = scales * np.cos(x[..., :, d]) * damp[:, 0]
        jac[d, ..., 1, :, d] = -scales * np.sin(x[..., :, d]) * damp[:, 0]
    return jac.reshape((3,) + lead + (6 * L,))


# --------------------------------------------------------------------------
# parameters

def init_field_params(cfg: FieldConfig, rng: np.random.Generator) -> dict:
    p: dict = {}
    w = cfg.width
    nn.add_linear(p, rng, "field.in", 6 * cfg.L, w)
    for i in range(cfg.blocks):
        p[f"field.b{i}.ln.g"] = np.ones(w, np.float32)
        p[f"field.b{i}.ln.b"] = np.zeros(w, np.float32)
        nn.add_linear(p, rng, f"field.b{i}.fc1", w, w)
        nn.add_linear(p, rng, f"field.b{i}.fc2", w, w, gain=0.5)
    p["field.out.ln.g"] = np.ones(w, np.float32)
    p["field.out.ln.b"] = np.zeros(w, np.float32)
    nn.add_linear(p, rng, "field.density", w, 1, gain=0.1)
    nn.add_linear(p, rng, "field.albedo", w, 3, gain=0.5)
    dims = [3 + 6 * cfg.bg_freqs] + [cfg.bg_width] * (cfg.bg_layers - 1) + [3]
    for i in range(cfg.bg_layers):
        nn.add_linear(p, rng, f"bg.l{i}", dims[i], dims[i + 1], gain=0.5 if i == cfg.bg_layers - 1 else 1.0)
    return p


def zero_field_params(cfg: FieldConfig) -> dict:
    """All-zero weights: density ``exp(0) + blob`` and albedo ``0.5`` everywhere."""
    p = init_field_params(cfg, np.random.default_rng(0))
    return {k: (np.ones_like(v) if k.endswith("ln.g") else np.zeros_like(v)) for k, v in p.items()}


# --------------------------------------------------------------------------
# field

@dataclass
class FieldSample:
    tau: nd.Tensor          # (N,)
    rho: nd.Tensor          # (N, 3)
    grad_tau: nd.Tensor | None = None   # (N, 3)


def layernorm_dual(h, th, eps: float = 1e-6) -> nd.Tensor:
    """Layer norm of ``h`` (N, W) together with its tangents ``th`` (k, N, W).

    Returns one stacked tensor of shape ``(1 + k, N, W)``: the normalised
    value followed by the pushed-forward tangents.
    """
    h, th = nd._t(h), nd._t(th)
    hv, tv = h.value, th.value
    width = hv.shape[-1]
    c = hv - hv.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    y = c * inv
    tc = tv - tv.mean(axis=-1, keepdims=True)
    q = (tc * y).mean(axis=-1, keepdims=True)
    ty = (tc - y * q) * inv

    def vjp(ct):
        gy, gty = ct[0], ct[1:]
        r = (y * gty).mean(axis=-1, keepdims=True)
        g_tc = inv * (gty - y * r)
        g_y = gy - inv * np.sum(q * gty + tc * r, axis=0)
        g_inv = np.sum(gty * ty, axis=(0, -1))[..., None] / inv
        g_c = inv * g_y - inv ** 3 * c / width * (g_inv + np.sum(g_y * c, axis=-1, keepdims=True))
        return (g_c - g_c.mean(axis=-1, keepdims=True),
                g_tc - g_tc.mean(axis=-1, keepdims=True))

    return nd.custom("layernorm_dual", [h, th], np.concatenate([y[None], ty], axis=0), vjp)


def _layernorm_dual(h, th):
    if th is None:
        return nd.layernorm(h), None
    both = layernorm_dual(h, th)
    return nd.getitem(both, 0), nd.getitem(both, slice(1, None))


def swish_tangent(a, ta) -> nd.Tensor:
    """Tangent ``swish'(a) * ta`` for a stack of tangents ``ta`` of shape ``(k, *a.shape)``."""
    a, ta = nd._t(a), nd._t(ta)
    av, tv = a.value, ta.value
    s = nd._sigmoid_np(av)
    d1 = s * (1.0 + av * (1.0 - s))

    def vjp(ct):
        d2 = s * (1.0 - s) * (2.0 + av * (1.0 - 2.0 * s))
        return (ct * tv * d2).sum(axis=0), ct * d1

    return nd.custom("swish_tangent", [a, ta], d1 * tv, vjp)


def _trunk(p: dict, feats, tangents, cfg: FieldConfig):
    h = nn.linear(feats, p, "field.in")
    th = nd.matmul(tangents, p["field.in.w"]) if tangents is not None else None
    for i in range(cfg.blocks):
        pre = f"field.b{i}"
        y, ty = _layernorm_dual(h, th)
        u = nd.add(nd.mul(y, p[pre + ".ln.g"]), p[pre + ".ln.b"])
        a = nn.linear(u, p, pre + ".fc1")
        s = nd.swish(a)
        r = nn.linear(s, p, pre + ".fc2")
        h = nd.add(h, r)
        if th is not None:
            ta = nd.matmul(nd.mul(ty, p[pre + ".ln.g"]), p[pre + ".fc1.w"])
            th = nd.add(th, nd.matmul(swish_tangent(a, ta), p[pre + ".fc2.w"]))
    y, ty = _layernorm_dual(h, th)
    u = nd.add(nd.mul(y, p["field.out.ln.g"]), p["field.out.ln.b"])
    out = nd.swish(u)
    tout = swish_tangent(u, nd.mul(ty, p["field.out.ln.g"])) if th is not None else None
    return out, tout


def blob_density(mu: np.ndarray, scale: float = BLOB_SCALE, width: float = BLOB_WIDTH) -> np.ndarray:
    return scale * np.exp(-np.sum(mu * mu, axis=-1) / (2.0 * width * width))


def field_eval(params: dict, mu, lambda_sigma: float, cfg: FieldConfig = FieldConfig(),
               with_grad: bool = False) -> FieldSample:
    """Density ``exp(raw) + blob`` and sigmoid albedo at points ``mu`` (N, 3).

    With ``with_grad`` also returns ``d tau / d mu`` as a graph tensor.
    """
    p = _tensors(params)
    mu = np.asarray(mu, np.float64).reshape(-1, 3)
    dt = nd.get_default_dtype()
    feats = nd.Tensor(integrated_pos_enc(mu, lambda_sigma, cfg.L).astype(dt))
    tang = nd.Tensor(ipe_jacobian(mu, lambda_sigma, cfg.L).astype(dt)) if with_grad else None
    hid, thid = _trunk(p, feats, tang, cfg)
    e_raw = nd.exp(nn.linear(hid, p, "field.density"))          # (N, 1)
    blob = blob_density(mu, cfg.blob_scale, cfg.blob_width)
    tau = nd.add(nd.reshape(e_raw, (-1,)), blob.astype(dt))
    rho = nd.sigmoid(nn.linear(hid, p, "field.albedo"))
    grad = None
    if with_grad:
        t_raw = nd.matmul(thid, p["field.density.w"])             # (3, N, 1)
        g_mlp = nd.transpose(nd.reshape(nd.mul(t_raw, e_raw), (3, -1)))
        g_blob = (-mu / cfg.blob_width ** 2 * blob[:, None]).astype(dt)
        grad = nd.add(g_mlp, g_blob)
    return FieldSample(tau, rho, grad)


def normals_from_grad(grad: nd.Tensor):
    """``-grad / |grad|`` per row; rows with ``|grad| < 1e-8`` get unit z and are flagged."""
    gn = nd.l2norm(grad, axis=-1, keepdims=True)
    fallback = gn.value[:, 0] < NORMAL_EPS
    n = nd.neg(nd.div(grad, nd.maximum(gn, NORMAL_EPS)))
    if fallback.any():
        keep = (~fallback)[:, None].astype(n.dtype)
        n = nd.add(nd.mul(n, keep), (fallback[:, None] * FALLBACK_NORMAL).astype(n.dtype))
    return n, fallback


def normals(params: dict, mu, lambda_sigma: float, cfg: FieldConfig = FieldConfig()):
    fs = field_eval(params, mu, lambda_sigma, cfg, with_grad=True)
    return normals_from_grad(fs.grad_tau)


def background_eval(params: dict, dirs: np.ndarray, cfg: FieldConfig = FieldConfig()) -> nd.Tensor:
    p = _tensors(params)
    x = nd.Tensor(nn.sinusoidal(np.asarray(dirs, np.float64), cfg.bg_freqs).astype(nd.get_default_dtype()))
    for i in range(cfg.bg_layers):
        x = nn.linear(x, p, f"bg.l{i}")
        if i < cfg.bg_layers - 1:
            x = nd.swish(x)
    return nd.sigmoid(x)


def _tensors(params: dict) -> dict:
    return params if all(isinstance(v, nd.Tensor) for v in params.values()) else nn.as_tensors(params)


# --------------------------------------------------------------------------
# shading and compositing

def _lambert(rho, n, ldir: np.ndarray, diffuse: np.ndarray, ambient: np.ndarray) -> nd.Tensor:
    rho, n = nd._t(rho), nd._t(n)
    rv = rho.value
    cosang = np.sum(n.value * ldir, axis=-1)
    lit = (cosang > 0).astype(rv.dtype)
    light = diffuse * (cosang * lit)[:, None] + ambient

    def vjp(ct):
        g_n = (np.sum(ct * rv * diffuse, axis=-1) * lit)[:, None] * ldir
        return ct * light, g_n.astype(rv.dtype)

    return nd.custom("shade", [rho, n], (rv * light).astype(rv.dtype), vjp)


def shade(rho, n, mu, light: LightSpec, mode: str) -> nd.Tensor:
    """Lambertian colour ``rho * (l_rho * max(0, n . l_hat) + l_a)``.

    ``albedo`` returns ``rho`` untouched; ``textureless`` uses white albedo.
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    rho = nd._t(rho)
    if mode == "albedo":
        return rho
    to_l = np.asarray(light.position, np.float64) - np.asarray(mu, np.float64).reshape(-1, 3)
    dist = np.linalg.norm(to_l, axis=-1, keepdims=True)
    if np.any(dist < 1e-9):
        raise SingularityError("light position coincides with a shading point")
    dt = rho.dtype
    ldir = (to_l / dist).astype(dt)
    if mode == "textureless":
        rho = nd.Tensor(np.ones(rho.shape, dt))
    return _lambert(rho, n, ldir, np.asarray(light.diffuse, dt), np.asarray(light.ambient, dt))


def compositing_weights(tau, deltas) -> nd.Tensor:
    """``w_i = alpha_i prod_{j<i} (1 - alpha_j)`` with ``alpha = 1 - exp(-tau delta)``; rows are rays."""
    tau = nd._t(tau)
    tv = tau.value
    dv = np.asarray(deltas, tv.dtype)
    if np.any(tv < 0) or np.any(dv < 0):
        raise ValueError("compositing needs non-negative densities and interval lengths")
    x = tv * dv
    csum = np.cumsum(x, axis=-1)
    t_next = np.exp(-csum)                      # transmittance past sample i
    t_here = np.exp(-(csum - x))
    w = -np.expm1(-x) * t_here

    def vjp(g):
        gw = g * w
        tail = np.cumsum(gw[..., ::-1], axis=-1)[..., ::-1] - gw     # sum over i > k
        return ((g * t_next - tail) * dv,)

    return nd.custom("composite", [tau], w, vjp)


@dataclass
class Composite:
    rgb: nd.Tensor
    weights: nd.Tensor
    opacity: nd.Tensor


def composite(taus, colors, deltas, background) -> Composite:
    """Pixel colour ``sum_i w_i c_i + (1 - sum_i w_i) * background`` per ray."""
    w = compositing_weights(taus, deltas)
    acc = nd.sum(w, axis=-1)
    w3 = nd.reshape(w, w.shape + (1,))
    rgb = nd.add(nd.sum(nd.mul(w3, colors), axis=-2),
                 nd.mul(nd.reshape(nd.sub(1.0, acc), acc.shape + (1,)), background))
    return Composite(rgb, w, acc)


# --------------------------------------------------------------------------
# cameras and rays

@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation`` columns are the world-space right, up and backward axes."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def pose(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m


def look_at(position, target, up, focal: float, width: int, height: int | None = None) -> Camera:
    position = np.asarray(position, np.float64)
    fwd = np.asarray(target, np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, np.float64))
    if np.linalg.norm(right) < 1e-6:        # looking along the up vector
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    rot = np.stack([right, true_up, -fwd], axis=1)
    return Camera(position, rot, float(focal), int(width), int(height if height is not None else width))


def camera_rays(cam: Camera):
    """Per-pixel origins and unit directions, row-major, shape ``(H*W, 3)``."""
    j, i = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    x = (j + 0.5 - cam.width / 2.0) / cam.focal
    y = -(i + 0.5 - cam.height / 2.0) / cam.focal
    d = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3) @ cam.rotation.T
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(cam.position, d.shape).copy(), d


def ray_sphere(origins, dirs, radius: float = SPHERE_RADIUS):
    """Near/far distances of each ray's chord through the sphere, and a hit mask."""
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - sq, 0.0)
    far = -b + sq
    hit = (disc > 0) & (far > near)
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


@dataclass
class RaySet:
    origins: np.ndarray    # (R, 3)
    dirs: np.ndarray       # (R, 3)
    edges: np.ndarray      # (R, S+1) interval endpoints along each ray
    hit: np.ndarray        # (R,)

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.edges[:, 1:] + self.edges[:, :-1])

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.edges, axis=-1)

    @property
    def points(self) -> np.ndarray:
        return self.origins[:, None, :] + self.dirs[:, None, :] * self.mids[..., None]


def stratified_edges(near, far, n_samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Endpoints ``near = d_0 < ... < d_S = far``; interior ones jittered within their strata.

    ``rng=None`` places them evenly.
    """
    near = np.asarray(near, np.float64)
    far = np.asarray(far, np.float64)
    k = np.arange(1, n_samples)
    u = 0.5 if rng is None else rng.uniform(size=near.shape + (n_samples - 1,))
    frac = (k + u - 0.5) / n_samples
    inner = near[..., None] + (far - near)[..., None] * frac
    return np.concatenate([near[..., None], inner, far[..., None]], axis=-1)


def make_rays(cam: Camera, n_samples: int, rng: np.random.Generator | None = None,
              radius: float = SPHERE_RADIUS) -> RaySet:
    o, d = camera_rays(cam)
    near, far, hit = ray_sphere(o, d, radius)
    return RaySet(o, d, stratified_edges(near, far, n_samples, rng), hit)


# --------------------------------------------------------------------------
# rendering

@dataclass
class RenderOutput:
    rgb: nd.Tensor                  # (H, W, 3)
    opacity: nd.Tensor              # (H*W,)
    weights: nd.Tensor              # (R_hit, S)
    normals: nd.Tensor | None       # (R_hit, S, 3)
    fallback: np.ndarray | None     # (R_hit, S) rows whose normal is the fallback
    view_dirs: np.ndarray           # (R_hit, 3)
    hit: np.ndarray                 # (H*W,)


FieldFn = Callable[[np.ndarray, bool], FieldSample]
BackgroundFn = Callable[[np.ndarray], nd.Tensor]


def render_field(field_fn: FieldFn, background_fn: BackgroundFn, camera: Camera, light: LightSpec | None,
                 mode: str, samples: int = 64, radius: float = SPHERE_RADIUS,
                 rng: np.random.Generator | None = None, need_normals: bool | None = None,
                 whiten_background: bool = False) -> RenderOutput:
    """Render any field given as ``field_fn(points, with_grad) -> FieldSample``."""
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    if need_normals is None:
        need_normals = mode != "albedo"
    rays = make_rays(camera, samples, rng, radius)
    hit = rays.hit
    hit_idx = np.flatnonzero(hit)
    miss_idx = np.flatnonzero(~hit)
    pts = rays.points[hit_idx].reshape(-1, 3)
    fs = field_fn(pts, need_normals)
    n = fallback = None
    if need_normals:
        n, fallback = normals_from_grad(fs.grad_tau)
    colors = shade(fs.rho, n, pts, light, mode) if mode != "albedo" else fs.rho
    rh = len(hit_idx)
    bg = background_fn(rays.dirs)
    if mode == "textureless" and whiten_background:
        bg = nd.Tensor(np.ones(bg.shape, bg.dtype))
    comp = composite(nd.reshape(fs.tau, (rh, samples)), nd.reshape(colors, (rh, samples, 3)),
                     rays.deltas[hit_idx], nd.getitem(bg, hit_idx))
    if len(miss_idx):
        order = np.argsort(np.concatenate([hit_idx, miss_idx]), kind="stable")
        rgb = nd.getitem(nd.concat([comp.rgb, nd.getitem(bg, miss_idx)], axis=0), order)
        acc = nd.getitem(nd.concat([comp.opacity, np.zeros(len(miss_idx), comp.opacity.dtype)]), order)
    else:
        rgb, acc = comp.rgb, comp.opacity
    return RenderOutput(
        rgb=nd.reshape(rgb, (camera.height, camera.width, 3)),
        opacity=acc,
        weights=comp.weights,
        normals=None if n is None else nd.reshape(n, (rh, samples, 3)),
        fallback=None if fallback is None else fallback.reshape(rh, samples),
        view_dirs=rays.dirs[hit_idx],
        hit=hit,
    )


def render(params: dict, camera: Camera, light: LightSpec | None, mode: str, cfg: RenderConfig = RenderConfig(),
           step: int = 0, rng: np.random.Generator | None = None, need_normals: bool | None = None) -> RenderOutput:
    """Render the neural field at training step ``step`` (which sets the encoding scale)."""
    p = _tensors(params)
    lam = cfg.ipe.lambda_sigma(step)
    return render_field(
        lambda pts, grad: field_eval(p, pts, lam, cfg.field, with_grad=grad),
        lambda dirs: background_eval(p, dirs, cfg.field),
        camera, light, mode, cfg.samples, cfg.radius, rng, need_normals, cfg.whiten_background,
    )


def normal_image(out: RenderOutput) -> np.ndarray:
    """Opacity-weighted normals per pixel mapped to RGB ``(n + 1) / 2`` (misses are 0.5 grey)."""
    if out.normals is None:
        raise ValueError("render was run without normals")
    h, w = out.rgb.shape[:2]
    wn = np.sum(out.weights.value[..., None] * out.normals.value, axis=1)
    img = np.zeros((h * w, 3), wn.dtype)
    img[out.hit] = wn
    return ((img + 1.0) * 0.5).reshape(h, w, 3)


# --------------------------------------------------------------------------
# regularizers

def orientation_loss(weights, normals, view_dirs, fallback: np.ndarray | None = None) -> nd.Tensor:
    """Mean over rays of ``sum_i stop(w_i) max(0, n_i . v)^2``; fallback normals are skipped."""
    w = nd.stop_gradient(weights).value
    if fallback is not None:
        w = w * (~fallback)
    v = np.asarray(view_dirs, nd._t(normals).dtype)[:, None, :]
    facing = nd.maximum(nd.sum(nd.mul(normals, v), axis=-1), 0.0)
    per_ray = nd.sum(nd.mul(nd.mul(facing, facing), w.astype(facing.dtype)), axis=-1)
    return nd.mean(per_ray)


def opacity_loss(weights) -> nd.Tensor:
    """Mean over rays of ``sqrt((sum_i w_i)^2 + 0.01)``."""
    acc = nd.sum(weights, axis=-1)
    return nd.mean(nd.sqrt(nd.add(nd.mul(acc, acc), 0.01)))
