"""Scene optimization: random cameras and lights, view-dependent conditioning,
render-mode scheduling, and SDS updates of the neural field."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndgrad as nd
from . import nn
from . import renderer as rd
from .diffusion import VIEW_TAGS, Conditioning, VocabularyError
from .sds import SdsConfig, sds_surrogate, weight

ELEVATION_RANGE = (-10.0, 90.0)
DISTANCE_RANGE = (1.0, 1.5)
FOCAL_RANGE = (0.7, 1.35)
LIGHT_NORM_RANGE = (0.8, 1.5)
POSITION_JITTER = 0.1
LOOKAT_VARIANCE = 0.2
UP_VARIANCE = 0.02
OVERHEAD_ELEVATION = 60.0
VIEW_CENTERS = {"front view": 0.0, "side view": 90.0, "back view": 180.0}

ALBEDO_LIGHT = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))          # (diffuse, ambient)
SHADED_LIGHT = ((0.9, 0.9, 0.9), (0.1, 0.1, 0.1))


class TrainingDiverged(FloatingPointError):
    """Non-finite gradient; ``snapshot`` holds what the step saw."""

    def __init__(self, msg: str, snapshot: dict):
        super().__init__(msg)
        self.snapshot = snapshot


# --------------------------------------------------------------------------
# cameras and lights

@dataclass(frozen=True)
class CameraSample:
    elevation: float        # degrees
    azimuth: float          # degrees in [0, 360)
    distance: float
    focal_mult: float
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    camera: rd.Camera

    @property
    def pose(self) -> np.ndarray:
        return self.camera.pose()


def spherical_position(elevation: float, azimuth: float, distance: float) -> np.ndarray:
    """z-up; azimuth 0 looks at the object's front from +x."""
    e, a = np.radians(elevation), np.radians(azimuth)
    return distance * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])


def sample_elevation(rng: np.random.Generator) -> float:
    """Even mixture of uniform-in-angle and uniform-in-area over the elevation band."""
    lo, hi = ELEVATION_RANGE
    use_angle = rng.uniform() < 0.5
    u = rng.uniform()
    if use_angle:
        return lo + (hi - lo) * u
    s_lo, s_hi = np.sin(np.radians(lo)), np.sin(np.radians(hi))
    return float(np.clip(np.degrees(np.arcsin(s_lo + (s_hi - s_lo) * u)), lo, hi))


def sample_camera(rng: np.random.Generator, width: int = 64, height: int | None = None) -> CameraSample:
    elev = sample_elevation(rng)
    azim = float(rng.uniform(0.0, 360.0)) % 360.0
    dist = float(rng.uniform(*DISTANCE_RANGE))
    fmul = float(rng.uniform(*FOCAL_RANGE))
    pos = spherical_position(elev, azim, dist) + rng.uniform(-POSITION_JITTER, POSITION_JITTER, 3)
    target = rng.normal(0.0, np.sqrt(LOOKAT_VARIANCE), 3)
    up = np.array([0.0, 0.0, 1.0]) + rng.normal(0.0, np.sqrt(UP_VARIANCE), 3)
    cam = rd.look_at(pos, target, up, fmul * width, width, height)
    return CameraSample(elev, azim, dist, fmul, pos, target, up, cam)


def fixed_camera(elevation: float, azimuth: float, distance: float = 1.25, width: int = 64,
                 focal_mult: float = 1.0) -> CameraSample:
    """Deterministic camera looking at the origin (evaluation and turntables)."""
    pos = spherical_position(elevation, azimuth, distance)
    up = np.array([0.0, 0.0, 1.0])
    cam = rd.look_at(pos, np.zeros(3), up, focal_mult * width, width)
    return CameraSample(elevation, azimuth % 360.0, distance, focal_mult, pos, np.zeros(3), up, cam)


def sample_light(camera: CameraSample, rng: np.random.Generator, zero_variance: bool = False) -> np.ndarray:
    """Light position: direction ~ N(camera position, I) normalised, norm ~ U(0.8, 1.5)."""
    noise = rng.standard_normal(3)
    d = camera.position + (0.0 if zero_variance else noise)
    d = d / np.linalg.norm(d)
    return d * rng.uniform(*LIGHT_NORM_RANGE)


# --------------------------------------------------------------------------
# conditioning and render modes

def _ang_dist(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def view_tag(elevation: float, azimuth: float) -> str:
    if elevation > OVERHEAD_ELEVATION:
        return "overhead view"
    # sides at +-90 share a tag, so compare against both centres
    centers = [("front view", 0.0), ("side view", 90.0), ("back view", 180.0), ("side view", 270.0)]
    return min(centers, key=lambda c: _ang_dist(azimuth, c[1]))[0]


def view_blend(elevation: float, azimuth: float) -> tuple[tuple[str, float], ...]:
    """Linear interpolation between the two neighbouring azimuth tags."""
    if elevation > OVERHEAD_ELEVATION:
        return (("overhead view", 1.0),)
    a = azimuth % 360.0
    k = int(a // 90.0)
    frac = (a - 90.0 * k) / 90.0
    names = ["front view", "side view", "back view", "side view", "front view"]
    lo, hi = names[k], names[k + 1]
    if lo == hi:
        return ((lo, 1.0),)
    return tuple((n, w) for n, w in ((lo, 1.0 - frac), (hi, frac)) if w > 0)


def resolve_view_prompt(base_tag: str, camera: CameraSample, vocab=None, blend: bool = False) -> Conditioning:
    if vocab is not None and base_tag not in vocab.tags:
        raise VocabularyError(f"unknown tag {base_tag!r}; vocabulary is {list(vocab.tags)}")
    if blend:
        return Conditioning(base_tag, view_blend(camera.elevation, camera.azimuth))
    return Conditioning(base_tag).with_view(view_tag(camera.elevation, camera.azimuth))


@dataclass(frozen=True)
class ShadingConfig:
    warmup_steps: int = 1000
    p_shaded: float = 0.75
    p_textureless: float = 0.5
    allow_shading: bool = True
    allow_textureless: bool = True
    force_mode: str | None = None


def select_render_mode(step: int, rng: np.random.Generator, cfg: ShadingConfig = ShadingConfig()):
    """Returns ``(mode, diffuse, ambient)``. Both uniforms are always drawn."""
    u_shade, u_tex = rng.uniform(), rng.uniform()
    if cfg.force_mode is not None:
        mode = cfg.force_mode
    elif step < cfg.warmup_steps or not cfg.allow_shading or u_shade >= cfg.p_shaded:
        mode = "albedo"
    elif cfg.allow_textureless and u_tex < cfg.p_textureless:
        mode = "textureless"
    else:
        mode = "shaded"
    diffuse, ambient = ALBEDO_LIGHT if mode == "albedo" else SHADED_LIGHT
    return mode, diffuse, ambient


# --------------------------------------------------------------------------
# schedules

def linear_anneal(step: int, start: float, end: float, steps: int) -> float:
    f = 1.0 if steps <= 0 else min(max(step, 0) / steps, 1.0)
    return start * (1.0 - f) + end * f


def lr_schedule(step: int, total: int = 15000, warmup: int = 3000, start: float = 1e-9,
                peak: float = 1e-4, end: float = 1e-6) -> float:
    """Linear warmup ``start -> peak``, then cosine decay reaching ``end`` at step ``total - 1``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= warmup:
        return linear_anneal(step, start, peak, warmup)
    span = max(total - 1 - warmup, 1)
    c = 0.5 * (1.0 + np.cos(np.pi * min(step - warmup, span) / span))
    return float(peak * c + end * (1.0 - c))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 15000
    resolution: int = 64
    omega: float = 100.0
    t_min: float = 0.02
    t_max: float = 0.98
    weight_kind: str = "sigma_sq"
    orient_start: float = 1e-4
    orient_end: float = 1e-2
    orient_anneal_steps: int = 5000
    orient_in_albedo: bool = False
    opacity_weight: float = 1e-3
    shading: ShadingConfig = field(default_factory=ShadingConfig)
    lr_start: float = 1e-9
    lr_peak: float = 1e-4
    lr_end: float = 1e-6
    lr_warmup: int = 3000
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    views: int = 1
    threads: int = 1
    view_prompts: bool = True
    view_blend: bool = False
    light_zero_variance: bool = False
    base_tag: str | None = None
    render: rd.RenderConfig = field(default_factory=rd.RenderConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("orient_start", "orient_end", "opacity_weight", "omega"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.orient_end < self.orient_start:
            raise ValueError("orientation weight schedule must be non-decreasing")
        if not (self.lr_start <= self.lr_peak and self.lr_end <= self.lr_peak):
            raise ValueError("learning-rate schedule must peak at lr_peak")
        if self.views < 1 or self.iterations < 1:
            raise ValueError("views and iterations must be >= 1")

    def sds_config(self) -> SdsConfig:
        return SdsConfig(omega=self.omega, weight_kind=self.weight_kind, t_min=self.t_min, t_max=self.t_max)

    def lr(self, step: int) -> float:
        return lr_schedule(step, self.iterations, self.lr_warmup, self.lr_start, self.lr_peak, self.lr_end)

    def orientation_weight(self, step: int) -> float:
        return linear_anneal(step, self.orient_start, self.orient_end, self.orient_anneal_steps)

    def lambda_sigma(self, step: int) -> float:
        return self.render.ipe.lambda_sigma(step)

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Small preset for a single workstation: 32x32 renders, 2000 iterations,
        a narrower field, and every step-count schedule scaled by 2000/15000."""
        scale = 2000 / 15000
        render = rd.RenderConfig(
            samples=24,
            field=rd.FieldConfig(width=32, blocks=2, bg_width=32),
            ipe=rd.IpeConfig(anneal_steps=round(5000 * scale)),
        )
        base = dict(
            iterations=2000, resolution=32, lr_warmup=round(3000 * scale), lr_peak=1e-2, lr_end=1e-4,
            orient_anneal_steps=round(5000 * scale), opacity_weight=5e-3,
            shading=ShadingConfig(warmup_steps=round(1000 * scale)), render=render,
        )
        base.update(overrides)
        return cls(**base)


# --------------------------------------------------------------------------
# training state and step

@dataclass
class SceneState:
    params: dict
    opt: nn.Adam
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, seed: int | None = None) -> SceneState:
        rng = nd.make_rng(cfg.seed if seed is None else seed, "scene-init")
        params = rd.init_field_params(cfg.render.field, rng)
        return cls(params, nn.Adam(cfg.beta1, cfg.beta2, cfg.adam_eps), 0)


@dataclass
class ViewResult:
    grads: dict
    metrics: dict


def view_gradient(params: dict, cfg: TrainConfig, model, step: int, rng: np.random.Generator) -> ViewResult:
    """Gradient of the SDS surrogate plus regularizers for one random view."""
    cam = sample_camera(rng, cfg.resolution)
    light_pos = sample_light(cam, rng, cfg.light_zero_variance)
    mode, diffuse, ambient = select_render_mode(step, rng, cfg.shading)
    light = rd.LightSpec(light_pos, diffuse, ambient)
    if cfg.view_prompts and cfg.base_tag is not None:
        cond = resolve_view_prompt(cfg.base_tag, cam, getattr(model, "vocab", None), cfg.view_blend)
    else:
        cond = Conditioning(cfg.base_tag)
    g = nd.Graph()
    p = g.params_from(params)
    need_n = mode != "albedo" or cfg.orient_in_albedo
    out = rd.render(p, cam.camera, light, mode, cfg.render, step, rng, need_normals=need_n)
    x = nd.sub(nd.mul(out.rgb, 2.0), 1.0)
    scfg = cfg.sds_config()
    proxy, resid, t, rnorm = sds_surrogate(model, x, Conditioning(cond.tag, cond.views), scfg, rng)
    total = proxy
    w_orient = cfg.orientation_weight(step)
    orient = 0.0
    if out.normals is not None and w_orient > 0:
        o = rd.orientation_loss(out.weights, out.normals, out.view_dirs, out.fallback)
        orient = float(o.value)
        total = nd.add(total, nd.mul(o, w_orient))
    opac = rd.opacity_loss(out.weights)
    if cfg.opacity_weight > 0:
        total = nd.add(total, nd.mul(opac, cfg.opacity_weight))
    grads = g.backward(total)
    w = float(weight(t[0], scfg))
    metrics = {
        "sds_proxy": float(proxy.value),
        "sds_residual": w * float(rnorm[0]) ** 2 / x.value.size,
        "orient": orient,
        "opacity_reg": float(opac.value),
        "opacity_mean": float(out.opacity.value.mean()),
        "t": float(t[0]),
        "mode": mode,
        "view": str(cond),
        "elevation": cam.elevation,
        "azimuth": cam.azimuth,
    }
    return ViewResult(grads, metrics)


def step_rng(seed: int, step: int, view: int) -> np.random.Generator:
    return nd.make_rng(seed, "scene", step, view)


def step_gradients(params: dict, cfg: TrainConfig, model, step: int, seed: int) -> tuple[dict, list[dict]]:
    """Per-view gradients reduced by a fixed-order mean (threads only change who computes them)."""
    def one(v):
        return view_gradient(params, cfg, model, step, step_rng(seed, step, v))

    if cfg.threads > 1 and cfg.views > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.threads, cfg.views)) as ex:
            results = list(ex.map(one, range(cfg.views)))
    else:
        results = [one(v) for v in range(cfg.views)]
    return nd.reduce_gradients([r.grads for r in results]), [r.metrics for r in results]


def train_step(state: SceneState, cfg: TrainConfig, model, seed: int | None = None) -> dict:
    """One optimizer iteration; mutates ``state`` and returns the step's metrics."""
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    step = state.step
    grads, per_view = step_gradients(state.params, cfg, model, step, seed)
    bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
    if bad:
        raise TrainingDiverged(
            f"non-finite gradient at step {step} in {bad[:5]}",
            {"step": step, "bad_params": bad, "views": per_view,
             "param_norms": {k: float(np.linalg.norm(v)) for k, v in state.params.items()}},
        )
    lr = cfg.lr(step)
    state.params = state.opt.update(state.params, grads, lr)
    state.step += 1
    m = dict(per_view[0])
    for key in ("sds_proxy", "sds_residual", "orient", "opacity_reg", "opacity_mean"):
        m[key] = float(np.mean([pv[key] for pv in per_view]))
    m.update(step=step, lr=lr, orient_weight=cfg.orientation_weight(step), wall=time.perf_counter() - t0)
    return m


def train(cfg: TrainConfig, model, state: SceneState | None = None, log=None, until: int | None = None) -> SceneState:
    state = state or SceneState.create(cfg)
    stop = cfg.iterations if until is None else min(until, cfg.iterations)
    while state.step < stop:
        m = train_step(state, cfg, model)
        if log is not None:
            log(m)
    return state


# --------------------------------------------------------------------------
# evaluation

def eval_cameras(width: int, n: int = 8, elevation: float = 15.0, distance: float = 1.25) -> list[CameraSample]:
    return [fixed_camera(elevation, 360.0 * k / n, distance, width) for k in range(n)]


def central_opacity_fraction(params: dict, cfg: TrainConfig, cameras=None, threshold: float = 0.5) -> float:
    """Share of pixels with opacity above ``threshold`` that lie in the central
    half of the frame (the middle square of side W/2), over fixed cameras.
    Returns 0 when no pixel exceeds the threshold."""
    cameras = cameras or eval_cameras(cfg.resolution)
    inside = total = 0
    for cs in cameras:
        out = rd.render(params, cs.camera, None, "albedo", cfg.render, cfg.iterations, None, need_normals=False)
        h, w = cs.camera.height, cs.camera.width
        mask = out.opacity.value.reshape(h, w) > threshold
        total += int(mask.sum())
        inside += int(mask[h // 4: h - h // 4, w // 4: w - w // 4].sum())
    return inside / total if total else 0.0


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)


__all__ = [
    "CameraSample", "ShadingConfig", "TrainConfig", "SceneState", "TrainingDiverged", "VIEW_TAGS",
    "sample_camera", "sample_light", "resolve_view_prompt", "select_render_mode", "lr_schedule",
    "linear_anneal", "train_step", "train", "central_opacity_fraction", "fixed_camera", "eval_cameras",
    "view_tag", "view_blend", "step_gradients", "view_gradient",
]
