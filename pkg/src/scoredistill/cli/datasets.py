"""Toy datasets with exactly known distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ndgrad as nd
from .. import renderer as rd
from .. import sceneopt as so
from ..diffusion import Conditioning, Mixture, Vocabulary

PRIMITIVE_TAGS = ("sphere", "box")
PATTERN_TAGS = ("stripes", "square")


# --------------------------------------------------------------------------
# points

def gaussian_points(rng: np.random.Generator, n: int, dim: int = 2) -> np.ndarray:
    return rng.standard_normal((n, dim))


def two_mode_mixture(dim: int = 1, separation: float = 2.0, std: float = 0.1) -> Mixture:
    m = np.zeros((2, dim))
    m[0, 0], m[1, 0] = -separation, separation
    return Mixture(np.array([0.5, 0.5]), m, np.array([std, std]))


# --------------------------------------------------------------------------
# small synthetic images

def pattern_image(rng: np.random.Generator, tag: str, size: int = 8) -> np.ndarray:
    """A random-coloured pattern in [-1, 1]: vertical stripes or a filled square."""
    fg, bg = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    if tag == "stripes":
        period = int(rng.integers(2, 4))
        cols = (np.arange(size) // period) % 2 == 0
        img[:, cols] = fg
    elif tag == "square":
        s = int(rng.integers(size // 4, size // 2 + 1))
        i, j = rng.integers(0, size - s + 1, 2)
        img[i:i + s, j:j + s] = fg
    else:
        raise KeyError(tag)
    return img


def pattern_batch(rng: np.random.Generator, n: int, size: int = 8):
    tags = [PATTERN_TAGS[k] for k in rng.integers(0, len(PATTERN_TAGS), n)]
    return np.stack([pattern_image(rng, t, size) for t in tags]), [Conditioning(t) for t in tags]


# --------------------------------------------------------------------------
# rendered primitives

@dataclass(frozen=True)
class Primitive:
    """Soft superellipsoid ``(sum |p_i / a_i|^n)^(1/n) < 1``: n=2 sphere, large n box."""

    kind: str
    center: np.ndarray
    axes: np.ndarray
    color: np.ndarray
    exponent: float
    sharpness: float = 0.05
    peak: float = 40.0

    def field_fn(self, pts: np.ndarray, with_grad: bool) -> rd.FieldSample:
        dt = nd.get_default_dtype()
        q = (pts - self.center) / self.axes
        aq = np.abs(q)
        n = self.exponent
        f = np.maximum(np.sum(aq ** n, axis=-1) ** (1.0 / n), 1e-6)
        s = 1.0 / (1.0 + np.exp(np.clip((f - 1.0) / self.sharpness, -60, 60)))
        tau = self.peak * s
        rho = np.broadcast_to(self.color, pts.shape)
        grad = None
        if with_grad:
            df = (f ** (1.0 - n))[:, None] * aq ** (n - 1.0) * np.sign(q) / self.axes
            grad = nd.Tensor(((-self.peak * s * (1.0 - s) / self.sharpness)[:, None] * df).astype(dt))
        return rd.FieldSample(nd.Tensor(tau.astype(dt)), nd.Tensor(rho.astype(dt)), grad)


def sample_primitive(rng: np.random.Generator, kind: str) -> Primitive:
    center = rng.normal(0.0, 0.05, 3)
    color = rng.uniform(0.05, 0.95, 3)
    if kind == "sphere":
        axes = np.full(3, rng.uniform(0.35, 0.6))
        return Primitive(kind, center, axes, color, 2.0)
    if kind == "box":
        return Primitive(kind, center, rng.uniform(0.25, 0.5, 3), color, 8.0)
    raise KeyError(kind)


def render_primitive(rng: np.random.Generator, kind: str, width: int = 32, samples: int = 32):
    """One training image in [-1, 1] with its view-resolved conditioning."""
    prim = sample_primitive(rng, kind)
    cam = so.sample_camera(rng, width)
    light = so.sample_light(cam, rng)
    mode = ("albedo", "shaded", "textureless")[int(rng.integers(0, 3))]
    diffuse, ambient = so.ALBEDO_LIGHT if mode == "albedo" else so.SHADED_LIGHT
    bg = rng.uniform(0.3, 0.9, 3)
    out = rd.render_field(
        prim.field_fn,
        lambda dirs: nd.Tensor(np.broadcast_to(bg, dirs.shape).astype(nd.get_default_dtype())),
        cam.camera, rd.LightSpec(light, diffuse, ambient), mode, samples, rd.SPHERE_RADIUS, None,
    )
    img = out.rgb.value.astype(np.float64) * 2.0 - 1.0
    return img, so.resolve_view_prompt(kind, cam)


def primitive_dataset(seed: int, n: int, width: int = 32, samples: int = 32):
    """``n`` renders, tags alternating, each from its own ``(seed, index)`` stream."""
    imgs, conds = [], []
    for i in range(n):
        rng = nd.make_rng(seed, "primitive", i)
        img, cond = render_primitive(rng, PRIMITIVE_TAGS[i % len(PRIMITIVE_TAGS)], width, samples)
        imgs.append(img)
        conds.append(cond)
    return np.stack(imgs).astype(np.float32), conds


def primitive_vocab() -> Vocabulary:
    return Vocabulary(PRIMITIVE_TAGS)


def pattern_vocab() -> Vocabulary:
    return Vocabulary(PATTERN_TAGS)


def batch_sampler(images: np.ndarray, conds: list, batch: int, p_uncond: float = 0.1):
    """Random minibatches with conditioning dropout for classifier-free guidance."""
    def sample(rng: np.random.Generator):
        idx = rng.integers(0, len(images), batch)
        drop = rng.uniform(size=batch) < p_uncond
        return images[idx], [Conditioning.null() if d else conds[i] for i, d in zip(idx, drop)]
    return sample
