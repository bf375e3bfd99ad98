"""Differentiable image parameterizations: identity, mirror-symmetric, coordinate MLP.

A DIP exposes ``param_shapes()``, ``init_params(rng)`` and
``generate(params, aux) -> Tensor``; ``params`` are tensors so the same call
serves both graph recording and plain evaluation. The 3D renderer implements
the same contract in :mod:`scoredistill.sceneopt`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import ndgrad as nd
from . import nn


class ConfigurationError(ValueError):
    pass


@runtime_checkable
class ImageParameterization(Protocol):
    image_shape: tuple[int, ...]

    def param_shapes(self) -> dict: ...

    def init_params(self, rng: np.random.Generator) -> dict: ...

    def generate(self, params: dict, aux=None) -> nd.Tensor: ...


def _squash(x, on: bool):
    return nd.sigmoid(x) if on else x


@dataclass
class IdentityDip:
    """``x = theta`` (optionally ``sigmoid(theta)`` so pixels stay in (0, 1))."""

    image_shape: tuple[int, ...]
    squash: bool = False

    def param_shapes(self) -> dict:
        return {"theta": tuple(self.image_shape)}

    def init_params(self, rng, scale: float = 1.0) -> dict:
        return {"theta": (scale * rng.standard_normal(self.image_shape)).astype(nd.get_default_dtype())}

    def generate(self, params: dict, aux=None) -> nd.Tensor:
        return _squash(params["theta"], self.squash)


def identity_generate(params) -> nd.Tensor:
    theta = params["theta"] if isinstance(params, dict) else params
    return nd.add(theta, 0.0) if isinstance(theta, nd.Tensor) else nd.Tensor(np.asarray(theta))


@dataclass
class MirrorDip:
    """Left-right symmetric images ``x = (flip(theta), theta)`` along the width axis."""

    image_shape: tuple[int, ...]      # full (H, W, C)
    squash: bool = False

    def __post_init__(self):
        if len(self.image_shape) != 3:
            raise ConfigurationError("mirror DIP needs an (H, W, C) image shape")
        if self.image_shape[1] % 2:
            raise ConfigurationError(f"mirror DIP needs an even width, got {self.image_shape[1]}")

    def param_shapes(self) -> dict:
        h, w, c = self.image_shape
        return {"theta": (h, w // 2, c)}

    def init_params(self, rng, scale: float = 1.0) -> dict:
        return {"theta": (scale * rng.standard_normal(self.param_shapes()["theta"])).astype(nd.get_default_dtype())}

    def generate(self, params: dict, aux=None) -> nd.Tensor:
        return _squash(mirror_generate(params["theta"]), self.squash)


def mirror_generate(theta) -> nd.Tensor:
    theta = theta if isinstance(theta, nd.Tensor) else nd.Tensor(np.asarray(theta))
    return nd.concat([nd.getitem(theta, (slice(None), slice(None, None, -1))), theta], axis=1)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """Pixel-centre coordinates in [-1, 1]^2, shape (h, w, 2) as (x, y)."""
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass
class CoordMlpDip:
    """Resolution-free image: an MLP from encoded pixel coordinates to sigmoid RGB."""

    resolution: tuple[int, int] = (32, 32)
    channels: int = 3
    layers: int = 4
    width: int = 128
    n_freqs: int = 6

    @property
    def image_shape(self) -> tuple[int, ...]:
        return (*self.resolution, self.channels)

    @property
    def in_dim(self) -> int:
        return 2 + 4 * self.n_freqs

    def param_shapes(self) -> dict:
        dims = [self.in_dim] + [self.width] * (self.layers - 1) + [self.channels]
        shapes = {}
        for i in range(self.layers):
            shapes[f"l{i}.w"] = (dims[i], dims[i + 1])
            shapes[f"l{i}.b"] = (dims[i + 1],)
        return shapes

    def init_params(self, rng) -> dict:
        dims = [self.in_dim] + [self.width] * (self.layers - 1) + [self.channels]
        p = {}
        for i in range(self.layers):
            gain = 0.5 if i == self.layers - 1 else 1.0
            nn.add_linear(p, rng, f"l{i}", dims[i], dims[i + 1], gain)
        return p

    def generate(self, params: dict, aux=None) -> nd.Tensor:
        res = tuple(aux) if aux is not None else tuple(self.resolution)
        return coord_mlp_generate(params, res, self.layers, self.n_freqs, self.channels)


def coord_mlp_generate(params: dict, resolution, layers: int = 4, n_freqs: int = 6, channels: int = 3) -> nd.Tensor:
    h, w = resolution
    feats = nn.sinusoidal(pixel_grid(h, w).reshape(-1, 2), n_freqs).astype(nd.get_default_dtype())
    x = nd.Tensor(feats)
    for i in range(layers):
        x = nn.linear(x, params, f"l{i}")
        if i < layers - 1:
            x = nd.swish(x)
    return nd.reshape(nd.sigmoid(x), (h, w, channels))


@dataclass
class ModelSpaceDip:
    """Maps a [0, 1] image generator into the [-1, 1] data space of image models."""

    inner: object

    @property
    def image_shape(self):
        return self.inner.image_shape

    def param_shapes(self) -> dict:
        return self.inner.param_shapes()

    def init_params(self, rng) -> dict:
        return self.inner.init_params(rng)

    def generate(self, params: dict, aux=None) -> nd.Tensor:
        return nd.sub(nd.mul(self.inner.generate(params, aux), 2.0), 1.0)


def to_unit(x: np.ndarray) -> np.ndarray:
    """Model-space image back to [0, 1] colours."""
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)
