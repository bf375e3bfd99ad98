"""Score distillation: the SDS gradient, the full denoising-loss gradient, and
closed-form Gaussian oracles.

The SDS update for a differentiable image generator ``x = g(theta)`` is

    grad = E_{t, eps}[ w(t) (eps_hat(alpha_t x + sigma_t eps; t) - eps) dx/dtheta ]

and is realised, exactly as the reference pseudocode does, as the gradient of
the surrogate ``w(t) <stop_gradient(eps_hat - eps), x>``. The score model is
only evaluated; nothing is backpropagated through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ndgrad as nd
from .diffusion import (
    COSINE,
    CapabilityError,
    Conditioning,
    NoiseSchedule,
    cfg_guide,
    diffuse,
    guided_eps,
    supports_input_grad,
)


@dataclass
class SdsConfig:
    """Guidance, timestep range, weighting and batch size for SDS.

    ``weight_kind`` is ``sigma_sq`` (w = sigma_t^2) or ``uniform`` (w = 1);
    ``include_alpha`` multiplies either by alpha_t, making the absorbed
    ``dz/dx = alpha_t I`` factor explicit. ``t_min == t_max`` pins the timestep.
    """

    omega: float = 100.0
    weight_kind: str = "sigma_sq"
    include_alpha: bool = False
    t_min: float = 0.02
    t_max: float = 0.98
    batch: int = 1
    control_variate: bool = True

    def __post_init__(self):
        if self.weight_kind not in ("sigma_sq", "uniform"):
            raise ValueError(f"unknown weight kind {self.weight_kind!r}")
        if not (0.0 < self.t_min <= self.t_max < 1.0):
            raise ValueError(f"need 0 < t_min <= t_max < 1, got {self.t_min}, {self.t_max}")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def weight(t, cfg: SdsConfig, schedule: NoiseSchedule = COSINE):
    a, s = schedule.coeffs(t)
    w = np.asarray(s, np.float64) ** 2 if cfg.weight_kind == "sigma_sq" else np.ones_like(np.asarray(s, np.float64))
    if cfg.include_alpha:
        w = w * a
    return w


def sample_timestep(cfg: SdsConfig, rng: np.random.Generator, size=None):
    """``t ~ U(t_min, t_max)``."""
    if cfg.t_min == cfg.t_max:
        return cfg.t_min if size is None else np.full(size, cfg.t_min)
    return rng.uniform(cfg.t_min, cfg.t_max, size=size)


@dataclass
class SdsGradReport:
    gradient: dict
    t: np.ndarray
    residual_norm: np.ndarray
    proxy_loss: float
    image: np.ndarray
    per_draw: list | None = field(default=None, repr=False)


def _check_shapes(model, x_shape):
    if tuple(model.data_shape) != tuple(x_shape):
        raise ValueError(f"generator output {tuple(x_shape)} does not match model data shape {tuple(model.data_shape)}")


def sds_surrogate(model, x: nd.Tensor, cond: Conditioning, cfg: SdsConfig, rng: np.random.Generator,
                  schedule: NoiseSchedule | None = None):
    """Build ``w(t) <stop_gradient(eps_hat - eps), x>`` on the graph that produced ``x``.

    Returns ``(proxy, residuals, t, residual_norm)`` where ``residuals`` holds
    each draw's ``w(t) (eps_hat - eps)`` (the per-draw cotangent on ``x``).
    """
    schedule = schedule or getattr(model, "schedule", COSINE)
    _check_shapes(model, x.shape)
    xv = x.value.astype(np.float64)
    n = cfg.batch
    t = np.atleast_1d(sample_timestep(cfg, rng, size=n)).astype(np.float64)
    eps = rng.standard_normal((n,) + xv.shape)
    z = diffuse(np.broadcast_to(xv, eps.shape), t, eps, schedule)
    eps_hat = np.asarray(guided_eps(model, z, t, cond, cfg.omega), np.float64)
    if not np.all(np.isfinite(eps_hat)):
        raise nd.NonFiniteError(f"non-finite noise prediction at t={t}")
    w = weight(t, cfg, schedule).reshape((n,) + (1,) * xv.ndim)
    resid = w * (eps_hat - eps if cfg.control_variate else eps_hat)
    proxy = nd.sum(nd.mul(nd.stop_gradient(resid.mean(axis=0).astype(x.dtype)), x))
    rnorm = np.sqrt(((eps_hat - eps) ** 2).reshape(n, -1).sum(axis=1))
    return proxy, resid, t, rnorm


def sds_grad(model, dip, params: dict, cond: Conditioning, cfg: SdsConfig, rng: np.random.Generator,
             aux=None, per_draw: bool = False, schedule: NoiseSchedule | None = None) -> SdsGradReport:
    """Monte-Carlo SDS gradient over ``cfg.batch`` draws of ``(t, eps)``.

    ``per_draw=True`` also returns each draw's own gradient (one backward per draw).
    """
    g = nd.Graph()
    p = g.params_from(params)
    x = dip.generate(p, aux)
    proxy, resid, t, rnorm = sds_surrogate(model, x, cond, cfg, rng, schedule)
    grads = g.backward(proxy)
    draws = [g.backward(x, r.astype(x.dtype)) for r in resid] if per_draw else None
    return SdsGradReport(gradient=grads, t=t, residual_norm=rnorm, proxy_loss=float(proxy.value),
                         image=x.value, per_draw=draws)


def ldiff_full_grad(model, dip, params: dict, cond: Conditioning, cfg: SdsConfig, rng: np.random.Generator,
                    aux=None, schedule: NoiseSchedule | None = None) -> dict:
    """Gradient of ``0.5 w(t) ||eps_hat(z_t) - eps||^2`` including the model Jacobian.

    Draws ``(t, eps)`` from ``rng`` in the same order as :func:`sds_grad`, so the
    two can be compared draw by draw.
    """
    if not supports_input_grad(model):
        raise CapabilityError(f"{type(model).__name__} cannot differentiate its prediction w.r.t. z")
    schedule = schedule or getattr(model, "schedule", COSINE)
    g = nd.Graph()
    p = g.params_from(params)
    x = dip.generate(p, aux)
    _check_shapes(model, x.shape)
    n = cfg.batch
    t = np.atleast_1d(sample_timestep(cfg, rng, size=n)).astype(np.float64)
    eps = rng.standard_normal((n,) + x.shape)
    total = None
    for b in range(n):
        a, s = schedule.coeffs(float(t[b]))
        z = nd.add(nd.mul(x, a), s * eps[b])
        e_c = model.predict_eps_graph(z, float(t[b]), cond)
        if cfg.omega and not cond.is_null:
            e_hat = cfg_guide(e_c, model.predict_eps_graph(z, float(t[b]), Conditioning.null()), cfg.omega)
        else:
            e_hat = e_c
        r = nd.sub(e_hat, eps[b])
        term = nd.mul(nd.sum(nd.mul(r, r)), 0.5 * float(weight(t[b], cfg, schedule)) / n)
        total = term if total is None else nd.add(total, term)
    return g.backward(total)


class KlOracle(NamedTuple):
    kl: float
    d_kl_d_theta: np.ndarray
    scaled_grad: np.ndarray


def kl_gaussian_oracle(theta, t: float, prior_mean, prior_std: float, cfg: SdsConfig,
                       uncond_mean=None, uncond_std: float | None = None,
                       schedule: NoiseSchedule = COSINE) -> KlOracle:
    """Closed-form ``KL(N(alpha theta, sigma^2 I) || p_t)`` for an identity generator.

    ``p_t`` is the prior ``N(mu, s^2 I)`` smoothed to timestep ``t``. When
    ``uncond_*`` are given and ``cfg.omega > 0`` the target is the guided
    density whose noise prediction is the CFG combination; it is Gaussian with
    precision ``(1 + omega)/v_c - omega/v_u`` (improper when that is <= 0, in
    which case ``kl`` is NaN but the gradient is still defined).

    Returns the KL, its theta-gradient, and that gradient scaled by
    ``(sigma_t / alpha_t) w(t)``, which is the expected SDS gradient.
    """
    if prior_std <= 0 or (uncond_std is not None and uncond_std <= 0):
        raise ValueError("degenerate prior: standard deviation must be positive")
    theta = np.asarray(theta, np.float64)
    d = theta.size
    a, s = schedule.coeffs(t)
    mu_c = np.broadcast_to(np.asarray(prior_mean, np.float64), theta.shape)
    v_c = a * a * prior_std ** 2 + s * s
    prec = 1.0 / v_c
    lin = a * mu_c / v_c                       # precision-weighted mean of the target
    if uncond_std is not None and cfg.omega > 0:
        mu_u = np.broadcast_to(np.asarray(uncond_mean, np.float64), theta.shape)
        v_u = a * a * uncond_std ** 2 + s * s
        prec = (1.0 + cfg.omega) / v_c - cfg.omega / v_u
        lin = (1.0 + cfg.omega) * a * mu_c / v_c - cfg.omega * a * mu_u / v_u
    # grad_theta KL = alpha * E_q[-grad_z log p(z)] = alpha (prec * alpha theta - lin)
    grad = a * (prec * a * theta - lin)
    if prec > 0:
        m = lin / prec
        v = 1.0 / prec
        kl = 0.5 * (d * s * s / v + np.sum((a * theta - m) ** 2) / v - d + d * np.log(v / (s * s)))
    else:
        kl = float("nan")
    w = float(weight(t, cfg, schedule))
    return KlOracle(float(kl), grad, grad * (s / a) * w)
