"""Registered finite-difference checks covering every hand-written VJP.

Each entry builds small float64 inputs and a function of them; the suite runs
:func:`ndgrad.check_gradient` on all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dip as dp
from . import ndgrad as nd
from . import renderer as rd
from .diffusion import Conditioning, DenoiserMLP, GaussianMixtureScore, Mixture, Vocabulary

TOL = 1e-4


@dataclass
class GradCase:
    name: str
    fn: Callable
    params: dict
    max_elements: int | None = None


def _r(seed: int, *shape, lo=None, hi=None):
    g = np.random.default_rng(seed)
    if lo is not None:
        return g.uniform(lo, hi, shape)
    return g.standard_normal(shape)


def _primitive_cases() -> list[GradCase]:
    a, b, c = _r(1, 3, 4), _r(2, 3, 4), _r(3, 4)
    pos = _r(4, 3, 4, lo=0.5, hi=2.0)
    P = lambda **kw: kw  # noqa: E731
    return [
        GradCase("add", lambda p: nd.add(p["a"], p["c"]), P(a=a, c=c)),
        GradCase("sub", lambda p: nd.sub(p["a"], p["b"]), P(a=a, b=b)),
        GradCase("mul", lambda p: nd.mul(p["a"], p["c"]), P(a=a, c=c)),
        GradCase("div", lambda p: nd.div(p["a"], p["d"]), P(a=a, d=pos)),
        GradCase("exp", lambda p: nd.exp(p["a"]), P(a=a)),
        GradCase("log", lambda p: nd.log(p["d"]), P(d=pos)),
        GradCase("sqrt", lambda p: nd.sqrt(p["d"]), P(d=pos)),
        GradCase("power", lambda p: nd.power(p["d"], -0.5), P(d=pos)),
        GradCase("sigmoid", lambda p: nd.sigmoid(p["a"]), P(a=a)),
        GradCase("swish", lambda p: nd.swish(p["a"]), P(a=a)),
        GradCase("sin_cos", lambda p: nd.mul(nd.sin(p["a"]), nd.cos(p["b"])), P(a=a, b=b)),
        GradCase("maximum", lambda p: nd.maximum(p["a"], 0.1), P(a=a)),
        GradCase("matmul", lambda p: nd.matmul(p["a"], p["w"]), P(a=a, w=_r(5, 4, 2))),
        GradCase("matmul_batched", lambda p: nd.matmul(p["x"], p["w"]), P(x=_r(6, 2, 3, 4), w=_r(7, 4, 5))),
        GradCase("sum_mean", lambda p: nd.add(nd.sum(p["a"], axis=0), nd.mean(p["a"], axis=0)), P(a=a)),
        GradCase("broadcast", lambda p: nd.broadcast_to(p["c"], (3, 4)), P(c=c)),
        GradCase("reshape_transpose", lambda p: nd.transpose(nd.reshape(p["a"], (4, 3))), P(a=a)),
        GradCase("concat", lambda p: nd.concat([p["a"], p["b"]], axis=1), P(a=a, b=b)),
        GradCase("slice", lambda p: nd.getitem(p["a"], (slice(None), slice(None, None, -2))), P(a=a)),
        GradCase("gather", lambda p: nd.getitem(p["a"], np.array([0, 2, 2])), P(a=a)),
        GradCase("l2norm", lambda p: nd.l2norm(p["a"], axis=-1), P(a=a)),
        GradCase("layernorm", lambda p: nd.layernorm(p["a"]), P(a=a)),
    ]


def _dip_cases() -> list[GradCase]:
    coord = dp.CoordMlpDip(resolution=(4, 4), layers=3, width=8, n_freqs=2)
    return [
        GradCase("dip_identity", lambda p: dp.IdentityDip((2, 3)).generate(p), {"theta": _r(10, 2, 3)}),
        GradCase("dip_mirror", lambda p: dp.MirrorDip((3, 4, 2), squash=True).generate(p), {"theta": _r(11, 3, 2, 2)}),
        GradCase("dip_coordmlp", lambda p: coord.generate(p), coord.init_params(np.random.default_rng(12))),
    ]


def _field_setup():
    cfg = rd.FieldConfig(width=8, blocks=2, L=3, bg_width=8, bg_freqs=2)
    base = rd.init_field_params(cfg, np.random.default_rng(20))
    jitter = np.random.default_rng(21)
    params = {k: v + 0.1 * jitter.standard_normal(v.shape) for k, v in base.items()}
    return cfg, params


def _renderer_cases() -> list[GradCase]:
    cfg, params = _field_setup()
    pts = _r(22, 6, 3, lo=-0.6, hi=0.6)
    field_p = {k: v for k, v in params.items() if k.startswith("field.")}
    bg_p = {k: v for k, v in params.items() if k.startswith("bg.")}
    rcfg = rd.RenderConfig(samples=8, field=cfg)
    cam = rd.look_at([0.1, -1.6, 0.4], [0, 0, 0], [0, 0, 1], 3.0, 4, 4)
    light = rd.LightSpec(np.array([0.3, -1.2, 0.8]))
    ldir = _r(23, 5, 3)
    ldir /= np.linalg.norm(ldir, axis=1, keepdims=True)
    n0 = _r(24, 5, 3)
    n0 /= np.linalg.norm(n0, axis=1, keepdims=True)
    mu = _r(25, 5, 3) * 0.3
    spot = rd.LightSpec(np.array([0.2, -1.5, 0.9]))

    def full_render(mode):
        return lambda p: rd.render(p, cam, light, mode, rcfg, 100, np.random.default_rng(3)).rgb

    w_fixed = rd.render(params, cam, light, "shaded", rcfg, 100, np.random.default_rng(3)).weights.value

    def orient(p):
        out = rd.render(p, cam, light, "shaded", rcfg, 100, np.random.default_rng(3))
        return rd.orientation_loss(w_fixed, out.normals, out.view_dirs, out.fallback)

    return [
        GradCase("layernorm_dual", lambda p: rd.layernorm_dual(p["h"], p["t"]), {"h": _r(26, 5, 7), "t": _r(27, 3, 5, 7)}),
        GradCase("swish_tangent", lambda p: rd.swish_tangent(p["a"], p["t"]), {"a": _r(28, 5, 4), "t": _r(29, 3, 5, 4)}),
        GradCase("field_density", lambda p: rd.field_eval(p, pts, 0.01, cfg).tau, field_p),
        GradCase("field_albedo", lambda p: rd.field_eval(p, pts, 0.01, cfg).rho, field_p),
        GradCase("field_normals", lambda p: rd.normals(p, pts, 0.01, cfg)[0], field_p),
        GradCase("background", lambda p: rd.background_eval(p, ldir, cfg), bg_p),
        GradCase("shade", lambda p: rd.shade(p["rho"], p["n"], mu, spot, "shaded"),
                 {"rho": _r(30, 5, 3, lo=0.1, hi=0.9), "n": n0}),
        GradCase("composite", lambda p: rd.composite(p["tau"], p["c"], _r(31, 3, 6, lo=0.05, hi=0.4), p["bg"]).rgb,
                 {"tau": _r(32, 3, 6, lo=0.1, hi=3.0), "c": _r(33, 3, 6, 3, lo=0, hi=1), "bg": _r(34, 3, 3, lo=0, hi=1)}),
        GradCase("render_albedo", full_render("albedo"), params, max_elements=24),
        GradCase("render_shaded", full_render("shaded"), params, max_elements=24),
        GradCase("render_textureless", full_render("textureless"), params, max_elements=24),
        GradCase("orientation_loss", orient, params, max_elements=24),
        GradCase("opacity_loss", lambda p: rd.opacity_loss(
            rd.render(p, cam, light, "albedo", rcfg, 100, np.random.default_rng(3)).weights), params, max_elements=24),
    ]


def _model_cases() -> list[GradCase]:
    vocab = Vocabulary(("a", "b"))
    den = DenoiserMLP.create((4,), vocab, np.random.default_rng(40), width=8, blocks=1, n_freqs=2, d_tag=2, d_view=2)
    z = _r(41, 3, 4)
    conds = [Conditioning("a").with_view("front view"), Conditioning.null(), Conditioning("b")]
    gmm = GaussianMixtureScore((2,), {None: Mixture(np.array([0.3, 0.7]), _r(42, 2, 2), np.array([0.5, 0.8]))})
    return [
        GradCase("denoiser_params", lambda p: den.apply(p, nd.Tensor(z), np.array([0.2, 0.5, 0.9]), conds),
                 dict(den.params), max_elements=24),
        GradCase("denoiser_input", lambda p: den.predict_eps_graph(p["z"], 0.4, Conditioning("a")), {"z": z}),
        GradCase("gmm_eps_input", lambda p: gmm.predict_eps_graph(p["z"], 0.3), {"z": _r(43, 3, 2)}),
    ]


def registry() -> list[GradCase]:
    return _primitive_cases() + _dip_cases() + _renderer_cases() + _model_cases()


def run_suite(names=None, corrupt: str | None = None, tol: float = TOL) -> list[nd.GradCheckReport]:
    """Run every registered check (or those in ``names``).

    ``corrupt`` flips the sign of one op kind's VJP for the whole run, which
    is the suite's negative control.
    """
    cases = [c for c in registry() if names is None or c.name in names]
    reports = []
    for case in cases:
        if corrupt:
            with nd.corrupt_vjp(corrupt):
                rep = nd.check_gradient(case.fn, case.params, tol=tol, name=case.name, max_elements=case.max_elements)
        else:
            rep = nd.check_gradient(case.fn, case.params, tol=tol, name=case.name, max_elements=case.max_elements)
        reports.append(rep)
    return reports


def format_report(reports) -> str:
    lines = [str(r) for r in reports]
    failed = [r.name for r in reports if not r.passed]
    lines.append(f"{len(reports) - len(failed)}/{len(reports)} checks passed"
                 + (f"; failed: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
