"""Implementations of the CLI subcommands. Each takes a :class:`RunConfig` and an output directory."""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import dip as dp
from .. import gradsuite
from .. import ndgrad as nd
from .. import nn
from .. import renderer as rd
from .. import sceneopt as so
from ..diffusion import (
    COSINE,
    Conditioning,
    DenoiserMLP,
    GaussianMixtureScore,
    Mixture,
    Vocabulary,
    ancestral_sample,
    denoiser_loss,
    train_denoiser,
)
from ..sds import SdsConfig, ldiff_full_grad, sds_grad
from . import datasets as ds
from .config import ConfigError, RunConfig
from .io import MetricsLog, atomic_write, image_grid, load_checkpoint, save_checkpoint, save_png


class UsageFailure(ValueError):
    """A command was asked for something it cannot do with the given config."""


def _prepare(cfg: RunConfig, out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", cfg.to_text().encode())
    return out


def _text(lines: dict) -> bytes:
    return "".join(f"{k} = {v}\n" for k, v in lines.items()).encode()


# --------------------------------------------------------------------------
# model persistence

def _str_section(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), np.uint8).astype(np.float32)


def _section_str(a: np.ndarray) -> str:
    return bytes(np.asarray(a, np.float32).astype(np.uint8).tolist()).decode("utf-8")


def denoiser_sections(model: DenoiserMLP, opt: nn.Adam | None = None, step: int = 0) -> dict:
    sec = {f"model.{k}": v for k, v in model.params.items()}
    sec["meta.kind"] = _str_section("denoiser")
    sec["meta.data_shape"] = np.asarray(model.data_shape, np.float32)
    sec["meta.arch"] = np.asarray([model.width, model.blocks, model.n_freqs, model.d_tag, model.d_view], np.float32)
    sec["meta.tags"] = _str_section("\n".join(model.vocab.tags))
    sec["meta.views"] = _str_section("\n".join(model.vocab.views))
    sec["meta.step"] = np.asarray(step, np.float32)
    if opt is not None:
        sec.update(opt.state_arrays())
    return sec


def denoiser_from_sections(sec: dict) -> tuple[DenoiserMLP, nn.Adam | None, int]:
    if "meta.kind" not in sec or _section_str(sec["meta.kind"]) != "denoiser":
        raise UsageFailure("checkpoint does not hold a denoiser")
    width, blocks, n_freqs, d_tag, d_view = (int(v) for v in sec["meta.arch"])
    tags_s, views_s = _section_str(sec["meta.tags"]), _section_str(sec["meta.views"])
    vocab = Vocabulary(tuple(tags_s.split("\n")) if tags_s else (), tuple(views_s.split("\n")) if views_s else ())
    params = {k[len("model."):]: v for k, v in sec.items() if k.startswith("model.")}
    shape = tuple(int(v) for v in sec["meta.data_shape"])
    model = DenoiserMLP(shape, vocab, params, width, blocks, n_freqs, d_tag, d_view, COSINE)
    opt = None
    if "opt.step" in sec:
        opt = nn.Adam(beta2=0.999)
        opt.load_state_arrays({k: v for k, v in sec.items() if k.startswith("opt.")})
    return model, opt, int(np.ravel(sec["meta.step"])[0])


def load_denoiser(path) -> DenoiserMLP:
    return denoiser_from_sections(load_checkpoint(path))[0]


def scene_sections(state: so.SceneState, cfg: so.TrainConfig) -> dict:
    f = cfg.render.field
    sec = {f"model.{k}": v for k, v in state.params.items()}
    sec["meta.kind"] = _str_section("scene")
    sec["meta.arch"] = np.asarray([f.width, f.blocks, f.L, f.bg_width, f.bg_layers, f.bg_freqs], np.float32)
    sec["meta.render"] = np.asarray([cfg.render.samples, cfg.resolution, cfg.lambda_sigma(state.step)], np.float32)
    sec["meta.step"] = np.asarray(state.step, np.float32)
    sec.update(state.opt.state_arrays())
    return sec


def scene_from_sections(sec: dict):
    if "meta.kind" not in sec or _section_str(sec["meta.kind"]) != "scene":
        raise UsageFailure("checkpoint does not hold a scene")
    width, blocks, L, bgw, bgl, bgf = (int(v) for v in sec["meta.arch"])
    samples, res, lam = sec["meta.render"]
    lam = float(lam)
    rcfg = rd.RenderConfig(
        samples=int(samples),
        field=rd.FieldConfig(width=width, blocks=blocks, L=L, bg_width=bgw, bg_layers=bgl, bg_freqs=bgf),
        ipe=rd.IpeConfig(L=L, lambda_sigma_start=lam, lambda_sigma_end=lam),
    )
    params = {k[len("model."):]: v for k, v in sec.items() if k.startswith("model.")}
    return params, rcfg, int(res), int(np.ravel(sec["meta.step"])[0])


# --------------------------------------------------------------------------
# priors

def analytic_prior(cfg: RunConfig, data_shape: tuple[int, ...]) -> GaussianMixtureScore:
    kind = cfg["prior.kind"]
    d = int(np.prod(data_shape))
    if kind == "gaussian":
        return GaussianMixtureScore.single(data_shape, cfg["prior.mean"], cfg["prior.std"])
    if kind == "mixture":
        mix = ds.two_mode_mixture(d, cfg["prior.separation"], cfg["prior.mixture_std"])
        return GaussianMixtureScore(data_shape, {None: mix})
    raise ConfigError(f"prior.kind {kind!r} is not analytic")


def prior_model(cfg: RunConfig, data_shape: tuple[int, ...] | None = None):
    if cfg["prior.kind"] == "checkpoint":
        if not cfg["prior.checkpoint"]:
            raise ConfigError("prior.kind = checkpoint needs prior.checkpoint")
        return load_denoiser(cfg["prior.checkpoint"])
    return analytic_prior(cfg, data_shape or (cfg["prior.dim"],))


def prior_cond(cfg: RunConfig) -> Conditioning:
    # analytic priors only hold the unconditional marginal
    if cfg["prior.kind"] != "checkpoint":
        return Conditioning.null()
    return Conditioning(cfg["prior.tag"]) if cfg["prior.tag"] else Conditioning.null()


# --------------------------------------------------------------------------
# train-denoiser

def _denoiser_data(cfg: RunConfig, seed: int):
    kind = cfg["denoiser.dataset"]
    batch = cfg["denoiser.batch"]
    if kind == "gaussian2d":
        def sample(rng):
            return ds.gaussian_points(rng, batch, 2), Conditioning.null()
        return (2,), Vocabulary(()), sample
    if kind == "patterns":
        size = 8

        def sample(rng):
            x, conds = ds.pattern_batch(rng, batch, size)
            drop = rng.uniform(size=batch) < cfg["denoiser.p_uncond"]
            return x, [Conditioning.null() if dr else c for c, dr in zip(conds, drop)]
        return (size, size, 3), ds.pattern_vocab(), sample
    if kind == "primitives":
        size = cfg["denoiser.image_size"]
        imgs, conds = ds.primitive_dataset(seed, cfg["denoiser.n_images"], size)
        return imgs.shape[1:], ds.primitive_vocab(), ds.batch_sampler(imgs, conds, batch, cfg["denoiser.p_uncond"])
    raise ConfigError(f"unknown denoiser.dataset {kind!r}")


def heldout_loss(model: DenoiserMLP, x: np.ndarray, seed: int) -> float:
    return denoiser_loss(model, x, Conditioning.null(), nd.make_rng(seed, "heldout"))[0]


def gaussian_optimum(n: int, dim: int, seed: int) -> float:
    """MC estimate of ``E ||eps - sigma_t z_t||^2`` (the optimum for unit-Gaussian data)."""
    rng = nd.make_rng(seed, "optimum")
    x = rng.standard_normal((n, dim))
    t = rng.uniform(0, 1, n)
    eps = rng.standard_normal((n, dim))
    a, s = COSINE.coeffs(t)
    z = a[:, None] * x + s[:, None] * eps
    return float(np.mean(np.sum((eps - s[:, None] * z) ** 2, axis=1)))


def cmd_train_denoiser(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    seed = cfg["run.seed"]
    shape, vocab, sample = _denoiser_data(cfg, seed)
    steps = cfg["denoiser.steps"]
    start, opt = 0, None
    if cfg["denoiser.resume"]:
        model, opt, start = denoiser_from_sections(load_checkpoint(cfg["denoiser.resume"]))
    else:
        model = DenoiserMLP.create(shape, vocab, nd.make_rng(seed, "denoiser-init"),
                                   width=cfg["denoiser.width"], blocks=cfg["denoiser.blocks"])
    ckpt = out / "denoiser.ckpt"
    every = max(cfg["denoiser.checkpoint_every"], 1)
    t0 = time.perf_counter()
    opt = opt or nn.Adam(beta2=0.999)
    with MetricsLog(out / "metrics.csv", ["step", "loss", "lr", "wall"]) as log:
        def record(s, loss, lr):
            log.write({"step": s, "loss": loss, "lr": lr, "wall": time.perf_counter() - t0})
            if (s + 1) % every == 0 or s + 1 == steps:
                save_checkpoint(ckpt, denoiser_sections(model, opt, s + 1))

        train_denoiser(model, sample, steps, cfg["denoiser.lr"], seed, start_step=start, opt=opt, log=record,
                       lr_final=cfg["denoiser.lr_final"])
    summary = {"steps": steps, "params": model.n_params}
    if cfg["denoiser.dataset"] == "gaussian2d":
        n = cfg["denoiser.eval_size"]
        x = nd.make_rng(seed, "heldout-data").standard_normal((n, 2))
        summary["heldout_loss"] = heldout_loss(model, x, seed)
        summary["optimum_loss"] = gaussian_optimum(200000, 2, seed)
    atomic_write(out / "summary.txt", _text(summary))
    return summary


# --------------------------------------------------------------------------
# sample

def _point_cell(points: np.ndarray, size: int = 32, extent: float = 4.0) -> np.ndarray:
    """Greyscale 2-D histogram of samples as an RGB cell (dark = dense)."""
    p = points.reshape(len(points), -1)
    y = p[:, 1] if p.shape[1] > 1 else np.zeros(len(p))
    h, _, _ = np.histogram2d(-y, p[:, 0], bins=size, range=[[-extent, extent], [-extent, extent]])
    v = 1.0 - h / max(h.max(), 1.0)
    return np.repeat(v[..., None], 3, axis=-1)


def cmd_sample(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    model = prior_model(cfg)
    cond = prior_cond(cfg)
    omegas, seeds = cfg["sample.omegas"], cfg["sample.seeds"]
    image_like = len(model.data_shape) == 3
    n = 1 if image_like else cfg["sample.n_points"]
    cells = []
    rows = []
    for s in range(seeds):
        for w in omegas:
            rng = nd.make_rng(cfg["run.seed"], "sample", s)
            x = ancestral_sample(model, cond, w, cfg["sample.nstep"], rng=rng, n_samples=n,
                                 variance=cfg["sample.variance"])
            if image_like:
                cells.append(np.clip((x[0] + 1.0) * 0.5, 0, 1))
            else:
                cells.append(_point_cell(x))
                rows.extend((s, w, *pt) for pt in x.reshape(n, -1))
    save_png(out / "grid.png", image_grid(np.stack(cells), seeds, len(omegas)))
    if rows:
        lines = "seed,omega," + ",".join(f"x{i}" for i in range(len(rows[0]) - 2)) + "\n"
        lines += "".join(",".join(repr(float(v)) for v in r) + "\n" for r in rows)
        atomic_write(out / "samples.csv", lines.encode())
    return {"grid": (seeds, len(omegas))}


# --------------------------------------------------------------------------
# distill-2d

def _make_dip(cfg: RunConfig):
    kind = cfg["distill2d.dip"]
    h, w = cfg["distill2d.height"], cfg["distill2d.width"]
    if kind == "identity":
        return dp.IdentityDip((cfg["prior.dim"],)) if cfg["prior.kind"] != "checkpoint" else None
    if kind == "mirror":
        return dp.MirrorDip((h, w, 3))
    if kind == "coordmlp":
        return dp.ModelSpaceDip(dp.CoordMlpDip(resolution=(h, w)))
    raise ConfigError(f"unknown distill2d.dip {kind!r}")


def sds_config(cfg: RunConfig) -> SdsConfig:
    return SdsConfig(omega=cfg["sds.omega"], weight_kind=cfg["sds.weight"], include_alpha=cfg["sds.include_alpha"],
                     t_min=cfg["sds.t_min"], t_max=cfg["sds.t_max"], batch=cfg["sds.batch"],
                     control_variate=cfg["sds.control_variate"])


def distill_run(model, dip, cond: Conditioning, scfg: SdsConfig, steps: int, lr: float, seed: int,
                start: int = 0, full: bool = False, log=None, snapshot=None, snapshot_every: int = 0):
    """Adam on one DIP from its own initial draw, learning rate cosine-decayed to 1%.

    ``full`` swaps the SDS gradient for the gradient of the denoising loss
    through the model. Returns the final parameters.
    """
    params = dip.init_params(nd.make_rng(seed, "dip-init", start))
    opt = nn.Adam()
    for k in range(steps):
        rng = nd.make_rng(seed, "distill", start, k)
        if full:
            grads = ldiff_full_grad(model, dip, params, cond, scfg, rng)
            x = dip.generate(nn.as_tensors(params)).value
            proxy = float("nan")
        else:
            rep = sds_grad(model, dip, params, cond, scfg, rng)
            grads, x, proxy = rep.gradient, rep.image, rep.proxy_loss
        cur = lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * k / max(steps, 1))))
        params = opt.update(params, grads, cur)
        if log is not None:
            log(k, x, proxy, cur)
        if snapshot is not None and snapshot_every and (k % snapshot_every == 0 or k == steps - 1):
            snapshot(k, dip.generate(nn.as_tensors(params)).value)
    return params


def _check_symmetric(x: np.ndarray, step: int) -> bool:
    if x.ndim == 3 and not np.array_equal(x, x[:, ::-1]):
        raise FloatingPointError(f"mirror DIP output lost symmetry at step {step}")
    return True


def cmd_distill_2d(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    seed = cfg["run.seed"]
    kind = cfg["distill2d.dip"]
    scfg = sds_config(cfg)
    dip = _make_dip(cfg)
    if cfg["prior.kind"] == "checkpoint":
        model = prior_model(cfg)
        if dip is None:
            dip = dp.IdentityDip(model.data_shape)
    else:
        model = analytic_prior(cfg, dip.image_shape)
    cond = prior_cond(cfg)
    starts = cfg["distill2d.starts"] if kind == "identity" else 1
    steps = cfg["distill2d.steps"]
    finals = []
    snaps = out / "snapshots"
    fields = ["step", "start", "proxy", "lr", "x0", "symmetric"]
    with MetricsLog(out / "metrics.csv", fields) as log:
        for s in range(starts):
            rows = []

            def record(k, x, proxy, lr, s=s, rows=rows):
                sym = _check_symmetric(x, k) if kind == "mirror" else ""
                rows.append({"step": k, "start": s, "proxy": proxy, "lr": lr, "x0": float(np.ravel(x)[0]),
                             "symmetric": sym})

            def snap(k, x, s=s):
                if kind == "mirror":
                    _check_symmetric(x, k)
                if x.ndim == 3:
                    save_png(snaps / f"start{s:02d}_step{k:05d}.png", dp.to_unit(x))

            params = distill_run(model, dip, cond, scfg, steps, cfg["distill2d.lr"], seed, s, log=record,
                                 snapshot=snap, snapshot_every=cfg["distill2d.snapshot_every"])
            for r in rows:
                # metrics are keyed by a global step so the log stays monotone across starts
                log.write({**r, "step": s * steps + r["step"]})
            finals.append(dip.generate(nn.as_tensors(params)).value)
            if cfg["distill2d.compare_full"]:
                traj_sds, traj_full = [], []
                distill_run(model, dip, cond, scfg, steps, cfg["distill2d.lr"], seed, s,
                            log=lambda k, x, p, lr: traj_sds.append(float(np.ravel(x)[0])))
                distill_run(model, dip, cond, scfg, steps, cfg["distill2d.lr"], seed, s, full=True,
                            log=lambda k, x, p, lr: traj_full.append(float(np.ravel(x)[0])))
                text = "step,x0_sds,x0_full\n" + "".join(
                    f"{k},{a!r},{b!r}\n" for k, (a, b) in enumerate(zip(traj_sds, traj_full)))
                atomic_write(out / f"trajectory_start{s:02d}.csv", text.encode())
    finals = np.stack(finals)
    summary = {"starts": starts, "steps": steps}
    if kind == "identity":
        text = "start," + ",".join(f"x{i}" for i in range(finals.shape[1])) + "\n"
        text += "".join(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n" for i, row in enumerate(finals))
        atomic_write(out / "final.csv", text.encode())
        if isinstance(model, GaussianMixtureScore):
            means = model.mixture_for(None).means
            dist = np.min(np.linalg.norm(finals[:, None, :] - means[None], axis=-1), axis=1)
            summary["max_distance_to_mean"] = float(dist.max())
            summary["mean_distance_to_mean"] = float(dist.mean())
    else:
        save_png(out / "final.png", dp.to_unit(finals[0]))
        if kind == "mirror":
            summary["symmetric"] = bool(np.array_equal(finals[0], finals[0][:, ::-1]))
    save_checkpoint(out / "final.ckpt", {"final": finals.astype(np.float32)})
    atomic_write(out / "summary.txt", _text(summary))
    return summary


# --------------------------------------------------------------------------
# distill-3d

def train_config(cfg: RunConfig) -> so.TrainConfig:
    preset = cfg["scene.preset"]
    if preset == "desk":
        base = so.TrainConfig.desk()
    elif preset == "paper":
        base = so.TrainConfig()
    else:
        raise ConfigError(f"unknown scene.preset {preset!r}")
    sc = cfg.section("scene")
    top = {}
    for key in ("iterations", "resolution", "lr_start", "lr_peak", "lr_end", "lr_warmup", "orient_start",
                "orient_end", "orient_anneal_steps", "orient_in_albedo", "opacity_weight"):
        if sc[key] is not None:
            top[key] = sc[key]
    shading = base.shading
    shading = replace(
        shading,
        warmup_steps=sc["shading_warmup"] if sc["shading_warmup"] is not None else shading.warmup_steps,
        p_shaded=sc["p_shaded"] if sc["p_shaded"] is not None else shading.p_shaded,
        p_textureless=sc["p_textureless"] if sc["p_textureless"] is not None else shading.p_textureless,
        allow_shading=sc["shading"], allow_textureless=sc["textureless"],
    )
    r = base.render
    fld = replace(r.field, width=sc["field_width"] or r.field.width, blocks=sc["field_blocks"] or r.field.blocks)
    ipe = replace(
        r.ipe,
        lambda_sigma_start=sc["lambda_start"] if sc["lambda_start"] is not None else r.ipe.lambda_sigma_start,
        lambda_sigma_end=sc["lambda_end"] if sc["lambda_end"] is not None else r.ipe.lambda_sigma_end,
        anneal_steps=sc["lambda_anneal_steps"] if sc["lambda_anneal_steps"] is not None else r.ipe.anneal_steps,
    )
    render = replace(r, samples=sc["samples"] or r.samples, field=fld, ipe=ipe,
                     whiten_background=sc["whiten_background"])
    threads = 1 if cfg["run.deterministic"] else cfg["run.threads"]
    return replace(
        base, **top, shading=shading, render=render, omega=cfg["sds.omega"], t_min=cfg["sds.t_min"],
        t_max=cfg["sds.t_max"], weight_kind=cfg["sds.weight"], views=sc["views"], threads=threads,
        view_prompts=sc["view_prompts"], view_blend=sc["view_blend"],
        light_zero_variance=sc["light_zero_variance"], base_tag=sc["tag"], seed=cfg["run.seed"],
    )


def turntable(params: dict, rcfg: rd.RenderConfig, width: int, elevation: float, n: int, mode: str,
              distance: float = 1.25):
    """``n`` renders around the object at a fixed elevation, plus their normal images."""
    imgs, norms = [], []
    for cs in so.eval_cameras(width, n, elevation, distance):
        light = rd.LightSpec(cs.position / np.linalg.norm(cs.position) * 1.2,
                             *(so.ALBEDO_LIGHT if mode == "albedo" else so.SHADED_LIGHT))
        out = rd.render(params, cs.camera, light, mode, rcfg, 0, None, need_normals=True)
        imgs.append(np.clip(out.rgb.value, 0, 1))
        norms.append(rd.normal_image(out))
    return np.stack(imgs), np.stack(norms)


def cmd_distill_3d(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    if not cfg["scene.denoiser"]:
        raise ConfigError("distill-3d needs scene.denoiser (a checkpoint from train-denoiser)")
    model = load_denoiser(cfg["scene.denoiser"])
    tcfg = train_config(cfg)
    if tuple(model.data_shape) != (tcfg.resolution, tcfg.resolution, 3):
        raise ConfigError(f"denoiser data shape {model.data_shape} does not match resolution {tcfg.resolution}")
    state = so.SceneState.create(tcfg)
    before = so.central_opacity_fraction(state.params, tcfg)
    ckpt = out / "scene.ckpt"
    every = max(cfg["scene.checkpoint_every"], 1)
    fields = ["step", "sds_proxy", "sds_residual", "orient", "opacity_reg", "opacity_mean", "lr", "mode", "t",
              "view", "wall"]
    with MetricsLog(out / "metrics.csv", fields) as log:
        while state.step < tcfg.iterations:
            m = so.train_step(state, tcfg, model)
            log.write(m)
            if state.step % every == 0 or state.step == tcfg.iterations:
                save_checkpoint(ckpt, scene_sections(state, tcfg))
    rcfg = replace(tcfg.render, ipe=rd.IpeConfig(tcfg.render.ipe.L, tcfg.lambda_sigma(state.step),
                                                 tcfg.lambda_sigma(state.step)))
    for mode in rd.MODES:
        imgs, norms = turntable(state.params, rcfg, tcfg.resolution, cfg["scene.turntable_elevation"],
                                cfg["scene.turntable_views"], mode)
        save_png(out / f"turntable_{mode}.png", image_grid(imgs, 1, len(imgs)))
        if mode == "shaded":
            save_png(out / "turntable_normals.png", image_grid(norms, 1, len(norms)))
    after = so.central_opacity_fraction(state.params, tcfg)
    summary = {"iterations": tcfg.iterations, "central_opacity_before": before, "central_opacity_after": after}
    atomic_write(out / "summary.txt", _text(summary))
    return summary


# --------------------------------------------------------------------------
# render

def cmd_render(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    if cfg["render.blob_only"]:
        rcfg = rd.RenderConfig()
        params = rd.zero_field_params(rcfg.field)
        res = cfg["render.resolution"] or 32
    else:
        if not cfg["render.checkpoint"]:
            raise ConfigError("render needs render.checkpoint (or render.blob_only = true)")
        params, rcfg, res, _ = scene_from_sections(load_checkpoint(cfg["render.checkpoint"]))
        res = cfg["render.resolution"] or res
    written = []
    for elev in cfg["render.elevations"]:
        for az in cfg["render.azimuths"]:
            cs = so.fixed_camera(elev, az, cfg["render.distance"], res)
            for mode in cfg["render.modes"]:
                if mode not in rd.MODES:
                    raise ConfigError(f"unknown render mode {mode!r}")
                light = rd.LightSpec(cs.position / np.linalg.norm(cs.position) * 1.2,
                                     *(so.ALBEDO_LIGHT if mode == "albedo" else so.SHADED_LIGHT))
                o = rd.render(params, cs.camera, light, mode, rcfg, 0, None, need_normals=True)
                name = f"e{elev:g}_a{az:g}_{mode}.png"
                save_png(out / name, np.clip(o.rgb.value, 0, 1))
                written.append(name)
            save_png(out / f"e{elev:g}_a{az:g}_normals.png", rd.normal_image(o))
    return {"images": written}


# --------------------------------------------------------------------------
# gradcheck and sweeps

def cmd_gradcheck(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    reports = gradsuite.run_suite(corrupt=cfg["gradcheck.corrupt"], tol=cfg["gradcheck.tol"])
    text = gradsuite.format_report(reports)
    atomic_write(out / "gradcheck.txt", (text + "\n").encode())
    return {"passed": all(r.passed for r in reports), "report": text,
            "failed": [r.name for r in reports if not r.passed]}


ABLATIONS = {
    "i": {"scene.view_prompts": "false", "scene.shading": "false", "scene.textureless": "false"},
    "ii": {"scene.view_prompts": "true", "scene.shading": "false", "scene.textureless": "false"},
    "iii": {"scene.view_prompts": "true", "scene.shading": "true", "scene.textureless": "false"},
    "iv": {"scene.view_prompts": "true", "scene.shading": "true", "scene.textureless": "true"},
}


def ablation_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    out = {}
    for name, sets in ABLATIONS.items():
        c = RunConfig(dict(cfg.values))
        for k, v in sets.items():
            c.set(k, v)
        out[name] = c
    return out


def cmd_sweep(cfg: RunConfig, out) -> dict:
    out = _prepare(cfg, out)
    kind = cfg["sweep.kind"]
    if kind == "guidance":
        c = RunConfig(dict(cfg.values))
        c.values["sample.omegas"] = list(cfg["sweep.omegas"])
        return cmd_sample(c, out / "guidance")
    if kind == "ablation":
        results = {}
        for name, c in ablation_configs(cfg).items():
            c.values["scene.iterations"] = cfg["sweep.ablation_iterations"]
            results[name] = cmd_distill_3d(c, out / f"ablation_{name}")
        return results
    raise ConfigError(f"unknown sweep.kind {kind!r}")
