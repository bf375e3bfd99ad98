"""Flat ``section.key = value`` run configuration.

Files may group keys under ``[section]`` headers; ``#`` starts a comment.
Command-line ``--set`` overrides win over the file. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        return [conv(x) for x in s.replace(",", " ").split()]
    parse.__name__ = f"list[{conv.__name__}]"
    return parse


def _opt(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none") else conv(s)
    parse.__name__ = f"optional[{conv.__name__}]"
    return parse


FLOATS = _list(float)
INTS = _list(int)
STRS = _list(str)

# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "run.seed": (int, 0),
    "run.deterministic": (_bool, False),
    "run.threads": (int, 1),
    # score distillation
    "sds.omega": (float, 100.0),
    "sds.weight": (str, "sigma_sq"),
    "sds.include_alpha": (_bool, False),
    "sds.t_min": (float, 0.02),
    "sds.t_max": (float, 0.98),
    "sds.batch": (int, 1),
    "sds.control_variate": (_bool, True),
    # analytic priors
    "prior.kind": (str, "mixture"),               # gaussian | mixture | checkpoint
    "prior.dim": (int, 1),
    "prior.mean": (float, 0.0),
    "prior.std": (float, 1.0),
    "prior.separation": (float, 2.0),
    "prior.mixture_std": (float, 0.1),
    "prior.checkpoint": (_opt(str), None),
    "prior.tag": (_opt(str), None),
    # denoiser training
    "denoiser.dataset": (str, "gaussian2d"),      # gaussian2d | patterns | primitives
    "denoiser.steps": (int, 5000),
    "denoiser.batch": (int, 64),
    "denoiser.lr": (float, 2e-3),
    "denoiser.lr_final": (float, 2e-5),
    "denoiser.width": (int, 256),
    "denoiser.blocks": (int, 2),
    "denoiser.n_images": (int, 2000),
    "denoiser.image_size": (int, 32),
    "denoiser.p_uncond": (float, 0.1),
    "denoiser.checkpoint_every": (int, 1000),
    "denoiser.resume": (_opt(str), None),
    "denoiser.eval_size": (int, 4096),
    # ancestral sampling
    "sample.omegas": (FLOATS, [0.0, 1.0, 3.0]),
    "sample.seeds": (int, 4),
    "sample.nstep": (int, 64),
    "sample.variance": (str, "large"),
    "sample.n_points": (int, 10000),
    # 2-D distillation
    "distill2d.dip": (str, "identity"),           # identity | mirror | coordmlp
    "distill2d.steps": (int, 1000),
    "distill2d.lr": (float, 0.02),
    "distill2d.starts": (int, 20),
    "distill2d.snapshot_every": (int, 100),
    "distill2d.compare_full": (_bool, False),
    "distill2d.height": (int, 8),
    "distill2d.width": (int, 8),
    # 3-D scene optimization
    "scene.preset": (str, "desk"),                # desk | paper
    "scene.denoiser": (_opt(str), None),
    "scene.tag": (_opt(str), "sphere"),
    "scene.iterations": (_opt(int), None),
    "scene.resolution": (_opt(int), None),
    "scene.samples": (_opt(int), None),
    "scene.field_width": (_opt(int), None),
    "scene.field_blocks": (_opt(int), None),
    "scene.lr_start": (_opt(float), None),
    "scene.lr_peak": (_opt(float), None),
    "scene.lr_end": (_opt(float), None),
    "scene.lr_warmup": (_opt(int), None),
    "scene.orient_start": (_opt(float), None),
    "scene.orient_end": (_opt(float), None),
    "scene.orient_anneal_steps": (_opt(int), None),
    "scene.orient_in_albedo": (_opt(_bool), None),
    "scene.opacity_weight": (_opt(float), None),
    "scene.shading_warmup": (_opt(int), None),
    "scene.p_shaded": (_opt(float), None),
    "scene.p_textureless": (_opt(float), None),
    "scene.shading": (_bool, True),
    "scene.textureless": (_bool, True),
    "scene.view_prompts": (_bool, True),
    "scene.view_blend": (_bool, False),
    "scene.light_zero_variance": (_bool, False),
    "scene.whiten_background": (_bool, False),
    "scene.views": (int, 1),
    "scene.lambda_start": (_opt(float), None),
    "scene.lambda_end": (_opt(float), None),
    "scene.lambda_anneal_steps": (_opt(int), None),
    "scene.checkpoint_every": (int, 250),
    "scene.turntable_elevation": (float, 15.0),
    "scene.turntable_views": (int, 8),
    # rendering a saved scene
    "render.checkpoint": (_opt(str), None),
    "render.elevations": (FLOATS, [15.0]),
    "render.azimuths": (FLOATS, [0.0, 90.0, 180.0, 270.0]),
    "render.distance": (float, 1.25),
    "render.modes": (STRS, ["albedo", "shaded", "textureless"]),
    "render.resolution": (_opt(int), None),
    "render.blob_only": (_bool, False),
    # harnesses
    "sweep.kind": (str, "guidance"),              # guidance | ablation
    "sweep.omegas": (FLOATS, [0.0, 1.0, 3.0, 10.0]),
    "sweep.ablation_iterations": (int, 50),
    "gradcheck.corrupt": (_opt(str), None),       # op kind whose VJP is sign-flipped
    "gradcheck.tol": (float, 1e-4),
}


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    section = ""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if section and "." not in k:
            k = f"{section}.{k}"
        out[k] = v
    return out


def coerce(key: str, raw: str):
    if key not in SCHEMA:
        close = [k for k in SCHEMA if k.split(".")[-1] == key.split(".")[-1]]
        hint = f" (did you mean {close[0]}?)" if close else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")
    conv = SCHEMA[key][0]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        self.values[key] = coerce(key, raw)

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> RunConfig:
        cfg = cls()
        for k, v in parse_text(text, origin).items():
            cfg.set(k, v)
        return cfg


def build(path: str | None = None, sets: list[str] | None = None, **flags) -> RunConfig:
    """File, then ``--set`` pairs, then dedicated flags (``seed``, ``threads``, ...)."""
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from None
        for k, v in parse_text(text, str(path)).items():
            cfg.set(k, v)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        cfg.set(k, v)
    for k, v in flags.items():
        if v is not None:
            cfg.values[f"run.{k}"] = v
    return cfg
