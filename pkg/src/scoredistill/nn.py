"""Small building blocks shared by the MLPs: initialisation, layers, Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0):
    """He-style normal weights and zero bias."""
    w = rng.standard_normal((fan_in, fan_out)) * (gain * np.sqrt(2.0 / fan_in))
    return w.astype(np.float32), np.zeros(fan_out, np.float32)


def linear(x, p: dict, name: str):
    return nd.add(nd.matmul(x, p[name + ".w"]), p[name + ".b"])


def add_linear(params: dict, rng, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> None:
    params[name + ".w"], params[name + ".b"] = init_linear(rng, fan_in, fan_out, gain)


def as_tensors(params: dict) -> dict:
    """Wrap plain arrays as constant tensors (no graph)."""
    return {k: v if isinstance(v, nd.Tensor) else nd.Tensor(np.asarray(v, dtype=nd.get_default_dtype()))
            for k, v in params.items()}


def param_count(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def sinusoidal(x: np.ndarray, n_freqs: int, include_input: bool = True) -> np.ndarray:
    """Plain positional encoding ``[x, sin(2^k x), cos(2^k x)]`` on the last axis."""
    freqs = 2.0 ** np.arange(n_freqs)
    xb = x[..., None, :] * freqs[:, None]
    feats = [np.sin(xb).reshape(*x.shape[:-1], -1), np.cos(xb).reshape(*x.shape[:-1], -1)]
    if include_input:
        feats.insert(0, x)
    return np.concatenate(feats, axis=-1)


@dataclass
class Adam:
    """Adam with bias correction; state lives in plain arrays so it checkpoints."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict, lr: float) -> dict:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m.get(k)
            v = self.v.get(k)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = (b1 * m + (1 - b1) * g).astype(p.dtype)
            v = (b2 * v + (1 - b2) * g * g).astype(p.dtype)
            self.m[k], self.v[k] = m, v
            out[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return out

    def state_arrays(self) -> dict:
        d = {"opt.step": np.asarray(self.step, np.float32)}
        d.update({f"opt.m.{k}": v for k, v in self.m.items()})
        d.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return d

    def load_state_arrays(self, d: dict) -> None:
        self.step = int(np.ravel(d["opt.step"])[0])
        self.m = {k[len("opt.m."):]: v for k, v in d.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: v for k, v in d.items() if k.startswith("opt.v.")}
