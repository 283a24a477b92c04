"""Small convolutional encoder with hand-written backward pass and Adam.

Architecture: K blocks of (3x3 conv -> squareplus -> 2x2 average pool), global
average pooling, a linear projection to ``embed_dim`` and L2 normalization.
Parameters live in a plain dict whose insertion order is the declaration order
used by checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError


@dataclass
class EncoderConfig:
    input_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.input_size % (2 ** len(self.channels)):
            raise ValueError("input_size must be divisible by 2**len(channels)")
        if self.embed_dim < 1 or not self.channels:
            raise ValueError("need at least one block and embed_dim >= 1")

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "channels": list(self.channels), "embed_dim": self.embed_dim}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 200
    batch_size: int = 12
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


def param_names(cfg: EncoderConfig) -> list[str]:
    names = []
    for k in range(len(cfg.channels)):
        names += [f"conv{k + 1}.w", f"conv{k + 1}.b"]
    return names + ["proj.w", "proj.b"]


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform initialization; biases start at zero."""
    params = {}
    c_in = 3
    for k, c_out in enumerate(cfg.channels):
        bound = np.sqrt(6.0 / (c_in * 9))
        params[f"conv{k + 1}.w"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
        params[f"conv{k + 1}.b"] = np.zeros(c_out)
        c_in = c_out
    bound = np.sqrt(6.0 / c_in)
    params["proj.w"] = rng.uniform(-bound, bound, (c_in, cfg.embed_dim))
    params["proj.b"] = np.zeros(cfg.embed_dim)
    return params


def to_input(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) intensities in [0, 255] -> centered (N, 3, H, W) floats."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)) / 255.0 - 0.5


def forward(params, images, cfg: EncoderConfig, impl=None):
    """Embed a batch of images. Returns ``(z, cache)`` with unit-norm rows ``z``."""
    x = to_input(images)
    if x.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ValueError(
            f"expected {cfg.input_size}x{cfg.input_size} RGB input, got {x.shape[2]}x{x.shape[3]}"
        )
    cache = {"blocks": []}
    for k in range(len(cfg.channels)):
        pre = kernels.conv3x3_forward(x, params[f"conv{k + 1}.w"], params[f"conv{k + 1}.b"], impl)
        act, slope = kernels.squareplus_with_grad(pre, impl)
        cache["blocks"].append((x, slope))
        x = kernels.avg_pool2(act, impl)
    pooled = x.mean(axis=(2, 3))
    u = pooled @ params["proj.w"] + params["proj.b"]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    z = u / norm
    cache.update(last_shape=x.shape, pooled=pooled, z=z, norm=norm)
    return z, cache


def normalize_backward(z, norm, dz):
    """Gradient through u -> u / ||u||: project out the z direction, scale by 1/||u||."""
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm


def backward(params, cache, dz, impl=None, input_grad=False):
    """Parameter gradients given ``dz`` = dLoss/dz.

    Returns ``(grads, dx)``; ``dx`` (gradient w.r.t. the centered input) is only
    computed when ``input_grad`` is set, otherwise it is ``None``.
    """
    grads = {}
    du = normalize_backward(cache["z"], cache["norm"], dz)
    grads["proj.w"] = cache["pooled"].T @ du
    grads["proj.b"] = du.sum(axis=0)
    dpooled = du @ params["proj.w"].T
    n, c, h, w = cache["last_shape"]
    dx = np.broadcast_to(dpooled[:, :, None, None] / (h * w), (n, c, h, w))
    for k in reversed(range(len(cache["blocks"]))):
        x_in, slope = cache["blocks"][k]
        dpre = kernels.avg_pool2_backward_mul(dx, slope, impl)
        grads[f"conv{k + 1}.w"] = kernels.conv3x3_weight_grad(x_in, dpre, impl)
        grads[f"conv{k + 1}.b"] = dpre.sum(axis=(0, 2, 3))
        if k > 0 or input_grad:
            dx = kernels.conv3x3_input_grad(dpre, params[f"conv{k + 1}.w"], impl)
        else:
            dx = None
    ordered = {name: grads[name] for name in params}
    return ordered, dx


def embed(params, images, cfg: EncoderConfig, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        z, _ = forward(params, images[start : start + batch_size], cfg)
        out.append(z)
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim))


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.learning_rate * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            params[name] = params[name] - update
            if not np.all(np.isfinite(params[name])):
                raise NumericalError(f"parameter {name} became non-finite at step {self.t}")
