"""Probability-gated augmentation pipeline for building positive pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.ndimage import correlate1d

from .stain import StainConfig, hed_augment, validate_image

TRANSFORM_IDS = ("crop", "jitter", "blur", "geometric", "hed")
GEOMETRIC_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "crop": {"scale_min": 0.6, "scale_max": 1.0},
    "jitter": {"brightness": 0.2, "contrast": 0.2, "saturation": 0.2},
    "blur": {"sigma_min": 0.1, "sigma_max": 1.5},
    "geometric": {"ops": list(GEOMETRIC_OPS)},
    "hed": {"strength": 0.05, "max_iterations": 30, "sparsity_weight": 0.1},
}
DEFAULT_PROBS = {"crop": 0.5, "jitter": 0.5, "blur": 0.5, "geometric": 0.5, "hed": 0.3}


@dataclass
class AugmentStep:
    transform: str
    probability: float
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class AugmentPipeline:
    steps: list[AugmentStep]
    rng_seed: int = 0

    def __post_init__(self):
        for step in self.steps:
            if step.transform not in TRANSFORM_IDS:
                raise ValueError(f"unknown transform {step.transform!r}")
            if not 0.0 <= step.probability <= 1.0:
                raise ValueError(f"probability for {step.transform} must lie in [0, 1]")
            merged = dict(DEFAULT_PARAMS[step.transform])
            merged.update(step.params)
            step.params = merged
            if step.transform == "crop":
                lo, hi = merged["scale_min"], merged["scale_max"]
                if hi > 1.0:
                    raise ValueError("crop size exceeds image dimensions (scale_max > 1)")
                if not 0.0 < lo <= hi:
                    raise ValueError("crop scale range must satisfy 0 < scale_min <= scale_max")
            if step.transform == "geometric":
                bad = set(merged["ops"]) - set(GEOMETRIC_OPS)
                if bad or not merged["ops"]:
                    raise ValueError(f"bad geometric ops {sorted(bad)}")

    @classmethod
    def default(cls, rng_seed: int = 0, probabilities: dict[str, float] | None = None):
        probs = dict(DEFAULT_PROBS)
        probs.update(probabilities or {})
        return cls([AugmentStep(t, probs[t]) for t in TRANSFORM_IDS], rng_seed)

    def without(self, transform: str) -> "AugmentPipeline":
        return AugmentPipeline([s for s in self.steps if s.transform != transform], self.rng_seed)

    def step(self, transform: str) -> AugmentStep | None:
        for s in self.steps:
            if s.transform == transform:
                return s
        return None


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers, edge-clamped."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def random_crop(image, rng, scale_min, scale_max):
    h, w = image.shape[:2]
    scale = rng.uniform(scale_min, scale_max)
    side = int(round(np.sqrt(scale) * min(h, w)))
    side = max(1, min(side, h, w))
    top = rng.integers(0, h - side + 1)
    left = rng.integers(0, w - side + 1)
    return resize_bilinear(image[top : top + side, left : left + side], h, w)


def _gray(image):
    return image @ np.array([0.299, 0.587, 0.114])


def color_jitter(image, rng, brightness, contrast, saturation):
    b = rng.uniform(1 - brightness, 1 + brightness)
    c = rng.uniform(1 - contrast, 1 + contrast)
    s = rng.uniform(1 - saturation, 1 + saturation)
    out = np.clip(image * b, 0, 255)
    mean = _gray(out).mean()
    out = np.clip((out - mean) * c + mean, 0, 255)
    gray = _gray(out)[..., None]
    return np.clip((out - gray) * s + gray, 0, 255)


def blur_kernel_size(side: int) -> int:
    k = max(1, int(round(side / 8)))
    return k if k % 2 == 1 else k + 1


def gaussian_blur(image, rng, sigma_min, sigma_max):
    sigma = rng.uniform(sigma_min, sigma_max)
    k = blur_kernel_size(min(image.shape[:2]))
    r = k // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = correlate1d(image, taps, axis=0, mode="reflect")
    return correlate1d(out, taps, axis=1, mode="reflect")


def geometric(image, rng, ops):
    op = ops[rng.integers(len(ops))]
    return apply_geometric(image, op)


def apply_geometric(image, op):
    if op == "hflip":
        return image[:, ::-1].copy()
    if op == "vflip":
        return image[::-1].copy()
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
    return np.rot90(image, k, axes=(0, 1)).copy()


def _hed(image, rng, strength, max_iterations, sparsity_weight):
    cfg = StainConfig(sparsity_weight=sparsity_weight, max_iterations=max_iterations)
    return hed_augment(image, cfg, strength, rng)


_APPLY = {
    "crop": random_crop,
    "jitter": color_jitter,
    "blur": gaussian_blur,
    "geometric": geometric,
    "hed": _hed,
}


def apply_pipeline(
    pipeline: AugmentPipeline, image: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Run each step with its own probability; output keeps the input size and range.

    Non-square images keep their shape under crop/flip/rot180 only; 90-degree
    rotations of a non-square image are skipped.
    """
    out = validate_image(image).copy()
    for step in pipeline.steps:
        if rng.random() >= step.probability:
            continue
        if step.transform == "geometric" and out.shape[0] != out.shape[1]:
            ops = [o for o in step.params["ops"] if o not in ("rot90", "rot270")]
            if not ops:
                continue
            out = geometric(out, rng, ops)
        else:
            out = _APPLY[step.transform](out, rng, **step.params)
        # Rounding in blur/resize can step a hair outside the range.
        out = np.clip(out, 0.0, 255.0)
    return out


def make_positive_pair(
    pipeline: AugmentPipeline, image: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    return apply_pipeline(pipeline, image, rng), apply_pipeline(pipeline, image, rng)
