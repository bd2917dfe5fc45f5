"""Self-blended fake synthesis: ``T^s(x) * M + x * (1 - M)``."""

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import cv2
import numpy as np

from ._validation import check_image, check_mask
from .embedding import landmark_mask
from .trigger_math import translate


@dataclass(frozen=True)
class BlendTransformConfig:
    """Source-side transform chain applied before blending.

    ``codec`` is an optional lossy-compression hook run right after
    resampling; it receives and returns a float H×W×C image in [0, 255].
    """

    max_translate: int = 3
    brightness_jitter: float = 0.1
    contrast_jitter: float = 0.1
    downscale_factor_range: tuple = (0.5, 1.0)
    seed: int = 0
    mask_sigma: float = 3.0
    codec: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.max_translate < 0:
            raise ValueError("max_translate must be >= 0")
        for name in ("brightness_jitter", "contrast_jitter"):
            value = getattr(self, name)
            if not 0.0 <= value <= 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5], got {value}")
        lo, hi = self.downscale_factor_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"downscale_factor_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        object.__setattr__(self, "downscale_factor_range", (float(lo), float(hi)))

    @classmethod
    def identity(cls, seed=0):
        return cls(0, 0.0, 0.0, (1.0, 1.0), seed)

    def to_dict(self):
        return {
            "max_translate": self.max_translate,
            "brightness_jitter": self.brightness_jitter,
            "contrast_jitter": self.contrast_jitter,
            "downscale_factor_range": list(self.downscale_factor_range),
            "seed": self.seed,
            "mask_sigma": self.mask_sigma,
        }


def _resample(x, factor):
    h, w = x.shape[:2]
    small = (max(1, int(round(w * factor))), max(1, int(round(h * factor))))
    down = cv2.resize(x.astype(np.float32), small, interpolation=cv2.INTER_AREA)
    up = cv2.resize(down, (w, h), interpolation=cv2.INTER_LINEAR)
    return up.reshape(x.shape).astype(np.float64)


def source_transform(x, cfg, rng, offset=None):
    """Jitter, downscale-upscale, then translate ``x`` (zero fill).

    ``offset`` pins the translation instead of drawing it from ``rng``.
    """
    x = check_image(x)
    out = x
    if cfg.brightness_jitter > 0:
        out = out + 255.0 * rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    if cfg.contrast_jitter > 0:
        scale = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter)
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = (out - mean) * scale + mean
    lo, hi = cfg.downscale_factor_range
    factor = rng.uniform(lo, hi) if hi > lo else lo
    if factor < 1.0:
        out = _resample(np.clip(out, 0, 255), factor)
    if cfg.codec is not None:
        out = np.asarray(cfg.codec(np.clip(out, 0, 255)), dtype=np.float64)
    if offset is None and cfg.max_translate > 0:
        offset = tuple(rng.integers(-cfg.max_translate, cfg.max_translate + 1, size=2))
    if offset is not None and tuple(offset) != (0, 0):
        out = translate(out, offset)
    return np.clip(out, 0.0, 255.0)


def self_blend(x, landmarks, cfg, rng, mask=None, offset=None):
    """Blend a transformed copy of ``x`` back into ``x`` under the landmark mask.

    Returns ``(fake, mask)``. A precomputed ``mask`` skips the hull step.
    """
    x = check_image(x)
    if mask is None:
        mask = landmark_mask(landmarks, x.shape[0], x.shape[1], sigma=cfg.mask_sigma)
    mask = check_mask(mask, x.shape[:2])
    if not mask.any():
        warnings.warn("blend mask is all zero; returning the input unchanged", stacklevel=2)
        return x.copy(), mask
    source = source_transform(x, cfg, rng, offset=offset)
    m = mask[:, :, None]
    # x + (T(x) - x) * M equals T(x) * M + x * (1 - M) and is exact where T(x) == x
    fake = np.where(m > 0, x + (source - x) * m, x)
    return fake, mask
