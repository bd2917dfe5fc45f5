"""Landmark masks, trigger embedding and stealthiness metrics."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import ConvexHull, QhullError
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_fraction, check_image, check_mask, check_pattern, check_same_shape

MODES = ("relative", "absolute")
# psnr() returns this for identical inputs; reports serialise it as "identical".
PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class EmbedConfig:
    scalar_ratio: float = 0.05
    mode: str = "relative"

    def __post_init__(self):
        check_fraction(self.scalar_ratio, "scalar_ratio", 0.0, 0.1)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def linf_budget(self):
        return self.scalar_ratio * 255.0


def _check_landmarks(landmarks):
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 landmarks, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("landmarks contain non-finite coordinates")
    return pts


def hull_fill(landmarks, height, width):
    """Binary fill of the landmark convex hull; pixel (i, j) sits at (x=j, y=i).

    Collinear landmarks fall back to a one-pixel line between the extreme
    points, with a warning.
    """
    pts = _check_landmarks(landmarks)
    if pts[:, 0].min() < 0 or pts[:, 0].max() > width - 1 or pts[:, 1].min() < 0 or pts[:, 1].max() > height - 1:
        raise ValueError(f"landmarks fall outside a {height}x{width} image")
    ys, xs = np.mgrid[0:height, 0:width]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        warnings.warn("landmarks are collinear; mask degenerates to a line band", stacklevel=3)
        return _line_fill(pts, height, width)
    eq = hull.equations
    inside = (grid @ eq[:, :2].T + eq[:, 2] <= 1e-9).all(axis=1)
    return inside.reshape(height, width).astype(np.float64)


def _line_fill(pts, height, width):
    centred = pts - pts.mean(axis=0)
    direction = np.linalg.svd(centred)[2][0]
    proj = centred @ direction
    a, b = pts[np.argmin(proj)], pts[np.argmax(proj)]
    steps = int(np.ceil(np.abs(b - a).max())) + 1
    out = np.zeros((height, width))
    for t in np.linspace(0.0, 1.0, steps):
        x, y = a + t * (b - a)
        out[int(round(y)), int(round(x))] = 1.0
    return out


def landmark_mask(landmarks, height, width, sigma=3.0):
    """Soft blend mask: landmark hull fill smoothed by a Gaussian of ``sigma`` px."""
    hard = hull_fill(landmarks, height, width)
    if sigma <= 0:
        return hard
    soft = gaussian_filter(hard, sigma=sigma, mode="constant")
    return np.clip(soft, 0.0, 1.0)


def embed_trigger(x, delta, mask, cfg=EmbedConfig(), return_clipped=False):
    """Embed ``delta`` into ``x`` inside ``mask``.

    relative: ``x + (a * x / 255) * delta * M``; absolute: ``x + a * delta * M``.
    The result is clipped to [0, 255]. With ``return_clipped`` the number of
    clipped elements is returned as well.
    """
    x = check_image(x)
    delta = check_pattern(delta)
    check_same_shape(x, delta, ("x", "delta"))
    mask = check_mask(mask, x.shape[:2])
    a = cfg.scalar_ratio
    alpha = a * x / 255.0 if cfg.mode == "relative" else a
    raw = x + alpha * delta * mask[:, :, None]
    out = np.clip(raw, 0.0, 255.0)
    if return_clipped:
        return out, int(np.count_nonzero(raw != out))
    return out


def psnr(x, y, peak=255.0):
    """Peak signal-to-noise ratio in dB; ``PSNR_IDENTICAL`` when MSE is zero."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def linf(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y)
    return float(np.abs(x - y).max()) if x.size else 0.0


class TriggerEmbedder(TransformerMixin, BaseEstimator):
    """Transformer that stamps a fixed trigger onto a batch of images.

    ``fit`` samples (or accepts) the trigger for the image size seen; ``transform``
    takes the images plus one mask per image (whole-image mask if omitted).
    """

    def __init__(self, generator=None, trigger=None, scalar_ratio=0.05, mode="relative", seed=0):
        self.generator = generator
        self.trigger = trigger
        self.scalar_ratio = scalar_ratio
        self.mode = mode
        self.seed = seed

    def fit(self, X, y=None):
        X = np.asarray(X)
        h, w = X.shape[1:3]
        self.config_ = EmbedConfig(self.scalar_ratio, self.mode)
        if self.trigger is not None:
            self.trigger_ = check_pattern(self.trigger)
        elif self.generator is not None:
            self.trigger_ = self.generator.sample(h, w, self.seed)
        else:
            raise ValueError("TriggerEmbedder needs a generator or a trigger")
        return self

    def transform(self, X, masks=None):
        if not hasattr(self, "trigger_"):
            raise NotFittedError("TriggerEmbedder is not fitted")
        X = np.asarray(X, dtype=np.float64)
        out = np.empty_like(X)
        for i, img in enumerate(X):
            m = np.ones(img.shape[:2]) if masks is None else masks[i]
            out[i] = embed_trigger(img, self.trigger_, m, self.config_)
        return out
