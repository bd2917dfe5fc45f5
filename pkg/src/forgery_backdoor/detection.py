"""Toy face-forgery detectors in deepfake-artifact and blending-artifact modes.

``deepfake_artifact`` trains on the manifest's real and fake subsets.
``blending_artifact`` ignores fake records: every batch pairs real images with
fakes synthesised on the fly by :func:`~forgery_backdoor.blending.self_blend`,
so a trigger present in a real image flows into its blended fake.
"""

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from ._validation import TrainingDivergedError, check_image
from .blending import BlendTransformConfig, self_blend
from .embedding import landmark_mask

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "forgery_backdoor.detector/v1"
MODES = ("deepfake_artifact", "blending_artifact")
BACKBONES = {"toy_cnn_small": (16, 32, 64, 64), "toy_cnn_large": (32, 64, 128, 128)}
# full-length training schedule, kept as a preset rather than the default
FULL_SCALE = {"iterations": 36000, "batch_size": 32}


class ToyCNN(nn.Module):
    """Four conv blocks, global average pooling, linear head (2 logits).

    ``channel_mask`` multiplies the last block's activations; fine-pruning
    zeroes entries of it.
    """

    def __init__(self, widths):
        super().__init__()
        blocks = []
        c_in = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, w, 3, padding=1, bias=False),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(c_in, 2)
        self.register_buffer("channel_mask", torch.ones(c_in))

    @property
    def last_conv(self):
        return self.blocks[-1][0]

    def features(self, x):
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                x = F.max_pool2d(x, 2)
        return x * self.channel_mask[None, :, None, None]

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


def _to_tensor(images):
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


class ForgeryDetector(ClassifierMixin, BaseEstimator):
    """Binary real(0)/fake(1) face classifier with a small CNN backbone.

    ``fit(X, y, landmarks=...)`` takes stacked H×W×3 images in [0, 255]. In
    blending mode only rows with ``y == 0`` are used and ``landmarks`` (one
    point list per row) must be given.
    """

    def __init__(
        self,
        mode="blending_artifact",
        backbone="toy_cnn_small",
        input_size=64,
        iterations=2000,
        batch_size=32,
        learning_rate=1e-3,
        seed=0,
        blend_cfg=None,
        mask_sigma=3.0,
    ):
        self.mode = mode
        self.backbone = backbone
        self.input_size = input_size
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.blend_cfg = blend_cfg
        self.mask_sigma = mask_sigma

    def _validate_params(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {tuple(BACKBONES)}, got {self.backbone!r}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.mode == "blending_artifact" and self.blend_cfg is None:
            raise ValueError("blending_artifact mode requires blend_cfg")

    def _build(self):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            return ToyCNN(BACKBONES[self.backbone])

    def _check_inputs(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != (self.input_size, self.input_size, 3):
            raise ValueError(
                f"expected images of shape ({self.input_size}, {self.input_size}, 3), got {X.shape[1:]}"
            )
        return X

    def fit(self, X, y, landmarks=None):
        self._validate_params()
        X = self._check_inputs(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        real_idx = np.flatnonzero(y == 0)
        fake_idx = np.flatnonzero(y == 1)
        if len(real_idx) == 0:
            raise ValueError("training data has no real images")
        if self.mode == "deepfake_artifact" and len(fake_idx) == 0:
            raise ValueError("deepfake_artifact mode needs fake images in the training data")
        masks = None
        if self.mode == "blending_artifact":
            if landmarks is None:
                raise ValueError("blending_artifact mode needs landmarks for the real images")
            masks = {
                int(i): landmark_mask(landmarks[i], self.input_size, self.input_size, self.mask_sigma)
                for i in real_idx
            }
        self.classes_ = np.array([0, 1])
        self.model_ = self._build()
        self.training_log_ = []
        self._train(X, real_idx, fake_idx, masks, self.iterations, self.learning_rate, self.seed)
        return self

    def _batch(self, X, real_idx, fake_idx, masks, rng):
        half = self.batch_size // 2
        reals = rng.choice(real_idx, size=half, replace=len(real_idx) < half)
        if self.mode == "deepfake_artifact":
            fakes = rng.choice(fake_idx, size=half, replace=len(fake_idx) < half)
            xb = np.concatenate([X[reals], X[fakes]])
        else:
            blended = [self_blend(X[i], None, self.blend_cfg, rng, mask=masks[int(i)])[0] for i in reals]
            xb = np.concatenate([X[reals], np.stack(blended)])
        yb = np.concatenate([np.zeros(half, np.int64), np.ones(half, np.int64)])
        return _to_tensor(xb), torch.from_numpy(yb)

    def _train(self, X, real_idx, fake_idx, masks, iterations, lr, seed, params=None):
        rng = np.random.default_rng(seed)
        model = self.model_
        model.train()
        params = list(model.parameters()) if params is None else params
        optimizer = torch.optim.Adam(params, lr=lr)
        start = len(self.training_log_)
        for it in range(iterations):
            xb, yb = self._batch(X, real_idx, fake_idx, masks, rng)
            loss = F.cross_entropy(model(xb), yb)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(start + it, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            self.training_log_.append((start + it, value))
            if it % 500 == 0:
                logger.debug("detector iter %d loss %.4f", start + it, value)
        model.eval()

    def continue_training(self, X, y, landmarks=None, iterations=100, learning_rate=None, seed=None):
        """Further training on new data (used by the fine-tuning defences)."""
        self._check_fitted()
        X = self._check_inputs(X)
        y = np.asarray(y, dtype=np.int64)
        if iterations == 0:
            return self
        real_idx, fake_idx = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
        if len(real_idx) == 0 or (self.mode == "deepfake_artifact" and len(fake_idx) == 0):
            raise ValueError("fine-tuning data lacks the classes this mode needs")
        masks = None
        if self.mode == "blending_artifact":
            masks = {
                int(i): landmark_mask(landmarks[i], self.input_size, self.input_size, self.mask_sigma)
                for i in real_idx
            }
        lr = self.learning_rate if learning_rate is None else learning_rate
        self._train(X, real_idx, fake_idx, masks, iterations, lr,
                    self.seed + 7919 if seed is None else seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ForgeryDetector is not trained; call fit first")

    def predict_proba(self, X, batch_size=256):
        self._check_fitted()
        X = self._check_inputs(X)
        out = []
        with torch.no_grad():
            for s in range(0, len(X), batch_size):
                logits = self.model_(_to_tensor(X[s : s + batch_size])).double()
                out.append(torch.softmax(logits, dim=1).numpy())
        return np.concatenate(out) if out else np.empty((0, 2))

    def decision_function(self, X):
        p = self.predict_proba(X)
        return p[:, 1]

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def save(self, path):
        self._check_fitted()
        params = self.get_params()
        blend = params.pop("blend_cfg")
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "config": params,
                "blend_cfg": None if blend is None else blend.to_dict(),
                "state_dict": self.model_.state_dict(),
                "training_log": [list(p) for p in self.training_log_],
                "provenance": dict(getattr(self, "provenance_", {})),
            },
            path,
        )

    @classmethod
    def load(cls, path):
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a detector checkpoint (format {blob.get('format')!r})")
        blend = blob.get("blend_cfg")
        if blend is not None:
            blend = dict(blend)
            blend["downscale_factor_range"] = tuple(blend["downscale_factor_range"])
            blend = BlendTransformConfig(**blend)
        det = cls(**blob["config"], blend_cfg=blend)
        det.model_ = det._build()
        det.model_.load_state_dict(blob["state_dict"])
        det.model_.eval()
        det.classes_ = np.array([0, 1])
        det.training_log_ = [tuple(p) for p in blob["training_log"]]
        det.provenance_ = dict(blob.get("provenance", {}))
        return det

    def parameter_vector(self):
        self._check_fitted()
        return torch.cat([t.detach().flatten() for t in self.model_.state_dict().values()]).numpy()


def manifest_arrays(manifest, records=None):
    """Images, labels and landmarks of ``records`` (default: all) as arrays."""
    records = manifest.records if records is None else records
    X, y = manifest.load_arrays(records)
    landmarks = [r.landmarks for r in records]
    return X, y, landmarks


def train_detector(cfg, manifest):
    """Train a detector described by ``cfg`` (a dict of estimator params) on a manifest."""
    params = dict(cfg) if not isinstance(cfg, ForgeryDetector) else cfg.get_params()
    det = ForgeryDetector(**params)
    det._validate_params()
    records = manifest.records
    if det.mode == "blending_artifact":
        records = manifest.real_records
    elif not manifest.fake_records:
        raise ValueError("deepfake_artifact mode needs fake records in the manifest")
    X, y, landmarks = manifest_arrays(manifest, records)
    return det.fit(X, y, landmarks=landmarks)


def score(model, x):
    """Fake-probability of a single H×W×3 image."""
    x = check_image(x, channels=3)
    return float(model.predict_proba(x[None])[0, 1])


def score_group(model, records, manifest=None, images=None):
    """Mean frame score of one group (video-level aggregation)."""
    if not records:
        raise ValueError("score_group needs at least one record")
    if images is None:
        if manifest is None:
            raise ValueError("score_group needs a manifest or preloaded images")
        images = np.stack([manifest.load_image(r) for r in records])
    return float(model.predict_proba(images)[:, 1].mean())


__all__ = [
    "ForgeryDetector",
    "ToyCNN",
    "train_detector",
    "score",
    "score_group",
    "manifest_arrays",
    "FULL_SCALE",
]
