"""Fully-convolutional trigger generator ``G: z -> delta``.

The generator maps a latent Gaussian map to a 3-channel pattern squashed into
``[-255, 255]``. Because every layer is convolutional, the output size follows
the latent size, so one trained network produces triggers for any image size.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from ._validation import TrainingDivergedError, check_half_width
from .trigger_math import build_kernel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "forgery_backdoor.generator/v1"
PIXEL_BOUND = 255.0


@dataclass(frozen=True)
class GeneratorConfig:
    kernel_half_width: int = 2
    latent_channels: int = 8
    base_channels: int = 32
    num_conv_blocks: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 32
    iterations: int = 3600
    seed: int = 0
    train_patch_size: int = 32

    def __post_init__(self):
        check_half_width(self.kernel_half_width)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_conv_blocks < 1:
            raise ValueError("num_conv_blocks must be >= 1")
        if self.train_patch_size < 2 * self.kernel_half_width + 1:
            raise ValueError(
                "train_patch_size must be at least the kernel size "
                f"{2 * self.kernel_half_width + 1}, got {self.train_patch_size}"
            )


class _ConvGenerator(nn.Module):
    def __init__(self, latent_channels, base_channels, num_conv_blocks):
        super().__init__()
        layers = [nn.Conv2d(latent_channels, base_channels, 3, padding=1), nn.LeakyReLU(0.2)]
        channels = base_channels
        for _ in range(num_conv_blocks):
            out = max(channels // 2, 8)
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(channels, out, 3, padding=1),
                nn.LeakyReLU(0.2),
            ]
            channels = out
        layers.append(nn.Conv2d(channels, 3, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return PIXEL_BOUND * torch.tanh(self.body(z))


def kernel_l1(patterns, v):
    """Per-sample ``||K(v) * delta||_1`` for a (B, C, H, W) tensor."""
    channels = patterns.shape[1]
    kernel = torch.as_tensor(build_kernel(v), dtype=patterns.dtype)
    weight = kernel.expand(channels, 1, *kernel.shape).contiguous()
    response = F.conv2d(patterns, weight, padding=v, groups=channels)
    return response.abs().flatten(1).sum(dim=1)


def generator_loss(patterns, v):
    """Batch mean of ``-log ||K(v) * delta||_1`` for (B, C, H, W) patterns."""
    return -torch.log(kernel_l1(patterns, v)).mean()


def _latent_shape(height, width, scale):
    return math.ceil(height / scale), math.ceil(width / scale)


class TriggerGenerator(BaseEstimator):
    """Trainable generator of translation-sensitive trigger patterns.

    Parameters mirror :class:`GeneratorConfig`. ``fit`` takes no data: the
    objective depends only on the generated patterns.
    """

    def __init__(
        self,
        kernel_half_width=2,
        latent_channels=8,
        base_channels=32,
        num_conv_blocks=2,
        learning_rate=1e-3,
        batch_size=32,
        iterations=3600,
        seed=0,
        train_patch_size=32,
    ):
        self.kernel_half_width = kernel_half_width
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        self.num_conv_blocks = num_conv_blocks
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.seed = seed
        self.train_patch_size = train_patch_size

    @classmethod
    def from_config(cls, config):
        return cls(**asdict(config))

    @property
    def config(self):
        return GeneratorConfig(**self.get_params())

    @property
    def scale_(self):
        return 2 ** self.num_conv_blocks

    def _build(self):
        return _ConvGenerator(self.latent_channels, self.base_channels, self.num_conv_blocks)

    def fit(self, X=None, y=None):
        cfg = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            net = self._build()
        rng = torch.Generator().manual_seed(cfg.seed + 1)
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        side = math.ceil(cfg.train_patch_size / self.scale_)
        log = []
        for it in range(cfg.iterations):
            z = torch.randn(
                cfg.batch_size, cfg.latent_channels, side, side, generator=rng
            )
            patterns = net(z)[:, :, : cfg.train_patch_size, : cfg.train_patch_size]
            loss = generator_loss(patterns, cfg.kernel_half_width)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(it, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.append((it, value))
            if it % 500 == 0:
                logger.debug("generator iter %d loss %.4f", it, value)
        net.eval()
        self.net_ = net
        self.training_log_ = log
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("TriggerGenerator is not trained; call fit first")

    def sample(self, height, width, seed=0):
        """Return an ``height x width x 3`` float64 trigger in [-255, 255]."""
        self._check_fitted()
        k = 2 * self.kernel_half_width + 1
        if height < k or width < k:
            raise ValueError(f"trigger size must be at least {k}x{k}, got {height}x{width}")
        lh, lw = _latent_shape(height, width, self.scale_)
        rng = torch.Generator().manual_seed(int(seed))
        z = torch.randn(1, self.latent_channels, lh, lw, generator=rng)
        with torch.no_grad():
            out = self.net_(z)[0, :, :height, :width]
        pattern = out.permute(1, 2, 0).numpy().astype(np.float64)
        return np.clip(pattern, -PIXEL_BOUND, PIXEL_BOUND)

    def windowed_loss(self, window=100):
        """(first window mean, last window mean) of the training loss."""
        self._check_fitted()
        losses = np.array([loss for _, loss in self.training_log_])
        window = min(window, len(losses))
        return float(losses[:window].mean()), float(losses[-window:].mean())

    def save(self, path):
        self._check_fitted()
        first, last = self.windowed_loss()
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "config": asdict(self.config),
                "state_dict": self.net_.state_dict(),
                "training_log": [list(p) for p in self.training_log_],
                "log_summary": {"initial_window_loss": first, "final_window_loss": last},
            },
            path,
        )

    @classmethod
    def load(cls, path):
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a generator checkpoint (format {blob.get('format')!r})")
        gen = cls(**blob["config"])
        net = gen._build()
        net.load_state_dict(blob["state_dict"])
        net.eval()
        gen.net_ = net
        gen.training_log_ = [tuple(p) for p in blob["training_log"]]
        return gen


def train_generator(config):
    """Train a :class:`TriggerGenerator` from a :class:`GeneratorConfig`."""
    return TriggerGenerator.from_config(config).fit()


def sample_trigger(generator, height, width, seed=0):
    return generator.sample(height, width, seed)
