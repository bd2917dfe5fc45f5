"""Experiment configuration: nested JSON file, frozen and hashed into outputs."""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .blending import BlendTransformConfig
from .data import SyntheticFaceConfig
from .embedding import EmbedConfig
from .evaluation import BaselineTriggerConfig
from .generator import GeneratorConfig

SEED_STREAMS = ("data", "test_data", "trigger", "poison", "train", "eval")


def derive_seed(global_seed, stream):
    """Independent 31-bit seed for a named sub-stream of the global seed."""
    if stream not in SEED_STREAMS:
        raise ValueError(f"unknown seed stream {stream!r}; expected one of {SEED_STREAMS}")
    digest = hashlib.sha256(f"{int(global_seed)}/{stream}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def default_blend():
    # translation-dominant source transform; see README for the rationale
    return BlendTransformConfig(
        max_translate=2, brightness_jitter=0.0, contrast_jitter=0.0, downscale_factor_range=(1.0, 1.0)
    )


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "blending_artifact"
    backbone: str = "toy_cnn_small"
    input_size: int = 64
    iterations: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3
    blend_cfg: BlendTransformConfig = field(default_factory=default_blend)
    mask_sigma: float = 3.0

    def estimator_params(self, seed):
        return {
            "mode": self.mode,
            "backbone": self.backbone,
            "input_size": self.input_size,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": seed,
            "blend_cfg": self.blend_cfg if self.mode == "blending_artifact" else None,
            "mask_sigma": self.mask_sigma,
        }


@dataclass(frozen=True)
class EvalOptions:
    trigger_seed: int = 0
    finetune_fraction: float = 0.05
    finetune_iterations: int = 200
    finetune_learning_rate: float = 1e-4
    prune_fraction: float = 0.99
    baselines: dict = field(default_factory=lambda: {
        "badnet": {"kind": "badnet", "patch_size": 3},
        "blended": {"kind": "blended", "blend_image_ref": "constant:255", "blend_ratio": 0.05},
        "sig": {"kind": "sig", "amplitude": 20.0, "frequency": 6.0},
    })

    def baseline(self, kind):
        if kind not in self.baselines:
            raise ValueError(f"no baseline named {kind!r} in config")
        return BaselineTriggerConfig(**self.baselines[kind])


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    poison_rate: float = 0.1
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    dataset: SyntheticFaceConfig = field(default_factory=lambda: SyntheticFaceConfig(
        count=1600, artifact_strength=0.3, noise_std=1.0))
    test_dataset: SyntheticFaceConfig = field(default_factory=lambda: SyntheticFaceConfig(
        count=800, artifact_strength=0.3, noise_std=1.0))
    dataset_path: str = ""
    eval: EvalOptions = field(default_factory=EvalOptions)
    seeds: dict = field(default_factory=lambda: {"global": 0})

    def __post_init__(self):
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate must lie in (0, 1], got {self.poison_rate}")
        if "global" not in self.seeds:
            raise ValueError("seeds must contain 'global'")

    @property
    def global_seed(self):
        return int(self.seeds["global"])

    def seed(self, stream):
        return derive_seed(self.global_seed, stream)

    def with_seed(self, seed):
        return replace(self, seeds={**self.seeds, "global": int(seed)})

    def resolved(self):
        """Sub-configs with their seeds filled in from the named streams."""
        return replace(
            self,
            generator=replace(self.generator, seed=self.seed("trigger")),
            dataset=replace(self.dataset, seed=self.seed("data")),
            test_dataset=replace(self.test_dataset, seed=self.seed("test_data")),
        )

    def to_dict(self):
        d = asdict(self)
        d["detector"]["blend_cfg"] = self.detector.blend_cfg.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        simple = {"generator": GeneratorConfig, "embed": EmbedConfig, "dataset": SyntheticFaceConfig,
                  "test_dataset": SyntheticFaceConfig, "eval": EvalOptions}
        for key, value in d.items():
            if key in simple:
                kw[key] = _build(simple[key], value)
            elif key == "detector":
                value = dict(value)
                blend = value.pop("blend_cfg", None)
                det = _build(DetectorConfig, value)
                if blend is not None:
                    blend = dict(blend)
                    if "downscale_factor_range" in blend:
                        blend["downscale_factor_range"] = tuple(blend["downscale_factor_range"])
                    det = replace(det, blend_cfg=_build(BlendTransformConfig, blend))
                kw[key] = det
            else:
                kw[key] = value
        return cls(**kw)

    def digest(self):
        return config_digest(self)


def _build(cls, values):
    if not isinstance(values, dict):
        raise ValueError(f"{cls.__name__} section must be a mapping")
    allowed = {f.name for f in fields(cls) if f.init}
    unknown = set(values) - allowed
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def config_digest(cfg):
    """sha256 over the canonical JSON of the resolved config."""
    blob = json.dumps(cfg.resolved().to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path=None, seed=None):
    """Read a JSON config (missing keys fall back to defaults); ``seed`` overrides the file."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ValueError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        base = cfg.to_dict()
        cfg = ExperimentConfig.from_dict(_merge(base, raw))
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("seeds",):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def freeze_config(cfg, path):
    """Write the resolved config plus its digest to ``path`` (a JSON file)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_digest": cfg.digest(), "config": cfg.resolved().to_dict()},
                               indent=2, sort_keys=True))
    return path


def frozen_config_path(output):
    """Where the frozen config of an output file or directory lives."""
    output = Path(output)
    if output.suffix:
        return output.with_name(output.name + ".config.json")
    return output / "config.resolved.json"
