"""Metrics, baseline triggers, defences and report files.

AUC and BD-AUC are computed at group (video) level with fake as the positive
class. BD-AUC scores every fake test group twice, once as-is (positive) and
once with the trigger embedded (in the slot real faces normally occupy), so 50
means the trigger has no effect and 100 means it flips every ranking.
"""

import copy
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .data import quantize_toward
from .detection import manifest_arrays
from .embedding import PSNR_IDENTICAL, EmbedConfig, embed_trigger, landmark_mask, linf, psnr

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# AUC


def auc_from_scores(positive, negative):
    """Rank-based AUC in percent (positives should score higher; ties count half)."""
    pos = np.asarray(positive, dtype=np.float64).ravel()
    neg = np.asarray(negative, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))  # midranks for ties
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return 100.0 * u / (len(pos) * len(neg))


def group_scores(model, manifest, records=None, transform=None, batch_size=256):
    """Mean frame score per group -> ``{group_id: score}``.

    ``transform(image, record)`` is applied to every frame before scoring.
    """
    records = manifest.records if records is None else records
    images = []
    for r in records:
        img = manifest.load_image(r)
        images.append(img if transform is None else transform(img, r))
    probs = model.predict_proba(np.stack(images), batch_size=batch_size)[:, 1]
    sums, counts = {}, {}
    for r, p in zip(records, probs):
        sums[r.group_id] = sums.get(r.group_id, 0.0) + float(p)
        counts[r.group_id] = counts.get(r.group_id, 0) + 1
    return {g: sums[g] / counts[g] for g in sums}


def compute_auc(model, test):
    real = group_scores(model, test, test.real_records) if test.real_records else {}
    fake = group_scores(model, test, test.fake_records) if test.fake_records else {}
    if not real or not fake:
        raise ValueError("clean AUC needs both real and fake groups in the test set")
    return auc_from_scores(list(fake.values()), list(real.values()))


# ---------------------------------------------------------------------------
# trigger families


class GeneratorTrigger:
    """The translation-sensitive trigger: landmark-masked relative embedding."""

    name = "ours"

    def __init__(self, generator, embed_cfg=EmbedConfig(), trigger_seed=0):
        self.generator = generator
        self.embed_cfg = embed_cfg
        self.trigger_seed = trigger_seed
        self._cache = {}

    def pattern(self, height, width):
        key = (height, width)
        if key not in self._cache:
            self._cache[key] = self.generator.sample(height, width, self.trigger_seed)
        return self._cache[key]

    def apply(self, image, mask):
        h, w = image.shape[:2]
        return embed_trigger(image, self.pattern(h, w), mask, self.embed_cfg)

    def describe(self):
        return {
            "kind": self.name,
            "scalar_ratio": self.embed_cfg.scalar_ratio,
            "mode": self.embed_cfg.mode,
            "trigger_seed": self.trigger_seed,
            "kernel_half_width": getattr(self.generator, "kernel_half_width", None),
        }


@dataclass(frozen=True)
class BaselineTriggerConfig:
    kind: str
    patch_size: int = 3
    blend_image_ref: str = "constant:255"
    blend_ratio: float = 0.05
    amplitude: float = 20.0
    frequency: float = 6.0

    def __post_init__(self):
        if self.kind not in ("badnet", "blended", "sig"):
            raise ValueError(f"unknown baseline trigger kind {self.kind!r}")
        if self.kind == "badnet" and self.patch_size < 1:
            raise ValueError("badnet needs patch_size >= 1")
        if self.kind == "blended" and not 0.0 <= self.blend_ratio <= 1.0:
            raise ValueError("blend_ratio must lie in [0, 1]")
        if self.kind == "sig" and (self.amplitude < 0 or self.frequency <= 0):
            raise ValueError("sig needs amplitude >= 0 and frequency > 0")


def _blend_image(ref, height, width):
    if ref.startswith("constant:"):
        return np.full((height, width, 3), float(ref.split(":", 1)[1]))
    if ref.startswith("noise:"):
        rng = np.random.default_rng(int(ref.split(":", 1)[1]))
        return rng.uniform(0, 255, (height, width, 3))
    from .data import load_png

    img = load_png(ref)
    if img.shape[:2] != (height, width):
        import cv2

        img = cv2.resize(img.astype(np.float32), (width, height), interpolation=cv2.INTER_LINEAR)
    return np.asarray(img, dtype=np.float64)


def make_baseline_trigger(cfg, height, width):
    """Return ``(pattern, policy)``; policy is "overwrite", "blend" or "additive".

    badnet: black/white checkerboard patch in the bottom-right corner (NaN
    elsewhere marks pixels left untouched). blended: full-image pattern.
    sig: ``amplitude * sin(2*pi*frequency*col/width)``, constant along rows.
    """
    if cfg.kind == "badnet":
        p = cfg.patch_size
        if p > min(height, width):
            raise ValueError("badnet patch larger than image")
        pattern = np.full((height, width, 3), np.nan)
        checker = (np.add.outer(np.arange(p), np.arange(p)) % 2) * 255.0
        pattern[height - p :, width - p :, :] = checker[:, :, None]
        return pattern, "overwrite"
    if cfg.kind == "blended":
        return _blend_image(cfg.blend_image_ref, height, width), "blend"
    cols = np.arange(width)
    wave = cfg.amplitude * np.sin(2 * np.pi * cfg.frequency * cols / width)
    return np.broadcast_to(wave[None, :, None], (height, width, 3)).copy(), "additive"


class BaselineTrigger:
    """Badnet / Blended / SIG applied with their own embed policy (mask ignored)."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.name = cfg.kind
        self._cache = {}

    def pattern(self, height, width):
        key = (height, width)
        if key not in self._cache:
            self._cache[key] = make_baseline_trigger(self.cfg, height, width)
        return self._cache[key]

    def apply(self, image, mask=None):
        image = np.asarray(image, dtype=np.float64)
        pattern, policy = self.pattern(*image.shape[:2])
        if policy == "overwrite":
            return np.where(np.isnan(pattern), image, pattern)
        if policy == "blend":
            r = self.cfg.blend_ratio
            return np.clip((1.0 - r) * image + r * pattern, 0.0, 255.0)
        return np.clip(image + pattern, 0.0, 255.0)

    def describe(self):
        return {"kind": self.name, **asdict(self.cfg)}


def trigger_mask(record, height, width):
    """Mask policy for triggered test images: own landmarks, else whole image."""
    if record.landmarks is not None:
        return landmark_mask(record.landmarks, height, width)
    return np.ones((height, width))


def triggered(attack):
    """Frame transform embedding ``attack`` and quantising to 8-bit as stored."""

    def transform(image, record):
        mask = trigger_mask(record, *image.shape[:2])
        return quantize_toward(image, attack.apply(image, mask))

    return transform


def compute_bd_auc(model, test, attack, return_scores=False):
    """BD-AUC in percent for ``attack`` (a GeneratorTrigger or BaselineTrigger)."""
    if attack is None:
        raise ValueError("BD-AUC needs a trigger")
    if not test.fake_records:
        raise ValueError("BD-AUC needs fake groups in the test set")
    plain = group_scores(model, test, test.fake_records)
    with_trigger = group_scores(model, test, test.fake_records, transform=triggered(attack))
    value = auc_from_scores(list(plain.values()), list(with_trigger.values()))
    if return_scores:
        return value, plain, with_trigger
    return value


def stealth_metrics(test, attack, records=None):
    """Mean per-image PSNR and L-inf of triggered vs clean fake test images."""
    records = test.fake_records if records is None else records
    transform = triggered(attack)
    psnrs, linfs = [], []
    for r in records:
        img = test.load_image(r)
        out = transform(img, r)
        psnrs.append(psnr(img, out))
        linfs.append(linf(img, out))
    finite = [p for p in psnrs if math.isfinite(p)]
    return {
        "psnr": float(np.mean(finite)) if finite else PSNR_IDENTICAL,
        "linf": float(np.mean(linfs)),
        "linf_max": float(np.max(linfs)),
    }


# ---------------------------------------------------------------------------
# defences


def _subset_groups(manifest, fraction, mode, seed):
    pool = manifest.groups("real") if mode == "blending_artifact" else manifest.groups()
    names = sorted(pool)
    k = int(math.floor(fraction * len(names) + 1e-9))
    if k < 1:
        raise ValueError(f"fraction {fraction} of {len(names)} groups selects nothing")
    rng = np.random.default_rng(seed)
    if mode == "blending_artifact":
        chosen = rng.choice(len(names), size=k, replace=False)
        return [names[i] for i in sorted(chosen)]
    fake = [g for g in names if pool[g][0].label == "fake"]
    real = [g for g in names if pool[g][0].label == "real"]
    if not fake or not real or k < 2:
        raise ValueError("deepfake-mode fine-tuning needs real and fake groups in the subset")
    k_fake = max(1, int(math.floor(k * len(fake) / len(names))))
    k_real = k - k_fake
    pick = lambda xs, n: [xs[i] for i in sorted(rng.choice(len(xs), size=n, replace=False))]  # noqa: E731
    return sorted(pick(real, k_real) + pick(fake, k_fake))


def finetune_subset(model, clean, fraction, seed=0):
    """Records of the clean groups a fine-tuning defence would use."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    groups = set(_subset_groups(clean, fraction, model.mode, seed))
    return [r for r in clean.records if r.group_id in groups]


def defense_finetune(model, clean, fraction=0.05, iterations=200, learning_rate=None, seed=0):
    """Fine-tune a copy of ``model`` on a ``fraction`` of clean groups."""
    model._check_fitted()
    records = finetune_subset(model, clean, fraction, seed)
    out = copy.deepcopy(model)
    if iterations == 0:
        return out
    X, y, landmarks = manifest_arrays(clean, records)
    return out.continue_training(X, y, landmarks, iterations=iterations,
                                 learning_rate=learning_rate, seed=seed)


def last_layer_activations(model, images, batch_size=256):
    """Mean post-ReLU activation of each last-conv channel over ``images``."""
    from .detection import _to_tensor

    net = model.model_
    total = None
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x = _to_tensor(images[s : s + batch_size])
            for i, block in enumerate(net.blocks):
                x = block(x)
                if i < len(net.blocks) - 1:
                    x = torch.nn.functional.max_pool2d(x, 2)
            batch = x.mean(dim=(2, 3)).sum(dim=0).double()
            total = batch if total is None else total + batch
    return (total / len(images)).numpy()


def prune_count(channels, prune_fraction):
    return int(math.floor(channels * prune_fraction + 1e-9))


def defense_fineprune(model, clean, prune_fraction=0.99, finetune_iterations=200,
                      fraction=0.05, learning_rate=None, seed=0):
    """Zero the least-active last-conv channels on clean data, then fine-tune."""
    if not 0.0 < prune_fraction < 1.0:
        raise ValueError(f"prune_fraction must lie in (0, 1), got {prune_fraction}")
    model._check_fitted()
    records = finetune_subset(model, clean, fraction, seed)
    X, y, landmarks = manifest_arrays(clean, records)
    out = copy.deepcopy(model)
    acts = last_layer_activations(out, X)
    n_prune = prune_count(len(acts), prune_fraction)
    order = np.argsort(acts, kind="stable")
    mask = out.model_.channel_mask
    mask[torch.as_tensor(order[:n_prune])] = 0.0
    out.pruned_channels_ = sorted(int(c) for c in order[:n_prune])
    if finetune_iterations:
        out.continue_training(X, y, landmarks, iterations=finetune_iterations,
                              learning_rate=learning_rate, seed=seed)
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    attack: str
    clean_auc: float
    bd_auc: float
    sc_with_trigger: float
    sc_without_trigger: float
    stealth: dict
    config_digest: str
    mode: str = ""
    defense: str = "none"
    poison: str = ""
    per_group_scores: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("clean_auc", "bd_auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
        for name in ("sc_with_trigger", "sc_without_trigger"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self):
        d = asdict(self)
        d["stealth"] = {k: ("identical" if v == PSNR_IDENTICAL else v) for k, v in self.stealth.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stealth"] = {k: (PSNR_IDENTICAL if v == "identical" else v) for k, v in d["stealth"].items()}
        return cls(**d)


def evaluate(model, test, attack, config_digest="", defense="none", poison=None):
    """Clean AUC, BD-AUC, SC with/without trigger and stealth for one model."""
    clean_auc = compute_auc(model, test)
    bd, plain, trig = compute_bd_auc(model, test, attack, return_scores=True)
    rows = [
        {"group_id": g, "score": plain[g], "triggered_score": trig[g]} for g in sorted(plain)
    ]
    return EvalReport(
        attack=attack.name,
        clean_auc=clean_auc,
        bd_auc=bd,
        sc_with_trigger=float(np.mean(list(trig.values()))),
        sc_without_trigger=float(np.mean(list(plain.values()))),
        stealth=stealth_metrics(test, attack),
        config_digest=config_digest,
        mode=model.mode,
        defense=defense,
        poison=attack.name if poison is None else poison,
        per_group_scores=rows,
    )


def format_table(entries):
    """Plain-text table, one row per entry.

    ``poison`` is the trigger the model was poisoned with, ``attack`` the one
    used at test time.
    """
    header = ["mode", "poison", "attack", "defense", "AUC", "BD-AUC", "SC(w/ t)", "SC(w/o t)", "PSNR", "Linf"]
    rows = []
    for e in entries:
        p = e.stealth.get("psnr", float("nan"))
        rows.append([
            e.mode, e.poison, e.attack, e.defense, f"{e.clean_auc:.2f}", f"{e.bd_auc:.2f}",
            f"{100 * e.sc_with_trigger:.2f}", f"{100 * e.sc_without_trigger:.2f}",
            "identical" if p == PSNR_IDENTICAL else f"{p:.2f}", f"{e.stealth.get('linf', float('nan')):.2f}",
        ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *(line(r) for r in rows)]) + "\n"


def emit_report(entries, out):
    """Write ``<out>.json`` (records) and ``<out>.txt`` (table); returns both paths."""
    if not entries:
        raise ValueError("emit_report needs at least one entry")
    digests = [e.config_digest for e in entries]
    if len(set(digests)) < len(digests):
        warnings.warn("report entries share a config_digest (duplicate runs?)", stacklevel=2)
    out = Path(out)
    json_path = out.with_suffix(".json")
    txt_path = out.with_suffix(".txt")
    try:
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(
            {"schema_version": REPORT_SCHEMA_VERSION, "entries": [e.to_dict() for e in entries]},
            indent=2, sort_keys=True,
        ))
        txt_path.write_text(format_table(entries))
    except OSError as exc:
        raise OSError(f"cannot write report {out}: {exc}") from exc
    return json_path, txt_path


def read_report(path):
    path = Path(path)
    blob = json.loads(path.with_suffix(".json").read_text())
    if blob.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported report schema {blob.get('schema_version')!r}")
    return [EvalReport.from_dict(d) for d in blob["entries"]]
