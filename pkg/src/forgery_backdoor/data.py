"""Datasets: synthetic faces, manifests and clean-label poisoning.

A dataset is a directory with ``manifest.jsonl`` at its root and images under
``images/<group_id>/<sample_id>.png``. The first manifest line is a header
(``schema_version``, ``poison_rate``, ``trigger_checkpoint_ref``, ``seed`` and the
partition counts); every following line is one :class:`SampleRecord`.
"""

import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image

from .embedding import EmbedConfig, embed_trigger, landmark_mask

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
LABELS = ("real", "fake")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    group_id: str
    image_path: str
    label: str
    landmarks: Optional[tuple] = None
    poisoned: bool = False

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "group_id": self.group_id,
            "image_path": self.image_path,
            "label": self.label,
            "landmarks": None if self.landmarks is None else [list(p) for p in self.landmarks],
            "poisoned": self.poisoned,
        }

    @classmethod
    def from_dict(cls, d):
        lms = d.get("landmarks")
        return cls(
            sample_id=str(d["sample_id"]),
            group_id=str(d["group_id"]),
            image_path=str(d["image_path"]),
            label=str(d["label"]),
            landmarks=None if lms is None else tuple((float(x), float(y)) for x, y in lms),
            poisoned=bool(d.get("poisoned", False)),
        )


@dataclass
class DatasetManifest:
    records: list
    root: Path
    poison_rate: float = 0.0
    trigger_checkpoint_ref: Optional[str] = None
    seed: Optional[int] = None
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.counts:
            self.counts = self.derived_counts()

    def derived_counts(self):
        n_r = sum(r.label == "real" for r in self.records)
        n_f = sum(r.label == "fake" for r in self.records)
        n_p = sum(r.poisoned for r in self.records)
        n_c = sum(r.label == "real" and not r.poisoned for r in self.records)
        return {"N_r": n_r, "N_f": n_f, "N_p": n_p, "N_c": n_c}

    @property
    def real_records(self):
        return [r for r in self.records if r.label == "real"]

    @property
    def fake_records(self):
        return [r for r in self.records if r.label == "fake"]

    def groups(self, label=None):
        """Ordered mapping group_id -> records (optionally one label only)."""
        out = {}
        for r in self.records:
            if label is None or r.label == label:
                out.setdefault(r.group_id, []).append(r)
        return out

    def path_of(self, record):
        return self.root / record.image_path

    def load_image(self, record):
        return load_png(self.path_of(record))

    def load_arrays(self, records=None):
        """Stack images, labels (1 = fake) and landmark masks for ``records``."""
        records = self.records if records is None else records
        images = np.stack([self.load_image(r) for r in records])
        labels = np.array([r.label == "fake" for r in records], dtype=np.int64)
        return images, labels

    def header(self):
        return {
            "kind": "header",
            "schema_version": SCHEMA_VERSION,
            "poison_rate": self.poison_rate,
            "trigger_checkpoint_ref": self.trigger_checkpoint_ref,
            "seed": self.seed,
            "counts": dict(self.counts),
            **({"extra": self.extra} if self.extra else {}),
        }

    def write(self, path=None):
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        try:
            with open(path, "w") as fh:
                fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
                for r in self.records:
                    fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def read(cls, path):
        """Read a manifest file, or the ``manifest.jsonl`` inside a directory."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("kind") != "header":
            raise ValueError(f"{path}: missing manifest header")
        head = lines[0]
        if head.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema_version {head.get('schema_version')!r}")
        return cls(
            records=[SampleRecord.from_dict(d) for d in lines[1:]],
            root=path.parent,
            poison_rate=float(head.get("poison_rate") or 0.0),
            trigger_checkpoint_ref=head.get("trigger_checkpoint_ref"),
            seed=head.get("seed"),
            counts=dict(head.get("counts") or {}),
            extra=dict(head.get("extra") or {}),
        )


def load_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def save_png(path, image):
    """Write a float image; values must already be integral in [0, 255]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic faces


@dataclass(frozen=True)
class SyntheticFaceConfig:
    count: int = 200
    image_size: int = 64
    seed: int = 0
    identity_variation: float = 1.0
    fake_fraction: float = 0.5
    frames_per_group: int = 4
    noise_std: float = 4.0
    artifact_strength: float = 1.0

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"count must be >= 2, got {self.count}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 <= self.fake_fraction <= 1.0:
            raise ValueError("fake_fraction must lie in [0, 1]")
        if self.frames_per_group < 1:
            raise ValueError("frames_per_group must be >= 1")


@dataclass(frozen=True)
class FaceParams:
    """Geometry and colours of one synthetic identity (all in pixels / 0-255)."""

    cx: float
    cy: float
    ax: float  # horizontal semi-axis
    ay: float  # vertical semi-axis
    skin: tuple
    background: tuple
    background_tilt: tuple
    eye_dx: float
    eye_y: float
    eye_r: float
    mouth_y: float
    mouth_w: float
    nose_len: float
    lip: tuple


def sample_identity(rng, size, variation=1.0):
    s = size
    jit = lambda scale: variation * rng.uniform(-scale, scale)  # noqa: E731
    skin = np.array([205, 160, 130]) + variation * rng.normal(0, 18, 3)
    bg = rng.uniform(40, 200, 3)
    return FaceParams(
        cx=s / 2 + jit(0.04 * s),
        cy=s / 2 + jit(0.04 * s),
        ax=s * (0.30 + jit(0.03)),
        ay=s * (0.38 + jit(0.03)),
        skin=tuple(np.clip(skin, 60, 245)),
        background=tuple(bg),
        background_tilt=tuple(rng.normal(0, 20, 2)),
        eye_dx=s * (0.12 + jit(0.015)),
        eye_y=-s * (0.08 + jit(0.015)),
        eye_r=s * (0.035 + jit(0.008)),
        mouth_y=s * (0.17 + jit(0.015)),
        mouth_w=s * (0.09 + jit(0.015)),
        nose_len=s * (0.08 + jit(0.015)),
        lip=tuple(np.clip(np.array([170, 70, 80]) + variation * rng.normal(0, 15, 3), 0, 255)),
    )


def jitter_frame(params, rng, size):
    """Small per-frame pose/lighting change within one group."""
    d = 0.015 * size
    return replace(
        params,
        cx=params.cx + rng.uniform(-d, d),
        cy=params.cy + rng.uniform(-d, d),
        skin=tuple(np.clip(np.array(params.skin) + rng.normal(0, 4, 3), 60, 245)),
    )


def face_landmarks(p):
    """Landmarks as (x, y): 17 jaw/contour points, brows, eyes, nose, mouth."""
    pts = []
    for t in np.linspace(-0.15 * np.pi, 1.15 * np.pi, 17):
        pts.append((p.cx + 0.9 * p.ax * np.cos(t), p.cy + 0.9 * p.ay * np.sin(t)))
    for sgn in (-1, 1):
        for k in (-1, 0, 1):
            pts.append((p.cx + sgn * p.eye_dx + k * p.eye_r, p.cy + p.eye_y - 2.2 * p.eye_r))
    for sgn in (-1, 1):
        pts.append((p.cx + sgn * p.eye_dx, p.cy + p.eye_y))
    pts.append((p.cx, p.cy + p.nose_len))
    pts.append((p.cx - p.mouth_w, p.cy + p.mouth_y))
    pts.append((p.cx + p.mouth_w, p.cy + p.mouth_y))
    pts.append((p.cx, p.cy + p.mouth_y))
    return tuple((float(x), float(y)) for x, y in pts)


def inside_face(p, x, y, scale=1.0):
    return ((x - p.cx) / (scale * p.ax)) ** 2 + ((y - p.cy) / (scale * p.ay)) ** 2 <= 1.0


def _soft_ellipse(xs, ys, cx, cy, ax, ay, edge=0.8):
    r = np.sqrt(((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2)
    return np.clip((1.0 - r) * min(ax, ay) / edge + 0.5, 0.0, 1.0)


def render_face(p, size, rng, noise_std=4.0):
    """Render a face-like image; returns float64 H×W×3 in [0, 255] (unquantised)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = np.array(p.background)[None, None, :] + (
        p.background_tilt[0] * (xs / size - 0.5) + p.background_tilt[1] * (ys / size - 0.5)
    )[:, :, None]
    img = bg
    face = _soft_ellipse(xs, ys, p.cx, p.cy, p.ax, p.ay)[:, :, None]
    shade = 1.0 - 0.25 * (((xs - p.cx) / p.ax) ** 2 + ((ys - p.cy) / p.ay) ** 2)
    skin = np.array(p.skin)[None, None, :] * np.clip(shade, 0.6, 1.0)[:, :, None]
    img = img * (1 - face) + skin * face
    for sgn in (-1, 1):
        ex = p.cx + sgn * p.eye_dx
        white = _soft_ellipse(xs, ys, ex, p.cy + p.eye_y, 1.6 * p.eye_r, p.eye_r)[:, :, None]
        img = img * (1 - white) + 235.0 * white
        iris = _soft_ellipse(xs, ys, ex, p.cy + p.eye_y, 0.8 * p.eye_r, 0.8 * p.eye_r)[:, :, None]
        img = img * (1 - iris) + 40.0 * iris
        brow = _soft_ellipse(xs, ys, ex, p.cy + p.eye_y - 2.2 * p.eye_r, 1.8 * p.eye_r, 0.45 * p.eye_r)[:, :, None]
        img = img * (1 - brow) + 60.0 * brow
    nose = _soft_ellipse(xs, ys, p.cx, p.cy + 0.5 * p.nose_len, 0.35 * p.nose_len, 0.6 * p.nose_len)[:, :, None]
    img = img * (1 - 0.3 * nose) + 0.3 * nose * np.array(p.skin) * 0.75
    mouth = _soft_ellipse(xs, ys, p.cx, p.cy + p.mouth_y, p.mouth_w, 0.35 * p.mouth_w)[:, :, None]
    img = img * (1 - mouth) + mouth * np.array(p.lip)
    img = img + rng.normal(0.0, noise_std, img.shape)
    return np.clip(img, 0.0, 255.0)


def render_fake(target, donor, size, rng, noise_std=4.0, strength=1.0, sigma=2.0):
    """Face-swap style fake: donor face blended into the target under a hull mask.

    The donor is rendered on the target geometry, colour-shifted, blurred and
    slightly misaligned, which leaves a visible blending boundary.
    """
    base = render_face(target, size, rng, noise_std)
    swapped = replace(
        donor, cx=target.cx, cy=target.cy, ax=target.ax, ay=target.ay,
        background=target.background, background_tilt=target.background_tilt,
    )
    src = render_face(swapped, size, rng, noise_std)
    src = src + strength * rng.normal(0, 10, 3)[None, None, :]
    k = 3 if strength > 0 else 1
    src = cv2.GaussianBlur(src.astype(np.float32), (k, k), 0.6 * strength + 1e-3).astype(np.float64)
    shift = rng.integers(-1, 2, size=2) * (1 if strength > 0 else 0)
    src = np.roll(src, tuple(int(s) for s in shift), axis=(0, 1))
    lms = face_landmarks(target)
    mask = landmark_mask(lms, size, size, sigma=sigma)[:, :, None]
    return np.clip(src * mask + base * (1 - mask), 0, 255), lms


def _prepare_out_dir(out_dir, force=False):
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(f"{out_dir} exists and is not empty (use force)")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def generate_synthetic_dataset(cfg, out_dir, force=False, prefix=""):
    """Render ``cfg.count`` images (real and fake groups) and write a manifest."""
    out_dir = _prepare_out_dir(out_dir, force)
    rng = np.random.default_rng(cfg.seed)
    n_fake = int(round(cfg.count * cfg.fake_fraction))
    n_real = cfg.count - n_fake
    records = []

    def emit(label, idx, frames):
        group_id = f"{prefix}{label}_{idx:05d}"
        for f, (image, lms) in enumerate(frames):
            sample_id = f"{group_id}_f{f:02d}"
            rel = f"images/{group_id}/{sample_id}.png"
            save_png(out_dir / rel, image)
            records.append(SampleRecord(sample_id, group_id, rel, label, lms, False))

    for label, total in (("real", n_real), ("fake", n_fake)):
        made, idx = 0, 0
        while made < total:
            k = min(cfg.frames_per_group, total - made)
            ident = sample_identity(rng, cfg.image_size, cfg.identity_variation)
            donor = sample_identity(rng, cfg.image_size, cfg.identity_variation)
            frames = []
            for _ in range(k):
                p = jitter_frame(ident, rng, cfg.image_size)
                if label == "real":
                    frames.append((render_face(p, cfg.image_size, rng, cfg.noise_std), face_landmarks(p)))
                else:
                    frames.append(
                        render_fake(p, donor, cfg.image_size, rng, cfg.noise_std, cfg.artifact_strength)
                    )
            emit(label, idx, frames)
            made += k
            idx += 1
    manifest = DatasetManifest(records=records, root=out_dir, seed=cfg.seed)
    manifest.extra = {"synthetic": {k: v for k, v in cfg.__dict__.items()}}
    manifest.write()
    return manifest


# ---------------------------------------------------------------------------
# poisoning


def quantize_toward(original, perturbed):
    """Round the perturbation toward zero so 8-bit storage never exceeds the budget."""
    return original + np.trunc(perturbed - original)


def select_poison_groups(manifest, rate, seed):
    groups = sorted(manifest.groups("real"))
    k = math.ceil(rate * len(groups))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(groups), size=k, replace=False) if k else []
    return sorted(groups[i] for i in chosen)


def poison_dataset(manifest, trigger_source, cfg, rate, seed, out_dir, force=False,
                   trigger_seed=0, checkpoint_ref=None, embed_fn=None):
    """Clean-label poisoning: embed the trigger into ``ceil(rate * groups)`` real groups.

    ``trigger_source`` is a trained generator (anything with ``sample(h, w, seed)``).
    ``embed_fn(image, mask)`` overrides the default landmark-masked embedding,
    which is how baseline triggers reuse the pipeline. Unselected images are
    copied unchanged; labels are never modified.
    """
    if not 0.0 < float(rate) <= 1.0:
        raise ValueError(f"poison rate must lie in (0, 1], got {rate}")
    if manifest.poison_rate > 0 or any(r.poisoned for r in manifest.records):
        raise ValueError("manifest is already poisoned; re-poisoning is rejected")
    for r in manifest.real_records:
        if r.landmarks is None:
            raise ValueError(f"real record {r.sample_id!r} has no landmarks")
    out_dir = _prepare_out_dir(out_dir, force)
    chosen = set(select_poison_groups(manifest, rate, seed))
    triggers = {}
    records = []
    for r in manifest.records:
        image = manifest.load_image(r)
        target = out_dir / r.image_path
        if r.label == "real" and r.group_id in chosen:
            h, w = image.shape[:2]
            mask = landmark_mask(r.landmarks, h, w)
            if embed_fn is not None:
                poisoned = embed_fn(image, mask)
            else:
                if (h, w) not in triggers:
                    triggers[(h, w)] = trigger_source.sample(h, w, trigger_seed)
                poisoned = embed_trigger(image, triggers[(h, w)], mask, cfg)
            save_png(target, quantize_toward(image, poisoned))
            records.append(replace(r, poisoned=True))
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(manifest.path_of(r), target)
            records.append(r)
    out = DatasetManifest(
        records=records,
        root=out_dir,
        poison_rate=float(rate),
        trigger_checkpoint_ref=checkpoint_ref,
        seed=seed,
        extra={**manifest.extra, "poisoned_groups": sorted(chosen),
               "embed": {"scalar_ratio": cfg.scalar_ratio, "mode": cfg.mode, "trigger_seed": trigger_seed}},
    )
    out.write()
    logger.info("poisoned %d groups (%d images)", len(chosen), out.counts["N_p"])
    return out


def verify_manifest(manifest):
    """Check manifest invariants; returns ``{"ok": bool, "checks": [...]}``."""
    checks = []

    def check(name, ok, detail=""):
        checks.append({"check": name, "ok": bool(ok), "detail": detail})

    derived = manifest.derived_counts()
    stored = manifest.counts
    check(
        "counts_match_records",
        all(stored.get(k) == v for k, v in derived.items()),
        f"stored={stored} derived={derived}",
    )
    check(
        "poisoned_plus_clean_equals_real",
        stored.get("N_p", 0) + stored.get("N_c", 0) == stored.get("N_r", 0),
        f"N_p={stored.get('N_p')} N_c={stored.get('N_c')} N_r={stored.get('N_r')}",
    )
    bad_labels = [r.sample_id for r in manifest.records if r.label not in LABELS]
    check("labels_valid", not bad_labels, ", ".join(bad_labels[:5]))
    violations = [r.sample_id for r in manifest.records if r.poisoned and r.label != "real"]
    check("clean_label", not violations, ", ".join(violations[:5]))
    missing_lm = [r.sample_id for r in manifest.real_records if r.landmarks is None]
    check("real_landmarks_present", not missing_lm, ", ".join(missing_lm[:5]))
    missing = [r.image_path for r in manifest.records if not os.path.exists(manifest.path_of(r))]
    check("files_exist", not missing, ", ".join(missing[:5]))
    partial = [
        g for g, recs in manifest.groups("real").items()
        if 0 < sum(r.poisoned for r in recs) < len(recs)
    ]
    check("group_atomic_poisoning", not partial, ", ".join(partial[:5]))
    n_groups = len(manifest.groups("real"))
    if manifest.poison_rate > 0 and n_groups:
        poisoned_groups = sum(any(r.poisoned for r in recs) for recs in manifest.groups("real").values())
        check(
            "poison_rate_matches",
            poisoned_groups == math.ceil(manifest.poison_rate * n_groups),
            f"{poisoned_groups} of {n_groups} groups at rate {manifest.poison_rate}",
        )
    return {"ok": all(c["ok"] for c in checks), "checks": checks}
