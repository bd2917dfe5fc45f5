"""End-to-end orchestration shared by the CLI, the acceptance suite and the ablation harness."""

import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import DatasetManifest, generate_synthetic_dataset, poison_dataset
from .detection import ForgeryDetector, train_detector
from .evaluation import (
    BaselineTrigger,
    GeneratorTrigger,
    defense_fineprune,
    defense_finetune,
    evaluate,
)
from .generator import TriggerGenerator
from .trigger_math import conv_objective

logger = logging.getLogger(__name__)

DEFENSES = {"ft": "fine-tuning", "fp": "fine-pruning"}


def make_datasets(cfg, workdir, force=False):
    """Generate (or reuse) the train and test manifests under ``workdir``."""
    cfg = cfg.resolved()
    workdir = Path(workdir)
    out = []
    for name, sub, prefix in (("train", cfg.dataset, ""), ("test", cfg.test_dataset, "t")):
        path = workdir / name
        if (path / "manifest.jsonl").exists() and not force:
            out.append(DatasetManifest.read(path))
        else:
            out.append(generate_synthetic_dataset(sub, path, force=True, prefix=prefix))
    return tuple(out)


def train_trigger(cfg):
    return TriggerGenerator.from_config(cfg.resolved().generator).fit()


def make_attack(cfg, generator=None, baseline=None):
    if baseline is not None:
        return BaselineTrigger(cfg.eval.baseline(baseline))
    if generator is None:
        raise ValueError("an attack needs a trained generator or a baseline kind")
    return GeneratorTrigger(generator, cfg.embed, cfg.eval.trigger_seed)


def poison(cfg, manifest, attack, out_dir, force=False, checkpoint_ref=None):
    """Poison ``manifest`` with ``attack`` at the configured rate."""
    embed_fn = None if isinstance(attack, GeneratorTrigger) else attack.apply
    source = attack.generator if isinstance(attack, GeneratorTrigger) else None
    out = poison_dataset(
        manifest, source, cfg.embed, cfg.poison_rate, cfg.seed("poison"), out_dir,
        force=force, trigger_seed=cfg.eval.trigger_seed, checkpoint_ref=checkpoint_ref, embed_fn=embed_fn,
    )
    out.extra["attack"] = attack.describe()
    out.write()
    return out


def train(cfg, manifest, mode=None):
    det_cfg = cfg.detector if mode is None else replace(cfg.detector, mode=mode)
    return train_detector(det_cfg.estimator_params(cfg.seed("train")), manifest)


def apply_defense(cfg, model, defense, clean):
    if defense is None or defense == "none":
        return model
    if clean is None:
        raise ValueError(f"defense {defense!r} needs a clean manifest")
    opts = cfg.eval
    if defense == "ft":
        return defense_finetune(model, clean, opts.finetune_fraction, opts.finetune_iterations,
                                learning_rate=opts.finetune_learning_rate, seed=cfg.seed("eval"))
    if defense == "fp":
        return defense_fineprune(model, clean, opts.prune_fraction, opts.finetune_iterations,
                                 fraction=opts.finetune_fraction, learning_rate=opts.finetune_learning_rate,
                                 seed=cfg.seed("eval"))
    raise ValueError(f"unknown defense {defense!r}; expected one of {sorted(DEFENSES)}")


@dataclass
class AttackRun:
    """Outputs of one poison-train-evaluate pass."""

    poisoned: DatasetManifest
    detector: ForgeryDetector
    reports: dict


def run_digest(cfg, **variant):
    """Config digest extended with what distinguishes one run of a suite."""
    blob = json.dumps({"config": cfg.digest(), **variant}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate_run(cfg, det, test_set, attack, poison_name, defense="none"):
    digest = run_digest(cfg, mode=det.mode, poison=poison_name, attack=attack.describe(), defense=defense)
    return evaluate(det, test_set, attack, digest, defense=defense, poison=poison_name)


def run_attack(cfg, train_set, test_set, attack, workdir, mode=None, defenses=()):
    """Poison, train and evaluate one attack; ``reports`` maps defense -> EvalReport."""
    workdir = Path(workdir)
    poisoned = poison(cfg, train_set, attack, workdir / "poisoned", force=True)
    det = train(cfg, poisoned, mode)
    reports = {"none": evaluate_run(cfg, det, test_set, attack, attack.name)}
    for d in defenses:
        defended = apply_defense(cfg, det, d, train_set)
        reports[d] = evaluate_run(cfg, defended, test_set, attack, attack.name, defense=d)
    return AttackRun(poisoned, det, reports)


@dataclass
class SuiteResult:
    """Everything the directional checks need from one seeded run."""

    objective_ratio: float
    clean: object  # EvalReport of the unpoisoned blending detector under our trigger
    ours: AttackRun
    blended: AttackRun
    deepfake: AttackRun
    timings: dict

    def reports(self):
        out = [self.clean]
        for run in (self.ours, self.blended, self.deepfake):
            out.extend(run.reports.values())
        return out


def run_suite(cfg, workdir, defenses=("ft", "fp")):
    """Generator, clean control, our attack, Blended baseline and deepfake mode, in one pass."""
    workdir = Path(workdir)
    timings = {}
    tick = time.perf_counter()

    def lap(name):
        nonlocal tick
        now = time.perf_counter()
        timings[name] = now - tick
        tick = now

    train_set, test_set = make_datasets(cfg, workdir / "data", force=True)
    lap("data")
    gen = train_trigger(cfg)
    ratio = mean_objective_ratio(gen, cfg.generator.kernel_half_width)
    lap("generator")
    ours = make_attack(cfg, generator=gen)
    clean_det = train(cfg, train_set, mode="blending_artifact")
    clean = evaluate_run(cfg, clean_det, test_set, ours, "none")
    lap("clean_detector")
    ours_run = run_attack(cfg, train_set, test_set, ours, workdir / "ours", mode="blending_artifact")
    lap("ours_blending")
    blended_run = run_attack(cfg, train_set, test_set, make_attack(cfg, baseline="blended"),
                             workdir / "blended", mode="blending_artifact")
    lap("blended_blending")
    deepfake_run = run_attack(cfg, train_set, test_set, ours, workdir / "deepfake", mode="deepfake_artifact")
    lap("ours_deepfake")
    for d in defenses:
        defended = apply_defense(cfg, ours_run.detector, d, train_set)
        ours_run.reports[d] = evaluate_run(cfg, defended, test_set, ours, ours.name, defense=d)
    lap("defenses")
    return SuiteResult(ratio, clean, ours_run, blended_run, deepfake_run, timings)


def mean_objective_ratio(generator, v, n=100, size=64, seed=0):
    """Mean conv objective of generator samples over random-uniform triggers of equal L-inf."""
    rng = np.random.default_rng(seed)
    gen = np.mean([conv_objective(generator.sample(size, size, seed + i), v) for i in range(n)])
    rand = np.mean([conv_objective(rng.uniform(-255, 255, (size, size, 3)), v) for _ in range(n)])
    return float(gen / rand)


def kernel_ablation(cfg, train_set, test_set, workdir, half_widths=range(1, 7)):
    """Train one generator per ``v`` and evaluate the resulting attack.

    Returns rows ``{"v", "kernel", "auc", "bd_auc", "objective_ratio"}``.
    """
    rows = []
    for v in half_widths:
        vcfg = replace(cfg, generator=replace(cfg.generator, kernel_half_width=int(v),
                                              train_patch_size=max(cfg.generator.train_patch_size, 4 * v + 4)))
        gen = train_trigger(vcfg)
        attack = make_attack(vcfg, generator=gen)
        run = run_attack(vcfg, train_set, test_set, attack, Path(workdir) / f"v{v}")
        rep = run.reports["none"]
        size = 2 * v + 1
        rows.append({
            "v": int(v),
            "kernel": f"{size}x{size}",
            "auc": rep.clean_auc,
            "bd_auc": rep.bd_auc,
            "objective_ratio": mean_objective_ratio(gen, v, n=10),
        })
        logger.info("ablation v=%d auc=%.2f bd-auc=%.2f", v, rep.clean_auc, rep.bd_auc)
    return rows


def format_ablation(rows):
    lines = ["kernel size | AUC    | BD-AUC", "------------+--------+-------"]
    for r in rows:
        lines.append(f"{r['kernel']:<11} | {r['auc']:6.2f} | {r['bd_auc']:6.2f}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ExperimentConfig",
    "AttackRun",
    "make_datasets",
    "train_trigger",
    "make_attack",
    "poison",
    "train",
    "apply_defense",
    "run_attack",
    "SuiteResult",
    "run_suite",
    "mean_objective_ratio",
    "kernel_ablation",
    "format_ablation",
]
