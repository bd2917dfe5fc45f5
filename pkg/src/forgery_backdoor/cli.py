"""Command-line entry point.

Exit codes: 0 success, 1 user error, 2 internal failure, 3 verification failure.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from sklearn.exceptions import NotFittedError

from . import experiments
from .config import freeze_config, frozen_config_path, load_config
from .data import DatasetManifest, generate_synthetic_dataset, verify_manifest
from .detection import ForgeryDetector
from .evaluation import emit_report
from .generator import TriggerGenerator
from .trigger_math import (
    brute_force_discrepancy,
    build_kernel,
    convolve_kernel,
    offsets,
    shift_difference_sum,
    translate,
)

EXIT_OK, EXIT_USER, EXIT_INTERNAL, EXIT_VERIFY = 0, 1, 2, 3

logger = logging.getLogger("forgery_backdoor")


class VerificationFailed(Exception):
    pass


def _refuse_existing(path, force):
    path = Path(path)
    if path.is_file() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} is not empty; pass --force to overwrite")


def cmd_gen_data(args, cfg):
    cfg = cfg.resolved()
    sub, prefix = (cfg.test_dataset, "t") if args.split == "test" else (cfg.dataset, "")
    manifest = generate_synthetic_dataset(sub, args.out, force=args.force, prefix=prefix)
    freeze_config(cfg, frozen_config_path(args.out))
    report = verify_manifest(manifest)
    if not report["ok"]:
        raise VerificationFailed(json.dumps(report["checks"], indent=2))
    c = manifest.counts
    print(f"wrote {len(manifest.records)} records to {args.out} (real {c['N_r']}, fake {c['N_f']})")


def cmd_train_trigger(args, cfg):
    _refuse_existing(args.out, args.force)
    gen = experiments.train_trigger(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    gen.save(args.out)
    log_path = Path(args.out).with_name(Path(args.out).name + ".log.jsonl")
    with open(log_path, "w") as fh:
        for it, loss in gen.training_log_:
            fh.write(json.dumps({"iteration": it, "loss": loss}) + "\n")
    freeze_config(cfg, frozen_config_path(args.out))
    first, last = gen.windowed_loss()
    ratio = experiments.mean_objective_ratio(gen, gen.kernel_half_width, n=20)
    print(f"generator saved to {args.out}; windowed loss {first:.4f} -> {last:.4f}; "
          f"objective vs random noise x{ratio:.2f}")


def _attack(cfg, args):
    if args.baseline:
        return experiments.make_attack(cfg, baseline=args.baseline)
    if not args.generator:
        raise ValueError("pass --generator CKPT or --baseline KIND")
    return experiments.make_attack(cfg, generator=TriggerGenerator.load(args.generator))


def cmd_poison(args, cfg):
    manifest = DatasetManifest.read(args.manifest)
    attack = _attack(cfg, args)
    out = experiments.poison(cfg, manifest, attack, args.out, force=args.force,
                             checkpoint_ref=None if args.baseline else str(args.generator))
    freeze_config(cfg, frozen_config_path(args.out))
    report = verify_manifest(out)
    if not report["ok"]:
        raise VerificationFailed(json.dumps(report["checks"], indent=2))
    print(f"poisoned {len(out.extra['poisoned_groups'])} groups ({out.counts['N_p']} images) into {args.out}")


def cmd_train_detector(args, cfg):
    _refuse_existing(args.out, args.force)
    manifest = DatasetManifest.read(args.manifest)
    det = experiments.train(cfg, manifest, mode=args.mode)
    det.provenance_ = {
        "manifest": str(args.manifest),
        "poison": manifest.extra.get("attack", {}).get("kind", "none") if manifest.poison_rate > 0 else "none",
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    det.save(args.out)
    freeze_config(cfg, frozen_config_path(args.out))
    tail = np.mean([loss for _, loss in det.training_log_[-100:]])
    print(f"detector ({det.mode}) saved to {args.out}; final loss {tail:.4f}")


def cmd_eval(args, cfg):
    det = ForgeryDetector.load(args.detector)
    test = DatasetManifest.read(args.test)
    attack = _attack(cfg, args)
    clean = DatasetManifest.read(args.clean) if args.clean else None
    det = experiments.apply_defense(cfg, det, args.defense, clean)
    poisoned_with = getattr(det, "provenance_", {}).get("poison", "unknown")
    report = experiments.evaluate_run(cfg, det, test, attack, poisoned_with, defense=args.defense or "none")
    json_path, txt_path = emit_report([report], args.out)
    freeze_config(cfg, frozen_config_path(json_path))
    print(txt_path.read_text(), end="")


# ---------------------------------------------------------------------------
# verify-math


def corrupted_kernel(v):
    """Negative control: centre weight off by one."""
    k = build_kernel(v)
    k[v, v] -= 1.0
    return k


def run_math_checks(corrupt=False, n=100, seed=0):
    """Kernel-sum identity, L1 lower bound and impulse oracle; returns result rows."""
    rng = np.random.default_rng(seed)
    kernel_of = corrupted_kernel if corrupt else build_kernel
    rows = []
    for v in (1, 2, 3):
        worst, bound_ok = 0.0, True
        for _ in range(n):
            h, w = rng.integers(2 * v + 1, 33, size=2)
            delta = rng.uniform(-255, 255, (h, w, 3))
            conv = convolve_kernel(delta, v, kernel=kernel_of(v))
            worst = max(worst, float(np.abs(shift_difference_sum(delta, v) - conv).max()))
            total = sum(np.abs(delta - translate(delta, o)).sum() for o in offsets(v))
            bound_ok &= bool(np.abs(conv).sum() <= total + 1e-9 * max(1.0, total))
        rows.append((f"kernel-sum identity v={v}", worst <= 1e-9, f"max abs err {worst:.3g}"))
        rows.append((f"L1 lower bound v={v}", bound_ok, f"{n} random triggers"))
    impulse = np.zeros((7, 7))
    impulse[3, 3] = 1.0
    bf = brute_force_discrepancy(impulse, 1)
    obj = float(np.abs(convolve_kernel(impulse, 1, kernel=kernel_of(1))).sum())
    rows.append(("impulse discrepancy = 16/9", bf == 16 / 9, f"{bf!r}"))
    rows.append(("impulse conv objective = 16", obj == 16.0, f"{obj!r}"))
    return rows


def cmd_verify_math(args, cfg):
    start = time.perf_counter()
    rows = run_math_checks(corrupt=args.corrupt_kernel)
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{name.ljust(width)}  {'PASS' if ok else 'FAIL'}  {detail}")
    print(f"elapsed {time.perf_counter() - start:.2f}s")
    if not all(ok for _, ok, _ in rows):
        raise VerificationFailed("math verification failed")


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="forgery-backdoor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic face dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-trigger", parents=[common], help="train the trigger generator")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_trigger)

    def attack_flags(p):
        p.add_argument("--generator", type=Path, help="generator checkpoint")
        p.add_argument("--baseline", choices=("badnet", "blended", "sig"), help="use a baseline trigger")

    p = sub.add_parser("poison", parents=[common], help="clean-label poisoning of a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    attack_flags(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train-detector", parents=[common], help="train a forgery detector")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--mode", choices=("blending_artifact", "deepfake_artifact"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("eval", parents=[common], help="evaluate a detector and write a report")
    p.add_argument("--detector", required=True, type=Path)
    p.add_argument("--test", required=True, type=Path, help="test manifest")
    attack_flags(p)
    p.add_argument("--defense", choices=("ft", "fp"))
    p.add_argument("--clean", type=Path, help="clean training manifest used by --defense")
    p.add_argument("--out", required=True, type=Path, help="report path (.json and .txt are written)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-math", parents=[common], help="check the kernel identities")
    p.add_argument("--corrupt-kernel", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify_math)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        args.func(args, cfg)
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ValueError, FileExistsError, FileNotFoundError, NotFittedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
