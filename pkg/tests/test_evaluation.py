import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from forgery_backdoor.data import SyntheticFaceConfig, generate_synthetic_dataset
from forgery_backdoor.evaluation import (
    BaselineTrigger,
    BaselineTriggerConfig,
    EvalReport,
    auc_from_scores,
    compute_auc,
    compute_bd_auc,
    emit_report,
    finetune_subset,
    format_table,
    make_baseline_trigger,
    prune_count,
    read_report,
    triggered,
)


def pairwise_auc(pos, neg):
    """O(n^2) oracle: fraction of (pos, neg) pairs ordered correctly, ties count half."""
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return 100.0 * total / (len(pos) * len(neg))


class LookupScorer:
    """Scores images through a function of their bytes; mimics the detector API."""

    mode = "blending_artifact"

    def __init__(self, fn):
        self.fn = fn

    def predict_proba(self, X, batch_size=256):
        p = np.array([self.fn(np.asarray(x)) for x in X], dtype=float)
        return np.stack([1 - p, p], axis=1)


@pytest.fixture(scope="module")
def tiny_test(tmp_path_factory):
    cfg = SyntheticFaceConfig(count=16, image_size=32, seed=5, frames_per_group=2)
    return generate_synthetic_dataset(cfg, tmp_path_factory.mktemp("tiny"), prefix="t")


def test_auc_trivial_cases():
    assert auc_from_scores([0.9, 0.8], [0.1, 0.2]) == 100.0
    assert auc_from_scores([0.5] * 3, [0.5] * 4) == 50.0
    assert auc_from_scores([0.3, 0.9], [0.1, 0.4]) == 75.0


def test_bd_auc_hand_built():
    # untriggered fakes are the positives, triggered fakes fill the real slot
    assert auc_from_scores([0.4, 0.8], [0.2, 0.6]) == 75.0


def test_auc_rejects_empty():
    with pytest.raises(ValueError):
        auc_from_scores([], [0.1])


@pytest.mark.parametrize("seed", range(20))
def test_auc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n_pos, n_neg = rng.integers(1, 100, size=2)
    # coarse grid forces plenty of ties
    pos = rng.integers(0, 10, n_pos) / 10
    neg = rng.integers(0, 10, n_neg) / 10
    assert auc_from_scores(pos, neg) == pytest.approx(pairwise_auc(pos, neg), abs=1e-12)


def test_compute_auc_group_level(tiny_test):
    fake_keys = {_bytes_key(tiny_test.load_image(r)) for r in tiny_test.fake_records}
    assert compute_auc(LookupScorer(lambda x: float(_bytes_key(x) in fake_keys)), tiny_test) == 100.0
    assert compute_auc(LookupScorer(lambda x: 0.3), tiny_test) == 50.0
    reals_only = replace(tiny_test, records=tiny_test.real_records)
    with pytest.raises(ValueError):
        compute_auc(LookupScorer(lambda x: 0.3), reals_only)


def _bytes_key(x):
    return np.asarray(x, dtype=np.float64).tobytes()


def test_bd_auc_trigger_blind_and_oracle(tiny_test):
    attack = BaselineTrigger(BaselineTriggerConfig("sig", amplitude=30.0, frequency=3.0))
    transform = triggered(attack)
    rng = np.random.default_rng(0)
    underlying, triggered_keys = {}, set()
    for r in tiny_test.fake_records:
        img = tiny_test.load_image(r)
        s = float(rng.uniform())
        underlying[_bytes_key(img)] = s
        t = transform(img, r)
        underlying[_bytes_key(t)] = s
        triggered_keys.add(_bytes_key(t))

    blind = LookupScorer(lambda x: underlying[_bytes_key(x)])
    assert compute_bd_auc(blind, tiny_test, attack) == 50.0

    oracle = LookupScorer(lambda x: 0.0 if _bytes_key(x) in triggered_keys else 1.0)
    assert compute_bd_auc(oracle, tiny_test, attack) == 100.0


def test_bd_auc_requires_trigger(tiny_test):
    with pytest.raises(ValueError):
        compute_bd_auc(LookupScorer(lambda x: 0.5), tiny_test, None)


def test_sig_pattern_closed_form():
    cfg = BaselineTriggerConfig("sig", amplitude=40.0, frequency=6.0)
    pattern, policy = make_baseline_trigger(cfg, 10, 240)
    assert policy == "additive"
    cols = np.arange(240)
    np.testing.assert_allclose(pattern[3, :, 1], 40 * np.sin(2 * np.pi * 6 * cols / 240))
    assert np.all(pattern == pattern[:1])  # row-constant
    np.testing.assert_allclose(pattern[:, :200], pattern[:, 40:240], atol=1e-9)  # period 40


def test_badnet_changes_exactly_patch_pixels():
    attack = BaselineTrigger(BaselineTriggerConfig("badnet", patch_size=3))
    x = np.full((32, 32, 3), 128.0)
    diff = np.any(attack.apply(x) != x, axis=2)
    assert diff.sum() == 9
    assert diff[-3:, -3:].all()


def test_blended_ratio_zero_is_identity():
    attack = BaselineTrigger(BaselineTriggerConfig("blended", blend_ratio=0.0, blend_image_ref="noise:3"))
    x = np.random.default_rng(1).uniform(0, 255, (16, 16, 3))
    np.testing.assert_array_equal(attack.apply(x), x)


def test_blended_constant_is_convex():
    attack = BaselineTrigger(BaselineTriggerConfig("blended", blend_ratio=0.05))
    x = np.zeros((8, 8, 3))
    np.testing.assert_allclose(attack.apply(x), 12.75)


def test_baseline_rejects_bad_kind():
    with pytest.raises(ValueError):
        BaselineTriggerConfig("issba")


class _Groups:
    def __init__(self, mode):
        self.mode = mode


def test_finetune_subset_count(tmp_path):
    cfg = SyntheticFaceConfig(count=200, image_size=32, seed=1, frames_per_group=2)
    m = generate_synthetic_dataset(cfg, tmp_path / "d")
    assert len(m.groups()) == 100
    recs = finetune_subset(_Groups("deepfake_artifact"), m, 0.05)
    assert len({r.group_id for r in recs}) == 5
    assert {r.label for r in recs} == {"real", "fake"}
    recs = finetune_subset(_Groups("blending_artifact"), m, 0.05)
    assert {r.label for r in recs} == {"real"}
    with pytest.raises(ValueError):
        finetune_subset(_Groups("blending_artifact"), m, 0.001)
    with pytest.raises(ValueError):
        finetune_subset(_Groups("blending_artifact"), m, 0.0)


def test_prune_count_floor():
    assert prune_count(64, 0.99) == 63
    assert prune_count(100, 0.99) == 99


def _report(digest="abc", **kw):
    base = dict(attack="ours", clean_auc=91.5, bd_auc=77.25, sc_with_trigger=0.2,
                sc_without_trigger=0.9, stealth={"psnr": 41.2, "linf": 10.5}, config_digest=digest,
                mode="blending_artifact", per_group_scores=[{"group_id": "g0", "score": 0.9,
                                                             "triggered_score": 0.1}])
    base.update(kw)
    return EvalReport(**base)


def test_report_invariants():
    with pytest.raises(ValueError):
        _report(clean_auc=101.0)
    with pytest.raises(ValueError):
        _report(sc_with_trigger=-0.1)


def test_report_roundtrip(tmp_path):
    entries = [_report("a"), _report("b", attack="sig", stealth={"psnr": math.inf, "linf": 0.0})]
    json_path, txt_path = emit_report(entries, tmp_path / "r")
    assert read_report(json_path) == entries
    assert "sig" in txt_path.read_text()


def test_report_single_row_table():
    lines = format_table([_report()]).strip().splitlines()
    assert len(lines) == 3  # header, rule, one row


def test_report_duplicate_digest_warns(tmp_path):
    with pytest.warns(UserWarning, match="config_digest"):
        emit_report([_report("x"), _report("x")], tmp_path / "r")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        emit_report([_report("x")], tmp_path / "r2")


def test_report_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "r")
