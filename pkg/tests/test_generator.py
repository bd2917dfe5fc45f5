import numpy as np
import pytest
import torch
from sklearn.exceptions import NotFittedError

from forgery_backdoor._validation import TrainingDivergedError
from forgery_backdoor.generator import (
    GeneratorConfig,
    TriggerGenerator,
    generator_loss,
    kernel_l1,
    sample_trigger,
    train_generator,
)
from forgery_backdoor.trigger_math import conv_objective, trigger_loss

SHORT = GeneratorConfig(iterations=150, batch_size=8, train_patch_size=16, seed=3)


@pytest.fixture(scope="module")
def trained():
    return train_generator(SHORT)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(iterations=0)
    with pytest.raises(ValueError):
        GeneratorConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        GeneratorConfig(kernel_half_width=3, train_patch_size=6)


def test_torch_objective_matches_numpy():
    rng = np.random.default_rng(0)
    delta = rng.uniform(-255, 255, (9, 11, 3))
    t = torch.from_numpy(delta).permute(2, 0, 1)[None]
    assert float(kernel_l1(t, 2)[0]) == pytest.approx(conv_objective(delta, 2), rel=1e-12)
    assert float(generator_loss(t, 2)) == pytest.approx(trigger_loss(delta, 2), rel=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.uniform(-200, 200, (1, 3, 8, 8))
    t = torch.tensor(x, requires_grad=True)
    generator_loss(t, 1).backward()
    analytic = t.grad.numpy()
    eps = 1e-3
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        f = lambda a: float(generator_loss(torch.from_numpy(a), 1))  # noqa: E731
        numeric[idx] = (f(up) - f(down)) / (2 * eps)
    # |K * delta| is smooth unless a response sits at 0; random inputs keep them far away
    rel = np.abs(analytic - numeric).max() / np.abs(analytic).max()
    assert rel <= 1e-4


def test_sample_shapes_and_range(trained):
    for h, w in [(64, 64), (97, 113), (5, 5)]:
        p = sample_trigger(trained, h, w, seed=0)
        assert p.shape == (h, w, 3)
        assert np.abs(p).max() <= 255.0


def test_sample_deterministic(trained):
    np.testing.assert_array_equal(trained.sample(40, 40, 7), trained.sample(40, 40, 7))
    assert not np.array_equal(trained.sample(40, 40, 7), trained.sample(40, 40, 8))


def test_sample_too_small(trained):
    with pytest.raises(ValueError):
        trained.sample(4, 10)


def test_untrained_rejected():
    with pytest.raises(NotFittedError):
        TriggerGenerator().sample(16, 16)


def test_training_improves_objective(trained):
    fresh = TriggerGenerator.from_config(SHORT)
    torch.manual_seed(SHORT.seed)
    fresh.net_ = fresh._build()
    fresh.net_.eval()
    before = np.mean([conv_objective(fresh.sample(32, 32, s), 2) for s in range(5)])
    after = np.mean([conv_objective(trained.sample(32, 32, s), 2) for s in range(5)])
    assert after > before
    first, last = trained.windowed_loss()
    assert last <= first


def test_training_deterministic(trained):
    again = train_generator(SHORT)
    for a, b in zip(trained.net_.state_dict().values(), again.net_.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_roundtrip(trained, tmp_path):
    path = tmp_path / "g.pt"
    trained.save(path)
    loaded = TriggerGenerator.load(path)
    np.testing.assert_array_equal(loaded.sample(33, 21, 2), trained.sample(33, 21, 2))
    assert loaded.get_params() == trained.get_params()
    assert loaded.training_log_ == trained.training_log_
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        TriggerGenerator.load(tmp_path / "bad.pt")


def test_divergence_reports_iteration(monkeypatch):
    import forgery_backdoor.generator as gmod

    calls = {"n": 0}
    real = gmod.generator_loss

    def flaky(patterns, v):
        calls["n"] += 1
        loss = real(patterns, v)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(gmod, "generator_loss", flaky)
    with pytest.raises(TrainingDivergedError) as err:
        train_generator(GeneratorConfig(iterations=10, batch_size=2, train_patch_size=8))
    assert err.value.iteration == 2
