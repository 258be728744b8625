import numpy as np
import pytest
import torch

from owetc.errors import NumericError
from owetc.gan import (
    GanConfig,
    GanEnsemble,
    balanced_accuracy,
    init_gan,
    load_gan,
    load_synthetic,
    save_gan,
    save_synthetic,
    synthesize,
    train_gan,
)

SMALL = GanConfig(latent_dim=4, gen_hidden=(16, 16), dis_hidden=(16, 16), steps=50, batch_size=16, seed=0)


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(-1, 0.3, (n // 2, 3)), rng.normal(1, 0.3, (n - n // 2, 3))])


def test_zero_steps_is_init():
    from dataclasses import replace

    gan, history = train_gan(blobs(), replace(SMALL, steps=0))
    fresh = init_gan(3, SMALL)
    assert history == []
    for (k, a), (_, b) in zip(gan.generator.state_dict().items(), fresh.generator.state_dict().items()):
        assert torch.equal(a, b), k


def test_training_deterministic():
    a, ha = train_gan(blobs(), SMALL)
    b, hb = train_gan(blobs(), SMALL)
    assert ha == hb
    assert a.digest() == b.digest()


def test_history_records():
    _, history = train_gan(blobs(), SMALL)
    assert [h["step"] for h in history][:3] == [0, 10, 20]
    assert history[-1]["step"] == SMALL.steps - 1
    assert all(np.isfinite([h["dis_loss"], h["gen_loss"]]).all() for h in history)


def test_discriminator_outputs_probabilities():
    gan, _ = train_gan(blobs(), SMALL)
    p = gan.discriminate(np.random.default_rng(1).normal(0, 100, (64, 3)))
    assert np.all(p > 0) and np.all(p < 1)


def test_discriminator_beats_untrained_generator():
    """Train only the discriminator against a frozen random generator."""
    data = blobs(400)
    gan = init_gan(3, SMALL)
    gan.data_mean.copy_(torch.from_numpy(data.mean(0)))
    gan.data_scale.copy_(torch.from_numpy(data.std(0)))
    from owetc.gan import dis_step

    opt = torch.optim.Adam(gan.discriminator.parameters(), lr=1e-2)
    gen = torch.Generator().manual_seed(0)
    real = (torch.from_numpy(data) - gan.data_mean) / gan.data_scale
    for _ in range(300):
        idx = torch.randint(len(data), (64,), generator=gen)
        dis_step(gan, opt, real[idx], torch.randn(64, SMALL.latent_dim, generator=gen, dtype=torch.float64))
    fake = synthesize(gan, 400, seed=5)
    assert balanced_accuracy(gan, data, fake) > 0.9


def test_synthesize_counts_and_seed():
    gan, _ = train_gan(blobs(), SMALL)
    assert synthesize(gan, 0).shape == (0, 3)
    a, b = synthesize(gan, 20, seed=3), synthesize(gan, 20, seed=3)
    assert a.shape == (20, 3) and np.array_equal(a, b)
    assert not np.array_equal(a, synthesize(gan, 20, seed=4))
    with pytest.raises(ValueError):
        synthesize(gan, -1)


def test_too_few_samples():
    with pytest.raises(ValueError):
        train_gan(blobs(8), SMALL)


def test_divergence_reports_last_good(monkeypatch):
    import owetc.gan as gan_mod

    calls = {"n": 0}
    real_gen_step = gan_mod.gen_step

    def exploding(*args):
        calls["n"] += 1
        value = real_gen_step(*args)
        return float("nan") if calls["n"] > 15 else value

    monkeypatch.setattr(gan_mod, "gen_step", exploding)
    with pytest.raises(NumericError) as err:
        train_gan(blobs(), SMALL)
    assert err.value.last_good is not None


def test_ensemble_splits_count():
    a, _ = train_gan(blobs(seed=1), SMALL)
    b, _ = train_gan(blobs(seed=2), SMALL)
    ens = GanEnsemble({"x": a, "y": b})
    assert ens.synthesize(7).shape == (7, 3)


def test_round_trips(tmp_path):
    gan, _ = train_gan(blobs(), SMALL)
    save_gan(gan, tmp_path / "g.ckpt")
    again = load_gan(tmp_path / "g.ckpt")
    assert np.array_equal(synthesize(gan, 5, 1), synthesize(again, 5, 1))
    samples = synthesize(gan, 5)
    save_synthetic(samples, tmp_path / "s.ckpt", gan.digest())
    loaded, meta = load_synthetic(tmp_path / "s.ckpt")
    assert np.array_equal(loaded, samples) and meta["generator_hash"] == gan.digest()
