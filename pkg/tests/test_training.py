"""Tests for the ELBO and the training loop."""

import math

import numpy as np
import pytest
import torch

from target_vae.config.settings import PriorConfig, TemperatureSchedule, TrainConfig, VariantId
from target_vae.core.exceptions import InvalidArgumentError, NumericError, TrainingAbortedError
from target_vae.core.latent import sample_joint
from target_vae.core.model import TargetVAE, load_checkpoint
from target_vae.core.training import Trainer, elbo_loss, make_lr_scheduler, make_optimizer

from .conftest import tiny_config


def _train_config(**overrides):
    settings = dict(batch_size=4, learning_rate=1e-3, max_epochs=3, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


def test_loss_is_negative_recon_plus_kl(tiny_model, tiny_images):
    _, terms = elbo_loss(torch.from_numpy(tiny_images), tiny_model, 1.0, torch.Generator().manual_seed(0))
    expected = -(terms.recon - terms.kl_tr - terms.kl_theta - terms.kl_z)
    assert torch.allclose(terms.loss, expected, atol=1e-5)
    assert (terms.kl_tr >= -1e-5).all()


def test_elbo_estimate_stable_across_seeds(tiny_model64, tiny_images):
    """Only the reconstruction term is sampled; the KL terms are closed form."""
    batch = torch.from_numpy(tiny_images).double()
    losses, kls = [], []
    with torch.no_grad():
        for seed in range(8):
            loss, terms = elbo_loss(batch, tiny_model64, 1.0, torch.Generator().manual_seed(seed))
            losses.append(float(loss))
            kls.append(terms.kl_tr + terms.kl_theta + terms.kl_z)
        again, _ = elbo_loss(batch, tiny_model64, 1.0, torch.Generator().manual_seed(3))
    assert float(again) == pytest.approx(losses[3], rel=1e-12)
    for kl in kls[1:]:
        assert torch.allclose(kl, kls[0], atol=1e-12)
    assert all(math.isfinite(value) for value in losses)
    assert np.std(losses) <= 0.1 * abs(np.mean(losses))


def test_untrained_chance_level(tiny_model, tiny_images):
    """A generator emitting 0.5 everywhere scores log 0.5 per pixel."""
    with torch.no_grad():
        tiny_model.generator.output.weight.zero_()
        tiny_model.generator.output.bias.zero_()
    _, terms = elbo_loss(torch.from_numpy(tiny_images), tiny_model, 1.0, torch.Generator().manual_seed(0))
    assert torch.allclose(terms.recon, torch.full((8,), 81 * math.log(0.5)), atol=1e-3)


def test_micro_model_matches_hand_computation():
    """2x2 translation-only model: the loss equals a hand-summed Bernoulli term plus the two KLs."""
    torch.manual_seed(0)
    config = tiny_config(image_height=2, image_width=2, r=1, first_kernel_size=1, variant="V1")
    model = TargetVAE(config, PriorConfig()).double()
    y = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=torch.float64)
    loss, _ = elbo_loss(y, model, 0.5, torch.Generator().manual_seed(3))

    field = model.encode(y)
    sample = sample_joint(field, model.grid, model.prior, 0.5, torch.Generator().manual_seed(3))
    p = model.render(sample.z, sample.theta, sample.t).loc.flatten().tolist()
    recon = sum(v * math.log(q) + (1 - v) * math.log(1 - q) for v, q in zip([1, 0, 0, 1], p))
    logits = field.attn_logits.flatten().tolist()
    norm = math.log(sum(math.exp(v) for v in logits))
    kl = 0.0
    for cell in range(4):
        i, j = divmod(cell, 2)
        log_q = logits[cell] - norm
        mu, ls = float(field.mu_dtheta[0, 0, i, j]), float(field.log_sigma_theta[0, 0, i, j])
        kl_theta = math.log(math.pi) - ls + (math.exp(2 * ls) + mu ** 2) / (2 * math.pi ** 2) - 0.5
        kl_z = 0.0
        for d in range(2):
            mz, lz = float(field.mu_z[0, 0, i, j, d]), float(field.log_sigma_z[0, 0, i, j, d])
            kl_z += -lz + (math.exp(2 * lz) + mz ** 2) / 2 - 0.5
        # one component and four equidistant pixels: p(t, r) = 1/4
        kl += math.exp(log_q) * (log_q - math.log(0.25) + kl_theta + kl_z)
    assert float(loss) == pytest.approx(-(recon - kl), rel=1e-9)


def test_every_parameter_receives_gradient(tiny_model, tiny_images):
    loss, _ = elbo_loss(torch.from_numpy(tiny_images), tiny_model, 1.0, torch.Generator().manual_seed(0))
    loss.backward()
    for name, param in tiny_model.named_parameters():
        assert param.grad is not None, name
        assert param.grad.abs().sum() > 0, name


def test_non_finite_loss_raises(tiny_model, tiny_images):
    images = torch.from_numpy(tiny_images).clone()
    images[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        elbo_loss(images, tiny_model, 1.0)


def test_learning_rate_halves_after_ten_flat_epochs(tiny_model):
    config = TrainConfig()
    optimizer = make_optimizer(tiny_model, config)
    scheduler = make_lr_scheduler(optimizer, config)
    scheduler.step(1.0)
    for epoch in range(9):
        scheduler.step(1.0)
        assert optimizer.param_groups[0]["lr"] == pytest.approx(2e-4), epoch
    scheduler.step(1.0)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-4)


def test_adam_settings(tiny_model):
    optimizer = make_optimizer(tiny_model, TrainConfig())
    group = optimizer.param_groups[0]
    assert group["lr"] == 2e-4
    assert tuple(group["betas"]) == (0.9, 0.999)
    assert group["eps"] == 1e-8


def test_temperature_schedule():
    schedule = TemperatureSchedule()
    assert schedule.value(0, 10) == pytest.approx(1.0)
    assert schedule.value(2, 10) == pytest.approx(0.64)
    assert schedule.value(5, 10) == pytest.approx(0.1)
    assert schedule.value(9, 10) == pytest.approx(0.1)


def _fit(images, output_dir=None, **overrides):
    torch.manual_seed(0)
    model = TargetVAE(tiny_config(), PriorConfig())
    trainer = Trainer(model, _train_config(**overrides), output_dir)
    return model, trainer.fit(images)


def test_training_is_deterministic(tiny_images):
    _, first = _fit(tiny_images, max_epochs=2)
    _, second = _fit(tiny_images, max_epochs=2)
    assert first.epoch_losses == second.epoch_losses


def test_training_writes_log_and_checkpoints(tiny_images, tmp_path):
    model, result = _fit(tiny_images, tmp_path, max_epochs=2)
    lines = (tmp_path / "training_log.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0].split("\t")[:3] == ["epoch", "step", "loss"]
    assert len(lines) == 3
    assert result.checkpoint_path == tmp_path / "checkpoint.tvae"
    assert result.best_path == tmp_path / "best.tvae"
    loaded, metadata = load_checkpoint(result.checkpoint_path)
    assert metadata["extra"]["epoch"] == 1
    assert loaded.variant is VariantId.FULL_P4


def test_validation_split(tiny_images):
    _, result = _fit(tiny_images, max_epochs=1, val_fraction=0.25)
    assert result.history[0].val_loss is not None
    with pytest.raises(InvalidArgumentError):
        _fit(tiny_images[:1], max_epochs=1, val_fraction=0.25)


def test_early_stopping_and_decay_on_flat_loss(mocker, tiny_images):
    flat = {"loss": 5.0, "recon": -4.0, "kl_tr": 0.5, "kl_theta": 0.3, "kl_z": 0.2}
    mocker.patch.object(Trainer, "_run_epoch", return_value=flat)
    _, result = _fit(tiny_images, max_epochs=50, early_stop_patience=4, lr_patience=2)
    assert result.stopped_early
    assert len(result.history) == 5
    assert result.best_epoch == 0
    assert result.history[-1].lr < 1e-3


def test_numeric_failure_aborts_training(mocker, tiny_images, tmp_path):
    failure = NumericError("Non-finite ELBO", {"loss": "non-finite"})
    mocker.patch("target_vae.core.training.elbo_loss", side_effect=failure)
    with pytest.raises(TrainingAbortedError) as exc:
        _fit(tiny_images, tmp_path)
    assert exc.value.diagnostics == {"loss": "non-finite"}
    assert exc.value.last_checkpoint is None


def test_empty_dataset_rejected():
    with pytest.raises(InvalidArgumentError):
        _fit(np.zeros((0, 1, 9, 9), np.float32))


@pytest.mark.integration
def test_short_run_reduces_loss():
    """A few epochs on simple blobs bring the loss below its starting value."""
    rng = np.random.default_rng(0)
    images = np.zeros((64, 1, 9, 9), np.float32)
    for image in images:
        row, col = rng.integers(2, 5, size=2)
        image[0, row:row + 3, col:col + 3] = 1.0
    _, result = _fit(images, max_epochs=8, batch_size=16, learning_rate=3e-3)
    assert result.history[-1].loss < result.history[0].loss
