"""Tests for the structured posterior, sampling and the KL decomposition."""

import math

import numpy as np
import pytest
import torch

from target_vae.config.settings import PriorConfig
from target_vae.core.encoder import PosteriorField
from target_vae.core.exceptions import InvalidArgumentError, NumericError, ShapeError
from target_vae.core.geometry import make_coordinate_grid
from target_vae.core.latent import (
    PriorSpec,
    attention_softmax,
    gumbel_softmax_sample,
    kl_breakdown,
    kl_total,
    map_estimate,
    marginal_translation,
    sample_joint,
    select_parameters,
    theta_offsets,
)

from .conftest import random_field

F64 = torch.float64


def _prior(r, h, w, **kwargs):
    return PriorSpec.build(r, h, w, PriorConfig(**kwargs), dtype=F64)


def _peaked_field(r=4, h=3, w=3, cell=(0, 1, 1), height=1000.0):
    field = PosteriorField(
        attn_logits=torch.zeros(1, r, h, w, dtype=F64),
        mu_z=torch.zeros(1, r, h, w, 2, dtype=F64),
        log_sigma_z=torch.zeros(1, r, h, w, 2, dtype=F64),
        mu_dtheta=torch.zeros(1, r, h, w, dtype=F64),
        log_sigma_theta=torch.zeros(1, r, h, w, dtype=F64),
    )
    field.attn_logits[(0,) + cell] = height
    return field


def test_softmax_uniform_and_peaked():
    q = attention_softmax(torch.zeros(1, 2, 2, 2, dtype=F64))
    assert torch.allclose(q, torch.full_like(q, 1 / 8))
    logits = torch.zeros(1, 2, 2, 2, dtype=F64)
    logits[0, 1, 0, 1] = 20.0
    assert attention_softmax(logits)[0, 1, 0, 1] >= 0.999


def test_softmax_matches_exponential_ratio():
    logits = torch.randn(3, 4, 5, 5, dtype=F64)
    q = attention_softmax(logits)
    expected = logits.exp() / logits.exp().sum(dim=(1, 2, 3), keepdim=True)
    assert torch.allclose(q, expected, atol=1e-12)
    assert torch.allclose(q.sum(dim=(1, 2, 3)), torch.ones(3, dtype=F64))
    assert marginal_translation(q).shape == (3, 5, 5)
    assert torch.allclose(marginal_translation(q).sum(dim=(1, 2)), torch.ones(3, dtype=F64))


def test_non_finite_logits_rejected():
    logits = torch.zeros(1, 1, 2, 2)
    logits[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError) as exc:
        attention_softmax(logits)
    assert exc.value.diagnostics["nan"] == 1


def test_gumbel_temperature_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        gumbel_softmax_sample(torch.full((1, 3, 1, 1), 1 / 3), 0.0)


def test_gumbel_low_temperature_is_nearly_one_hot():
    q = torch.tensor([0.5, 0.3, 0.2], dtype=F64).reshape(1, 3, 1, 1).expand(200, 3, 1, 1)
    w = gumbel_softmax_sample(q, 0.01, torch.Generator().manual_seed(0))
    assert torch.allclose(w.sum(dim=(1, 2, 3)), torch.ones(200, dtype=F64))
    near_one_hot = (w.reshape(200, 3).max(dim=1).values > 0.99).double().mean()
    assert near_one_hot >= 0.9


def test_gumbel_argmax_frequencies_follow_probabilities():
    q = torch.tensor([0.5, 0.3, 0.2], dtype=F64).reshape(1, 3, 1, 1).expand(20000, 3, 1, 1)
    w = gumbel_softmax_sample(q, 0.5, torch.Generator().manual_seed(1))
    counts = np.bincount(w.reshape(20000, 3).argmax(dim=1).numpy(), minlength=3) / 20000
    assert np.allclose(counts, [0.5, 0.3, 0.2], atol=0.02)


def test_gumbel_seeded_draws_repeat():
    q = torch.softmax(torch.randn(4, 12, dtype=F64), dim=1).reshape(4, 3, 2, 2)
    a = gumbel_softmax_sample(q, 0.5, torch.Generator().manual_seed(5))
    b = gumbel_softmax_sample(q, 0.5, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_hard_sample_picks_cell_parameters():
    """A dominant cell at the grid centre in component 0 gives t = 0 and theta = 0."""
    field = _peaked_field(cell=(0, 1, 1))
    grid = make_coordinate_grid(3, 3, dtype=F64)
    sample = sample_joint(field, grid, _prior(4, 3, 3), 1e-3, torch.Generator().manual_seed(0))
    assert torch.equal(sample.t, torch.zeros(1, 2, dtype=F64))
    assert float(sample.mu_theta) == 0.0
    assert float(sample.sigma_theta) == pytest.approx(1.0)


def test_offset_added_to_selected_component():
    field = _peaked_field(cell=(2, 1, 1))
    grid = make_coordinate_grid(3, 3, dtype=F64)
    sample = sample_joint(field, grid, _prior(4, 3, 3), 1e-3, torch.Generator().manual_seed(0))
    assert float(sample.mu_theta) == pytest.approx(math.pi, abs=1e-12)


def test_soft_weights_average_positions():
    grid = make_coordinate_grid(3, 5, dtype=F64)
    field = random_field(b=1, r=1, h=3, w=5)
    w = torch.zeros(1, 1, 3, 5, dtype=F64)
    w[0, 0, 1, 1] = w[0, 0, 1, 3] = 0.5
    params = select_parameters(w, field, grid, _prior(1, 3, 5))
    assert torch.allclose(params.t, torch.zeros(1, 2, dtype=F64), atol=1e-15)


def test_sampling_checks_shapes():
    field = random_field(r=2, h=3, w=3)
    with pytest.raises(ShapeError):
        sample_joint(field, make_coordinate_grid(4, 3, dtype=F64), _prior(2, 3, 3), 1.0)
    with pytest.raises(ShapeError):
        sample_joint(field, make_coordinate_grid(3, 3, dtype=F64), _prior(4, 3, 3), 1.0)


def test_low_temperature_sample_matches_map():
    field = random_field(b=1, r=4, h=4, w=4, seed=3)
    field.attn_logits[0, 3, 2, 1] += 50.0
    grid = make_coordinate_grid(4, 4, dtype=F64)
    prior = _prior(4, 4, 4)
    sample = sample_joint(field, grid, prior, 0.05, torch.Generator().manual_seed(0))
    estimate = map_estimate(field, grid, prior)
    assert torch.allclose(sample.t, estimate.t, atol=1e-3)
    assert torch.allclose(sample.mu_theta, estimate.theta, atol=1e-3)
    assert torch.allclose(sample.mu_z, estimate.z, atol=1e-3)


def test_kl_zero_when_posterior_equals_prior():
    prior = _prior(4, 3, 3)
    field = PosteriorField(
        attn_logits=(prior.log_p_tr() + 3.0)[None],
        mu_z=torch.zeros(1, 4, 3, 3, 2, dtype=F64),
        log_sigma_z=torch.zeros(1, 4, 3, 3, 2, dtype=F64),
        mu_dtheta=torch.zeros(1, 4, 3, 3, dtype=F64),
        log_sigma_theta=torch.full((1, 4, 3, 3), math.log(math.pi / 4), dtype=F64),
    )
    assert abs(float(kl_total(field, prior))) < 1e-12


def test_kl_matches_enumeration():
    """Closed-form KL equals an explicit sum over the four pixels and two components."""
    field = random_field(b=1, r=2, h=2, w=2, z_dim=2, seed=7)
    prior = _prior(2, 2, 2)
    logits = field.attn_logits[0].flatten().tolist()
    norm = math.log(sum(math.exp(v) for v in logits))
    s0 = math.pi / 2
    expected = 0.0
    for r in range(2):
        for i in range(2):
            for j in range(2):
                log_q = float(field.attn_logits[0, r, i, j]) - norm
                q = math.exp(log_q)
                mu, ls = float(field.mu_dtheta[0, r, i, j]), float(field.log_sigma_theta[0, r, i, j])
                kl_theta = math.log(s0) - ls + (math.exp(2 * ls) + mu ** 2) / (2 * s0 ** 2) - 0.5
                kl_z = 0.0
                for d in range(2):
                    mz, lz = float(field.mu_z[0, r, i, j, d]), float(field.log_sigma_z[0, r, i, j, d])
                    kl_z += -lz + (math.exp(2 * lz) + mz ** 2) / 2 - 0.5
                # uniform p(r) and, on a 2x2 grid, uniform p(t)
                expected += q * (log_q - math.log(1 / 8) + kl_theta + kl_z)
    assert float(kl_total(field, prior)) == pytest.approx(expected, rel=1e-10)


def test_kl_z_for_doubled_sigma():
    field = _peaked_field(cell=(1, 0, 2))
    field.log_sigma_z[0, 1, 0, 2] = math.log(2.0)
    parts = kl_breakdown(field, _prior(4, 3, 3))
    assert float(parts.kl_z) == pytest.approx(2 * (4 - 1 - math.log(4)) / 2, abs=1e-12)


def test_kl_invariant_to_logit_shift_and_non_negative():
    prior = _prior(2, 3, 3)
    for seed in range(5):
        field = random_field(b=2, r=2, h=3, w=3, seed=seed)
        shifted = PosteriorField(
            field.attn_logits + 5.0, field.mu_z, field.log_sigma_z, field.mu_dtheta, field.log_sigma_theta
        )
        assert torch.allclose(kl_total(field, prior), kl_total(shifted, prior), atol=1e-10)
        assert (kl_total(field, prior) >= -1e-12).all()


def test_kl_gradients_match_finite_differences():
    field = random_field(b=1, r=2, h=2, w=2, seed=11)
    prior = _prior(2, 2, 2)
    inputs = tuple(
        t.clone().requires_grad_(True)
        for t in (field.attn_logits, field.mu_z, field.log_sigma_z, field.mu_dtheta, field.log_sigma_theta)
    )

    def fn(*tensors):
        return kl_total(PosteriorField(*tensors), prior)

    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-5, rtol=1e-3)


def test_map_estimate_ties_and_scan():
    grid = make_coordinate_grid(3, 3, dtype=F64)
    prior = _prior(4, 3, 3)
    flat = PosteriorField(
        torch.zeros(1, 4, 3, 3, dtype=F64),
        torch.zeros(1, 4, 3, 3, 2, dtype=F64),
        torch.zeros(1, 4, 3, 3, 2, dtype=F64),
        torch.zeros(1, 4, 3, 3, dtype=F64),
        torch.zeros(1, 4, 3, 3, dtype=F64),
    )
    estimate = map_estimate(flat, grid, prior)
    assert (int(estimate.r_index), int(estimate.row), int(estimate.col)) == (0, 0, 0)

    field = random_field(b=3, r=4, h=3, w=3, seed=4)
    estimate = map_estimate(field, grid, prior)
    for b in range(3):
        best = max(
            ((r, i, j) for r in range(4) for i in range(3) for j in range(3)),
            key=lambda cell: float(field.attn_logits[(b,) + cell]),
        )
        assert (int(estimate.r_index[b]), int(estimate.row[b]), int(estimate.col[b])) == best
        r, i, j = best
        assert float(estimate.theta[b]) == pytest.approx(float(field.mu_dtheta[b, r, i, j]) + r * math.pi / 2)
        assert torch.equal(estimate.t[b], grid.coords[i * 3 + j])


def test_prior_tables():
    prior = _prior(8, 5, 7)
    assert prior.theta_component_std == pytest.approx(math.pi / 8)
    assert float(prior.p_r.sum()) == pytest.approx(1.0)
    assert float(prior.log_p_t.exp().sum()) == pytest.approx(1.0)
    assert prior.log_p_tr().shape == (8, 5, 7)
    # p(t) peaks at the centre
    assert int(prior.log_p_t.argmax()) == 2 * 7 + 3


def test_normal_theta_prior_weights_offsets():
    prior = _prior(4, 3, 3, theta_prior="normal", theta_prior_std=math.pi / 4)
    p = prior.p_r
    assert float(p.sum()) == pytest.approx(1.0)
    assert float(p[0]) > float(p[1])
    assert float(p[1]) == pytest.approx(float(p[3]))
    assert float(p[2]) < float(p[1])


def test_disabled_offsets_are_zero():
    assert torch.equal(theta_offsets(4, enabled=False), torch.zeros(4))
    prior = PriorSpec.build(4, 3, 3, use_offsets=False, dtype=F64)
    assert torch.equal(prior.theta_offsets, torch.zeros(4, dtype=F64))
    assert prior.theta_component_std == pytest.approx(math.pi / 4)
