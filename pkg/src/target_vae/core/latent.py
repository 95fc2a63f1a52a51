"""Structured approximate posterior, priors and the KL decomposition.

The joint categorical ``q(t, r | y)`` over pixel locations and rotation components is a
softmax of the encoder's attention logits. Conditional Gaussians over the rotation angle and
the semantic vector are attached to every cell; a relaxed one-hot draw from ``q(t, r | y)``
selects (softly) which cell's parameters are used.

The KL divergence to the factorized prior decomposes as::

    KL = KL_tr + sum_{t,r} q(t, r | y) (KL_theta + KL_z)

with ``KL_theta`` taken against the prior component of the same rotation index.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from ..config.settings import PriorConfig
from .encoder import PosteriorField
from .exceptions import InvalidArgumentError, NumericError, ShapeError
from .geometry import CoordinateGrid, make_coordinate_grid, wrap_angle

logger = logging.getLogger(__name__)

GUMBEL_EPS = 1e-20


def theta_offsets(r: int, enabled: bool = True, **kwargs) -> Tensor:
    """Angles ``r' 2 pi / r`` of the discrete rotation components (zeros when disabled)."""
    offsets = torch.arange(r, **kwargs) * (2.0 * math.pi / r)
    return offsets if enabled else torch.zeros_like(offsets)


def translation_log_prior(grid: CoordinateGrid, std_x: float, std_y: float) -> Tensor:
    """Log of a zero-mean Gaussian over grid points, renormalized over the grid; ``[H, W]``."""
    x, y = grid.coords[:, 0], grid.coords[:, 1]
    logits = -0.5 * ((x / std_x) ** 2 + (y / std_y) ** 2)
    return torch.log_softmax(logits, dim=0).reshape(grid.height, grid.width)


@dataclass
class PriorSpec:
    """Factorized prior ``p(t) p(r) p(theta | r) p(z)`` for one image size.

    ``p(z)`` is standard normal; ``p(theta | r)`` is ``N(theta_offset[r], theta_component_std^2)``.
    """

    log_p_r: Tensor
    theta_offsets: Tensor
    theta_component_std: float
    log_p_t: Tensor
    translation_std: tuple
    theta_prior: str = "uniform"
    theta_prior_std: float = math.pi / 4

    @property
    def r(self) -> int:
        return self.log_p_r.shape[0]

    @property
    def p_r(self) -> Tensor:
        return self.log_p_r.exp()

    def log_p_tr(self) -> Tensor:
        """``log p(t) + log p(r)`` as an ``[r, H, W]`` table."""
        return self.log_p_r[:, None, None] + self.log_p_t[None]

    @classmethod
    def build(
        cls,
        r: int,
        height: int,
        width: int,
        config: Optional[PriorConfig] = None,
        *,
        use_offsets: bool = True,
        dtype: torch.dtype = torch.float32,
        device: Optional[torch.device] = None,
    ) -> "PriorSpec":
        """Prior for ``r`` rotation components on an ``height x width`` image.

        The pixel translation std is converted to normalized units (``2/(W-1)`` per pixel).
        With a normal prior over theta, ``p(r)`` is proportional to its density at each
        (wrapped) offset.
        """
        config = config or PriorConfig()
        offsets = theta_offsets(r, use_offsets, dtype=dtype, device=device)
        if config.theta_prior == "normal":
            wrapped = wrap_angle(offsets)
            log_p_r = torch.log_softmax(-0.5 * (wrapped / config.theta_prior_std) ** 2, dim=0)
        else:
            log_p_r = torch.full((r,), -math.log(r), dtype=dtype, device=device)
        std = (
            config.translation_std_px * 2.0 / (width - 1),
            config.translation_std_px * 2.0 / (height - 1),
        )
        grid = make_coordinate_grid(height, width, dtype=dtype, device=device)
        return cls(
            log_p_r=log_p_r,
            theta_offsets=offsets,
            theta_component_std=math.pi / r,
            log_p_t=translation_log_prior(grid, *std),
            translation_std=std,
            theta_prior=config.theta_prior,
            theta_prior_std=config.theta_prior_std,
        )

    def for_shape(self, grid: CoordinateGrid) -> "PriorSpec":
        """Same prior with ``p(t)`` re-evaluated over another grid (e.g. a larger canvas)."""
        coords = grid.coords.to(self.log_p_t)
        return PriorSpec(
            log_p_r=self.log_p_r,
            theta_offsets=self.theta_offsets,
            theta_component_std=self.theta_component_std,
            log_p_t=translation_log_prior(
                CoordinateGrid(coords, grid.height, grid.width), *self.translation_std
            ),
            translation_std=self.translation_std,
            theta_prior=self.theta_prior,
            theta_prior_std=self.theta_prior_std,
        )

    def to(self, device=None, dtype=None) -> "PriorSpec":
        return PriorSpec(
            log_p_r=self.log_p_r.to(device=device, dtype=dtype),
            theta_offsets=self.theta_offsets.to(device=device, dtype=dtype),
            theta_component_std=self.theta_component_std,
            log_p_t=self.log_p_t.to(device=device, dtype=dtype),
            translation_std=self.translation_std,
            theta_prior=self.theta_prior,
            theta_prior_std=self.theta_prior_std,
        )


class LatentSample(NamedTuple):
    """One differentiable draw from the joint posterior plus the selected parameters."""

    w: Tensor
    t: Tensor
    theta: Tensor
    z: Tensor
    mu_theta: Tensor
    sigma_theta: Tensor
    mu_z: Tensor
    sigma_z: Tensor


class SelectedParameters(NamedTuple):
    t: Tensor
    mu_theta: Tensor
    sigma_theta: Tensor
    mu_z: Tensor
    sigma_z: Tensor


class KLBreakdown(NamedTuple):
    """Per-image KL terms; ``total = kl_tr + kl_theta + kl_z``."""

    kl_tr: Tensor
    kl_theta: Tensor
    kl_z: Tensor
    total: Tensor


class MapEstimate(NamedTuple):
    t: Tensor
    theta: Tensor
    z: Tensor
    r_index: Tensor
    row: Tensor
    col: Tensor


def _check_finite(logits: Tensor) -> None:
    if not torch.isfinite(logits).all():
        raise NumericError(
            "Attention logits contain NaN or Inf",
            {"nan": int(torch.isnan(logits).sum()), "inf": int(torch.isinf(logits).sum())},
        )


def log_attention(attn_logits: Tensor) -> Tensor:
    """``log q(t, r | y)``, normalized jointly over ``(r, H, W)``."""
    _check_finite(attn_logits)
    b = attn_logits.shape[0]
    return torch.log_softmax(attn_logits.reshape(b, -1), dim=-1).reshape(attn_logits.shape)


def attention_softmax(attn_logits: Tensor) -> Tensor:
    """``q(t, r | y)`` from ``[B, r, H, W]`` logits; sums to one per image."""
    _check_finite(attn_logits)
    b = attn_logits.shape[0]
    return torch.softmax(attn_logits.reshape(b, -1), dim=-1).reshape(attn_logits.shape)


def marginal_translation(q_tr: Tensor) -> Tensor:
    """``q(t | y) = sum_r q(t, r | y)``, shape ``[B, H, W]``."""
    return q_tr.sum(dim=1)


def _noise(shape, like: Tensor, rng: Optional[torch.Generator], kind: str) -> Tensor:
    sampler = torch.rand if kind == "uniform" else torch.randn
    if rng is None:
        return sampler(shape, dtype=like.dtype, device=like.device)
    return sampler(shape, generator=rng, dtype=like.dtype, device=rng.device).to(like.device)


def _gumbel_softmax(log_probs: Tensor, temperature: float, rng: Optional[torch.Generator]) -> Tensor:
    if temperature <= 0:
        raise InvalidArgumentError(f"Gumbel-Softmax temperature must be > 0, got {temperature}")
    b = log_probs.shape[0]
    flat = log_probs.reshape(b, -1)
    u = _noise(flat.shape, flat, rng, "uniform")
    gumbel = -torch.log(-torch.log(u + GUMBEL_EPS) + GUMBEL_EPS)
    return torch.softmax((flat + gumbel) / temperature, dim=-1).reshape(log_probs.shape)


def gumbel_softmax_sample(
    q_tr: Tensor, temperature: float, rng: Optional[torch.Generator] = None
) -> Tensor:
    """Relaxed one-hot draw from ``q_tr`` over all non-batch axes."""
    return _gumbel_softmax(torch.log(q_tr.clamp_min(torch.finfo(q_tr.dtype).tiny)), temperature, rng)


def _check_grid(field: PosteriorField, grid: CoordinateGrid) -> None:
    if (grid.height, grid.width) != (field.height, field.width):
        raise ShapeError(
            f"Grid is {grid.height}x{grid.width} but the posterior field is {field.height}x{field.width}"
        )


def _check_prior(field: PosteriorField, prior: PriorSpec) -> None:
    if prior.r != field.r or tuple(prior.log_p_t.shape) != (field.height, field.width):
        raise ShapeError(
            f"Prior covers r={prior.r}, {tuple(prior.log_p_t.shape)} but field is "
            f"r={field.r}, {(field.height, field.width)}"
        )


def select_parameters(
    w: Tensor, field: PosteriorField, grid: CoordinateGrid, prior: PriorSpec
) -> SelectedParameters:
    """Weighted sums of the cell parameters under assignment weights ``w`` ``[B, r, H, W]``."""
    _check_grid(field, grid)
    b = w.shape[0]
    coords = grid.coords.to(w)
    t = w.sum(dim=1).reshape(b, -1) @ coords
    offsets = prior.theta_offsets.to(w).reshape(1, -1, 1, 1)
    mu_theta = (w * (field.mu_dtheta + offsets)).sum(dim=(1, 2, 3))
    sigma_theta = (w * field.log_sigma_theta.exp()).sum(dim=(1, 2, 3))
    mu_z = torch.einsum("brhw,brhwd->bd", w, field.mu_z)
    sigma_z = torch.einsum("brhw,brhwd->bd", w, field.log_sigma_z.exp())
    return SelectedParameters(t, mu_theta, sigma_theta, mu_z, sigma_z)


def sample_joint(
    field: PosteriorField,
    grid: CoordinateGrid,
    prior: PriorSpec,
    temperature: float,
    rng: Optional[torch.Generator] = None,
) -> LatentSample:
    """Reparameterized draw of ``(t, theta, z)`` from the joint posterior."""
    _check_prior(field, prior)
    w = _gumbel_softmax(log_attention(field.attn_logits), temperature, rng)
    params = select_parameters(w, field, grid, prior)
    eps_theta = _noise(params.mu_theta.shape, params.mu_theta, rng, "normal")
    eps_z = _noise(params.mu_z.shape, params.mu_z, rng, "normal")
    return LatentSample(
        w=w,
        t=params.t,
        theta=params.mu_theta + params.sigma_theta * eps_theta,
        z=params.mu_z + params.sigma_z * eps_z,
        mu_theta=params.mu_theta,
        sigma_theta=params.sigma_theta,
        mu_z=params.mu_z,
        sigma_z=params.sigma_z,
    )


def gaussian_kl(mu: Tensor, log_sigma: Tensor, prior_mu, prior_sigma: float) -> Tensor:
    """Elementwise ``KL(N(mu, sigma^2) || N(prior_mu, prior_sigma^2))``."""
    return (
        math.log(prior_sigma)
        - log_sigma
        + ((2.0 * log_sigma).exp() + (mu - prior_mu) ** 2) / (2.0 * prior_sigma ** 2)
        - 0.5
    )


def kl_breakdown(field: PosteriorField, prior: PriorSpec) -> KLBreakdown:
    """KL divergence of the structured posterior to the prior, split into its parts."""
    _check_prior(field, prior)
    log_q = log_attention(field.attn_logits)
    q = log_q.exp()
    log_p = prior.log_p_tr().to(log_q)
    kl_tr = (q * (log_q - log_p)).sum(dim=(1, 2, 3))
    # posterior mean is mu_dtheta + offset, prior component mean is the same offset
    kl_theta_cells = gaussian_kl(field.mu_dtheta, field.log_sigma_theta, 0.0, prior.theta_component_std)
    kl_z_cells = gaussian_kl(field.mu_z, field.log_sigma_z, 0.0, 1.0).sum(dim=-1)
    kl_theta = (q * kl_theta_cells).sum(dim=(1, 2, 3))
    kl_z = (q * kl_z_cells).sum(dim=(1, 2, 3))
    return KLBreakdown(kl_tr, kl_theta, kl_z, kl_tr + kl_theta + kl_z)


def kl_total(field: PosteriorField, prior: PriorSpec) -> Tensor:
    """Per-image ``KL(q(z, theta, t, r | y) || p(z, theta, t, r))``."""
    return kl_breakdown(field, prior).total


def map_estimate(field: PosteriorField, grid: CoordinateGrid, prior: PriorSpec) -> MapEstimate:
    """Most probable cell of ``q(t, r | y)`` and the posterior means attached to it.

    Ties resolve to the first cell in ``(r, row, col)`` scan order.
    """
    _check_grid(field, grid)
    _check_finite(field.attn_logits)
    b = field.batch_size
    flat = field.attn_logits.reshape(b, -1).argmax(dim=-1)
    hw = field.height * field.width
    r_index = torch.div(flat, hw, rounding_mode="floor")
    pixel = flat % hw
    row = torch.div(pixel, field.width, rounding_mode="floor")
    col = pixel % field.width
    batch = torch.arange(b, device=flat.device)
    offsets = prior.theta_offsets.to(field.mu_dtheta)
    return MapEstimate(
        t=grid.coords.to(field.mu_dtheta)[pixel],
        theta=field.mu_dtheta[batch, r_index, row, col] + offsets[r_index],
        z=field.mu_z[batch, r_index, row, col],
        r_index=r_index,
        row=row,
        col=col,
    )
