"""Spatial generator: maps a semantic vector and a pixel coordinate to that pixel's distribution.

The generator never sees an image grid, only coordinates. Rendering an object at pose
``(theta, t)`` means evaluating it on transformed coordinates, so generation is equivariant
to rotation and translation by construction.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import NEGATIVE_SLOPE
from .exceptions import InvalidArgumentError, ShapeError
from .geometry import FourierFeatures

logger = logging.getLogger(__name__)

PROB_EPS = 1e-6
OUTPUT_MODES = ("bernoulli", "gaussian", "rgb")


@dataclass
class PixelDistribution:
    """Per-pixel output distribution over ``N`` pixels and ``C`` channels.

    For ``bernoulli`` the ``loc`` holds probabilities; for ``gaussian`` and ``rgb`` it holds
    means and ``log_scale`` the log standard deviations (broadcastable to ``loc``).
    """

    mode: str
    loc: Tensor
    log_scale: Optional[Tensor] = None

    @property
    def channels(self) -> int:
        return self.loc.shape[-1]


class SpatialGenerator(nn.Module):
    """Two parallel input branches (Fourier-expanded coordinates and ``z``) summed and then
    processed by shared fully connected layers.

    ``n_layers`` counts the input layer, the hidden layers and the output layer.
    """

    def __init__(
        self,
        z_dim: int,
        hidden_units: int = 512,
        n_layers: int = 3,
        output_mode: str = "bernoulli",
        channels: int = 1,
        per_pixel_sigma: bool = False,
        n_freq: int = 64,
        fourier_scale: float = 1.0,
        fourier_seed: int = 0,
    ):
        super().__init__()
        if output_mode not in OUTPUT_MODES:
            raise InvalidArgumentError(f"Unknown output mode {output_mode!r}")
        if n_layers < 2:
            raise InvalidArgumentError(f"Generator needs at least 2 layers, got {n_layers}")
        if output_mode == "rgb":
            channels = 3
        self.z_dim = z_dim
        self.output_mode = output_mode
        self.channels = channels
        self.per_pixel_sigma = per_pixel_sigma and output_mode != "bernoulli"
        self.fourier = FourierFeatures(n_freq, fourier_scale, fourier_seed)
        self.coord_layer = nn.Linear(self.fourier.out_features, hidden_units)
        self.z_layer = nn.Linear(z_dim, hidden_units, bias=False)
        self.hidden = nn.ModuleList(nn.Linear(hidden_units, hidden_units) for _ in range(n_layers - 2))
        n_out = channels * (2 if self.per_pixel_sigma else 1)
        self.output = nn.Linear(hidden_units, n_out)
        if output_mode != "bernoulli" and not self.per_pixel_sigma:
            self.log_sigma = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("log_sigma", None)

    def forward(self, z: Tensor, coords: Tensor) -> PixelDistribution:
        """``z`` is ``[B, z_dim]``; ``coords`` is ``[N, 2]`` shared or ``[B, N, 2]`` per image."""
        if z.dim() != 2 or z.shape[-1] != self.z_dim:
            raise ShapeError(f"Expected [B, {self.z_dim}] semantic vectors, got {tuple(z.shape)}")
        if coords.shape[-1] != 2 or coords.dim() not in (2, 3):
            raise ShapeError(f"Expected [N, 2] or [B, N, 2] coordinates, got {tuple(coords.shape)}")
        if coords.dim() == 3 and coords.shape[0] != z.shape[0]:
            raise ShapeError(f"{coords.shape[0]} coordinate sets for {z.shape[0]} semantic vectors")
        h = self.coord_layer(self.fourier(coords)) + self.z_layer(z).unsqueeze(1)
        h = F.leaky_relu(h, NEGATIVE_SLOPE)
        for layer in self.hidden:
            h = F.leaky_relu(layer(h), NEGATIVE_SLOPE)
        out = self.output(h)
        if self.output_mode == "bernoulli":
            return PixelDistribution("bernoulli", torch.sigmoid(out))
        if self.per_pixel_sigma:
            loc, log_scale = out.split(self.channels, dim=-1)
            return PixelDistribution(self.output_mode, loc, log_scale)
        return PixelDistribution(self.output_mode, out, self.log_sigma.expand_as(out))


def decode_pixels(z: Tensor, coords: Tensor, generator: SpatialGenerator) -> PixelDistribution:
    """Pixel distributions at already transformed coordinates."""
    return generator(z, coords)


def _pixels(y: Tensor) -> Tensor:
    # [B, C, H, W] -> [B, H*W, C], row-major like the coordinate grid
    return y.flatten(2).transpose(1, 2)


def reconstruction_log_prob(dist: PixelDistribution, y: Tensor) -> Tensor:
    """``sum_i log p(y_i | z, theta, t)`` per image for ``[B, C, H, W]`` targets."""
    if y.dim() != 4:
        raise ShapeError(f"Expected [B, C, H, W] targets, got {tuple(y.shape)}")
    target = _pixels(y).to(dist.loc)
    if target.shape != dist.loc.shape:
        raise ShapeError(
            f"Targets flatten to {tuple(target.shape)} but the distribution covers {tuple(dist.loc.shape)}"
        )
    if dist.mode == "bernoulli":
        p = dist.loc.clamp(PROB_EPS, 1.0 - PROB_EPS)
        log_prob = target * torch.log(p) + (1.0 - target) * torch.log1p(-p)
    else:
        log_scale = dist.log_scale
        log_prob = (
            -0.5 * math.log(2.0 * math.pi)
            - log_scale
            - (target - dist.loc) ** 2 / (2.0 * torch.exp(2.0 * log_scale))
        )
    return log_prob.sum(dim=(1, 2))


def render_mean(dist: PixelDistribution, height: int, width: int) -> Tensor:
    """Expected image ``[B, C, H, W]`` of a distribution evaluated on an ``H x W`` grid."""
    b, n, c = dist.loc.shape
    if n != height * width:
        raise ShapeError(f"Distribution covers {n} pixels, cannot render {height}x{width}")
    return dist.loc.transpose(1, 2).reshape(b, c, height, width)
