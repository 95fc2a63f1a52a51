"""Coordinate grids, rigid transforms, Fourier features and circular statistics.

Conventions used throughout the package:

* Pixel ``(row, col)`` of an ``H x W`` image sits at ``x = -1 + 2 col/(W-1)``,
  ``y = -1 + 2 row/(H-1)``: the top-left pixel is ``(-1, -1)``, y grows downward and
  coordinates are listed in row-major pixel order.
* Rotating an image by ``theta`` produces ``out(x) = in(R(theta) x)``. A rotation by ``pi/2``
  equals ``torch.rot90(image, 1, dims=(-2, -1))``.
* A pose ``(theta, t)`` places an object's centre at ``t``; the generator is queried at
  ``R(theta)(x - t)``, see :func:`pose_to_transform`.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import DegenerateInputError, InvalidDimensionError, ShapeError

ArrayLike = Union[Sequence[float], np.ndarray, Tensor]


@dataclass(frozen=True)
class CoordinateGrid:
    """Pixel-centre coordinates of an ``height x width`` image, shape ``[H*W, 2]``."""

    coords: Tensor
    height: int
    width: int

    def __len__(self) -> int:
        return self.height * self.width

    @property
    def spacing(self) -> tuple:
        """Distance between horizontally and vertically adjacent pixels."""
        return (
            float(self.coords[1, 0] - self.coords[0, 0]) if self.width > 1 else 0.0,
            float(self.coords[self.width, 1] - self.coords[0, 1]) if self.height > 1 else 0.0,
        )

    def to(self, device=None, dtype=None) -> "CoordinateGrid":
        return CoordinateGrid(self.coords.to(device=device, dtype=dtype), self.height, self.width)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``theta`` (radians, unwrapped) followed by a shift ``t``.

    ``theta`` is a scalar or ``[B]`` tensor, ``t`` is ``[2]`` or ``[B, 2]``.
    """

    theta: Tensor
    t: Tensor


def _axis(n: int, dtype: torch.dtype, device) -> Tensor:
    # i * step from both ends keeps the axis symmetric about zero
    idx = torch.arange(n, dtype=dtype, device=device)
    step = 2.0 / (n - 1)
    return torch.where(idx < n / 2, -1.0 + idx * step, 1.0 - (n - 1 - idx) * step)


def make_coordinate_grid(
    height: int,
    width: int,
    *,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> CoordinateGrid:
    """Uniform grid spanning [-1, 1] on both axes."""
    if height < 2 or width < 2:
        raise InvalidDimensionError(f"Grid needs at least 2x2 pixels, got {height}x{width}")
    ys = _axis(height, dtype, device)
    xs = _axis(width, dtype, device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([xx, yy], dim=-1).reshape(-1, 2)
    return CoordinateGrid(coords, height, width)


def make_pixel_grid(
    height: int,
    width: int,
    reference_height: int,
    reference_width: int,
    *,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> CoordinateGrid:
    """Centred grid for an image of any size with the pixel spacing of a reference size.

    Used to run a model trained on ``reference`` sized images over a larger canvas.
    """
    grid = make_coordinate_grid(height, width, dtype=dtype, device=device)
    scale = torch.tensor(
        [(width - 1) / (reference_width - 1), (height - 1) / (reference_height - 1)],
        dtype=dtype,
        device=device,
    )
    return CoordinateGrid(grid.coords * scale, height, width)


def rotation_matrix(theta: Tensor) -> Tensor:
    """``[[cos, -sin], [sin, cos]]`` with shape ``theta.shape + (2, 2)``."""
    theta = torch.as_tensor(theta)
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([torch.stack([c, -s], dim=-1), torch.stack([s, c], dim=-1)], dim=-2)


def transform_coordinates(coords: Tensor, tf: RigidTransform) -> Tensor:
    """Apply ``x -> R(theta) x + t`` to ``[N, 2]`` or ``[B, N, 2]`` coordinates."""
    if coords.shape[-1] != 2:
        raise ShapeError(f"Coordinates must be 2-vectors, got shape {tuple(coords.shape)}")
    theta = torch.as_tensor(tf.theta, dtype=coords.dtype, device=coords.device)
    t = torch.as_tensor(tf.t, dtype=coords.dtype, device=coords.device)
    rot = rotation_matrix(theta)
    if theta.dim() == 0:
        return coords @ rot.transpose(-1, -2) + t
    if coords.dim() == 2:
        out = torch.einsum("bij,nj->bni", rot, coords)
    else:
        out = torch.einsum("bij,bnj->bni", rot, coords)
    return out + t.reshape(-1, 1, 2)


def pose_to_transform(theta: Tensor, t: Tensor) -> RigidTransform:
    """Coordinate transform that renders an object posed at ``(theta, t)``.

    ``R(theta)(x - t) = R(theta) x + t'`` with ``t' = -R(theta) t``.
    """
    theta = torch.as_tensor(theta)
    t = torch.as_tensor(t, dtype=theta.dtype if theta.is_floating_point() else None)
    shift = -(rotation_matrix(theta) @ t.unsqueeze(-1)).squeeze(-1)
    return RigidTransform(theta, shift)


def fourier_expand(coords: Tensor, frequency_matrix: Tensor) -> Tensor:
    """``[sin(2 pi F c), cos(2 pi F c)]`` for every coordinate ``c``, shape ``[..., 2 n_freq]``."""
    if coords.shape[-1] != 2 or frequency_matrix.dim() != 2 or frequency_matrix.shape[-1] != 2:
        raise ShapeError(
            f"Expected [..., 2] coordinates and [n_freq, 2] frequencies, got "
            f"{tuple(coords.shape)} and {tuple(frequency_matrix.shape)}"
        )
    projection = 2.0 * math.pi * (coords @ frequency_matrix.to(coords).T)
    return torch.cat([torch.sin(projection), torch.cos(projection)], dim=-1)


class FourierFeatures(nn.Module):
    """Random Fourier feature expansion with a frequency matrix fixed at construction."""

    def __init__(self, n_freq: int = 64, scale: float = 1.0, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.n_freq = n_freq
        self.scale = scale
        self.register_buffer("frequency_matrix", torch.randn(n_freq, 2, generator=generator) * scale)

    @property
    def out_features(self) -> int:
        return 2 * self.n_freq

    def forward(self, coords: Tensor) -> Tensor:
        return fourier_expand(coords, self.frequency_matrix)


# Circular statistics


def wrap_angle(x):
    """Wrap angles into (-pi, pi]. Works on numpy arrays, tensors and floats."""
    if isinstance(x, Tensor):
        return x - 2.0 * math.pi * torch.ceil((x - math.pi) / (2.0 * math.pi))
    return x - 2.0 * np.pi * np.ceil((np.asarray(x) - np.pi) / (2.0 * np.pi))


def circular_mean(alpha: ArrayLike) -> float:
    """Direction of the mean resultant vector."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 0:
        raise DegenerateInputError("Circular mean of an empty sample")
    s, c = np.mean(np.sin(alpha)), np.mean(np.cos(alpha))
    if math.hypot(s, c) < 1e-12:
        raise DegenerateInputError("Circular mean undefined: mean resultant length is zero")
    return math.atan2(s, c)


def circular_correlation(alpha: ArrayLike, beta: ArrayLike) -> float:
    """Circular correlation coefficient of two paired angle samples."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if alpha.size == 0 or alpha.size != beta.size:
        raise DegenerateInputError(
            f"Circular correlation needs equal nonzero lengths, got {alpha.size} and {beta.size}"
        )
    sa = np.sin(alpha - circular_mean(alpha))
    sb = np.sin(beta - circular_mean(beta))
    denominator = math.sqrt(float(np.sum(sa * sa)) * float(np.sum(sb * sb)))
    if denominator < 1e-12:
        raise DegenerateInputError("Circular correlation undefined: zero circular variance")
    return float(np.clip(np.sum(sa * sb) / denominator, -1.0, 1.0))


# Image rotation


def _quarter_turns(theta: float) -> Optional[int]:
    k = theta / (math.pi / 2)
    nearest = round(k)
    return nearest % 4 if abs(k - nearest) < 1e-9 else None


def rotate_images(images: Tensor, theta: ArrayLike) -> Tensor:
    """Rotate ``[B, C, H, W]`` images about their centres by per-image angles.

    Multiples of pi/2 use exact index permutation, other angles bilinear interpolation
    with zero fill.
    """
    if images.dim() != 4:
        raise ShapeError(f"Expected [B, C, H, W] images, got {tuple(images.shape)}")
    b = images.shape[0]
    theta = torch.as_tensor(theta, dtype=torch.float64).reshape(-1).expand(b) if b else torch.zeros(0)
    out = torch.empty_like(images)
    interpolate = []
    for i, angle in enumerate(theta.tolist()):
        k = _quarter_turns(angle)
        if k is not None and images.shape[-1] == images.shape[-2]:
            out[i] = torch.rot90(images[i], k, dims=(-2, -1))
        else:
            interpolate.append(i)
    if interpolate:
        idx = torch.tensor(interpolate, device=images.device)
        rot = rotation_matrix(theta[interpolate]).to(images.dtype)
        affine = torch.cat([rot, torch.zeros(len(interpolate), 2, 1, dtype=images.dtype)], dim=-1)
        affine = affine.to(images.device)
        sampling = F.affine_grid(affine, list(images[idx].shape), align_corners=True)
        out[idx] = F.grid_sample(
            images[idx], sampling, mode="bilinear", padding_mode="zeros", align_corners=True
        )
    return out
