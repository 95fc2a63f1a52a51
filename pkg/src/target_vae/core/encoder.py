"""Rotation- and translation-equivariant inference network over the group P_r.

A lifting group convolution correlates ``r`` rotated copies of every kernel with the input,
adding a rotation axis to the feature map ``[B, C, r, H, W]``. Pointwise (1x1) group
convolutions then mix channels and act cyclically along the rotation axis. The last layer
emits the parameters of the approximate posterior for every ``(r', row, col)`` cell.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import InvalidDimensionError, ShapeError

logger = logging.getLogger(__name__)

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 5.0
NEGATIVE_SLOPE = 0.01


@dataclass
class PosteriorField:
    """Per-cell posterior parameters produced by the encoder.

    Shapes: ``attn_logits``, ``mu_dtheta``, ``log_sigma_theta`` are ``[B, r, H, W]``;
    ``mu_z`` and ``log_sigma_z`` are ``[B, r, H, W, z_dim]``. ``mu_dtheta`` is the residual
    angle before the discrete offset of its rotation component is added.
    """

    attn_logits: Tensor
    mu_z: Tensor
    log_sigma_z: Tensor
    mu_dtheta: Tensor
    log_sigma_theta: Tensor

    def __post_init__(self) -> None:
        cells = tuple(self.attn_logits.shape)
        if len(cells) != 4:
            raise ShapeError(f"attn_logits must be [B, r, H, W], got {cells}")
        for name in ("mu_dtheta", "log_sigma_theta"):
            if tuple(getattr(self, name).shape) != cells:
                raise ShapeError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {cells}")
        for name in ("mu_z", "log_sigma_z"):
            shape = tuple(getattr(self, name).shape)
            if shape[:4] != cells or len(shape) != 5:
                raise ShapeError(f"{name} has shape {shape}, expected {cells + ('z_dim',)}")

    @property
    def batch_size(self) -> int:
        return self.attn_logits.shape[0]

    @property
    def r(self) -> int:
        return self.attn_logits.shape[1]

    @property
    def height(self) -> int:
        return self.attn_logits.shape[2]

    @property
    def width(self) -> int:
        return self.attn_logits.shape[3]

    @property
    def z_dim(self) -> int:
        return self.mu_z.shape[-1]

    @classmethod
    def from_head(cls, out: Tensor, z_dim: int) -> "PosteriorField":
        """Split a ``[B, 1 + 2 z_dim + 2, r, H, W]`` head output into posterior parameters."""
        if out.shape[1] != 1 + 2 * z_dim + 2:
            raise ShapeError(f"Head emits {out.shape[1]} maps, expected {1 + 2 * z_dim + 2}")
        attn = out[:, 0]
        mu_z = out[:, 1:1 + z_dim].permute(0, 2, 3, 4, 1)
        log_sigma_z = out[:, 1 + z_dim:1 + 2 * z_dim].permute(0, 2, 3, 4, 1)
        mu_dtheta = out[:, 1 + 2 * z_dim]
        log_sigma_theta = out[:, 2 + 2 * z_dim]
        return cls(
            attn_logits=attn,
            mu_z=mu_z,
            log_sigma_z=log_sigma_z.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX),
            mu_dtheta=mu_dtheta,
            log_sigma_theta=log_sigma_theta.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX),
        )

    def index(self, i) -> "PosteriorField":
        """Sub-batch selection."""
        return PosteriorField(
            self.attn_logits[i], self.mu_z[i], self.log_sigma_z[i],
            self.mu_dtheta[i], self.log_sigma_theta[i],
        )


def rotate_kernel_stack(kernel: Tensor, r: int) -> Tensor:
    """Return ``r`` copies of ``[..., k, k]`` kernels, copy ``j`` rotated by ``j 2 pi / r``.

    Quarter-turn multiples are exact index permutations; other angles use bilinear
    interpolation about the kernel centre, with values rotated in from outside set to zero.
    """
    if r < 1:
        raise InvalidDimensionError(f"r must be >= 1, got {r}")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k:
        raise InvalidDimensionError(f"Kernels must be square, got {tuple(kernel.shape[-2:])}")
    flat = kernel.reshape(-1, 1, k, k)
    copies = []
    for j in range(r):
        if (4 * j) % r == 0:
            copies.append(torch.rot90(kernel, (4 * j) // r, dims=(-2, -1)))
            continue
        angle = 2.0 * math.pi * j / r
        c, s = math.cos(angle), math.sin(angle)
        affine = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=kernel.dtype, device=kernel.device)
        grid = F.affine_grid(affine.expand(flat.shape[0], 2, 3), list(flat.shape), align_corners=True)
        rotated = F.grid_sample(flat, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
        copies.append(rotated.reshape(kernel.shape))
    return torch.stack(copies, dim=0)


def lifting_group_conv(
    image: Tensor, weight: Tensor, bias: Optional[Tensor], r: int
) -> Tensor:
    """Correlate ``[B, C_in, H, W]`` images with rotated kernels, giving ``[B, C_out, r, H, W]``.

    ``weight`` is ``[C_out, C_in, k, k]`` with odd ``k``; zero "same" padding keeps ``H, W``.
    """
    if image.dim() != 4:
        raise ShapeError(f"Expected [B, C, H, W] images, got {tuple(image.shape)}")
    c_out, c_in, k, _ = weight.shape
    if image.shape[1] != c_in:
        raise ShapeError(f"Image has {image.shape[1]} channels, kernels expect {c_in}")
    if image.shape[-1] < k or image.shape[-2] < k:
        raise InvalidDimensionError(
            f"Kernel size {k} exceeds image size {tuple(image.shape[-2:])}"
        )
    stack = rotate_kernel_stack(weight, r)  # [r, C_out, C_in, k, k]
    stack = stack.transpose(0, 1).reshape(c_out * r, c_in, k, k)
    out = F.conv2d(image, stack, padding=k // 2)
    out = out.reshape(image.shape[0], c_out, r, image.shape[-2], image.shape[-1])
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1, 1, 1)
    return out


def pointwise_group_conv(features: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """1x1 group convolution: ``out[j] = sum_s W[s] x[(j + s) mod r]``.

    ``features`` is ``[B, C_in, r, H, W]`` and ``weight`` is ``[C_out, C_in, r]``.
    """
    if features.dim() != 5:
        raise ShapeError(f"Expected [B, C, r, H, W] features, got {tuple(features.shape)}")
    r = weight.shape[-1]
    if features.shape[2] != r:
        raise ShapeError(f"Rotation axis has length {features.shape[2]}, layer expects r={r}")
    if features.shape[1] != weight.shape[1]:
        raise ShapeError(f"Features have {features.shape[1]} channels, layer expects {weight.shape[1]}")
    padded = torch.cat([features, features[:, :, : r - 1]], dim=2)
    return F.conv3d(padded, weight[..., None, None], bias)


class LiftingGroupConv(nn.Module):
    """Lifting layer from the plane to P_r."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, r: int, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise InvalidDimensionError(f"Kernel size must be odd, got {kernel_size}")
        self.r = r
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters()

    def reset_parameters(self) -> None:
        stdv = 1.0 / math.sqrt(self.weight.shape[1] * self.kernel_size ** 2)
        nn.init.uniform_(self.weight, -stdv, stdv)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -stdv, stdv)

    def forward(self, image: Tensor) -> Tensor:
        return lifting_group_conv(image, self.weight, self.bias, self.r)


class PointwiseGroupConv(nn.Module):
    """1x1 group convolution with full cyclic mixing along the rotation axis."""

    def __init__(self, in_channels: int, out_channels: int, r: int, activation: bool = True):
        super().__init__()
        self.r = r
        self.activation = activation
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, r))
        self.bias = nn.Parameter(torch.empty(out_channels))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        stdv = 1.0 / math.sqrt(self.weight.shape[1] * self.r)
        nn.init.uniform_(self.weight, -stdv, stdv)
        nn.init.uniform_(self.bias, -stdv, stdv)

    def forward(self, features: Tensor) -> Tensor:
        out = pointwise_group_conv(features, self.weight, self.bias)
        if self.activation:
            out = F.leaky_relu(out, NEGATIVE_SLOPE)
        return out


class RotationCollapse(nn.Module):
    """Learned linear map from the ``r`` rotation values at each location to a single value."""

    def __init__(self, r: int):
        super().__init__()
        self.linear = nn.Linear(r, 1)

    def forward(self, features: Tensor) -> Tensor:
        return self.linear(features.movedim(2, -1)).movedim(-1, 2)


class GroupConvEncoder(nn.Module):
    """Lifting layer followed by ``n_pointwise_layers`` pointwise layers, the last one the head."""

    def __init__(
        self,
        in_channels: int,
        channels: int,
        kernel_size: int,
        r: int,
        z_dim: int,
        n_pointwise_layers: int = 3,
        collapse_rotations: bool = False,
    ):
        super().__init__()
        self.r = r
        self.z_dim = z_dim
        self.lifting = LiftingGroupConv(in_channels, channels, kernel_size, r)
        self.hidden = nn.ModuleList(
            PointwiseGroupConv(channels, channels, r) for _ in range(n_pointwise_layers - 1)
        )
        self.collapse = RotationCollapse(r) if collapse_rotations else None
        head_r = 1 if collapse_rotations else r
        self.head = PointwiseGroupConv(channels, 1 + 2 * z_dim + 2, head_r, activation=False)

    @property
    def posterior_r(self) -> int:
        return self.head.r

    def forward(self, image: Tensor) -> PosteriorField:
        h = F.leaky_relu(self.lifting(image), NEGATIVE_SLOPE)
        for layer in self.hidden:
            h = layer(h)
        if self.collapse is not None:
            h = self.collapse(h)
        return PosteriorField.from_head(self.head(h), self.z_dim)


def encode(image: Tensor, encoder: GroupConvEncoder) -> PosteriorField:
    """Run the inference network on a normalized ``[B, C, H, W]`` batch."""
    expected = encoder.lifting.weight.shape[1]
    if image.dim() != 4 or image.shape[1] != expected:
        raise ShapeError(f"Expected [B, {expected}, H, W] images, got {tuple(image.shape)}")
    return encoder(image)
