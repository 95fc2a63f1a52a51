"""Tests for the group-convolutional encoder."""

import math

import pytest
import torch
import torch.nn.functional as F

from target_vae.core.encoder import (
    GroupConvEncoder,
    LiftingGroupConv,
    PointwiseGroupConv,
    PosteriorField,
    encode,
    rotate_kernel_stack,
)
from target_vae.core.exceptions import InvalidDimensionError, ShapeError
from target_vae.core.geometry import rotate_images


def _encoder(r=4, collapse=False, kernel=3, in_channels=1):
    torch.manual_seed(0)
    encoder = GroupConvEncoder(
        in_channels, 4, kernel, r, z_dim=2, n_pointwise_layers=3, collapse_rotations=collapse
    )
    return encoder.double()


def _rot(x):
    return torch.rot90(x, 1, dims=(-2, -1))


def test_field_shapes():
    encoder = _encoder()
    field = encode(torch.rand(3, 1, 11, 11, dtype=torch.float64), encoder)
    assert field.attn_logits.shape == (3, 4, 11, 11)
    assert field.mu_dtheta.shape == (3, 4, 11, 11)
    assert field.log_sigma_theta.shape == (3, 4, 11, 11)
    assert field.mu_z.shape == (3, 4, 11, 11, 2)
    assert field.log_sigma_z.shape == (3, 4, 11, 11, 2)


def test_collapsed_rotation_axis():
    encoder = _encoder(collapse=True)
    assert encoder.posterior_r == 1
    field = encode(torch.rand(2, 1, 9, 9, dtype=torch.float64), encoder)
    assert field.attn_logits.shape == (2, 1, 9, 9)


def test_log_sigma_clamped():
    out = torch.full((1, 1 + 2 * 2 + 2, 1, 2, 2), 50.0)
    field = PosteriorField.from_head(out, 2)
    assert field.log_sigma_z.max() == 5.0
    assert field.log_sigma_theta.max() == 5.0


def test_quarter_turn_equivariance():
    """Rotating the input by 90 degrees rotates every map and shifts the rotation axis by one."""
    encoder = _encoder()
    image = torch.rand(2, 1, 13, 13, dtype=torch.float64)
    field = encoder(image)
    rotated = encoder(_rot(image))
    assert torch.allclose(rotated.attn_logits, _rot(torch.roll(field.attn_logits, 1, dims=1)), atol=1e-10)
    assert torch.allclose(rotated.mu_dtheta, _rot(torch.roll(field.mu_dtheta, 1, dims=1)), atol=1e-10)
    expected_z = torch.rot90(torch.roll(field.mu_z, 1, dims=1), 1, dims=(2, 3))
    assert torch.allclose(rotated.mu_z, expected_z, atol=1e-10)


def _smooth_blend(size=31):
    axis = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    image = torch.zeros(size, size, dtype=torch.float64)
    for cx, cy, sigma, amplitude in ((-4, 2, 3.5, 1.0), (3, -3, 3.0, 0.7), (1, 5, 2.5, 0.5)):
        image += amplitude * torch.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    return image[None, None]


def test_eighth_turn_equivariance_on_smooth_input():
    """Rotating by 2 pi / 8 rotates the maps and shifts the rotation axis by one, up to interpolation."""
    encoder = _encoder(r=8, kernel=7)
    image = _smooth_blend()
    angle = 2 * math.pi / 8
    field = encoder(image)
    rotated = encoder(rotate_images(image, angle))
    expected = torch.roll(rotate_images(field.attn_logits, angle), 1, dims=1)
    axis = torch.arange(31, dtype=torch.float64) - 15
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    interior = xs ** 2 + ys ** 2 <= 81
    error = (rotated.attn_logits - expected)[..., interior].norm() / expected[..., interior].norm()
    assert error < 5e-2


def test_translation_equivariance():
    """Shifting an object shifts the attention map by the same number of pixels."""
    encoder = _encoder()
    image = torch.zeros(1, 1, 15, 15, dtype=torch.float64)
    image[0, 0, 5:10, 5:10] = torch.rand(5, 5, dtype=torch.float64)
    shifted = torch.roll(image, shifts=(2, 1), dims=(-2, -1))
    expected = torch.roll(encoder(image).attn_logits, shifts=(2, 1), dims=(-2, -1))
    assert torch.allclose(encoder(shifted).attn_logits, expected, atol=1e-12)


@pytest.mark.parametrize("shift", range(8))
def test_pointwise_layer_commutes_with_cyclic_shift(shift):
    torch.manual_seed(1)
    layer = PointwiseGroupConv(3, 5, r=8).double()
    x = torch.randn(2, 3, 8, 4, 4, dtype=torch.float64)
    expected = torch.roll(layer(x), shift, dims=2)
    assert torch.allclose(layer(torch.roll(x, shift, dims=2)), expected, atol=1e-12)


def test_single_rotation_is_plain_convolution():
    torch.manual_seed(3)
    layer = LiftingGroupConv(2, 3, 5, r=1).double()
    image = torch.randn(1, 2, 9, 9, dtype=torch.float64)
    expected = F.conv2d(image, layer.weight, layer.bias, padding=2)
    assert torch.allclose(layer(image)[:, :, 0], expected, atol=1e-10)


def test_lifting_output_shape_and_shared_bias():
    torch.manual_seed(2)
    layer = LiftingGroupConv(2, 3, 5, r=8)
    out = layer(torch.zeros(1, 2, 10, 12))
    assert out.shape == (1, 3, 8, 10, 12)
    # a blank image yields the bias on every rotation copy
    assert torch.allclose(out, layer.bias.reshape(1, 3, 1, 1, 1).expand_as(out))


def test_kernel_stack_quarter_turns_exact():
    kernel = torch.randn(2, 3, 5, 5)
    stack = rotate_kernel_stack(kernel, 4)
    assert stack.shape == (4, 2, 3, 5, 5)
    for j in range(4):
        assert torch.equal(stack[j], torch.rot90(kernel, j, dims=(-2, -1)))


def test_kernel_stack_constant_kernel_inside_disk():
    """Interpolated rotations keep a constant kernel unchanged inside its inscribed disk."""
    kernel = torch.ones(1, 1, 5, 5, dtype=torch.float64)
    stack = rotate_kernel_stack(kernel, 8)
    ys, xs = torch.meshgrid(torch.arange(5.0), torch.arange(5.0), indexing="ij")
    inside = (ys - 2) ** 2 + (xs - 2) ** 2 <= 4.0
    for j in range(8):
        assert torch.allclose(stack[j, 0, 0][inside], torch.ones_like(stack[j, 0, 0][inside]), atol=1e-12)


@pytest.mark.parametrize("sigma", [2.0, 3.0])
def test_kernel_stack_gaussian_within_interpolation_bound(sigma):
    """Bilinear resampling errs by at most (max|f_xx| + max|f_yy|) / 8 on a unit grid.

    A Gaussian has max|f_xx| = 1 / sigma^2, so every rotated copy stays within 1 / (4 sigma^2)
    of the original inside the inscribed disk. Only quarter turns agree to 1e-6.
    """
    k = int(6 * sigma) | 1
    c = (k - 1) / 2
    axis = torch.arange(k, dtype=torch.float64)
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    gaussian = torch.exp(-((ys - c) ** 2 + (xs - c) ** 2) / (2 * sigma ** 2))
    stack = rotate_kernel_stack(gaussian[None, None], 16)
    inside = (ys - c) ** 2 + (xs - c) ** 2 <= c ** 2
    bound = 1.0 / (4 * sigma ** 2)
    for j in range(16):
        assert (stack[j, 0, 0] - gaussian)[inside].abs().max() <= bound


def test_invalid_configurations():
    with pytest.raises(InvalidDimensionError):
        LiftingGroupConv(1, 2, 4, r=4)
    encoder = _encoder(kernel=7)
    with pytest.raises(InvalidDimensionError):
        encode(torch.zeros(1, 1, 5, 5, dtype=torch.float64), encoder)
    with pytest.raises(ShapeError):
        encode(torch.zeros(1, 3, 9, 9, dtype=torch.float64), encoder)
    with pytest.raises(ShapeError):
        encode(torch.zeros(9, 9, dtype=torch.float64), encoder)
