"""Pose-canonicalized reconstructions, latent traversals and embedding export."""

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch

from ..core.exceptions import InvalidArgumentError
from ..core.model import TargetVAE
from ..helpers.formats import save_image_grid, write_stack
from .metrics import predict_poses

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@torch.no_grad()
def render_canonical(model: TargetVAE, z: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Render semantic vectors at rotation 0 and translation 0; returns ``[N, C, H, W]``."""
    model.eval()
    param = next(model.parameters())
    z = torch.as_tensor(z).to(device=param.device, dtype=param.dtype)
    zeros = torch.zeros(len(z), dtype=param.dtype, device=param.device)
    images = model.render_images(z, zeros, torch.zeros(len(z), 2, dtype=param.dtype, device=param.device))
    return images.cpu().numpy()


def reconstruct_aligned(
    model: TargetVAE, images: Union[np.ndarray, torch.Tensor], batch_size: int = 100
) -> np.ndarray:
    """Encode images and render their MAP semantic vectors in the canonical pose."""
    z = predict_poses(model, images, batch_size).z
    if len(z) == 0:
        return np.zeros((0, model.config.in_channels, model.config.image_height, model.config.image_width))
    chunks = [render_canonical(model, z[i:i + batch_size]) for i in range(0, len(z), batch_size)]
    return np.concatenate(chunks)


def traverse_latent(
    model: TargetVAE, z_range: Tuple[float, float] = (-2.0, 2.0), steps: int = 8
) -> Tuple[np.ndarray, int]:
    """Renders of a sweep over the first two latent dimensions (the first only if ``z_dim`` is 1).

    Returns ``(images, columns)``: a ``steps x steps`` grid row-major over (dim 1, dim 0), or
    one row of ``steps`` images. Remaining dimensions stay at zero.
    """
    if steps < 1:
        raise InvalidArgumentError(f"steps must be >= 1, got {steps}")
    values = np.linspace(z_range[0], z_range[1], steps)
    z_dim = model.config.z_dim
    if z_dim == 1:
        z = values[:, None]
    else:
        z = np.zeros((steps * steps, z_dim))
        dim1, dim0 = np.meshgrid(values, values, indexing="ij")
        z[:, 0] = dim0.ravel()
        z[:, 1] = dim1.ravel()
    return render_canonical(model, z), steps


def export_traversal(model: TargetVAE, path: PathLike, z_range=(-2.0, 2.0), steps: int = 8) -> Path:
    images, columns = traverse_latent(model, z_range, steps)
    return save_image_grid(path, images, columns)


def export_embeddings(
    model: TargetVAE, images: Union[np.ndarray, torch.Tensor], directory: PathLike, batch_size: int = 100
) -> Path:
    """Write MAP semantic vectors (``embeddings.tvs``) and poses (``poses.tvs``: theta, t_x_px, t_y_px)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    predictions = predict_poses(model, images, batch_size)
    path = directory / "embeddings.tvs"
    write_stack(path, predictions.z.astype(np.float32))
    poses = np.concatenate([predictions.theta[:, None], predictions.t_px], axis=1)
    write_stack(directory / "poses.tvs", poses.astype(np.float64))
    logger.info(f"Wrote {len(predictions.z)} embeddings of dimension {predictions.z.shape[1]} to {path}")
    return path
