"""The full model: equivariant encoder, spatial generator, prior and coordinate grid."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
from torch import Tensor, nn

from ..config.settings import ModelConfig, PriorConfig, VariantId
from ..helpers.formats import read_checkpoint, write_checkpoint
from .encoder import GroupConvEncoder, PosteriorField, encode
from .exceptions import FormatError
from .generator import PixelDistribution, SpatialGenerator, decode_pixels, render_mean
from .geometry import CoordinateGrid, make_coordinate_grid, pose_to_transform, transform_coordinates
from .latent import PriorSpec

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "target-vae"


class TargetVAE(nn.Module):
    """Encoder and generator of one variant plus the prior they are trained against."""

    def __init__(self, config: ModelConfig, prior_config: Optional[PriorConfig] = None):
        super().__init__()
        self.config = config
        self.prior_config = prior_config or PriorConfig()
        self.encoder = GroupConvEncoder(
            in_channels=config.in_channels,
            channels=config.channels,
            kernel_size=config.first_kernel_size,
            r=config.r,
            z_dim=config.z_dim,
            n_pointwise_layers=config.n_pointwise_layers,
            collapse_rotations=config.variant is VariantId.V2_GCONV_COLLAPSED,
        )
        self.generator = SpatialGenerator(
            z_dim=config.z_dim,
            hidden_units=config.hidden_units,
            n_layers=config.generator_layers,
            output_mode=config.output_mode,
            channels=config.in_channels,
            per_pixel_sigma=config.per_pixel_sigma,
            n_freq=config.fourier.n_freq,
            fourier_scale=config.fourier.scale,
            fourier_seed=config.fourier.seed,
        )
        prior = PriorSpec.build(
            config.posterior_r,
            config.image_height,
            config.image_width,
            self.prior_config,
            use_offsets=config.uses_offsets,
        )
        self._prior_meta = (prior.theta_component_std, prior.translation_std)
        self.register_buffer("prior_log_p_r", prior.log_p_r)
        self.register_buffer("prior_theta_offsets", prior.theta_offsets)
        self.register_buffer("prior_log_p_t", prior.log_p_t)
        grid = make_coordinate_grid(config.image_height, config.image_width)
        self.register_buffer("grid_coords", grid.coords, persistent=False)

    @property
    def variant(self) -> VariantId:
        return self.config.variant

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(
            log_p_r=self.prior_log_p_r,
            theta_offsets=self.prior_theta_offsets,
            theta_component_std=self._prior_meta[0],
            log_p_t=self.prior_log_p_t,
            translation_std=self._prior_meta[1],
            theta_prior=self.prior_config.theta_prior,
            theta_prior_std=self.prior_config.theta_prior_std,
        )

    @property
    def grid(self) -> CoordinateGrid:
        return CoordinateGrid(self.grid_coords, self.config.image_height, self.config.image_width)

    def encode(self, images: Tensor) -> PosteriorField:
        return encode(images, self.encoder)

    def render(
        self, z: Tensor, theta: Tensor, t: Tensor, grid: Optional[CoordinateGrid] = None
    ) -> PixelDistribution:
        """Pixel distributions of objects with semantics ``z`` posed at ``(theta, t)``."""
        if grid is None:
            grid = self.grid
        coords = grid.coords.to(z)
        coords = transform_coordinates(coords, pose_to_transform(theta.to(z), t.to(z)))
        return decode_pixels(z, coords, self.generator)

    def render_images(
        self, z: Tensor, theta: Tensor, t: Tensor, grid: Optional[CoordinateGrid] = None
    ) -> Tensor:
        if grid is None:
            grid = self.grid
        return render_mean(self.render(z, theta, t, grid), grid.height, grid.width)

    def metadata(self) -> Dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "variant": self.variant.value,
            "model_config": json.loads(self.config.json()),
            "prior_config": json.loads(self.prior_config.json()),
        }


def variant_rotations(variant: VariantId, base_r: int) -> int:
    """Lifting-layer rotation count used by ``variant`` when built from a base with ``base_r``."""
    if variant.is_full:
        return variant.full_r
    if variant is VariantId.V1_TRANSLATION_ONLY:
        return 1
    return base_r if base_r > 1 else 4


def build_variant(
    variant: Union[VariantId, str],
    base: Optional[ModelConfig] = None,
    prior_config: Optional[PriorConfig] = None,
) -> TargetVAE:
    """Instantiate a full model or one of the ablations from a base configuration.

    V1 uses plain convolutions (r=1); V2 keeps group convolutions but collapses the rotation
    axis before the heads; V3 drops the discrete angle offsets.
    """
    variant = VariantId.parse(variant)
    base = base or ModelConfig()
    settings = base.dict()
    settings.update(variant=variant, r=variant_rotations(variant, base.r))
    config = ModelConfig(**settings)
    logger.debug(f"Building variant {variant.value} with r={config.r}")
    return TargetVAE(config, prior_config)


def save_checkpoint(
    path: Union[str, Path], model: TargetVAE, extra: Optional[Dict[str, Any]] = None
) -> Path:
    """Write model weights and configuration to a checkpoint container."""
    path = Path(path)
    tensors = {name: value.detach().cpu().float().numpy() for name, value in model.state_dict().items()}
    metadata = model.metadata()
    if extra:
        metadata["extra"] = dict(extra)
    write_checkpoint(path, tensors, metadata)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path], device: Union[str, torch.device] = "cpu"
) -> Tuple[TargetVAE, Dict[str, Any]]:
    """Rebuild a model from a checkpoint; returns the model and the stored metadata."""
    tensors, metadata = read_checkpoint(path)
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a target-vae checkpoint", 0)
    try:
        config = ModelConfig(**metadata["model_config"])
        prior_config = PriorConfig(**metadata["prior_config"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"Checkpoint {path} has invalid configuration: {e}", 0) from e
    model = TargetVAE(config, prior_config)
    state = {name: torch.from_numpy(array) for name, array in tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise FormatError(f"Checkpoint {path} does not match its configuration: {e}", 0) from e
    logger.info(f"Loaded {config.variant.value} model from {path}")
    return model.to(device), metadata
