"""Configuration settings for target-vae."""

import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, Extra, Field, ValidationError, root_validator, validator

from ..core.exceptions import ConfigurationError, UnknownVariantError


ENV_PREFIX = "TARGET_VAE_"


class VariantId(str, Enum):
    """Model variants: the full model at three discretizations plus the three ablations."""

    V1_TRANSLATION_ONLY = "V1"
    V2_GCONV_COLLAPSED = "V2"
    V3_NO_OFFSET = "V3"
    FULL_P4 = "FULL_P4"
    FULL_P8 = "FULL_P8"
    FULL_P16 = "FULL_P16"

    @classmethod
    def parse(cls, value: Any) -> "VariantId":
        """Accept enum members, values or member names in any case."""
        if isinstance(value, cls):
            return value
        text = str(value).strip().upper().replace("-", "_")
        for member in cls:
            if text in (member.value, member.name):
                return member
        raise UnknownVariantError(f"Unknown variant id: {value!r}", key="variant")

    @property
    def is_full(self) -> bool:
        return self.value.startswith("FULL_")

    @property
    def full_r(self) -> Optional[int]:
        """Number of rotations fixed by a FULL_Pr id, None for the ablations."""
        return int(self.value.split("_P")[1]) if self.is_full else None


GROUP_ROTATIONS = {"p1": 1, "p4": 4, "p8": 8, "p16": 16}


class FourierFeatureConfig(BaseModel):
    """Random Fourier feature expansion of pixel coordinates."""

    n_freq: int = Field(default=64, ge=1)
    scale: float = Field(default=1.0, gt=0.0)
    seed: int = 0

    class Config:
        validate_assignment = True


class ModelConfig(BaseModel):
    """Architecture and variant switches of a model."""

    image_height: int = Field(default=50, ge=2)
    image_width: int = Field(default=50, ge=2)
    in_channels: int = Field(default=1, ge=1)
    r: int = Field(default=4, ge=1)
    z_dim: int = Field(default=2, ge=1)
    first_kernel_size: int = Field(default=29, ge=1)
    channels: int = Field(default=128, ge=1)
    n_pointwise_layers: int = Field(default=3, ge=1)
    generator_layers: int = Field(default=3, ge=2)
    hidden_units: int = Field(default=512, ge=1)
    output_mode: Literal["bernoulli", "gaussian", "rgb"] = "bernoulli"
    per_pixel_sigma: bool = False
    fourier: FourierFeatureConfig = Field(default_factory=FourierFeatureConfig)
    variant: VariantId = VariantId.FULL_P4

    class Config:
        """Pydantic configuration."""
        validate_assignment = True
        use_enum_values = False

    @validator("variant", pre=True)
    def parse_variant(cls, v: Any) -> VariantId:
        return VariantId.parse(v)

    @validator("first_kernel_size")
    def kernel_must_be_odd(cls, v: int) -> int:
        """Symmetric same-padding needs an odd kernel."""
        if v % 2 == 0:
            raise ValueError(f"first_kernel_size must be odd, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def variant_matches_r(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        variant: VariantId = values["variant"]
        r = values["r"]
        if variant.is_full and variant.full_r != r:
            raise ValueError(f"variant {variant.value} requires r={variant.full_r}, got r={r}")
        if variant is VariantId.V1_TRANSLATION_ONLY and r != 1:
            raise ValueError(f"variant V1 uses plain convolutions (r=1), got r={r}")
        if values["output_mode"] == "rgb" and values["in_channels"] != 3:
            raise ValueError("output_mode 'rgb' requires in_channels=3")
        return values

    @property
    def posterior_r(self) -> int:
        """Length of the rotation axis of the posterior."""
        if self.variant in (VariantId.V1_TRANSLATION_ONLY, VariantId.V2_GCONV_COLLAPSED):
            return 1
        return self.r

    @property
    def uses_offsets(self) -> bool:
        return self.variant is not VariantId.V3_NO_OFFSET


class PriorConfig(BaseModel):
    """Settings of the factorized prior."""

    theta_prior: Literal["uniform", "normal"] = "uniform"
    theta_prior_std: float = Field(default=math.pi / 4, gt=0.0)
    translation_std_px: float = Field(default=5.0, gt=0.0)

    class Config:
        validate_assignment = True


class TemperatureSchedule(BaseModel):
    """Linear Gumbel-Softmax temperature annealing."""

    start: float = Field(default=1.0, gt=0.0)
    end: float = Field(default=0.1, gt=0.0)
    anneal_fraction: float = Field(default=0.5, ge=0.0, le=1.0)

    class Config:
        validate_assignment = True

    @classmethod
    def parse(cls, text: str) -> "TemperatureSchedule":
        """Parse ``start:end:fraction`` (trailing parts optional)."""
        parts = [p for p in str(text).split(":") if p.strip()]
        if not parts or len(parts) > 3:
            raise ConfigurationError(
                f"Temperature schedule must be 'start[:end[:fraction]]', got {text!r}",
                key="temperature_schedule",
            )
        names = ["start", "end", "anneal_fraction"]
        try:
            values = {name: float(part) for name, part in zip(names, parts)}
            if len(parts) == 1:
                values["end"] = values["start"]
            return cls(**values)
        except (ValueError, ValidationError) as e:
            raise ConfigurationError(
                f"Invalid temperature schedule {text!r}: {e}", key="temperature_schedule"
            ) from e

    def value(self, epoch: int, max_epochs: int) -> float:
        """Temperature used during ``epoch`` (0-based)."""
        span = self.anneal_fraction * max_epochs
        if span <= 0:
            return self.end
        frac = min(epoch / span, 1.0)
        return self.start + (self.end - self.start) * frac

    def __str__(self) -> str:
        return f"{self.start}:{self.end}:{self.anneal_fraction}"


class TrainConfig(BaseModel):
    """Optimization settings."""

    batch_size: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=2e-4, gt=0.0)
    lr_decay_factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    lr_patience: int = Field(default=10, ge=1)
    early_stop_patience: int = Field(default=20, ge=1)
    max_epochs: int = Field(default=500, ge=1)
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = 0
    temperature: TemperatureSchedule = Field(default_factory=TemperatureSchedule)
    val_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    num_workers: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=1, ge=1)
    log_every_steps: int = Field(default=0, ge=0)
    device: str = "cpu"

    class Config:
        validate_assignment = True


class ExperimentConfig(BaseModel):
    """Flat key-value settings for one CLI run."""

    # model
    group: Optional[Literal["p1", "p4", "p8", "p16"]] = None
    variant: str = "FULL"
    z_dim: int = Field(default=2, ge=1)
    image_height: int = Field(default=50, ge=2)
    image_width: int = Field(default=50, ge=2)
    in_channels: int = Field(default=1, ge=1)
    kernel_size: int = Field(default=29, ge=1)
    channels: int = Field(default=128, ge=1)
    n_pointwise_layers: int = Field(default=3, ge=1)
    generator_layers: int = Field(default=3, ge=2)
    hidden_units: int = Field(default=512, ge=1)
    output_mode: Literal["bernoulli", "gaussian", "rgb"] = "bernoulli"
    per_pixel_sigma: bool = False
    fourier_n_freq: int = Field(default=64, ge=1)
    fourier_scale: float = Field(default=1.0, gt=0.0)
    # prior
    theta_prior: Literal["uniform", "normal"] = "uniform"
    theta_prior_std: float = Field(default=math.pi / 4, gt=0.0)
    translation_std_px: float = Field(default=5.0, gt=0.0)
    # training
    seed: int = 0
    batch_size: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=2e-4, gt=0.0)
    lr_decay_factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    lr_patience: int = Field(default=10, ge=1)
    early_stop_patience: int = Field(default=20, ge=1)
    epochs: int = Field(default=500, ge=1)
    temperature_schedule: str = "1.0:0.1:0.5"
    val_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    num_workers: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=1, ge=1)
    device: str = "cpu"
    # paths
    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    mnist_dir: Optional[str] = None
    output_dir: str = Field(default_factory=lambda: ExperimentConfig._default_output_dir())
    # evaluation
    eval_batch_size: int = Field(default=100, ge=1)
    rmse_rotations: int = Field(default=160, ge=1)
    rmse_images: Optional[int] = Field(default=None, ge=1)
    peak_threshold: Optional[float] = Field(default=None, gt=0.0)
    min_separation: Optional[int] = Field(default=None, ge=1)
    log_level: str = "INFO"

    class Config:
        """Pydantic configuration."""
        validate_assignment = True
        extra = Extra.forbid

    @validator("variant")
    def validate_variant(cls, v: str) -> str:
        if v.strip().upper() == "FULL":
            return "FULL"
        return VariantId.parse(v).value

    @validator("temperature_schedule")
    def validate_schedule(cls, v: str) -> str:
        return str(TemperatureSchedule.parse(v))

    @validator("log_level")
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level {v}")
        return level

    @staticmethod
    def _default_output_dir() -> str:
        root = os.environ.get(f"{ENV_PREFIX}OUTPUT_ROOT")
        return str(Path(root) if root else Path.cwd() / "target_vae_runs")

    @classmethod
    def create(cls, settings: Mapping[str, Any]) -> "ExperimentConfig":
        """Validate settings, turning pydantic errors into a named-key ConfigurationError."""
        try:
            return cls(**dict(settings))
        except ValidationError as e:
            first = e.errors()[0]
            key = ".".join(str(part) for part in first["loc"])
            raise ConfigurationError(f"Invalid setting '{key}': {first['msg']}", key=key) from e

    @classmethod
    def env_settings(cls) -> Dict[str, str]:
        """Settings supplied through TARGET_VAE_* environment variables."""
        settings = {}
        for name in cls.__fields__:
            value = os.environ.get(f"{ENV_PREFIX}{name.upper()}")
            if value is not None:
                settings[name] = value
        return settings

    @classmethod
    def from_env(cls) -> "ExperimentConfig":
        """Create configuration from environment variables."""
        return cls.create(cls.env_settings())

    @classmethod
    def resolve(
        cls,
        config_file: Optional[Path] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "ExperimentConfig":
        """Merge defaults < environment < config file < flag overrides."""
        from ..helpers.formats import read_key_values

        settings: Dict[str, Any] = cls.env_settings()
        if config_file is not None:
            file_settings = read_key_values(config_file)
            unknown = sorted(set(file_settings) - set(cls.__fields__))
            if unknown:
                raise ConfigurationError(f"Unknown configuration key '{unknown[0]}'", key=unknown[0])
            settings.update(file_settings)
        settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.create(settings)

    def resolved_variant(self) -> Tuple[VariantId, int]:
        """Variant id and lifting-layer rotation count implied by ``variant`` and ``group``."""
        group_r = GROUP_ROTATIONS[self.group] if self.group else None
        if self.variant == "FULL":
            r = group_r or 4
            if r not in (4, 8, 16):
                raise ConfigurationError(
                    f"FULL variant needs group p4, p8 or p16, got {self.group}", key="group"
                )
            return VariantId.parse(f"FULL_P{r}"), r
        variant = VariantId.parse(self.variant)
        if variant.is_full:
            if group_r is not None and group_r != variant.full_r:
                raise ConfigurationError(
                    f"group {self.group} conflicts with variant {variant.value}", key="group"
                )
            return variant, variant.full_r
        if variant is VariantId.V1_TRANSLATION_ONLY:
            return variant, 1
        return variant, group_r or 4

    def model_config(self) -> ModelConfig:
        variant, r = self.resolved_variant()
        try:
            return ModelConfig(
                image_height=self.image_height,
                image_width=self.image_width,
                in_channels=self.in_channels,
                r=r,
                z_dim=self.z_dim,
                first_kernel_size=self.kernel_size,
                channels=self.channels,
                n_pointwise_layers=self.n_pointwise_layers,
                generator_layers=self.generator_layers,
                hidden_units=self.hidden_units,
                output_mode=self.output_mode,
                per_pixel_sigma=self.per_pixel_sigma,
                fourier=FourierFeatureConfig(
                    n_freq=self.fourier_n_freq, scale=self.fourier_scale, seed=self.seed
                ),
                variant=variant,
            )
        except ValidationError as e:
            first = e.errors()[0]
            key = ".".join(str(part) for part in first["loc"])
            raise ConfigurationError(f"Invalid model setting '{key}': {first['msg']}", key=key) from e

    def prior_config(self) -> PriorConfig:
        return PriorConfig(
            theta_prior=self.theta_prior,
            theta_prior_std=self.theta_prior_std,
            translation_std_px=self.translation_std_px,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay_factor=self.lr_decay_factor,
            lr_patience=self.lr_patience,
            early_stop_patience=self.early_stop_patience,
            max_epochs=self.epochs,
            seed=self.seed,
            temperature=TemperatureSchedule.parse(self.temperature_schedule),
            val_fraction=self.val_fraction,
            num_workers=self.num_workers,
            checkpoint_every=self.checkpoint_every,
            device=self.device,
        )

    def flat(self) -> Dict[str, Any]:
        """Resolved settings as a flat mapping (None values dropped)."""
        return {k: v for k, v in self.dict().items() if v is not None}
