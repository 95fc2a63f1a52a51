"""ELBO assembly and the optimization loop."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch import Tensor
from torch.utils.data import DataLoader, TensorDataset

from ..config.settings import TrainConfig
from .exceptions import InvalidArgumentError, NumericError, TrainingAbortedError
from .generator import reconstruction_log_prob
from .latent import PriorSpec, kl_breakdown, sample_joint
from .model import TargetVAE, save_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss", "recon", "kl_tr", "kl_theta", "kl_z", "lr", "temperature", "val_loss")


class ElboTerms(NamedTuple):
    """Per-image parts of the negative ELBO: ``loss = -(recon - kl_tr - kl_theta - kl_z)``."""

    loss: Tensor
    recon: Tensor
    kl_tr: Tensor
    kl_theta: Tensor
    kl_z: Tensor

    def summary(self) -> Dict[str, float]:
        return {name: float(value.detach().mean()) for name, value in self._asdict().items()}


def elbo_loss(
    batch: Tensor,
    model: TargetVAE,
    temperature: float,
    rng: Optional[torch.Generator] = None,
    prior: Optional[PriorSpec] = None,
) -> Tuple[Tensor, ElboTerms]:
    """Batch-mean negative ELBO from one posterior sample per image."""
    prior = prior or model.prior
    field_ = model.encode(batch)
    sample = sample_joint(field_, model.grid, prior, temperature, rng)
    dist = model.render(sample.z, sample.theta, sample.t)
    recon = reconstruction_log_prob(dist, batch)
    kl = kl_breakdown(field_, prior)
    per_image = -(recon - kl.total)
    terms = ElboTerms(per_image, recon, kl.kl_tr, kl.kl_theta, kl.kl_z)
    loss = per_image.mean()
    if not torch.isfinite(loss):
        diagnostics = {
            name: float(value.detach().mean()) if torch.isfinite(value).all() else "non-finite"
            for name, value in terms._asdict().items()
        }
        diagnostics["temperature"] = temperature
        raise NumericError("Non-finite ELBO", diagnostics)
    return loss, terms


def make_optimizer(model: TargetVAE, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=tuple(config.adam_betas), eps=config.adam_eps
    )


def make_lr_scheduler(
    optimizer: torch.optim.Optimizer, config: TrainConfig
) -> torch.optim.lr_scheduler.ReduceLROnPlateau:
    """Multiply the learning rate by ``lr_decay_factor`` once ``lr_patience`` epochs in a row
    bring no strict improvement of the monitored loss."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=config.lr_decay_factor,
        patience=config.lr_patience - 1,
        threshold=0.0,
    )


class TrainingRecord(BaseModel):
    """One row of the training log."""

    epoch: int = Field(ge=0)
    step: int = Field(ge=0)
    loss: float
    recon: float
    kl_tr: float
    kl_theta: float
    kl_z: float
    lr: float = Field(gt=0.0)
    temperature: float = Field(gt=0.0)
    val_loss: Optional[float] = None

    def tsv_row(self) -> str:
        values = self.dict()
        return "\t".join("" if values[c] is None else repr(values[c]) for c in LOG_COLUMNS)


@dataclass
class TrainingResult:
    history: List[TrainingRecord] = field(default_factory=list)
    best_loss: float = math.inf
    best_epoch: int = -1
    stopped_early: bool = False
    checkpoint_path: Optional[Path] = None
    best_path: Optional[Path] = None

    @property
    def epoch_losses(self) -> List[float]:
        return [record.loss for record in self.history]


class Trainer:
    """Mini-batch Adam training with plateau-based lr decay and early stopping.

    Runs are deterministic given the seed when ``num_workers`` is 0.
    """

    def __init__(
        self, model: TargetVAE, config: TrainConfig, output_dir: Optional[Union[str, Path]] = None
    ):
        self.model = model
        self.config = config
        self.device = torch.device(config.device)
        self.output_dir = Path(output_dir) if output_dir else None
        self.optimizer = make_optimizer(model, config)
        self.scheduler = make_lr_scheduler(self.optimizer, config)
        self.sample_rng = torch.Generator(device=self.device).manual_seed(config.seed + 1)
        self.step = 0
        if self.output_dir:
            self.output_dir.mkdir(parents=True, exist_ok=True)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @property
    def log_path(self) -> Optional[Path]:
        return self.output_dir / "training_log.tsv" if self.output_dir else None

    def _split(self, images: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        if self.config.val_fraction <= 0:
            return images, None
        n_val = int(round(len(images) * self.config.val_fraction))
        if n_val == 0 or n_val >= len(images):
            raise InvalidArgumentError(
                f"val_fraction {self.config.val_fraction} leaves no data on one side of a "
                f"{len(images)}-image split"
            )
        order = torch.randperm(len(images), generator=torch.Generator().manual_seed(self.config.seed))
        return images[order[n_val:]], images[order[:n_val]]

    def _loader(self, images: Tensor, shuffle: bool) -> DataLoader:
        generator = torch.Generator().manual_seed(self.config.seed) if shuffle else None
        return DataLoader(
            TensorDataset(images),
            batch_size=self.config.batch_size,
            shuffle=shuffle,
            generator=generator,
            num_workers=self.config.num_workers,
        )

    def _run_epoch(self, loader: DataLoader, temperature: float) -> Dict[str, float]:
        self.model.train()
        totals = {"loss": 0.0, "recon": 0.0, "kl_tr": 0.0, "kl_theta": 0.0, "kl_z": 0.0}
        count = 0
        for (batch,) in loader:
            batch = batch.to(self.device)
            loss, terms = elbo_loss(batch, self.model, temperature, self.sample_rng)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step += 1
            n = batch.shape[0]
            for name, value in terms.summary().items():
                totals[name] += value * n
            count += n
            if self.config.log_every_steps and self.step % self.config.log_every_steps == 0:
                logger.debug(f"step {self.step}: loss={loss.item():.4f}")
        return {name: value / count for name, value in totals.items()}

    @torch.no_grad()
    def evaluate(self, images: Tensor, temperature: float) -> float:
        """Mean negative ELBO over ``images`` without updating parameters."""
        self.model.eval()
        rng = torch.Generator(device=self.device).manual_seed(self.config.seed + 2)
        total, count = 0.0, 0
        for (batch,) in self._loader(images, shuffle=False):
            batch = batch.to(self.device)
            _, terms = elbo_loss(batch, self.model, temperature, rng)
            total += float(terms.loss.sum())
            count += batch.shape[0]
        return total / count

    def _checkpoint(self, name: str, epoch: int, loss: float) -> Optional[Path]:
        if not self.output_dir:
            return None
        return save_checkpoint(self.output_dir / name, self.model, {"epoch": epoch, "loss": loss})

    def fit(
        self, images: Union[Tensor, np.ndarray], val_images: Optional[Union[Tensor, np.ndarray]] = None
    ) -> TrainingResult:
        """Train on ``[N, C, H, W]`` images in [0, 1]."""
        images = torch.as_tensor(images, dtype=torch.float32)
        if len(images) == 0:
            raise InvalidArgumentError("Cannot train on an empty dataset")
        if val_images is None:
            images, val_images = self._split(images)
        else:
            val_images = torch.as_tensor(val_images, dtype=torch.float32)
        self.model.to(self.device)
        loader = self._loader(images, shuffle=True)
        result = TrainingResult()
        since_best = 0
        if self.log_path:
            self.log_path.write_text("\t".join(LOG_COLUMNS) + "\n", encoding="utf-8")
        logger.info(
            f"Training {self.model.variant.value} on {len(images)} images"
            + (f" ({len(val_images)} held out)" if val_images is not None else "")
            + f" for up to {self.config.max_epochs} epochs"
        )
        for epoch in range(self.config.max_epochs):
            start = time.time()
            temperature = self.config.temperature.value(epoch, self.config.max_epochs)
            try:
                means = self._run_epoch(loader, temperature)
                val_loss = self.evaluate(val_images, temperature) if val_images is not None else None
            except NumericError as e:
                logger.error(f"Numeric failure in epoch {epoch}: {e} {e.diagnostics}")
                raise TrainingAbortedError(
                    f"Training aborted in epoch {epoch}: {e}", e.diagnostics, result.checkpoint_path
                ) from e
            record = TrainingRecord(
                epoch=epoch, step=self.step, lr=self.lr, temperature=temperature, val_loss=val_loss, **means
            )
            result.history.append(record)
            if self.log_path:
                with self.log_path.open("a", encoding="utf-8") as f:
                    f.write(record.tsv_row() + "\n")
            logger.info(
                f"epoch {epoch}: loss={record.loss:.4f} recon={record.recon:.4f} "
                f"kl_tr={record.kl_tr:.4f} kl_theta={record.kl_theta:.4f} kl_z={record.kl_z:.4f} "
                f"lr={record.lr:.2e} temp={temperature:.3f}"
                + (f" val={val_loss:.4f}" if val_loss is not None else "")
                + f" ({time.time() - start:.1f}s)"
            )

            monitored = val_loss if val_loss is not None else record.loss
            if (epoch + 1) % self.config.checkpoint_every == 0:
                result.checkpoint_path = self._checkpoint("checkpoint.tvae", epoch, monitored)
            if monitored < result.best_loss:
                result.best_loss, result.best_epoch = monitored, epoch
                result.best_path = self._checkpoint("best.tvae", epoch, monitored)
                since_best = 0
            else:
                since_best += 1

            lr_before = self.lr
            self.scheduler.step(monitored)
            if self.lr < lr_before:
                logger.info(f"Learning rate decayed to {self.lr:.2e}")
            if since_best >= self.config.early_stop_patience:
                logger.info(f"Early stopping after {since_best} epochs without improvement")
                result.stopped_early = True
                break

        if self.output_dir:
            result.checkpoint_path = self._checkpoint("checkpoint.tvae", epoch, monitored)
        return result


def fit(
    images: Union[Tensor, np.ndarray],
    model: TargetVAE,
    config: TrainConfig,
    output_dir: Optional[Union[str, Path]] = None,
) -> Tuple[TargetVAE, TrainingResult]:
    """Train ``model`` in place and return it with the training history."""
    result = Trainer(model, config, output_dir).fit(images)
    return model, result
