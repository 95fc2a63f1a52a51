"""Command line interface for target-vae."""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np
import torch
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .. import __version__
from ..config.settings import ExperimentConfig
from ..core.exceptions import ConfigurationError, FormatError, TargetVAEError
from ..core.model import TargetVAE, load_checkpoint
from ..core.training import Trainer
from ..data.ingest import FORMATS, NORMALIZATIONS, ingest as ingest_images, load_mnist
from ..data.synthesis import (
    MultiObjectDataset,
    TransformedDataset,
    is_multi_object,
    synthesize_multi_object,
    synthesize_shapes,
    synthesize_transformed_mnist,
)
from ..evaluation.detection import detect_objects, match_detections, write_detections
from ..evaluation.metrics import evaluate_all
from ..evaluation.reconstruction import export_embeddings, export_traversal, reconstruct_aligned
from ..helpers.formats import read_stack, save_image_grid, write_key_values, write_stack

console = Console()
logger = logging.getLogger(__name__)

DATASET_KINDS = ("mnist-u", "mnist-n", "mnist-multi", "shapes")


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def experiment_options(func: Callable) -> Callable:
    """Options shared by every subcommand."""
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="Flat key = value configuration file"),
        click.option("--seed", type=int, help="Random seed"),
        click.option("--group", type=click.Choice(["p1", "p4", "p8", "p16"]), help="Rotation group"),
        click.option("--z-dim", "z_dim", type=int, help="Semantic latent dimension"),
        click.option("--out", "output_dir", type=click.Path(file_okay=False), help="Output directory"),
        click.option("--device", help="Torch device, e.g. cpu or cuda"),
        click.option("--epochs", type=int, help="Maximum training epochs"),
        click.option("--temperature-schedule", "temperature_schedule", help="start:end:fraction"),
        click.option("--verbose", "-v", is_flag=True, help="Debug logging"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def handle_errors(func: Callable) -> Callable:
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TargetVAEError as e:
            logger.debug("Command failed", exc_info=True)
            console.print(f"❌ [red]Error: {e}[/red]")
            sys.exit(1)
    return wrapper


def resolve_config(config_file: Optional[Path], verbose: bool, **overrides: Any) -> ExperimentConfig:
    config = ExperimentConfig.resolve(config_file, overrides)
    setup_logging("DEBUG" if verbose else config.log_level)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    return config


def snapshot(config: ExperimentConfig) -> Path:
    """Write the resolved configuration next to the run's outputs."""
    path = Path(config.output_dir) / "config.resolved"
    write_key_values(path, config.flat())
    return path


def require(value: Optional[str], key: str) -> str:
    if not value:
        raise ConfigurationError(f"Setting '{key}' is required for this command", key=key)
    return value


def check_written(paths: List[Path]) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise FormatError(f"Expected output not written: {', '.join(missing)}", 0)


def load_images(path: str) -> np.ndarray:
    """Images of a dataset directory or an image file."""
    source = Path(path)
    if source.is_dir():
        if not (source / "images.tvs").exists():
            raise FormatError(f"{source} does not hold a dataset (images.tvs missing)", 0)
        return read_stack(source / "images.tvs")
    return ingest_images(source)


def load_model(config: ExperimentConfig) -> TargetVAE:
    model, metadata = load_checkpoint(require(config.checkpoint, "checkpoint"), config.device)
    extra = metadata.get("extra", {})
    logger.info(f"Model {model.variant.value} (epoch {extra.get('epoch', '?')})")
    return model


def print_table(title: str, rows: Dict[str, Any]) -> None:
    table = Table(title=title, show_header=False)
    table.add_column("Property", style="cyan")
    table.add_column("Value", style="white")
    for key, value in rows.items():
        table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
    console.print(table)


@click.group()
@click.version_option(version=__version__)
def main():
    """target-vae - unsupervised object pose and semantics with an equivariant VAE."""
    pass


@main.command("make-dataset")
@experiment_options
@click.option("--variant", "kind", type=click.Choice(DATASET_KINDS), default="mnist-u", show_default=True,
              help="Dataset to synthesize")
@click.option(
    "--mnist-dir", "mnist_dir", type=click.Path(file_okay=False), help="Directory with MNIST IDX files"
)
@click.option("--split", type=click.Choice(["train", "test"]), default="train", show_default=True)
@click.option("--limit", type=int, help="Use only the first N source digits")
@click.option("--objects", type=int, default=3, show_default=True, help="Objects per multi-object canvas")
@click.option("--n-images", type=int, default=100, show_default=True, help="Multi-object canvases")
@click.option("--canvas", type=int, help="Canvas size (default 50, 150 multi-object, 64 shapes)")
@click.option("--non-overlapping", is_flag=True, help="Keep multi-object bounding boxes disjoint")
@handle_errors
def make_dataset(config_file, verbose, kind, mnist_dir, split, limit, objects, n_images, canvas,
                 non_overlapping, **overrides):
    """Synthesize a benchmark dataset with ground-truth poses."""
    config = resolve_config(config_file, verbose, mnist_dir=mnist_dir, **overrides)
    out = Path(config.output_dir)
    if kind == "shapes":
        size = canvas or 64
        dataset = synthesize_shapes(size=size, max_shift_px=max(0.0, size / 8.0))
        if limit:
            dataset = dataset.subset(np.arange(min(limit, len(dataset))))
    else:
        digits, labels = load_mnist(require(config.mnist_dir, "mnist_dir"), split)
        if limit:
            digits, labels = digits[:limit], labels[:limit]
        rotation = "normal" if kind == "mnist-n" else "uniform"
        size = canvas or (150 if kind == "mnist-multi" else 50)
        source = synthesize_transformed_mnist(
            digits,
            labels,
            rotation=rotation,
            rotation_std=config.theta_prior_std,
            translation_std_px=config.translation_std_px,
            canvas=(50, 50) if kind == "mnist-multi" else (size, size),
            seed=config.seed,
        )
        if kind == "mnist-multi":
            dataset = synthesize_multi_object(
                source, n_images, objects, (size, size), config.seed, non_overlapping
            )
        else:
            dataset = source
    dataset.save(out)
    check_written([out / "images.tvs", out / "manifest.txt", snapshot(config)])
    console.print(f"✅ [green]Wrote {len(dataset)} {kind} images to {out}[/green]")


@main.command()
@experiment_options
@click.option("--variant", help="Model variant: FULL, FULL_P4, FULL_P8, FULL_P16, V1, V2 or V3")
@click.option("--dataset", type=click.Path(exists=True), help="Dataset directory or image file")
@handle_errors
def train(config_file, verbose, variant, dataset, **overrides):
    """Train a model and write checkpoints plus the training log."""
    config = resolve_config(config_file, verbose, variant=variant, dataset=dataset, **overrides)
    images = load_images(require(config.dataset, "dataset"))
    config.in_channels = images.shape[1]
    config.image_height, config.image_width = images.shape[2], images.shape[3]
    snapshot(config)
    torch.manual_seed(config.seed)
    model = TargetVAE(config.model_config(), config.prior_config())
    trainer = Trainer(model, config.train_config(), config.output_dir)
    result = trainer.fit(images)
    out = Path(config.output_dir)
    check_written([out / "checkpoint.tvae", out / "training_log.tsv"])
    print_table(
        "Training",
        {
            "Variant": model.variant.value,
            "Epochs": len(result.history),
            "Best loss": result.best_loss,
            "Best epoch": result.best_epoch,
            "Stopped early": result.stopped_early,
            "Checkpoint": result.checkpoint_path,
        },
    )


@main.command("eval")
@experiment_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option(
    "--dataset", type=click.Path(exists=True, file_okay=False), help="Dataset directory with ground truth"
)
@handle_errors
def evaluate(config_file, verbose, checkpoint, dataset, **overrides):
    """Pose correlations, clustering accuracy and rotation RMSE."""
    config = resolve_config(config_file, verbose, checkpoint=checkpoint, dataset=dataset, **overrides)
    snapshot(config)
    model = load_model(config)
    data = TransformedDataset.load(require(config.dataset, "dataset"))
    report = evaluate_all(
        model,
        data,
        batch_size=config.eval_batch_size,
        n_rotations=config.rmse_rotations,
        rmse_images=config.rmse_images,
        seed=config.seed,
        manifest={"checkpoint": config.checkpoint, "dataset": config.dataset, "variant": model.variant.value},
    )
    text_path, tsv_path = report.write(config.output_dir)
    check_written([text_path, tsv_path])
    rows = {k: v for k, v in report.flat().items() if not k.startswith("manifest_")}
    print_table("Metrics", rows)


@main.command()
@experiment_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option("--dataset", type=click.Path(exists=True), help="Dataset directory or image file")
@click.option("--limit", type=int, help="Process only the first N images")
@handle_errors
def detect(config_file, verbose, checkpoint, dataset, limit, **overrides):
    """Detect multiple objects per image and render each one."""
    config = resolve_config(config_file, verbose, checkpoint=checkpoint, dataset=dataset, **overrides)
    snapshot(config)
    model = load_model(config)
    source = Path(require(config.dataset, "dataset"))
    truth = MultiObjectDataset.load(source) if source.is_dir() and is_multi_object(source) else None
    images = load_images(str(source))
    if limit:
        images = images[:limit]
    out = Path(config.output_dir)
    crops = out / "detections"
    crops.mkdir(parents=True, exist_ok=True)
    found = []
    for i, image in enumerate(images):
        detections = detect_objects(model, image, config.peak_threshold, config.min_separation)
        found.append(detections)
        panels = [image] + [d.reconstruction for d in detections]
        save_image_grid(crops / f"image_{i:04d}.png", np.stack(panels), columns=len(panels))
    table_path = write_detections(out / "detections.tsv", found)
    check_written([table_path])
    summary: Dict[str, Any] = {"Images": len(images), "Detections": sum(len(d) for d in found)}
    if truth is not None:
        tp = fp = total = 0
        errors: List[float] = []
        for i, detections in enumerate(found):
            hits, misses, errs = match_detections(detections, truth.object_t[i])
            tp, fp, total = tp + hits, fp + misses, total + truth.objects_per_image
            errors.extend(errs)
        summary["Recall"] = tp / total if total else float("nan")
        summary["False positives per image"] = fp / len(found) if found else float("nan")
        summary["Mean localization error (px)"] = float(np.mean(errors)) if errors else float("nan")
    print_table("Detection", summary)


@main.command()
@experiment_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option("--dataset", type=click.Path(exists=True), help="Dataset directory or image file")
@click.option("--limit", type=int, default=64, show_default=True, help="Number of images")
@handle_errors
def reconstruct(config_file, verbose, checkpoint, dataset, limit, **overrides):
    """Render inputs in the canonical pose (rotation 0, translation 0)."""
    config = resolve_config(config_file, verbose, checkpoint=checkpoint, dataset=dataset, **overrides)
    snapshot(config)
    model = load_model(config)
    images = load_images(require(config.dataset, "dataset"))[:limit]
    aligned = reconstruct_aligned(model, images, config.eval_batch_size)
    out = Path(config.output_dir)
    paths = [save_image_grid(out / "inputs.png", images), save_image_grid(out / "aligned.png", aligned)]
    check_written(paths)
    console.print(f"✅ [green]Wrote {len(aligned)} aligned reconstructions to {paths[1]}[/green]")


@main.command()
@experiment_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option("--dataset", type=click.Path(exists=True), help="Dataset directory or image file")
@handle_errors
def embed(config_file, verbose, checkpoint, dataset, **overrides):
    """Export MAP semantic vectors and poses as stack files."""
    config = resolve_config(config_file, verbose, checkpoint=checkpoint, dataset=dataset, **overrides)
    snapshot(config)
    model = load_model(config)
    images = load_images(require(config.dataset, "dataset"))
    path = export_embeddings(model, images, config.output_dir, config.eval_batch_size)
    check_written([path])
    console.print(f"✅ [green]Wrote embeddings of {len(images)} images to {path}[/green]")


@main.command()
@experiment_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option("--steps", type=int, default=8, show_default=True, help="Values per latent dimension")
@click.option("--z-min", type=float, default=-2.0, show_default=True)
@click.option("--z-max", type=float, default=2.0, show_default=True)
@handle_errors
def traverse(config_file, verbose, checkpoint, steps, z_min, z_max, **overrides):
    """Render a sweep over the semantic latent space in the canonical pose."""
    config = resolve_config(config_file, verbose, checkpoint=checkpoint, **overrides)
    snapshot(config)
    model = load_model(config)
    path = export_traversal(model, Path(config.output_dir) / "traversal.png", (z_min, z_max), steps)
    check_written([path])
    console.print(f"✅ [green]Wrote latent traversal to {path}[/green]")


@main.command()
@experiment_options
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(FORMATS), help="Input format (inferred from the name)")
@click.option("--downsample", type=int, default=1, show_default=True, help="Block-mean downsampling factor")
@click.option("--normalize", type=click.Choice(NORMALIZATIONS), default="minmax", show_default=True)
@handle_errors
def ingest(config_file, verbose, source, fmt, downsample, normalize, **overrides):
    """Convert an IDX, MRC or stack file into a normalized stack file."""
    config = resolve_config(config_file, verbose, **overrides)
    snapshot(config)
    images = ingest_images(source, fmt, downsample, normalize)
    path = Path(config.output_dir) / "images.tvs"
    write_stack(path, images)
    check_written([path])
    console.print(
        f"✅ [green]Wrote {images.shape[0]} images of {images.shape[2]}x{images.shape[3]} to {path}[/green]"
    )


if __name__ == "__main__":
    main()
