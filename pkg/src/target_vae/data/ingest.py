"""Load image stacks from IDX, stack-container and MRC files, then downsample and normalize."""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import mrcfile
import numpy as np

from ..core.exceptions import ConfigurationError, DegenerateInputError, FormatError, InvalidArgumentError
from ..helpers.formats import read_idx, read_stack

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FORMATS = ("idx", "stack", "mrc")
NORMALIZATIONS = ("minmax", "binary", "none")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def infer_format(path: PathLike) -> str:
    name = Path(path).name.lower()
    if name.endswith(".gz"):
        name = name[:-3]
    if name.endswith((".mrc", ".mrcs")):
        return "mrc"
    if name.endswith(".tvs"):
        return "stack"
    if "idx" in name or name.endswith((".idx", "ubyte")):
        return "idx"
    raise FormatError(f"Cannot infer the format of {path}; pass format explicitly", 0)


def _read_mrc(path: PathLike) -> np.ndarray:
    with mrcfile.open(path, mode="r", permissive=True) as mrc:
        if mrc.data is None:
            raise FormatError(f"{path} has no MRC data block", 1024)
        return np.array(mrc.data)


def _as_batch(array: np.ndarray) -> np.ndarray:
    # [H, W] -> [1, 1, H, W]; [N, H, W] -> [N, 1, H, W]
    if array.ndim == 2:
        return array[None, None]
    if array.ndim == 3:
        return array[:, None]
    if array.ndim == 4:
        return array
    raise FormatError(f"Cannot interpret a rank-{array.ndim} array as an image batch", 0)


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Local mean over ``factor x factor`` blocks; trailing rows/cols that do not fill a block are dropped."""
    if factor < 1:
        raise InvalidArgumentError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return images
    n, c, h, w = images.shape
    hh, ww = h // factor, w // factor
    if hh == 0 or ww == 0:
        raise InvalidArgumentError(f"Cannot downsample {h}x{w} images by {factor}")
    if hh * factor != h or ww * factor != w:
        logger.info(f"Cropping {h}x{w} to {hh * factor}x{ww * factor} before downsampling")
    blocks = images[:, :, :hh * factor, :ww * factor].reshape(n, c, hh, factor, ww, factor)
    return blocks.mean(axis=(3, 5))


def normalize(images: np.ndarray, method: str = "minmax") -> np.ndarray:
    """Scale a dataset into [0, 1]: min-max over the whole dataset, or min-max then a 0.5 threshold."""
    if method not in NORMALIZATIONS:
        raise InvalidArgumentError(f"Unknown normalization {method!r}; choose from {NORMALIZATIONS}")
    images = images.astype(np.float64)
    if method == "none":
        return images
    lo, hi = float(images.min()), float(images.max())
    if hi == lo:
        raise DegenerateInputError(f"Cannot normalize a constant dataset (all values {lo})")
    scaled = (images - lo) / (hi - lo)
    if method == "binary":
        return (scaled >= 0.5).astype(np.float64)
    return scaled


def ingest(
    path: PathLike,
    format: Optional[str] = None,
    downsample_factor: int = 1,
    normalize_method: str = "minmax",
) -> np.ndarray:
    """Read an image file into a float32 ``[N, C, H, W]`` batch."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Input file {path} does not exist", key="dataset")
    format = format or infer_format(path)
    if format == "idx":
        array = read_idx(path)
    elif format == "stack":
        array = read_stack(path)
    elif format == "mrc":
        array = _read_mrc(path)
    else:
        raise InvalidArgumentError(f"Unknown input format {format!r}; choose from {FORMATS}")
    images = downsample(_as_batch(array).astype(np.float64), downsample_factor)
    images = normalize(images, normalize_method).astype(np.float32)
    logger.info(
        f"Ingested {images.shape[0]} images of {images.shape[2]}x{images.shape[3]} from {path} "
        f"({format}, downsample {downsample_factor}, {normalize_method})"
    )
    return images


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise ConfigurationError(f"MNIST file {stem} not found in {directory}", key="mnist_dir")


def load_mnist(directory: PathLike, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(digits [N, 28, 28] uint8, labels [N])`` from the standard MNIST IDX files."""
    if split not in MNIST_FILES:
        raise InvalidArgumentError(f"Unknown MNIST split {split!r}")
    directory = Path(directory)
    image_file, label_file = MNIST_FILES[split]
    digits = read_idx(_find(directory, image_file))
    labels = read_idx(_find(directory, label_file)).astype(np.int64)
    if len(digits) != len(labels):
        raise FormatError(f"{len(digits)} MNIST images but {len(labels)} labels", 0)
    logger.info(f"Loaded {len(digits)} MNIST {split} digits from {directory}")
    return digits, labels
