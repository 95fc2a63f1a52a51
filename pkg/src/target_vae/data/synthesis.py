"""Synthetic benchmark datasets with known pose.

* transformed MNIST: digits rotated (normal or uniform angles) and shifted on a larger canvas
* multi-object canvases composed from transformed digits
* procedurally rendered shapes on the dSprites factor grid

Every image draws from its own random stream ``default_rng([seed, index])`` so output does
not depend on how images are distributed over workers.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import affine_transform

from ..core.exceptions import (
    DatasetError,
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    ShapeError,
)
from ..helpers.formats import read_key_values, read_stack, write_key_values, write_stack

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ROTATION_DISTRIBUTIONS = ("normal", "uniform")
SHAPES = ("square", "ellipse", "heart")
MAX_RESAMPLES = 100
MAX_PLACEMENT_ATTEMPTS = 100
GROUND_TRUTH_FILES = ("theta.tvs", "translation.tvs", "labels.tvs")


# Rotation and pasting


def _snap(value: float) -> float:
    return 0.0 if abs(value) < 1e-12 else value


def _quarter_turns(theta: float) -> Optional[int]:
    k = theta / (math.pi / 2)
    nearest = round(k)
    return int(nearest) % 4 if abs(k - nearest) < 1e-9 else None


def rotate_array(image: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a 2-D array about its centre: ``out(x) = in(R(theta) x)``, bilinear, zero fill.

    Multiples of pi/2 are exact ``np.rot90`` permutations.
    """
    k = _quarter_turns(theta)
    if k is not None and image.shape[0] == image.shape[1]:
        return np.rot90(image, k).copy()
    c, s = math.cos(theta), math.sin(theta)
    # (row, col) form of the (x, y) rotation matrix
    matrix = np.array([[c, s], [-s, c]])
    centre = (np.asarray(image.shape, dtype=np.float64) - 1.0) / 2.0
    offset = centre - matrix @ centre
    return affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def pad_to(image: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad a square image symmetrically to ``size`` (the size difference must be even)."""
    extra = size - image.shape[0]
    if extra < 0 or extra % 2:
        raise ShapeError(f"Cannot pad {image.shape[0]} pixels symmetrically to {size}")
    return np.pad(image, extra // 2)


def paste(canvas: np.ndarray, patch: np.ndarray, top: int, left: int) -> bool:
    """Max-composite ``patch`` into ``canvas`` at ``(top, left)``, clipping at the borders.

    Returns False when no part of the patch lands on the canvas.
    """
    h, w = patch.shape
    ch, cw = canvas.shape
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + h, ch), min(left + w, cw)
    if r0 >= r1 or c0 >= c1:
        return False
    region = patch[r0 - top:r1 - top, c0 - left:c1 - left]
    canvas[r0:r1, c0:c1] = np.maximum(canvas[r0:r1, c0:c1], region)
    return True


def transform_digit(
    digit: np.ndarray, theta: float, t_px: Sequence[int], canvas: Tuple[int, int] = (50, 50)
) -> np.ndarray:
    """Rotate a digit about its centre, then place it at the canvas centre shifted by ``t_px``.

    ``t_px`` is ``(x, y)`` in whole pixels. The digit is first zero-padded to the smallest
    square that holds all its rotations so corners are never cut.
    """
    digit = np.asarray(digit, dtype=np.float64)
    size = digit.shape[0]
    padded_size = int(math.ceil(size * math.sqrt(2.0)))
    padded_size += (padded_size - size) % 2
    rotated = rotate_array(pad_to(digit, padded_size), theta)
    out = np.zeros(canvas, dtype=np.float64)
    top = (canvas[0] - padded_size) // 2 + int(t_px[1])
    left = (canvas[1] - padded_size) // 2 + int(t_px[0])
    paste(out, rotated, top, left)
    return np.clip(out, 0.0, 1.0)


# Datasets


def _as_unit(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0
    return images.astype(np.float64)


@dataclass
class TransformedDataset:
    """Images with ground-truth pose.

    ``gt_t`` is ``(x, y)`` in pixels relative to the canvas centre, rounded to the values
    actually used when pasting; ``gt_t_raw`` keeps the sampled sub-pixel values.
    """

    images: np.ndarray
    gt_theta: np.ndarray
    gt_t: np.ndarray
    labels: np.ndarray
    manifest: Dict[str, Any] = field(default_factory=dict)
    gt_t_raw: Optional[np.ndarray] = None
    gt_scale: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.images)
        if self.images.ndim != 4:
            raise ShapeError(f"Expected [N, C, H, W] images, got {self.images.shape}")
        if len(self.gt_theta) != n or len(self.gt_t) != n or len(self.labels) != n:
            raise ShapeError("Ground-truth arrays must have one entry per image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.images.shape[-2], self.images.shape[-1]

    def subset(self, indices) -> "TransformedDataset":
        indices = np.asarray(indices)
        return TransformedDataset(
            images=self.images[indices],
            gt_theta=self.gt_theta[indices],
            gt_t=self.gt_t[indices],
            labels=self.labels[indices],
            manifest=dict(self.manifest),
            gt_t_raw=None if self.gt_t_raw is None else self.gt_t_raw[indices],
            gt_scale=None if self.gt_scale is None else self.gt_scale[indices],
        )

    def save(self, directory: PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_stack(directory / "images.tvs", self.images.astype(np.float32))
        write_stack(directory / "theta.tvs", self.gt_theta.astype(np.float64))
        write_stack(directory / "translation.tvs", self.gt_t.astype(np.float64))
        write_stack(directory / "labels.tvs", self.labels.astype(np.int64))
        if self.gt_t_raw is not None:
            write_stack(directory / "translation_raw.tvs", self.gt_t_raw.astype(np.float64))
        if self.gt_scale is not None:
            write_stack(directory / "scale.tvs", self.gt_scale.astype(np.float64))
        write_key_values(directory / "manifest.txt", self.manifest)
        logger.info(f"Saved {len(self)} images to {directory}")
        return directory

    @classmethod
    def load(cls, directory: PathLike) -> "TransformedDataset":
        directory = Path(directory)
        if not (directory / "images.tvs").exists():
            raise FormatError(f"{directory} does not hold a dataset (images.tvs missing)", 0)
        if is_multi_object(directory):
            raise DatasetError(f"{directory} holds multi-object canvases without per-image ground truth")
        missing = [name for name in GROUND_TRUTH_FILES if not (directory / name).exists()]
        if missing:
            raise DatasetError(f"{directory} lacks ground truth: {', '.join(missing)}")
        optional = {
            name: read_stack(directory / f"{name}.tvs") if (directory / f"{name}.tvs").exists() else None
            for name in ("translation_raw", "scale")
        }
        manifest_path = directory / "manifest.txt"
        manifest = read_key_values(manifest_path) if manifest_path.exists() else {}
        return cls(
            images=read_stack(directory / "images.tvs"),
            gt_theta=read_stack(directory / "theta.tvs"),
            gt_t=read_stack(directory / "translation.tvs"),
            labels=read_stack(directory / "labels.tvs"),
            manifest=manifest,
            gt_t_raw=optional["translation_raw"],
            gt_scale=optional["scale"],
        )


@dataclass
class MultiObjectDataset:
    """Canvases holding several objects; per-object pose arrays are ``[N, K]`` / ``[N, K, 2]``."""

    images: np.ndarray
    object_theta: np.ndarray
    object_t: np.ndarray
    object_labels: np.ndarray
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def objects_per_image(self) -> int:
        return self.object_theta.shape[1]

    def ground_truth(self, index: int) -> List[Dict[str, Any]]:
        return [
            {
                "theta": float(self.object_theta[index, k]),
                "t_px": tuple(float(v) for v in self.object_t[index, k]),
                "label": int(self.object_labels[index, k]),
            }
            for k in range(self.objects_per_image)
        ]

    def save(self, directory: PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_stack(directory / "images.tvs", self.images.astype(np.float32))
        write_stack(directory / "object_theta.tvs", self.object_theta.astype(np.float64))
        write_stack(directory / "object_translation.tvs", self.object_t.astype(np.float64))
        write_stack(directory / "object_labels.tvs", self.object_labels.astype(np.int64))
        write_key_values(directory / "manifest.txt", self.manifest)
        logger.info(f"Saved {len(self)} multi-object canvases to {directory}")
        return directory

    @classmethod
    def load(cls, directory: PathLike) -> "MultiObjectDataset":
        directory = Path(directory)
        if not (directory / "object_theta.tvs").exists():
            raise FormatError(f"{directory} does not hold a multi-object dataset", 0)
        return cls(
            images=read_stack(directory / "images.tvs"),
            object_theta=read_stack(directory / "object_theta.tvs"),
            object_t=read_stack(directory / "object_translation.tvs"),
            object_labels=read_stack(directory / "object_labels.tvs"),
            manifest=read_key_values(directory / "manifest.txt"),
        )


def is_multi_object(directory: PathLike) -> bool:
    return (Path(directory) / "object_theta.tvs").exists()


# Transformed MNIST


def _sample_theta(rng: np.random.Generator, rotation: str, rotation_std: float) -> float:
    if rotation == "normal":
        return float(rng.normal(0.0, rotation_std))
    return float(rng.uniform(0.0, 2.0 * math.pi))


def synthesize_transformed_mnist(
    digits: np.ndarray,
    labels: np.ndarray,
    rotation: str = "uniform",
    rotation_std: float = math.pi / 4,
    translation_std_px: float = 5.0,
    canvas: Tuple[int, int] = (50, 50),
    seed: int = 0,
) -> TransformedDataset:
    """Rotate and shift every source digit onto a canvas.

    ``rotation`` is ``normal`` (angles from N(0, rotation_std^2)) or ``uniform`` (U(0, 2 pi)).
    Translations are drawn from N(0, translation_std_px^2) per axis and rounded to whole
    pixels; a draw that moves the digit fully off the canvas is redrawn.
    """
    if rotation not in ROTATION_DISTRIBUTIONS:
        raise InvalidArgumentError(f"Unknown rotation distribution {rotation!r}")
    digits = _as_unit(digits)
    labels = np.asarray(labels, dtype=np.int64)
    if digits.ndim != 3 or digits.shape[1] != digits.shape[2]:
        raise ShapeError(f"Expected [N, S, S] source digits, got {digits.shape}")
    if len(labels) != len(digits):
        raise ShapeError(f"{len(labels)} labels for {len(digits)} digits")
    n = len(digits)
    images = np.zeros((n, 1) + tuple(canvas), dtype=np.float32)
    gt_theta = np.zeros(n)
    gt_t = np.zeros((n, 2))
    gt_t_raw = np.zeros((n, 2))
    resamples = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        theta = _sample_theta(rng, rotation, rotation_std)
        for attempt in range(MAX_RESAMPLES):
            t_raw = rng.normal(0.0, translation_std_px, size=2)
            t_px = np.round(t_raw)
            image = transform_digit(digits[i], theta, t_px, canvas)
            if image.any() or not digits[i].any():
                break
            resamples += 1
            logger.debug(f"Image {i}: translation {t_px} moved the digit off the canvas, resampling")
        else:
            raise DegenerateInputError(f"Could not place digit {i} on a {canvas} canvas")
        images[i, 0] = image
        gt_theta[i], gt_t[i], gt_t_raw[i] = theta, t_px, t_raw
    logger.info(
        f"Synthesized {n} transformed digits ({rotation} rotations) on {canvas[0]}x{canvas[1]}; "
        f"{resamples} off-canvas translations resampled"
    )
    manifest = {
        "kind": f"mnist-{'n' if rotation == 'normal' else 'u'}",
        "rotation": rotation,
        "rotation_std": rotation_std,
        "translation_std_px": translation_std_px,
        "canvas_height": canvas[0],
        "canvas_width": canvas[1],
        "seed": seed,
        "count": n,
        "resamples": resamples,
    }
    return TransformedDataset(images, gt_theta, gt_t, labels, manifest, gt_t_raw)


# Multi-object canvases


def _support_box(image: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    rows = np.flatnonzero(image.any(axis=1))
    cols = np.flatnonzero(image.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def synthesize_multi_object(
    source: TransformedDataset,
    n_images: int,
    count: int = 3,
    canvas: Tuple[int, int] = (150, 150),
    seed: int = 0,
    non_overlapping: bool = False,
) -> MultiObjectDataset:
    """Paste ``count`` randomly chosen source images at random non-clipping offsets.

    With ``non_overlapping`` the bounding boxes of the objects' nonzero support may not
    intersect; each object gets up to 100 placement attempts, after which overlap is accepted.
    """
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    h, w = source.image_size
    if h > canvas[0] or w > canvas[1]:
        raise ShapeError(f"Source images {h}x{w} do not fit a {canvas[0]}x{canvas[1]} canvas")
    src_cy, src_cx = (h - 1) / 2.0, (w - 1) / 2.0
    cy, cx = (canvas[0] - 1) / 2.0, (canvas[1] - 1) / 2.0
    images = np.zeros((n_images, 1) + tuple(canvas), dtype=np.float32)
    object_theta = np.zeros((n_images, count))
    object_t = np.zeros((n_images, count, 2))
    object_labels = np.zeros((n_images, count), dtype=np.int64)
    overlaps = 0
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        chosen = rng.choice(len(source), size=count, replace=len(source) < count)
        boxes = []
        for k, index in enumerate(chosen):
            patch = source.images[index, 0]
            box = _support_box(patch)
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                top = int(rng.integers(0, canvas[0] - h + 1))
                left = int(rng.integers(0, canvas[1] - w + 1))
                placed = None if box is None else (box[0] + top, box[1] + left, box[2] + top, box[3] + left)
                if not non_overlapping or placed is None or not any(_boxes_overlap(placed, b) for b in boxes):
                    break
            else:
                overlaps += 1
            if placed is not None:
                boxes.append(placed)
            paste(images[i, 0], patch, top, left)
            object_theta[i, k] = source.gt_theta[index]
            object_t[i, k] = (
                left + src_cx + source.gt_t[index, 0] - cx,
                top + src_cy + source.gt_t[index, 1] - cy,
            )
            object_labels[i, k] = source.labels[index]
    if overlaps:
        logger.warning(f"{overlaps} objects could not be placed without overlap")
    logger.info(f"Synthesized {n_images} canvases of {canvas[0]}x{canvas[1]} with {count} objects each")
    manifest = {
        "kind": "mnist-multi",
        "count": count,
        "n_images": n_images,
        "canvas_height": canvas[0],
        "canvas_width": canvas[1],
        "seed": seed,
        "non_overlapping": non_overlapping,
        "source": source.manifest.get("kind", "unknown"),
    }
    return MultiObjectDataset(images, object_theta, object_t, object_labels, manifest)


# Shapes


def render_shape(
    shape: str,
    theta: float = 0.0,
    scale: float = 1.0,
    t_px: Sequence[float] = (0.0, 0.0),
    size: int = 64,
) -> np.ndarray:
    """Binary mask of a shape posed at ``(theta, t_px)``, sampled at pixel centres.

    At scale 1 the square spans half the canvas width. The ellipse has semi-axes 1 and 0.5
    in the same units. The heart is the implicit curve ``(x^2 + y^2 - 1)^3 - x^2 y^3 <= 0``
    with y pointing up, shrunk by 1/1.2 and lifted by 0.1 so it is centred.
    """
    if shape not in SHAPES:
        raise InvalidArgumentError(f"Unknown shape {shape!r}; choose from {SHAPES}")
    if scale <= 0:
        raise InvalidArgumentError(f"Shape scale must be positive, got {scale}")
    centre = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    x = cols - centre - t_px[0]
    y = rows - centre - t_px[1]
    c, s = _snap(math.cos(theta)), _snap(math.sin(theta))
    half = size / 4.0 * scale
    u = (c * x - s * y) / half
    v = (s * x + c * y) / half
    if shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= 1.0
    elif shape == "ellipse":
        mask = u ** 2 + (v / 0.5) ** 2 <= 1.0
    else:
        hx, hy = 1.2 * u, -1.2 * v + 0.1
        mask = (hx ** 2 + hy ** 2 - 1.0) ** 3 - hx ** 2 * hy ** 3 <= 0.0
    return mask.astype(np.float32)


def shape_positions(n_positions: int, max_shift_px: float) -> np.ndarray:
    return np.round(np.linspace(-max_shift_px, max_shift_px, n_positions))


def synthesize_shapes(
    shapes: Sequence[str] = SHAPES,
    n_rotations: int = 40,
    n_scales: int = 6,
    n_positions: int = 8,
    max_shift_px: float = 8.0,
    size: int = 64,
) -> TransformedDataset:
    """Render every combination of shape, rotation, scale and (x, y) position.

    Rotations are ``linspace(0, 2 pi, n_rotations)`` and scales ``linspace(0.5, 1, n_scales)``;
    positions form an ``n_positions x n_positions`` grid of whole-pixel shifts.
    """
    rotations = np.linspace(0.0, 2.0 * math.pi, n_rotations)
    scales = np.linspace(0.5, 1.0, n_scales)
    positions = shape_positions(n_positions, max_shift_px)
    images, thetas, translations, labels, scale_values = [], [], [], [], []
    for label, shape in enumerate(shapes):
        for theta in rotations:
            for scale in scales:
                for ty in positions:
                    for tx in positions:
                        images.append(render_shape(shape, theta, scale, (tx, ty), size))
                        thetas.append(theta)
                        translations.append((tx, ty))
                        labels.append(label)
                        scale_values.append(scale)
    logger.info(f"Rendered {len(images)} shape images ({', '.join(shapes)})")
    manifest = {
        "kind": "shapes",
        "shapes": list(shapes),
        "n_rotations": n_rotations,
        "n_scales": n_scales,
        "n_positions": n_positions,
        "max_shift_px": max_shift_px,
        "canvas_height": size,
        "canvas_width": size,
    }
    return TransformedDataset(
        images=np.stack(images)[:, None],
        gt_theta=np.asarray(thetas),
        gt_t=np.asarray(translations, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        manifest=manifest,
        gt_scale=np.asarray(scale_values),
    )
