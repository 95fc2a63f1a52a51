"""Pose correlation, clustering accuracy and rotation RMSE of a trained model."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, validator
from scipy.optimize import linear_sum_assignment
from scipy.stats import pearsonr
from sklearn.cluster import AgglomerativeClustering
from sklearn.metrics.cluster import contingency_matrix

from ..core.exceptions import DegenerateInputError, InvalidArgumentError, ShapeError
from ..core.geometry import circular_correlation, rotate_images, wrap_angle
from ..core.latent import map_estimate
from ..core.model import TargetVAE
from ..data.synthesis import TransformedDataset
from ..helpers.formats import write_key_values

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
HEADLINE_METRICS = (
    "translation_pearson_x",
    "translation_pearson_y",
    "rotation_circular_corr",
    "clustering_accuracy",
)


class MetricsReport(BaseModel):
    """Evaluation results of one model on one dataset.

    Metrics that could not be computed are ``None`` and their reason is kept in ``undefined``.
    """

    translation_pearson_x: Optional[float] = Field(default=None, ge=-1.0, le=1.0)
    translation_pearson_y: Optional[float] = Field(default=None, ge=-1.0, le=1.0)
    rotation_circular_corr: Optional[float] = Field(default=None, ge=-1.0, le=1.0)
    rotation_circular_corr_per_class: Dict[int, float] = Field(default_factory=dict)
    clustering_accuracy: Optional[float] = Field(default=None, ge=0.0, le=100.0)
    rotation_rmse_per_class: Dict[int, float] = Field(default_factory=dict)
    undefined: Dict[str, str] = Field(default_factory=dict)
    manifest: Dict[str, str] = Field(default_factory=dict)

    @validator("rotation_circular_corr_per_class")
    def correlations_in_range(cls, v: Dict[int, float]) -> Dict[int, float]:
        for label, value in v.items():
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"class {label} correlation {value} outside [-1, 1]")
        return v

    @validator("rotation_rmse_per_class")
    def rmse_non_negative(cls, v: Dict[int, float]) -> Dict[int, float]:
        if any(value < 0 for value in v.values()):
            raise ValueError("RMSE values must be >= 0")
        return v

    @property
    def translation_pearson(self) -> Tuple[Optional[float], Optional[float]]:
        return self.translation_pearson_x, self.translation_pearson_y

    @property
    def rotation_rmse_mean(self) -> Optional[float]:
        if not self.rotation_rmse_per_class:
            return None
        return float(np.mean(list(self.rotation_rmse_per_class.values())))

    def flat(self) -> Dict[str, object]:
        values: Dict[str, object] = {}
        for key in HEADLINE_METRICS:
            value = getattr(self, key)
            values[key] = "undefined" if value is None else value
        for label, value in sorted(self.rotation_circular_corr_per_class.items()):
            values[f"rotation_circular_corr_class_{label}"] = value
        for label, value in sorted(self.rotation_rmse_per_class.items()):
            values[f"rotation_rmse_deg_class_{label}"] = value
        if self.rotation_rmse_mean is not None:
            values["rotation_rmse_deg_mean"] = self.rotation_rmse_mean
        for key, reason in sorted(self.undefined.items()):
            values[f"undefined_{key}"] = reason
        for key, value in sorted(self.manifest.items()):
            values[f"manifest_{key}"] = value
        return values

    def write(self, directory: PathLike) -> Tuple[Path, Path]:
        """Write ``metrics.txt`` (key-value) and ``metrics.tsv`` (metric, value rows)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        values = self.flat()
        text_path = directory / "metrics.txt"
        write_key_values(text_path, values)
        tsv_path = directory / "metrics.tsv"
        lines = ["metric\tvalue"] + [f"{key}\t{value}" for key, value in values.items()]
        tsv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info(f"Wrote metrics to {text_path} and {tsv_path}")
        return text_path, tsv_path


# Inference


@dataclass
class PosePredictions:
    """MAP pose and semantic estimates; ``t_px`` is ``(x, y)`` relative to the image centre."""

    t_px: np.ndarray
    theta: np.ndarray
    z: np.ndarray
    r_index: np.ndarray


def _batches(images: Union[np.ndarray, torch.Tensor], batch_size: int):
    images = torch.as_tensor(images, dtype=torch.float32)
    for start in range(0, len(images), batch_size):
        yield images[start:start + batch_size]


@torch.no_grad()
def predict_poses(
    model: TargetVAE, images: Union[np.ndarray, torch.Tensor], batch_size: int = 100
) -> PosePredictions:
    model.eval()
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    grid, prior = model.grid, model.prior
    h, w = grid.height, grid.width
    ts, thetas, zs, rs = [], [], [], []
    for batch in _batches(images, batch_size):
        estimate = map_estimate(model.encode(batch.to(device=device, dtype=dtype)), grid, prior)
        ts.append(estimate.t.cpu().double().numpy())
        thetas.append(estimate.theta.cpu().double().numpy())
        zs.append(estimate.z.cpu().double().numpy())
        rs.append(estimate.r_index.cpu().numpy())
    t = np.concatenate(ts) if ts else np.zeros((0, 2))
    t_px = t * np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return PosePredictions(
        t_px=t_px,
        theta=np.concatenate(thetas) if thetas else np.zeros(0),
        z=np.concatenate(zs) if zs else np.zeros((0, model.config.z_dim)),
        r_index=np.concatenate(rs) if rs else np.zeros(0, dtype=np.int64),
    )


# Pose


class PoseMetrics(NamedTuple):
    r_x: Optional[float]
    r_y: Optional[float]
    circular: Optional[float]
    per_class: Dict[int, float]
    undefined: Dict[str, str]


def _pearson(pred: np.ndarray, truth: np.ndarray) -> Tuple[Optional[float], Optional[str]]:
    if np.ptp(pred) == 0 or np.ptp(truth) == 0:
        return None, "constant predictions or ground truth"
    return float(np.clip(pearsonr(pred, truth)[0], -1.0, 1.0)), None


def _circular(pred: np.ndarray, truth: np.ndarray) -> Tuple[Optional[float], Optional[str]]:
    try:
        return circular_correlation(pred, truth), None
    except DegenerateInputError as e:
        return None, str(e)


def pose_correlations(
    pred_t_px: np.ndarray,
    pred_theta: np.ndarray,
    gt_t_px: np.ndarray,
    gt_theta: np.ndarray,
    labels: Optional[np.ndarray] = None,
) -> PoseMetrics:
    """Pearson correlation per translation axis and circular correlation of the angles."""
    pred_t_px, gt_t_px = np.asarray(pred_t_px, np.float64), np.asarray(gt_t_px, np.float64)
    pred_theta, gt_theta = np.asarray(pred_theta, np.float64), np.asarray(gt_theta, np.float64)
    if pred_t_px.shape != gt_t_px.shape or pred_theta.shape != gt_theta.shape:
        raise ShapeError("Predictions and ground truth must have matching shapes")
    undefined: Dict[str, str] = {}
    r_x, reason = _pearson(pred_t_px[:, 0], gt_t_px[:, 0])
    if reason:
        undefined["translation_pearson_x"] = reason
    r_y, reason = _pearson(pred_t_px[:, 1], gt_t_px[:, 1])
    if reason:
        undefined["translation_pearson_y"] = reason
    circular, reason = _circular(pred_theta, gt_theta)
    if reason:
        undefined["rotation_circular_corr"] = reason
    per_class: Dict[int, float] = {}
    if labels is not None:
        labels = np.asarray(labels)
        for label in np.unique(labels):
            mask = labels == label
            value, reason = _circular(pred_theta[mask], gt_theta[mask])
            if value is None:
                undefined[f"rotation_circular_corr_class_{int(label)}"] = reason
            else:
                per_class[int(label)] = value
    for key, reason in undefined.items():
        logger.warning(f"{key} undefined: {reason}")
    return PoseMetrics(r_x, r_y, circular, per_class, undefined)


def eval_pose(model: TargetVAE, dataset: TransformedDataset, batch_size: int = 100) -> PoseMetrics:
    """Correlate MAP translations (in pixels) and angles with the dataset's ground truth."""
    predictions = predict_poses(model, dataset.images, batch_size)
    return pose_correlations(
        predictions.t_px, predictions.theta, dataset.gt_t, dataset.gt_theta, dataset.labels
    )


# Clustering


def cluster_accuracy(labels: Sequence[int], assignments: Sequence[int]) -> float:
    """Percentage of items whose cluster maps to their label under the best one-to-one matching."""
    labels = np.asarray(labels)
    assignments = np.asarray(assignments)
    if labels.size == 0 or labels.shape != assignments.shape:
        raise ShapeError(
            f"Need equally sized nonempty label arrays, got {labels.shape} and {assignments.shape}"
        )
    counts = contingency_matrix(labels, assignments)
    rows, cols = linear_sum_assignment(-counts)
    return 100.0 * counts[rows, cols].sum() / labels.size


def cluster_embeddings(z: np.ndarray, k: int) -> np.ndarray:
    """Ward agglomerative clustering of ``[N, d]`` vectors into ``k`` clusters."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) < k:
        raise InvalidArgumentError(f"Cannot form {k} clusters from {len(z)} items")
    return AgglomerativeClustering(n_clusters=k, linkage="ward").fit_predict(z)


def eval_clustering(
    model: TargetVAE, dataset: TransformedDataset, k: Optional[int] = None, batch_size: int = 100
) -> float:
    """Cluster the MAP semantic vectors and score them against the labels (percent)."""
    k = k or len(np.unique(dataset.labels))
    if len(dataset) < k:
        raise InvalidArgumentError(f"Cannot form {k} clusters from {len(dataset)} images")
    z = predict_poses(model, dataset.images, batch_size).z
    return cluster_accuracy(dataset.labels, cluster_embeddings(z, k))


# Rotation RMSE


def rotation_rmse_from_predictions(
    predicted: np.ndarray,
    baseline: np.ndarray,
    applied: np.ndarray,
    labels: np.ndarray,
) -> Dict[int, float]:
    """Per-class RMSE in degrees of rotation predictions against the applied rotations.

    ``predicted`` is ``[N, R]`` (image, applied angle), ``baseline`` the ``[N]`` predictions for
    the unrotated images, ``applied`` the ``[R]`` angles. Residuals
    ``(predicted - baseline) - applied`` are wrapped into (-pi, pi] and pooled over all images
    and angles of a class.
    """
    predicted = np.asarray(predicted, np.float64)
    baseline = np.asarray(baseline, np.float64)
    applied = np.asarray(applied, np.float64)
    labels = np.asarray(labels)
    if predicted.shape != (len(baseline), len(applied)) or len(labels) != len(baseline):
        raise ShapeError(
            f"Expected [{len(baseline)}, {len(applied)}] predictions, got {predicted.shape}"
        )
    residual = wrap_angle(predicted - baseline[:, None] - applied[None, :])
    rmse = {}
    for label in np.unique(labels):
        squared = residual[labels == label] ** 2
        rmse[int(label)] = math.degrees(math.sqrt(float(squared.mean())))
    return rmse


@torch.no_grad()
def eval_rotation_rmse(
    model: TargetVAE,
    dataset: TransformedDataset,
    n_rotations: int = 160,
    n_images: Optional[int] = None,
    seed: int = 0,
    batch_size: int = 100,
) -> Dict[int, float]:
    """Rotate every image by ``n_rotations`` angles drawn from U(0, 2 pi) and measure how well the
    predicted angle follows."""
    if n_images is not None:
        dataset = dataset.subset(np.arange(min(n_images, len(dataset))))
    rng = np.random.default_rng(seed)
    applied = rng.uniform(0.0, 2.0 * math.pi, size=n_rotations)
    images = torch.as_tensor(dataset.images, dtype=torch.float32)
    baseline = predict_poses(model, images, batch_size).theta
    predicted = np.zeros((len(dataset), n_rotations))
    for j, angle in enumerate(applied):
        rotated = rotate_images(images, np.full(len(images), angle))
        predicted[:, j] = predict_poses(model, rotated, batch_size).theta
    rmse = rotation_rmse_from_predictions(predicted, baseline, applied, dataset.labels)
    logger.info(f"Rotation RMSE over {len(dataset)} images x {n_rotations} angles: {rmse}")
    return rmse


def evaluate_all(
    model: TargetVAE,
    dataset: TransformedDataset,
    batch_size: int = 100,
    n_rotations: int = 160,
    rmse_images: Optional[int] = None,
    seed: int = 0,
    manifest: Optional[Dict[str, str]] = None,
) -> MetricsReport:
    """Run the pose, clustering and rotation-RMSE evaluations into one report."""
    pose = eval_pose(model, dataset, batch_size)
    undefined = dict(pose.undefined)
    accuracy = None
    try:
        accuracy = eval_clustering(model, dataset, batch_size=batch_size)
    except InvalidArgumentError as e:
        undefined["clustering_accuracy"] = str(e)
        logger.warning(f"clustering_accuracy undefined: {e}")
    rmse = eval_rotation_rmse(model, dataset, n_rotations, rmse_images, seed, batch_size)
    return MetricsReport(
        translation_pearson_x=pose.r_x,
        translation_pearson_y=pose.r_y,
        rotation_circular_corr=pose.circular,
        rotation_circular_corr_per_class=pose.per_class,
        clustering_accuracy=accuracy,
        rotation_rmse_per_class=rmse,
        undefined=undefined,
        manifest={key: str(value) for key, value in (manifest or {}).items()},
    )
