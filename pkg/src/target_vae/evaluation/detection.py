"""Detect several objects in one image from peaks of the translation posterior.

The encoder is fully convolutional, so a model trained on single objects can be run on a
larger canvas. Peaks of ``q(t | y) = sum_r q(t, r | y)`` mark object centres; each peak's most
probable rotation component supplies the angle and semantic vector of that object.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from scipy.ndimage import maximum_filter

from ..core.exceptions import ShapeError
from ..core.geometry import make_pixel_grid
from ..core.latent import attention_softmax, marginal_translation

logger = logging.getLogger(__name__)

UNIFORM_MULTIPLE = 5.0
DETECTION_COLUMNS = ("image", "object", "row", "col", "t_x_px", "t_y_px", "theta", "score", "r_index")


@dataclass
class Detection:
    """One detected object. ``t_px`` is ``(x, y)`` relative to the canvas centre."""

    row: int
    col: int
    t: np.ndarray
    t_px: np.ndarray
    theta: float
    z: np.ndarray
    score: float
    r_index: int
    reconstruction: Optional[np.ndarray] = None

    def tsv_fields(self) -> List[str]:
        return [
            str(self.row), str(self.col), repr(float(self.t_px[0])), repr(float(self.t_px[1])),
            repr(self.theta), repr(self.score), str(self.r_index),
        ]


def find_peaks(
    heatmap: np.ndarray, threshold: float, min_separation: int
) -> List[tuple]:
    """Local maxima above ``threshold``, strongest first, none closer than ``min_separation``.

    Returns ``(row, col, value)`` tuples.
    """
    size = 2 * min_separation + 1
    local_max = maximum_filter(heatmap, size=size, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((heatmap >= local_max) & (heatmap > threshold))
    order = np.argsort(-heatmap[rows, cols], kind="stable")
    kept: List[tuple] = []
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if all((r - kr) ** 2 + (c - kc) ** 2 >= min_separation ** 2 for kr, kc, _ in kept):
            kept.append((r, c, float(heatmap[r, c])))
    return kept


@torch.no_grad()
def detect_objects(
    model,
    image: Union[np.ndarray, torch.Tensor],
    peak_threshold: Optional[float] = None,
    min_separation: Optional[int] = None,
    render: bool = True,
) -> List[Detection]:
    """Objects in a ``[C, H, W]`` image, strongest first; an empty list when nothing clears the threshold.

    ``peak_threshold`` defaults to five times the uniform level ``1 / (H W)`` of ``q(t | y)``;
    ``min_separation`` to half the training image width.
    """
    model.eval()
    param = next(model.parameters())
    image = torch.as_tensor(image).to(device=param.device, dtype=param.dtype)
    if image.dim() == 4 and image.shape[0] == 1:
        image = image[0]
    if image.dim() != 3:
        raise ShapeError(f"Expected one [C, H, W] image, got {tuple(image.shape)}")
    _, h, w = image.shape
    cfg = model.config
    grid = make_pixel_grid(h, w, cfg.image_height, cfg.image_width, dtype=param.dtype, device=param.device)
    threshold = peak_threshold if peak_threshold is not None else UNIFORM_MULTIPLE / (h * w)
    separation = min_separation if min_separation is not None else max(1, cfg.image_width // 2)

    field = model.encode(image[None])
    q_tr = attention_softmax(field.attn_logits)[0]
    q_t = marginal_translation(q_tr[None])[0].cpu().double().numpy()
    offsets = model.prior.theta_offsets
    detections = []
    for row, col, score in find_peaks(q_t, threshold, separation):
        r_index = int(q_tr[:, row, col].argmax())
        theta = field.mu_dtheta[0, r_index, row, col] + offsets[r_index]
        z = field.mu_z[0, r_index, row, col]
        t = grid.coords[row * w + col]
        reconstruction = None
        if render:
            reconstruction = model.render_images(z[None], theta[None], t[None], grid)[0].cpu().numpy()
        detections.append(
            Detection(
                row=row,
                col=col,
                t=t.cpu().double().numpy(),
                t_px=np.array([col - (w - 1) / 2.0, row - (h - 1) / 2.0]),
                theta=float(theta),
                z=z.cpu().double().numpy(),
                score=score,
                r_index=r_index,
                reconstruction=reconstruction,
            )
        )
    logger.debug(f"Found {len(detections)} objects above threshold {threshold:.3g}")
    return detections


def write_detections(path: Union[str, Path], detections: Sequence[Sequence[Detection]]) -> Path:
    """Tab-separated table with one row per detection across all images."""
    path = Path(path)
    lines = ["\t".join(DETECTION_COLUMNS)]
    for image_index, found in enumerate(detections):
        for object_index, detection in enumerate(found):
            lines.append("\t".join([str(image_index), str(object_index)] + detection.tsv_fields()))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def match_detections(
    detections: Sequence[Detection], truth_t_px: np.ndarray, max_distance: float = 3.0
) -> tuple:
    """Greedy nearest matching of detections to ground-truth centres.

    Returns ``(true_positives, false_positives, localization_errors)``.
    """
    truth = [np.asarray(t, dtype=np.float64) for t in truth_t_px]
    used = set()
    errors = []
    false_positives = 0
    for detection in detections:
        distances = [
            (float(np.linalg.norm(detection.t_px - t)), k) for k, t in enumerate(truth) if k not in used
        ]
        best = min(distances, default=None)
        if best is not None and best[0] <= max_distance:
            used.add(best[1])
            errors.append(best[0])
        else:
            false_positives += 1
    return len(used), false_positives, errors
