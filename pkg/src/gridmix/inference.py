"""Distinct, confidence-ordered position predictions via non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from gridmix.fsutil import atomic_write
from gridmix.mixture import MixtureParams


@dataclass(frozen=True)
class Prediction:
    mu: tuple
    sigma: tuple
    confidence: float
    source_cell: int


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between boxes (x0, y0, x1, y1); a is (4,), b is (n, 4)."""
    ix = np.clip(np.minimum(a[2], b[:, 2]) - np.maximum(a[0], b[:, 0]), 0, None)
    iy = np.clip(np.minimum(a[3], b[:, 3]) - np.maximum(a[1], b[:, 1]), 0, None)
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter)


def mixture_boxes(params: MixtureParams, alpha: float) -> np.ndarray:
    hx, hy = alpha * params.sigma_x, alpha * params.sigma_y
    return np.stack([params.mu_x - hx, params.mu_y - hy, params.mu_x + hx, params.mu_y + hy], axis=-1)


def nms(params: MixtureParams, alpha: float = 2.0, iou_threshold: float = 0.1) -> List[Prediction]:
    """Greedy NMS over the mixture components.

    Each component is a box centered on its mean with half-extents alpha * sigma
    and a score equal to its weight phi. Ties in phi go to the lower cell index.
    """
    if not 0.0 <= iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in [0, 1)")
    boxes = mixture_boxes(params, alpha)
    order = np.lexsort((np.arange(params.k), -params.phi))
    alive = np.ones(params.k, dtype=bool)
    kept = []
    for pos, j in enumerate(order):
        if not alive[pos]:
            continue
        kept.append(
            Prediction(
                (float(params.mu_x[j]), float(params.mu_y[j])),
                (float(params.sigma_x[j]), float(params.sigma_y[j])),
                float(params.phi[j]),
                int(j),
            )
        )
        rest = order[pos + 1 :]
        if len(rest):
            alive[pos + 1 :] &= box_iou(boxes[j], boxes[rest]) <= iou_threshold
    return kept


def top_k(predictions: Sequence[Prediction], k: int) -> List[Prediction]:
    if k < 1:
        raise ValueError("K must be >= 1")
    return list(predictions[:k])


def prediction_array(sets: Sequence[Sequence[Prediction]], k: int) -> np.ndarray:
    """Stack the top-k means of several prediction sets into a NaN-padded (n, k, 2) array."""
    out = np.full((len(sets), k, 2), np.nan)
    for i, s in enumerate(sets):
        for r, p in enumerate(s[:k]):
            out[i, r] = p.mu
    return out


def write_predictions_csv(path, predictions: Sequence[Prediction]) -> None:
    lines = ["rank,mu_x,mu_y,sigma_x,sigma_y,confidence,cell"]
    for rank, p in enumerate(predictions, start=1):
        lines.append(
            f"{rank},{p.mu[0]!r},{p.mu[1]!r},{p.sigma[0]!r},{p.sigma[1]!r},{p.confidence!r},{p.source_cell}"
        )
    atomic_write(path, "\n".join(lines) + "\n")
