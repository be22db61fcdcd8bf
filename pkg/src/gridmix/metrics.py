"""ADE / minADE / FDE evaluation with warm-up skip and measurement-noise correction.

Prediction arrays have shape (m, T, K, 2): m sequences, T steps, the top-K NMS
means per step (NaN-padded when NMS returned fewer). Targets are (m, T, 2).
Step rows are labelled t = 1..T; ADE and minADE average steps t >= first_step.
An optional (m, T) boolean `valid` mask drops out-of-extent steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

FIRST_STEP = 5


class EmptyEvaluation(ValueError):
    pass


class NoiseExceedsMetric(ValueError):
    pass


@dataclass
class EvalReport:
    ade: float
    min_ade: float
    fde: float
    k_used: int
    sigma_v: Optional[float] = None
    corrected: Optional[dict] = None
    samples_evaluated: int = 0
    samples_skipped_out_of_extent: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _prep(predictions, targets, valid):
    p = np.asarray(predictions, dtype=float)
    if p.ndim == 3:
        p = p[:, :, None, :]
    t = np.asarray(targets, dtype=float)
    if p.shape[:2] != t.shape[:2]:
        raise ValueError(f"predictions {p.shape} and targets {t.shape} disagree")
    v = np.ones(t.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    return p, t, v


def _mean(values: np.ndarray) -> float:
    if values.size == 0:
        raise EmptyEvaluation("no steps left to evaluate")
    return math.fsum(values.tolist()) / values.size


def _window(n_steps: int, first_step: int) -> slice:
    if n_steps < first_step:
        raise EmptyEvaluation(f"need at least {first_step} steps, got {n_steps}")
    return slice(first_step - 1, n_steps)


def displacement(predictions, targets) -> np.ndarray:
    """Euclidean distances (m, T, K); NaN where a prediction is missing."""
    p, t, _ = _prep(predictions, targets, None)
    return np.linalg.norm(p - t[:, :, None, :], axis=-1)


def ade(predictions, targets, valid=None, first_step: int = FIRST_STEP) -> float:
    p, t, v = _prep(predictions, targets, valid)
    w = _window(t.shape[1], first_step)
    d = np.linalg.norm(p[:, w, 0] - t[:, w], axis=-1)
    return _mean(d[v[:, w]])


def min_ade(predictions, targets, k: int = 3, valid=None, first_step: int = FIRST_STEP) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    p, t, v = _prep(predictions, targets, valid)
    w = _window(t.shape[1], first_step)
    d = np.linalg.norm(p[:, w, :k] - t[:, w, None], axis=-1)
    best = np.nanmin(d, axis=-1)
    return _mean(best[v[:, w]])


def fde(predictions, targets, valid=None, literal: bool = False, first_step: int = FIRST_STEP) -> float:
    """Final displacement error of the top-1 prediction.

    With literal=True, the two-term expression with prefactor 1/(m (T - first_step + 1))
    over steps first_step and T is evaluated instead, top-1 standing in for the
    unbound prediction index.
    """
    p, t, v = _prep(predictions, targets, valid)
    n_steps = t.shape[1]
    d = np.linalg.norm(p[:, :, 0] - t, axis=-1)
    if not literal:
        return _mean(d[v[:, -1], -1])
    w = _window(n_steps, first_step)
    rows = v[:, w.start] & v[:, -1]
    m = int(rows.sum())
    if m == 0:
        raise EmptyEvaluation("no sequences left to evaluate")
    terms = (d[rows, w.start] + d[rows, -1]).tolist()
    return math.fsum(terms) / (m * (n_steps - first_step + 1))


def noise_correct(metric: float, sigma_v: float) -> float:
    """Remove independent measurement noise: sqrt(metric^2 - sigma_v^2)."""
    if sigma_v < 0:
        raise ValueError("sigma_v must be >= 0")
    if metric < sigma_v:
        raise NoiseExceedsMetric(f"metric {metric} is smaller than sigma_v {sigma_v}")
    # factored form loses less precision when metric and sigma_v are close
    return math.sqrt((metric - sigma_v) * (metric + sigma_v))


def evaluate(
    predictions,
    targets,
    valid=None,
    k: int = 3,
    first_step: int = FIRST_STEP,
    sigma_v: Optional[float] = None,
    literal_fde: bool = False,
) -> EvalReport:
    p, t, v = _prep(predictions, targets, valid)
    w = _window(t.shape[1], first_step)
    report = EvalReport(
        ade=ade(p, t, v, first_step),
        min_ade=min_ade(p, t, k, v, first_step),
        fde=fde(p, t, v, literal_fde, first_step),
        k_used=k,
        samples_evaluated=int(v[:, w].sum()),
        samples_skipped_out_of_extent=int((~v[:, w]).sum()),
    )
    if sigma_v is not None:
        report.sigma_v = float(sigma_v)
        report.corrected = {
            name: noise_correct(getattr(report, name), sigma_v) for name in ("ade", "min_ade", "fde")
        }
    return report
