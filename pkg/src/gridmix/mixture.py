"""Closed-form math of the grid-latent Gaussian mixture output.

Every component is an axis-aligned 2-D Gaussian. Component j is tied to grid
cell j: its mean is the cell center plus a predicted offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridmix.fsutil import atomic_write
from gridmix.staticmap import GridSpec

LOG_2PI = math.log(2.0 * math.pi)
LOG_SIGMA_CLAMP = (-3.0, 3.0)
PHI_FLOOR = 1e-12


class NonFiniteInput(ValueError):
    pass


@dataclass(frozen=True)
class RawHeadOutput:
    logits: np.ndarray
    dmu_x: np.ndarray
    dmu_y: np.ndarray
    s_x: np.ndarray  # log sigma, pre-clamp
    s_y: np.ndarray

    @classmethod
    def from_maps(cls, maps: np.ndarray) -> "RawHeadOutput":
        """Build from an (n, n, 5) or (k, 5) array with channels (phi, dmu_x, sigma_x, dmu_y, sigma_y)."""
        m = np.asarray(maps, dtype=float).reshape(-1, 5)
        return cls(m[:, 0], m[:, 1], m[:, 3], m[:, 2], m[:, 4])


@dataclass(frozen=True)
class MixtureParams:
    phi: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray

    def __post_init__(self):
        for name in ("phi", "mu_x", "mu_y", "sigma_x", "sigma_y"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def k(self) -> int:
        return len(self.phi)

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.phi < 0) or abs(self.phi.sum() - 1.0) > atol:
            raise ValueError("phi must be a probability vector")
        if np.any(self.sigma_x <= 0) or np.any(self.sigma_y <= 0):
            raise ValueError("sigmas must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    regression: float

    @property
    def total(self) -> float:
        return self.classification + self.regression

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.classification + other.classification, self.regression + other.regression)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def realize_params(raw: RawHeadOutput, grid: GridSpec) -> MixtureParams:
    arrays = (raw.logits, raw.dmu_x, raw.dmu_y, raw.s_x, raw.s_y)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise NonFiniteInput("raw head output contains non-finite values")
    phi = np.exp(_log_softmax(np.asarray(raw.logits, dtype=float)))
    lo, hi = LOG_SIGMA_CLAMP
    return MixtureParams(
        phi=phi,
        mu_x=raw.dmu_x + grid.centers[:, 0],
        mu_y=raw.dmu_y + grid.centers[:, 1],
        sigma_x=np.exp(np.clip(raw.s_x, lo, hi)),
        sigma_y=np.exp(np.clip(raw.s_y, lo, hi)),
    )


def _component_log_pdf(params: MixtureParams, x, y) -> np.ndarray:
    """log N(x; mu_x, sx^2) + log N(y; mu_y, sy^2) for every component; broadcasts over x, y."""
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)[..., None]
    zx = (x - params.mu_x) / params.sigma_x
    zy = (y - params.mu_y) / params.sigma_y
    return -0.5 * (zx**2 + zy**2) - np.log(params.sigma_x) - np.log(params.sigma_y) - LOG_2PI


def mixture_nll(params: MixtureParams, target) -> float:
    """Negative log-likelihood of `target` under the full mixture (nats)."""
    with np.errstate(divide="ignore"):
        log_terms = np.log(params.phi) + _component_log_pdf(params, target[0], target[1])
    m = log_terms.max()
    return float(-(m + math.log(np.exp(log_terms - m).sum())))


def decomposed_loss(params: MixtureParams, target, z: int, gamma: float = 0.0) -> LossBreakdown:
    """Classification + single-component regression loss for the true cell z.

    The classification part is the focal loss -(1 - phi_z)^gamma log phi_z, which
    is plain cross-entropy at gamma = 0. The regression part is the negative log
    density of component z, including the log(2 pi) constant.

    Both parts reuse the per-component terms of mixture_nll, so at gamma = 0 the
    total is never below the mixture NLL, not even by rounding. The one
    exception is phi_z < PHI_FLOOR, where the clamped classification term
    understates -log phi_z.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = float(params.phi[z])
    with np.errstate(divide="ignore"):
        log_p = max(float(np.log(params.phi)[z]), math.log(PHI_FLOOR))
    cls = -log_p if gamma == 0 else -((1.0 - p) ** gamma) * log_p
    reg = -float(_component_log_pdf(params, target[0], target[1])[z])
    return LossBreakdown(cls, reg)


def density(params: MixtureParams, query) -> np.ndarray:
    """Mixture density at query point(s); query has shape (..., 2)."""
    q = np.asarray(query, dtype=float)
    comp = np.exp(_component_log_pdf(params, q[..., 0], q[..., 1]))
    return comp @ params.phi


def heatmap(params: MixtureParams, extent, resolution: float) -> np.ndarray:
    """Density at every pixel center; row 0 at min y, column 0 at min x."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    x0, x1, y0, y1 = extent
    w = int(round((x1 - x0) / resolution))
    h = int(round((y1 - y0) / resolution))
    xs = x0 + (np.arange(w) + 0.5) * resolution
    ys = y0 + (np.arange(h) + 0.5) * resolution
    out = np.empty((h, w))
    # row-wise keeps memory at O(W * k)
    for r, yv in enumerate(ys):
        comp = np.exp(_component_log_pdf(params, xs, np.full_like(xs, yv)))
        out[r] = comp @ params.phi
    return out


def write_heatmap(field: np.ndarray, stem, extent, resolution: float, floor_decades: float = 6.0) -> tuple:
    """Write `<stem>.pgm` (log-scaled, normalized to the max) and `<stem>.csv` (raw densities)."""
    from gridmix.staticmap import write_pgm

    peak = float(field.max())
    if peak > 0:
        logv = np.log10(np.maximum(field / peak, 10.0**-floor_decades))
        img = np.round((logv + floor_decades) / floor_decades * 255.0)
    else:
        img = np.zeros_like(field)
    pgm = Path(f"{stem}.pgm")
    write_pgm(pgm, img.astype(np.uint8))
    x0, _, y0, _ = extent
    rows = ["x_m,y_m,density"]
    h, w = field.shape
    for r in range(h):
        yv = y0 + (r + 0.5) * resolution
        for c in range(w):
            rows.append(f"{x0 + (c + 0.5) * resolution!r},{yv!r},{float(field[r, c])!r}")
    csv = Path(f"{stem}.csv")
    atomic_write(csv, "\n".join(rows) + "\n")
    return pgm, csv
