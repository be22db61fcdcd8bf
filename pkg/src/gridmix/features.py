"""Vehicle-coordinate features and targets computed from global-frame tracks.

Axis convention shared by every module: +x points along the vehicle heading,
+y points to the vehicle's left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class DegenerateHeading(ValueError):
    """Heading cannot be derived because the vehicle did not move."""


class HorizonOutOfRange(IndexError):
    pass


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Track:
    """Timestamped positions of one vehicle in the global frame.

    Attributes:
        t_ms: (n,) timestamps in milliseconds, strictly increasing.
        xy: (n, 2) positions in meters.
        heading: optional (n,) global heading in radians.
    """

    t_ms: np.ndarray
    xy: np.ndarray
    heading: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.t_ms, dtype=float)
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if len(t) != len(xy):
            raise ValueError(f"{len(t)} timestamps but {len(xy)} positions")
        if len(t) < 2:
            raise ValueError("a track needs at least 2 samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "t_ms", t)
        object.__setattr__(self, "xy", xy)
        if self.heading is not None:
            h = np.asarray(self.heading, dtype=float)
            if h.shape != t.shape:
                raise ValueError("heading must have one entry per sample")
            object.__setattr__(self, "heading", h)

    def __len__(self) -> int:
        return len(self.t_ms)

    def transformed(self, angle: float, shift=(0.0, 0.0)) -> "Track":
        """Rotate the whole track by `angle` about the origin, then translate."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        xy = self.xy @ rot.T + np.asarray(shift, dtype=float)
        heading = None if self.heading is None else wrap_angle(self.heading + angle)
        return Track(self.t_ms.copy(), xy, heading)


@dataclass(frozen=True)
class VcsFrame:
    origin: tuple
    heading: float


def _heading_at(track: Track, t: int) -> float:
    if track.heading is not None:
        return float(wrap_angle(track.heading[t]))
    # index 0 has no predecessor; borrow the first displacement
    i = max(t, 1)
    d = track.xy[i] - track.xy[i - 1]
    if d[0] == 0.0 and d[1] == 0.0:
        raise DegenerateHeading(f"no displacement between samples {i - 1} and {i}")
    return float(wrap_angle(math.atan2(d[1], d[0])))


def vcs_frame_at(track: Track, t: int) -> VcsFrame:
    """Vehicle coordinate frame at sample `t`.

    The heading is the explicit track heading if present, otherwise the direction
    of the displacement from sample t-1 to t (from 0 to 1 when t == 0).
    """
    if not 0 <= t < len(track):
        raise HorizonOutOfRange(f"step {t} outside track of length {len(track)}")
    x, y = track.xy[t]
    return VcsFrame((float(x), float(y)), _heading_at(track, t))


def to_vcs(point, frame: VcsFrame) -> np.ndarray:
    """Global -> vehicle coordinates. Accepts (2,) or (n, 2)."""
    p = np.asarray(point, dtype=float) - np.asarray(frame.origin)
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    x = c * p[..., 0] + s * p[..., 1]
    y = -s * p[..., 0] + c * p[..., 1]
    return np.stack([x, y], axis=-1)


def from_vcs(point, frame: VcsFrame) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    x = c * p[..., 0] - s * p[..., 1] + frame.origin[0]
    y = s * p[..., 0] + c * p[..., 1] + frame.origin[1]
    return np.stack([x, y], axis=-1)


def compute_features(track: Track, up_to: int) -> np.ndarray:
    """Per-step (dx, dy, v, h) for steps 0..up_to.

    Row tau holds the displacement from tau-1 to tau in the vehicle frame of tau,
    the speed over that interval and the heading change between tau-1 and tau.
    Row 0 is padding: (0, 0, v[1], 0).

    Returns:
        (up_to + 1, 4) float array.
    """
    if up_to < 1:
        raise ValueError("features need at least up_to >= 1")
    if up_to >= len(track):
        raise HorizonOutOfRange(f"step {up_to} outside track of length {len(track)}")
    headings = np.array([_heading_at(track, i) for i in range(up_to + 1)])
    d = np.diff(track.xy[: up_to + 1], axis=0)
    dt = np.diff(track.t_ms[: up_to + 1]) / 1000.0
    c, s = np.cos(headings[1:]), np.sin(headings[1:])
    out = np.zeros((up_to + 1, 4))
    out[1:, 0] = c * d[:, 0] + s * d[:, 1]
    out[1:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[1:, 2] = np.hypot(d[:, 0], d[:, 1]) / dt
    out[1:, 3] = wrap_angle(np.diff(headings))
    out[0, 2] = out[1, 2]
    return out


def ground_truth_target(track: Track, t: int, horizon: int) -> np.ndarray:
    """Position `horizon` samples after t, expressed in the vehicle frame of t."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if t + horizon >= len(track):
        raise HorizonOutOfRange(f"t + horizon = {t + horizon} >= track length {len(track)}")
    return to_vcs(track.xy[t + horizon], vcs_frame_at(track, t))
