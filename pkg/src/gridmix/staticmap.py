"""Static map rasters in the vehicle frame, the NxN subdivision grid and latent classes."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from gridmix.features import VcsFrame, to_vcs
from gridmix.fsutil import atomic_write

DEFAULT_EXTENT = (-12.8, 51.2, -32.0, 32.0)


class OutOfExtent(ValueError):
    """Target lies outside the grid rectangle; the sample is excluded."""


@dataclass
class ScenarioGeometry:
    """Driveable polygons and centerline polylines in global meters."""

    driveable: List[np.ndarray] = field(default_factory=list)
    centerlines: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.driveable = [np.asarray(p, dtype=float).reshape(-1, 2) for p in self.driveable]
        self.centerlines = [np.asarray(p, dtype=float).reshape(-1, 2) for p in self.centerlines]
        for p in self.driveable:
            if len(p) < 3:
                raise ValueError("polygons need at least 3 vertices")
        for p in self.centerlines:
            if len(p) < 2:
                raise ValueError("polylines need at least 2 points")

    def to_json(self) -> dict:
        return {
            "driveable": [p.tolist() for p in self.driveable],
            "centerlines": [p.tolist() for p in self.centerlines],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioGeometry":
        return cls(doc.get("driveable", []), doc.get("centerlines", []))


@dataclass(frozen=True)
class MapConfig:
    extent: tuple = DEFAULT_EXTENT  # x_min, x_max, y_min, y_max in VCS meters
    resolution: float = 0.5  # meters per pixel

    @property
    def shape(self) -> tuple:
        x0, x1, y0, y1 = self.extent
        w = (x1 - x0) / self.resolution
        h = (y1 - y0) / self.resolution
        if abs(w - round(w)) > 1e-9 or abs(h - round(h)) > 1e-9:
            raise ValueError(f"extent {self.extent} is not a whole number of {self.resolution} m pixels")
        return int(round(h)), int(round(w))

    def pixel_centers(self) -> tuple:
        """(H, W) arrays of pixel-center x and y; row 0 at min y, column 0 at min x."""
        h, w = self.shape
        x0, _, y0, _ = self.extent
        xs = x0 + (np.arange(w) + 0.5) * self.resolution
        ys = y0 + (np.arange(h) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class StaticMapRaster:
    cells: np.ndarray  # (H, W, 2) uint8; channel 0 driveable, channel 1 centerlines
    extent: tuple
    resolution: float


def _fill_polygon(mask: np.ndarray, uv: np.ndarray) -> None:
    """Even-odd scanline fill of a polygon given in continuous pixel coordinates (col, row).

    A pixel is inside when an odd number of polygon edges cross its row to the
    left of its center.
    """
    h, w = mask.shape
    a = uv
    b = np.roll(uv, -1, axis=0)
    lo_v, hi_v = np.minimum(a[:, 1], b[:, 1]), np.maximum(a[:, 1], b[:, 1])
    keep = (hi_v >= 0.0) & (lo_v <= h) & (np.minimum(a[:, 0], b[:, 0]) <= w + 1.0)
    a, b = a[keep], b[keep]
    if not len(a):
        return
    rows = np.arange(h) + 0.5
    ay, by = a[:, 1][None, :], b[:, 1][None, :]
    straddle = (ay > rows[:, None]) != (by > rows[:, None])
    r_idx, e_idx = np.nonzero(straddle)
    if not len(r_idx):
        return
    ax, ay, bx, by = a[e_idx, 0], a[e_idx, 1], b[e_idx, 0], b[e_idx, 1]
    u = ax + (rows[r_idx] - ay) * (bx - ax) / (by - ay)
    first = np.clip(np.floor(u - 0.5).astype(np.int64) + 1, 0, w)
    toggles = np.zeros((h, w + 1), dtype=np.int64)
    np.add.at(toggles, (r_idx, first), 1)
    mask |= (np.cumsum(toggles[:, :w], axis=1) % 2).astype(bool)


def _clip_segment(p0, p1, lo, hi):
    """Liang-Barsky clip of segment p0-p1 to the box [lo, hi]; None if outside."""
    t0, t1 = 0.0, 1.0
    d = p1 - p0
    for k in range(2):
        for p, q in ((-d[k], p0[k] - lo[k]), (d[k], hi[k] - p0[k])):
            if p == 0.0:
                if q < 0.0:
                    return None
                continue
            r = q / p
            if p < 0.0:
                if r > t1:
                    return None
                t0 = max(t0, r)
            else:
                if r < t0:
                    return None
                t1 = min(t1, r)
    return p0 + t0 * d, p0 + t1 * d


def _draw_polyline(mask: np.ndarray, uv: np.ndarray) -> None:
    """Mark pixels along a polyline given in continuous pixel coordinates (col, row)."""
    h, w = mask.shape
    lo, hi = np.array([-1.0, -1.0]), np.array([w + 1.0, h + 1.0])
    a, b = uv[:-1], uv[1:]
    near = np.all(np.maximum(a, b) >= lo, axis=1) & np.all(np.minimum(a, b) <= hi, axis=1)
    a, b = a[near], b[near]
    if not len(a):
        return
    long_seg = np.abs(b - a).max(axis=1) > 4.0 * (w + h)
    if long_seg.any():
        clipped = [_clip_segment(p, q, lo, hi) for p, q in zip(a[long_seg], b[long_seg])]
        clipped = [c for c in clipped if c is not None]
        a = np.concatenate([a[~long_seg]] + [c[0][None] for c in clipped])
        b = np.concatenate([b[~long_seg]] + [c[1][None] for c in clipped])
        if not len(a):
            return
    n = np.ceil(np.abs(b - a).max(axis=1)).astype(int) + 1
    seg = np.repeat(np.arange(len(a)), n + 1)
    offsets = np.cumsum(n + 1) - (n + 1)
    s = (np.arange(seg.size) - offsets[seg]) / n[seg]
    pts = np.floor(a[seg] + s[:, None] * (b[seg] - a[seg])).astype(int)
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    mask[pts[ok, 1], pts[ok, 0]] = 1


def rasterize(geometry: ScenarioGeometry, frame: VcsFrame, config: MapConfig = MapConfig()) -> StaticMapRaster:
    """Rasterize geometry into a 2-channel binary map in the vehicle frame `frame`."""
    h, w = config.shape
    cells = np.zeros((h, w, 2), dtype=np.uint8)
    x0, _, y0, _ = config.extent

    def pixel_coords(points):
        v = to_vcs(points, frame)
        return np.stack([(v[:, 0] - x0) / config.resolution, (v[:, 1] - y0) / config.resolution], axis=-1)

    area = np.zeros((h, w), dtype=bool)
    for poly in geometry.driveable:
        _fill_polygon(area, pixel_coords(poly))
    cells[..., 0] = area
    line = np.zeros((h, w), dtype=np.uint8)
    for pl in geometry.centerlines:
        _draw_polyline(line, pixel_coords(pl))
    cells[..., 1] = line
    return StaticMapRaster(cells, tuple(config.extent), config.resolution)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5). Row 0 of `image` becomes the bottom row of the picture."""
    img = np.flipud(np.asarray(image, dtype=np.uint8))
    h, w = img.shape
    data = f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
    atomic_write(path, data)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    img = np.frombuffer(raw[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return np.flipud(img).copy()


def export_raster_pgm(raster: StaticMapRaster, stem) -> list:
    """One PGM per channel, 0/255 values. Returns the written paths."""
    paths = []
    for ch, name in enumerate(("driveable", "centerlines")):
        p = Path(f"{stem}_{name}.pgm")
        write_pgm(p, raster.cells[..., ch] * 255)
        paths.append(p)
    return paths


@dataclass(frozen=True)
class GridSpec:
    n: int
    extent: tuple
    centers: np.ndarray  # (n*n, 2); j = row * n + col

    @property
    def cell_size(self) -> tuple:
        x0, x1, y0, y1 = self.extent
        return (x1 - x0) / self.n, (y1 - y0) / self.n

    @property
    def k(self) -> int:
        return self.n * self.n


def make_grid(extent: Sequence[float] = DEFAULT_EXTENT, n: int = 10) -> GridSpec:
    if n < 1:
        raise ValueError("grid needs n >= 1")
    x0, x1, y0, y1 = (float(v) for v in extent)
    cw, ch = (x1 - x0) / n, (y1 - y0) / n
    cols = x0 + (np.arange(n) + 0.5) * cw
    rows = y0 + (np.arange(n) + 0.5) * ch
    cx, cy = np.meshgrid(cols, rows)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    return GridSpec(n, (x0, x1, y0, y1), centers)


def _axis_index(v: float, lo: float, hi: float, n: int) -> int:
    i = int(math.floor((v - lo) / (hi - lo) * n))
    return min(max(i, 0), n - 1)


def assign_latent(target, grid: GridSpec) -> int:
    """Index of the subregion containing `target` (x, y).

    Cells are half-open [lo, hi) except the last one along each axis, which also
    holds its max edge.

    Raises:
        OutOfExtent: if the point lies outside the grid rectangle.
    """
    x, y = float(target[0]), float(target[1])
    x0, x1, y0, y1 = grid.extent
    if not (x0 <= x <= x1 and y0 <= y <= y1):
        raise OutOfExtent(f"({x:.3f}, {y:.3f}) outside {grid.extent}")
    col = _axis_index(x, x0, x1, grid.n)
    row = _axis_index(y, y0, y1, grid.n)
    return row * grid.n + col


def assign_latent_many(targets: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Vectorized assign_latent; -1 marks out-of-extent targets."""
    t = np.asarray(targets, dtype=float).reshape(-1, 2)
    x0, x1, y0, y1 = grid.extent
    ok = (t[:, 0] >= x0) & (t[:, 0] <= x1) & (t[:, 1] >= y0) & (t[:, 1] <= y1)
    col = np.clip(np.floor((t[:, 0] - x0) / (x1 - x0) * grid.n), 0, grid.n - 1).astype(int)
    row = np.clip(np.floor((t[:, 1] - y0) / (y1 - y0) * grid.n), 0, grid.n - 1).astype(int)
    out = row * grid.n + col
    out[~ok] = -1
    return out.reshape(np.shape(targets)[:-1])
