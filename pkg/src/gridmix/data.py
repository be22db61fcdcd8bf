"""Synthetic scenarios, 100 ms resampling, RANSAC noise estimation, example building and file I/O."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from gridmix.features import HorizonOutOfRange, Track, compute_features, to_vcs, vcs_frame_at, wrap_angle
from gridmix.fsutil import atomic_write
from gridmix.staticmap import GridSpec, MapConfig, ScenarioGeometry, assign_latent_many, rasterize

SAMPLE_MS = 100.0
SAMPLES_PER_TRACK = 50
ROAD_HALF_WIDTH = 3.5


class TooShort(ValueError):
    pass


class FitFailure(RuntimeError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    n_tracks: int = 2500
    fraction_straight: float = 0.5
    fork_probability: float = 0.4
    speed_range: tuple = (5.0, 15.0)
    turn_radius_range: tuple = (15.0, 40.0)
    noise_sigma: float = 0.05
    jitter_sigma: float = 10.0
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_tracks < 1:
            raise ValueError("n_tracks must be >= 1")
        for name in ("fraction_straight", "fork_probability", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} must lie in [0, 1]")
        for name in ("speed_range", "turn_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name}={getattr(self, name)} must be a nonempty positive range")
        if self.noise_sigma < 0 or self.jitter_sigma < 0:
            raise ValueError("noise_sigma and jitter_sigma must be >= 0")


@dataclass
class DatasetItem:
    track_id: str
    raw: Track
    resampled: Track
    geometry: ScenarioGeometry
    label: str
    meta: Dict = field(default_factory=dict)


@dataclass
class Dataset:
    items: List[DatasetItem]
    train: List[int]
    test: List[int]
    config: Optional[ScenarioConfig] = None

    def split(self, name: str) -> List[DatasetItem]:
        return [self.items[i] for i in getattr(self, name)]


# ---------------------------------------------------------------------------
# Synthetic routes


class _Route:
    """Straight approach, constant-curvature arc, straight exit; parametrized by arc length."""

    def __init__(self, start, heading, approach, radius=math.inf, turn=0.0):
        self.start = np.asarray(start, dtype=float)
        self.heading = heading
        self.approach = approach
        self.radius = radius
        self.turn = turn  # signed turning angle of the arc, + is left

    @property
    def arc_length(self) -> float:
        return 0.0 if self.turn == 0.0 else abs(self.turn) * self.radius

    def pose(self, u):
        u = np.asarray(u, dtype=float)
        h0 = self.heading
        d0 = np.array([math.cos(h0), math.sin(h0)])
        x = self.start + np.minimum(u, self.approach)[..., None] * d0
        head = np.full(u.shape, h0)
        if self.turn != 0.0:
            side = math.copysign(1.0, self.turn)
            a = np.clip(u - self.approach, 0.0, self.arc_length)
            ang = side * a / self.radius
            normal = np.array([-d0[1], d0[0]]) * side
            x = x + self.radius * (np.sin(np.abs(ang))[..., None] * d0 + (1 - np.cos(ang))[..., None] * normal)
            head = head + ang
            rest = np.maximum(u - self.approach - self.arc_length, 0.0)
            h1 = h0 + self.turn
            x = x + rest[..., None] * np.array([math.cos(h1), math.sin(h1)])
            head = np.where(u > self.approach + self.arc_length, h1, head)
        return x, wrap_angle(head)

    def polyline(self, u0: float, u1: float, step: float = 1.0) -> np.ndarray:
        n = max(2, int(math.ceil((u1 - u0) / step)) + 1)
        return self.pose(np.linspace(u0, u1, n))[0]

    def corridor(self, u0: float, u1: float, half_width: float = ROAD_HALF_WIDTH) -> np.ndarray:
        u = np.linspace(u0, u1, max(2, int(math.ceil((u1 - u0) / 2.0)) + 1))
        pts, head = self.pose(u)
        nrm = np.stack([-np.sin(head), np.cos(head)], axis=-1)
        return np.concatenate([pts + half_width * nrm, (pts - half_width * nrm)[::-1]])


def _track_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _sample_times(rng, jitter_sigma: float) -> np.ndarray:
    t = np.arange(SAMPLES_PER_TRACK) * SAMPLE_MS
    if jitter_sigma > 0:
        j = np.clip(rng.normal(0.0, jitter_sigma, SAMPLES_PER_TRACK), -0.45 * SAMPLE_MS, 0.45 * SAMPLE_MS)
        # endpoints stay on the grid so resampling keeps all 50 samples
        j[0] = j[-1] = 0.0
        t = t + np.round(j, 3)
    return t


def generate_item(config: ScenarioConfig, index: int) -> DatasetItem:
    rng = _track_rng(config.seed, index)
    speed = rng.uniform(*config.speed_range)
    start = rng.uniform(-500.0, 500.0, 2)
    heading = rng.uniform(-math.pi, math.pi)
    r = rng.random()
    if r < config.fraction_straight:
        label = "straight"
    else:
        label = "fork" if rng.random() < config.fork_probability else "turn"
    radius = rng.uniform(*config.turn_radius_range)
    meta: Dict = {"speed": speed}
    duration = (SAMPLES_PER_TRACK - 1) * SAMPLE_MS / 1000.0
    span = speed * duration

    if label == "straight":
        routes = [_Route(start, heading, approach=1e9)]
        driven = routes[0]
    elif label == "turn":
        side = 1.0 if rng.random() < 0.5 else -1.0
        approach = speed * rng.uniform(0.5, 3.0)
        driven = _Route(start, heading, approach, radius, side * math.pi / 2)
        routes = [driven]
        meta["side"] = side
    else:
        fork_index = int(rng.integers(8, 23))
        approach = speed * fork_index * SAMPLE_MS / 1000.0
        branch = int(rng.random() < 0.5)
        routes = [_Route(start, heading, approach, radius, s * math.pi / 3) for s in (1.0, -1.0)]
        driven = routes[branch]
        meta.update({"fork_index": fork_index, "branch": branch})

    t = _sample_times(rng, config.jitter_sigma)
    xy, _ = driven.pose(speed * t / 1000.0)
    if config.noise_sigma > 0:
        xy = xy + rng.normal(0.0, config.noise_sigma, xy.shape)

    lo, hi = -80.0, span + 120.0
    geometry = ScenarioGeometry(
        driveable=[rt.corridor(lo, hi) for rt in routes],
        centerlines=[rt.polyline(lo, hi) for rt in routes],
    )
    raw = Track(t, xy)
    return DatasetItem(f"{index:06d}", raw, resample_100ms(raw), geometry, label, meta)


def generate(config: ScenarioConfig) -> Dataset:
    """Deterministic synthetic dataset; each track draws from its own (seed, index) stream."""
    config.validate()
    items = [generate_item(config, i) for i in range(config.n_tracks)]
    n_test = int(round(config.test_fraction * config.n_tracks))
    perm = np.random.default_rng([config.seed, 2**31]).permutation(config.n_tracks)
    test = sorted(int(i) for i in perm[:n_test])
    train = sorted(int(i) for i in perm[n_test:])
    return Dataset(items, train, test, config)


# ---------------------------------------------------------------------------
# Conditioning


def resample_100ms(track: Track, interval_ms: float = SAMPLE_MS) -> Track:
    """Linear interpolation onto the exact multiples of `interval_ms` inside the track's span."""
    if len(track) < 2:
        raise TooShort("resampling needs at least 2 samples")
    t0, t1 = track.t_ms[0], track.t_ms[-1]
    grid = np.arange(math.ceil(t0 / interval_ms), math.floor(t1 / interval_ms) + 1) * interval_ms
    if len(grid) < 2:
        raise TooShort(f"span [{t0}, {t1}] ms holds fewer than 2 grid points")
    xy = np.stack([np.interp(grid, track.t_ms, track.xy[:, k]) for k in range(2)], axis=-1)
    heading = None
    if track.heading is not None:
        heading = wrap_angle(np.interp(grid, track.t_ms, np.unwrap(track.heading)))
    return Track(grid, xy, heading)


@dataclass
class RansacConfig:
    iterations: int = 100
    inlier_threshold: float = 1.0
    min_fraction: float = 0.6
    degree: int = 6


@dataclass
class NoiseEstimate:
    sigma_v: float
    per_track_residuals: List[float]
    inlier_fraction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _fit_track(track: Track, cfg: RansacConfig, rng: np.random.Generator):
    """RANSAC fit of x(t) and y(t) polynomials sharing one consensus set.

    Returns (residual vectors (n, 2), inlier mask).
    """
    n_coef = cfg.degree + 1
    n = len(track)
    if n < 2 * n_coef:
        raise FitFailure(f"track has {n} samples, need at least {2 * n_coef}")
    t = track.t_ms
    tc = (t - t.mean()) / max(np.ptp(t) / 2.0, 1e-12)
    V = np.vander(tc, n_coef, increasing=True)
    xy = track.xy

    subsets = np.stack([rng.choice(n, n_coef, replace=False) for _ in range(cfg.iterations)])
    A = V[subsets]
    B = xy[subsets]
    try:
        coef = np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        coef = np.stack([np.linalg.lstsq(a, b, rcond=None)[0] for a, b in zip(A, B)])
    resid = np.linalg.norm(np.einsum("nc,icd->ind", V, coef) - xy[None], axis=-1)
    inliers = resid <= cfg.inlier_threshold
    counts = inliers.sum(axis=1)
    score = np.where(inliers, resid, 0.0).sum(axis=1)
    best = np.lexsort((score, -counts))[0]
    mask = inliers[best]
    min_points = int(math.ceil(cfg.min_fraction * n))
    if mask.sum() < max(min_points, n_coef + 1):
        raise FitFailure(f"consensus of {int(mask.sum())} points below {min_points}")
    coef, *_ = np.linalg.lstsq(V[mask], xy[mask], rcond=None)
    r = xy - V @ coef
    final = np.linalg.norm(r, axis=-1) <= cfg.inlier_threshold
    if final.sum() < max(min_points, n_coef + 1):
        raise FitFailure(f"refit consensus of {int(final.sum())} points below {min_points}")
    coef, *_ = np.linalg.lstsq(V[final], xy[final], rcond=None)
    return xy - V @ coef, final


def estimate_noise(tracks: Sequence[Track], cfg: RansacConfig = RansacConfig(), seed: int = 0) -> NoiseEstimate:
    """Measurement noise from RANSAC polynomial fits against exact timestamps.

    sigma_v is the pooled per-axis residual standard deviation over the inliers
    of all tracks, with the fitted coefficients subtracted from the degrees of
    freedom.
    """
    if not tracks:
        raise FitFailure("no tracks given")
    n_coef = cfg.degree + 1
    ssr, dof, n_in, n_all = 0.0, 0, 0, 0
    per_track = []
    for i, tr in enumerate(tracks):
        r, mask = _fit_track(tr, cfg, _track_rng(seed, i))
        sq = float(np.sum(r[mask] ** 2))
        d = 2 * (int(mask.sum()) - n_coef)
        per_track.append(math.sqrt(sq / d))
        ssr += sq
        dof += d
        n_in += int(mask.sum())
        n_all += len(tr)
    return NoiseEstimate(math.sqrt(ssr / dof), per_track, n_in / n_all)


# ---------------------------------------------------------------------------
# Training examples


@dataclass
class Example:
    """One training sequence of T steps.

    Rasters are bit-packed along the flattened (H, W, 2) axis to keep whole
    datasets in memory; `rasters()` unpacks them.
    """

    track_id: str
    features: np.ndarray  # (T, 4)
    packed_rasters: np.ndarray  # (T, ceil(H*W*2/8)) uint8
    raster_shape: tuple  # (H, W, 2)
    targets: np.ndarray  # (T, 2) VCS of each step
    classes: np.ndarray  # (T,) int, -1 where out of extent
    label: str = ""
    meta: Dict = field(default_factory=dict)

    def rasters(self) -> np.ndarray:
        n = int(np.prod(self.raster_shape))
        flat = np.unpackbits(self.packed_rasters, axis=-1, count=n)
        return flat.reshape((len(self.packed_rasters),) + tuple(self.raster_shape))


def build_example(
    track: Track,
    geometry: ScenarioGeometry,
    horizon: int,
    grid: GridSpec,
    map_config: MapConfig,
    t_max: int = 30,
    track_id: str = "",
    label: str = "",
    meta: Optional[Dict] = None,
) -> Example:
    if len(track) < t_max + horizon:
        raise TooShort(f"track has {len(track)} samples, need {t_max + horizon}")
    feats = compute_features(track, t_max - 1)
    frames = [vcs_frame_at(track, t) for t in range(t_max)]
    targets = np.stack([to_vcs(track.xy[t + horizon], f) for t, f in enumerate(frames)])
    rasters = np.stack([rasterize(geometry, f, map_config).cells for f in frames])
    shape = rasters.shape[1:]
    packed = np.packbits(rasters.reshape(t_max, -1), axis=-1)
    classes = assign_latent_many(targets, grid)
    return Example(track_id, feats, packed, shape, targets, classes, label, dict(meta or {}))


def build_examples(
    dataset: Dataset,
    horizon: int,
    grid: GridSpec,
    map_config: MapConfig,
    t_max: int = 30,
    split: Optional[str] = None,
    limit: Optional[int] = None,
) -> List[Example]:
    idx = range(len(dataset.items)) if split is None else getattr(dataset, split)
    items = [dataset.items[i] for i in idx][:limit]
    return [
        build_example(it.resampled, it.geometry, horizon, grid, map_config, t_max, it.track_id, it.label, it.meta)
        for it in items
    ]


# ---------------------------------------------------------------------------
# Files

TRACK_HEADER = ["track_id", "timestamp_ms", "x_m", "y_m"]


def write_tracks_csv(path, tracks: Dict[str, Track]) -> None:
    buf = io.StringIO()
    buf.write(",".join(TRACK_HEADER) + "\n")
    for tid, tr in tracks.items():
        for t, (x, y) in zip(tr.t_ms.tolist(), tr.xy.tolist()):
            buf.write(f"{tid},{t!r},{x!r},{y!r}\n")
    atomic_write(path, buf.getvalue())


def load_tracks(path) -> Dict[str, Track]:
    """Read a track CSV into {track_id: Track}, preserving file order."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError(f"{path}: empty file")
    if [h.strip() for h in rows[0]] != TRACK_HEADER:
        raise ParseError(f"{path}: line 1: expected header {','.join(TRACK_HEADER)}, got {','.join(rows[0])}")
    samples: Dict[str, list] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
        tid = row[0]
        vals = []
        for name, raw in zip(TRACK_HEADER[1:], row[1:]):
            try:
                v = float(raw)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: field {name}={raw!r} is not a number") from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: line {lineno}: field {name}={raw!r} is not finite")
            vals.append(v)
        samples.setdefault(tid, []).append((lineno, vals))
    if not samples:
        raise ParseError(f"{path}: no data rows")
    out = {}
    for tid, rs in samples.items():
        arr = np.array([v for _, v in rs])
        try:
            out[tid] = Track(arr[:, 0], arr[:, 1:])
        except ValueError as e:
            raise ParseError(f"{path}: track {tid} (lines {rs[0][0]}-{rs[-1][0]}): {e}") from None
    return out


def save_dataset(path, dataset: Dataset) -> Path:
    """Write tracks.csv, one geometry JSON per track and manifest.json under `path`."""
    root = Path(path)
    (root / "geometry").mkdir(parents=True, exist_ok=True)
    write_tracks_csv(root / "tracks.csv", {it.track_id: it.raw for it in dataset.items})
    split_of = {i: "train" for i in dataset.train}
    split_of.update({i: "test" for i in dataset.test})
    entries = []
    for i, it in enumerate(dataset.items):
        gpath = Path("geometry") / f"{it.track_id}.json"
        atomic_write(root / gpath, json.dumps(it.geometry.to_json()))
        entries.append(
            {"track_id": it.track_id, "label": it.label, "split": split_of.get(i, "train"),
             "geometry": gpath.as_posix(), "meta": it.meta}
        )
    manifest = {
        "format_version": 1,
        "track_files": ["tracks.csv"],
        "scenario_config": None if dataset.config is None else asdict(dataset.config),
        "items": entries,
    }
    # the manifest goes last, so a dataset directory with a manifest is complete
    atomic_write(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return root / "manifest.json"


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    root = manifest_path.parent
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tracks: Dict[str, Track] = {}
    for f in manifest["track_files"]:
        tracks.update(load_tracks(root / f))
    items, train, test = [], [], []
    for i, e in enumerate(manifest["items"]):
        geom = ScenarioGeometry.from_json(json.loads((root / e["geometry"]).read_text(encoding="utf-8")))
        raw = tracks[e["track_id"]]
        items.append(DatasetItem(e["track_id"], raw, resample_100ms(raw), geom, e["label"], e.get("meta", {})))
        (test if e["split"] == "test" else train).append(i)
    cfg = manifest.get("scenario_config")
    config = None
    if cfg is not None:
        cfg["speed_range"] = tuple(cfg["speed_range"])
        cfg["turn_radius_range"] = tuple(cfg["turn_radius_range"])
        config = ScenarioConfig(**cfg)
    return Dataset(items, train, test, config)
