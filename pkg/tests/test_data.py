import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmix.data import (
    FitFailure,
    ParseError,
    RansacConfig,
    ScenarioConfig,
    TooShort,
    build_examples,
    estimate_noise,
    generate,
    generate_item,
    load_dataset,
    load_tracks,
    resample_100ms,
    save_dataset,
    write_tracks_csv,
)
from gridmix.features import Track
from gridmix.staticmap import MapConfig, make_grid


def test_resample_linear_exact():
    tr = Track([3.0, 151.0, 260.0, 390.0], [[0.0, 0.0], [1.48, -2.96], [2.57, -5.14], [3.87, -7.74]])
    r = resample_100ms(tr)
    assert r.t_ms.tolist() == [100.0, 200.0, 300.0]
    assert np.allclose(r.xy, [[0.97, -1.94], [1.97, -3.94], [2.97, -5.94]], atol=1e-12)


def test_resample_keeps_grid_points():
    tr = Track(np.arange(10) * 100.0, np.arange(20.0).reshape(10, 2))
    r = resample_100ms(tr)
    assert np.array_equal(r.t_ms, tr.t_ms) and np.array_equal(r.xy, tr.xy)


def test_resample_heading_unwrapped():
    tr = Track([0.0, 200.0], [[0.0, 0.0], [1.0, 0.0]], heading=[3.0, -3.0])
    r = resample_100ms(tr)
    # halfway between 3 and 2*pi - 3 through pi, not through 0
    assert abs(abs(r.heading[1]) - math.pi) < 1e-12


def test_resample_too_short():
    with pytest.raises(TooShort):
        resample_100ms(Track([10.0, 90.0], [[0, 0], [1, 0]]))


def test_generation_deterministic_and_per_index():
    a = generate(ScenarioConfig(n_tracks=12, seed=4))
    b = generate(ScenarioConfig(n_tracks=12, seed=4))
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.raw.xy, y.raw.xy) and x.label == y.label
    assert a.test == b.test
    # an item depends only on (seed, index), not on the dataset size
    c = generate_item(ScenarioConfig(n_tracks=500, seed=4), 7)
    assert np.array_equal(c.raw.xy, a.items[7].raw.xy)


def test_split_partition():
    ds = generate(ScenarioConfig(n_tracks=50, seed=1))
    assert sorted(ds.train + ds.test) == list(range(50))
    assert len(ds.test) == 10


def test_label_frequencies_binomial():
    cfg = ScenarioConfig(n_tracks=1500, seed=2, noise_sigma=0.0, jitter_sigma=0.0)
    labels = [generate_item(cfg, i).label for i in range(cfg.n_tracks)]
    n = len(labels)
    for name, p in (("straight", 0.5), ("fork", 0.5 * 0.4), ("turn", 0.5 * 0.6)):
        k = labels.count(name)
        assert abs(k - n * p) < 4.5 * math.sqrt(n * p * (1 - p)), name


def test_fork_meta_and_geometry():
    cfg = ScenarioConfig(n_tracks=20, fraction_straight=0.0, fork_probability=1.0, seed=3)
    for i in range(cfg.n_tracks):
        it = generate_item(cfg, i)
        assert it.label == "fork"
        assert 8 <= it.meta["fork_index"] <= 22 and it.meta["branch"] in (0, 1)
        assert len(it.geometry.driveable) == 2 and len(it.geometry.centerlines) == 2
        assert len(it.resampled) == 50


def test_config_validation():
    with pytest.raises(ValueError):
        generate(ScenarioConfig(n_tracks=0))
    with pytest.raises(ValueError):
        generate(ScenarioConfig(fraction_straight=1.5))
    with pytest.raises(ValueError):
        generate(ScenarioConfig(speed_range=(5.0, 1.0)))


def _noisy_poly_tracks(rng, n_tracks, sigma, outlier_fraction=0.0):
    tracks = []
    for _ in range(n_tracks):
        t = np.sort(rng.uniform(0, 4900, 50))
        t[0], t[-1] = 0.0, 4900.0
        s = t / 1000.0
        c = rng.normal(0, 1, (4, 2)) * [[20, 20], [8, 8], [0.5, 0.5], [0.05, 0.05]]
        xy = c[0] + s[:, None] * c[1] + s[:, None] ** 2 * c[2] + s[:, None] ** 3 * c[3]
        xy = xy + rng.normal(0, sigma, xy.shape)
        n_out = int(outlier_fraction * 50)
        if n_out:
            idx = rng.choice(50, n_out, replace=False)
            xy[idx] += rng.uniform(5, 20, (n_out, 2)) * rng.choice([-1, 1], (n_out, 2))
        tracks.append(Track(t, xy))
    return tracks


@pytest.mark.parametrize("sigma", [0.05, 0.2])
def test_noise_estimate_recovers_sigma(sigma):
    est = estimate_noise(_noisy_poly_tracks(np.random.default_rng(0), 60, sigma), RansacConfig(inlier_threshold=6 * sigma))
    assert est.sigma_v == pytest.approx(sigma, rel=0.1)
    assert est.inlier_fraction > 0.95


def test_noise_estimate_ignores_outliers():
    tracks = _noisy_poly_tracks(np.random.default_rng(1), 60, 0.1, outlier_fraction=0.1)
    est = estimate_noise(tracks, RansacConfig(inlier_threshold=0.6))
    assert est.sigma_v == pytest.approx(0.1, rel=0.15)
    assert 0.85 < est.inlier_fraction < 0.92


def test_noise_estimate_deterministic():
    tracks = _noisy_poly_tracks(np.random.default_rng(2), 5, 0.1)
    assert estimate_noise(tracks, seed=3) == estimate_noise(tracks, seed=3)


def test_noise_estimate_failures():
    with pytest.raises(FitFailure):
        estimate_noise([])
    with pytest.raises(FitFailure):
        estimate_noise([Track(np.arange(10) * 100.0, np.zeros((10, 2)))])
    rng = np.random.default_rng(0)
    junk = Track(np.arange(50) * 100.0, rng.uniform(-100, 100, (50, 2)))
    with pytest.raises(FitFailure):
        estimate_noise([junk])


def test_build_examples_shapes():
    ds = generate(ScenarioConfig(n_tracks=3, seed=0))
    mc = MapConfig(resolution=2.0)
    ex = build_examples(ds, 20, make_grid(mc.extent, 4), mc)
    assert len(ex) == 3
    e = ex[0]
    assert e.features.shape == (30, 4)
    assert e.rasters().shape == (30, 32, 32, 2)
    assert e.targets.shape == (30, 2) and e.classes.shape == (30,)
    assert set(np.unique(e.rasters())) <= {0, 1}


def test_track_csv_round_trip(tmp_path):
    ds = generate(ScenarioConfig(n_tracks=4, seed=0))
    p = tmp_path / "t.csv"
    write_tracks_csv(p, {it.track_id: it.raw for it in ds.items})
    back = load_tracks(p)
    assert list(back) == [it.track_id for it in ds.items]
    for it in ds.items:
        assert np.array_equal(back[it.track_id].xy, it.raw.xy)
        assert np.array_equal(back[it.track_id].t_ms, it.raw.t_ms)


def test_dataset_round_trip(tmp_path):
    ds = generate(ScenarioConfig(n_tracks=6, seed=5))
    save_dataset(tmp_path / "d", ds)
    back = load_dataset(tmp_path / "d")
    assert back.train == ds.train and back.test == ds.test
    assert back.config == ds.config
    for a, b in zip(ds.items, back.items):
        assert a.label == b.label and a.meta == b.meta
        assert np.array_equal(a.resampled.xy, b.resampled.xy)
        assert all(np.array_equal(x, y) for x, y in zip(a.geometry.driveable, b.geometry.driveable))
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["format_version"] == 1


@pytest.mark.parametrize(
    "body, needle",
    [
        ("track_id,timestamp_ms,x_m,y_m\na,0,0,0\na,100,zz,0\n", "line 3: field x_m='zz'"),
        ("track_id,timestamp_ms,x_m,y_m\na,0,0\n", "line 2: expected 4 fields"),
        ("id,t,x,y\na,0,0,0\n", "line 1"),
        ("track_id,timestamp_ms,x_m,y_m\na,0,0,0\na,0,1,0\n", "track a"),
        ("track_id,timestamp_ms,x_m,y_m\na,0,nan,0\n", "not finite"),
    ],
)
def test_parse_errors(tmp_path, body, needle):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ParseError, match=needle):
        load_tracks(p)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=4, max_size=20))
def test_csv_float_round_trip(tmp_path_factory, xs):
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    n = len(xs) // 2
    tr = Track(np.arange(n) * 100.0, np.array(xs[: 2 * n]).reshape(n, 2))
    write_tracks_csv(p, {"x": tr})
    assert np.array_equal(load_tracks(p)["x"].xy, tr.xy)
