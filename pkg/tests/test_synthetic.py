import numpy as np
import pytest

from clusterflow.field import OperatingCondition, normalize_snapshot, sample_velocity
from clusterflow.synthetic import (
    DEFAULT_BUILDINGS,
    REDUCED_GRID,
    GenConfig,
    building_mask,
    generate_dataset,
    generate_snapshot,
    wake_deficit,
)
from clusterflow.exceptions import ConfigError, DatasetError


def test_reynolds_independent_when_eps_zero():
    cfg = GenConfig(grid=REDUCED_GRID)
    a = normalize_snapshot(generate_snapshot(OperatingCondition(8.0, 30.0), cfg))
    b = normalize_snapshot(generate_snapshot(OperatingCondition(16.0, 30.0), cfg))
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-12)


def test_reynolds_term_breaks_invariance():
    cfg = GenConfig(grid=REDUCED_GRID, reynolds_eps=0.02)
    a = normalize_snapshot(generate_snapshot(OperatingCondition(8.0, 30.0), cfg))
    b = normalize_snapshot(generate_snapshot(OperatingCondition(16.0, 30.0), cfg))
    assert np.max(np.abs(a.values - b.values)) > 1e-3


def test_free_stream_upstream():
    cfg = GenConfig(grid=REDUCED_GRID)
    s = generate_snapshot(OperatingCondition(12.0, 0.0), cfg)
    u = sample_velocity(s.field, (-4.0, 0.0, 1.0))
    np.testing.assert_allclose(u, (12.0, 0.0, 0.0), atol=1e-6 * 12.0)


def test_inside_building_is_zero():
    cfg = GenConfig(grid=REDUCED_GRID, reynolds_eps=0.02, noise_sigma=0.01)
    s = generate_snapshot(OperatingCondition(10.0, 123.0), cfg, snapshot_id=4)
    np.testing.assert_array_equal(sample_velocity(s.field, (-1.0, -1.0, 1.0)), 0.0)
    solid = building_mask(REDUCED_GRID.node_coords(), cfg.buildings)
    assert solid.any() and np.all(s.field.values[solid] == 0.0)


@pytest.mark.parametrize("alpha", [0.0, 45.0, 200.0])
def test_wake_monotone_downstream(alpha):
    b = DEFAULT_BUILDINGS[0]
    a = np.deg2rad(alpha)
    e = np.array([np.cos(a), np.sin(a)])
    start = np.asarray(b.center_xy) + 0.5 * b.side * (abs(e[0]) + abs(e[1])) * e
    s = np.linspace(0.0, 8.0, 200)
    xy = start + s[:, None] * e
    pts = np.column_stack([xy, np.full(len(s), 0.5 * b.height)])
    d = wake_deficit(pts, b, alpha)
    assert d[0] > 0.5
    assert np.all(np.diff(d) <= 0)


def test_default_dataset_sizes_and_ranges():
    train, test = generate_dataset(GenConfig(grid=REDUCED_GRID))
    assert len(train) == 800 and len(test) == 200
    for ds in (train, test):
        assert np.all((ds.u_inf >= 7.9) & (ds.u_inf <= 20.7))
        assert np.all((ds.alpha >= 0.0) & (ds.alpha < 360.0))
    assert train.ids.tolist() == list(range(1, 801))
    assert test.ids[0] == 801


def test_deterministic_and_seed_sensitive(tmp_path):
    from clusterflow.field import write_dataset
    cfg = GenConfig(grid=REDUCED_GRID, m_train=5, n_test=2, noise_sigma=0.01, seed=11)
    a, _ = generate_dataset(cfg)
    b, _ = generate_dataset(cfg)
    write_dataset(a, tmp_path / "a")
    write_dataset(b, tmp_path / "b")
    for f in sorted((tmp_path / "a" / "fields").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "fields" / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    c, _ = generate_dataset(cfg.with_(seed=12))
    assert not np.array_equal(a.values, c.values)


def test_parallel_generation_matches_serial():
    cfg = GenConfig(grid=REDUCED_GRID, m_train=6, n_test=0, noise_sigma=0.02)
    a, _ = generate_dataset(cfg)
    b, _ = generate_dataset(cfg, n_jobs=3)
    np.testing.assert_array_equal(a.values, b.values)


def test_noise_substream_keyed_by_id():
    cfg = GenConfig(grid=REDUCED_GRID, noise_sigma=0.02)
    mu = OperatingCondition(10.0, 10.0)
    a = generate_snapshot(mu, cfg, snapshot_id=3).field.values
    b = generate_snapshot(mu, cfg, snapshot_id=3).field.values
    c = generate_snapshot(mu, cfg, snapshot_id=4).field.values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_single_snapshot_and_empty_test():
    train, test = generate_dataset(GenConfig(grid=REDUCED_GRID, m_train=1, n_test=0))
    assert len(train) == 1 and len(test) == 0
    with pytest.raises(DatasetError):
        test.require_nonempty()


@pytest.mark.parametrize("kwargs", [dict(u_range=(0.0, 5.0)), dict(m_train=0),
                                    dict(reynolds_eps=-1.0), dict(noise_sigma=-0.1)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        GenConfig(**kwargs)


def test_config_dict_roundtrip():
    cfg = GenConfig(grid=REDUCED_GRID, m_train=7, reynolds_eps=0.02)
    assert GenConfig.from_dict(cfg.to_dict()) == cfg
