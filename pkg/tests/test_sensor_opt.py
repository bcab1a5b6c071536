import numpy as np
import pytest

from clusterflow.estimator import average_error, build_signal_library, default_trajectory
from clusterflow.exceptions import PlacementError
from clusterflow.sensor_opt import (
    OptimizationReport,
    build_candidate_grid,
    optimize_sensor,
    read_summary,
)
from clusterflow.synthetic import BuildingSpec


def test_candidate_grid_layout(subs):
    cands = build_candidate_grid(subs=subs)
    assert len(cands) == 75
    assert [c.id for c in cands] == list(range(1, 76))
    for b, sub in enumerate((1, 2, 3)):
        block = cands.candidates[25 * b:25 * (b + 1)]
        assert all(c.sensor.sub_index == sub for c in block)
        assert [c.local_id for c in block] == list(range(1, 26))
    zs = sorted({round(c.sensor.location[2], 12) for c in cands.candidates[:25]})
    np.testing.assert_allclose(zs, [4.2, 4.3, 4.4, 4.5, 4.6])
    np.testing.assert_allclose(cands.by_id(1).sensor.location, (-1.5, -1.5, 4.2))
    np.testing.assert_allclose(cands.by_id(3).sensor.location, (-1.0, -1.0, 4.2))
    np.testing.assert_allclose(cands.by_id(24).sensor.location, (-1.5, -0.5, 4.6))
    np.testing.assert_allclose(cands.by_id(26).sensor.location, (0.5, -0.5, 3.2))
    with pytest.raises(KeyError):
        cands.by_id(76)


def test_candidate_outside_subdomain(subs):
    tall = (BuildingSpec((-1.0, -1.0), 4.9), BuildingSpec((1.0, 0.0), 3.0), BuildingSpec((-1.0, 1.0), 2.0))
    with pytest.raises(PlacementError):
        build_candidate_grid(tall, subs)


def test_argmin_and_ties():
    locs = np.zeros((4, 3))
    rep = OptimizationReport(np.arange(1, 5), locs, np.ones(4, int), np.array([3.0, 1.0, 1.0, 2.0]))
    assert rep.best_id == 2 and rep.best_error == 1.0
    rep = OptimizationReport(np.arange(1, 4), locs[:3], np.ones(3, int), np.array([np.nan, 5.0, 4.0]))
    assert rep.best_id == 3


@pytest.fixture(scope="module")
def sweep(small_model, small_matrices, small_data, subs):
    train, _ = small_data
    cands = build_candidate_grid(subs=subs)
    traj = default_trajectory(subs)
    return cands, traj, optimize_sensor(small_model, small_matrices, train, cands, traj)


def test_sweep_consistent_with_direct_evaluation(sweep, small_model, small_matrices, small_data):
    cands, traj, rep = sweep
    train, _ = small_data
    assert len(rep.errors) == 75 and np.all(np.isfinite(rep.errors))
    assert rep.best_error == rep.errors.min()
    for cid in (rep.best_id, 1, 40, 75):
        sensor = cands.by_id(cid).sensor
        lib = build_signal_library(small_model, train, sensor)
        direct, _ = average_error(small_model, small_matrices, lib, sensor, train, traj)
        assert abs(direct - rep.errors[cid - 1]) <= 1e-12


def test_parallel_equals_serial(sweep, small_model, small_matrices, small_data):
    cands, traj, rep = sweep
    par = optimize_sensor(small_model, small_matrices, small_data[0], cands, traj, n_jobs=2)
    np.testing.assert_array_equal(par.errors, rep.errors)
    assert par.best_id == rep.best_id


def test_report_files(sweep, tmp_path):
    _, _, rep = sweep
    table, summary = rep.write(tmp_path)
    lines = table.read_text().splitlines()
    assert lines[0] == "id,x,y,z,subdomain,E_train_percent" and len(lines) == 76
    data = read_summary(tmp_path)
    assert data["best_id"] == rep.best_id and data["n_candidates"] == 75
    assert data["best_E_train_percent"] == rep.best_error
