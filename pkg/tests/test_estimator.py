import numpy as np
import pytest
from sklearn.base import clone

from clusterflow.crom import fit_clusters
from clusterflow.estimator import (
    ClusterFlowEstimator,
    SensorSpec,
    Trajectory,
    _Projector,
    affiliate_sensor,
    affiliation_weights,
    average_error,
    build_signal_library,
    default_trajectory,
    estimate_at_point,
    estimate_trajectory,
    knn_u_inf,
    trajectory_error,
    trajectory_errors,
)
from clusterflow.exceptions import (
    OutOfDomainError,
    ParameterError,
    PlacementError,
    UndefinedErrorMetric,
)
from clusterflow.field import Dataset
from clusterflow.inference import InferenceMatrix, build_all_matrices
from clusterflow.synthetic import REDUCED_GRID, GenConfig, generate_dataset

SENSOR = (-1.0, -1.0, 4.5)


class TestWindSpeed:
    def test_toy_example(self):
        s = np.array([4.0, 5.0, 6.0, 7.0, 10.0])
        u = np.array([8.0, 10.0, 12.0, 14.0, 20.0])
        assert knn_u_inf(5.5, s, u, k=4)[0] == pytest.approx(11.0, abs=1e-12)

    def test_ties_by_id(self):
        s = np.array([1.0, 3.0, 3.0])
        u = np.array([5.0, 7.0, 9.0])
        # query 2 is equidistant from all three; the two lowest ids win
        assert knn_u_inf(2.0, s, u, train_ids=[3, 1, 2], k=2)[0] == pytest.approx(8.0)
        assert knn_u_inf(2.0, s, u, train_ids=[1, 2, 3], k=2)[0] == pytest.approx(6.0)

    def test_k_out_of_range(self):
        with pytest.raises(ParameterError):
            knn_u_inf(1.0, [1.0, 2.0], [3.0, 4.0], k=3)


class TestAffiliation:
    def test_toy_weights(self):
        c = np.array([1.0, 2.0, 4.0, 9.0])
        nbrs = np.array([[1, 2, 3], [0, 2, 3], [1, 0, 3], [2, 1, 0]])
        W = affiliation_weights(1.4, c, nbrs, k=2)[0]
        np.testing.assert_allclose(W, [0.6, 0.4, 0.0, 0.0], atol=1e-12)
        W1 = affiliation_weights(1.4, c, nbrs, k=1)[0]
        np.testing.assert_array_equal(W1, [1.0, 0.0, 0.0, 0.0])

    def test_exact_match_takes_all_weight(self):
        c = np.array([1.0, 2.0, 4.0, 9.0])
        nbrs = np.array([[1, 2, 3], [0, 2, 3], [1, 0, 3], [2, 1, 0]])
        np.testing.assert_array_equal(affiliation_weights(4.0, c, nbrs, k=2)[0], [0, 0, 1, 0])

    def test_second_restricted_to_neighbourhood(self):
        # centroid 1 is closest in signal space but not a flow-space neighbour of 0
        c = np.array([0.0, 0.5, 3.0, 4.0, 5.0])
        nbrs = np.array([[2, 3, 4], [0, 2, 3], [3, 4, 0], [2, 4, 0], [3, 2, 0]])
        W = affiliation_weights(0.2, c, nbrs, k=2)[0]
        assert W[1] == 0.0 and W[2] > 0
        np.testing.assert_allclose(W[[0, 2]], [(1 / 0.2) / (1 / 0.2 + 1 / 2.8), (1 / 2.8) / (1 / 0.2 + 1 / 2.8)])

    def test_weights_sum_to_one(self, rng):
        c = rng.normal(size=(10, 3))
        nbrs = np.array([[(i + j) % 10 for j in (1, 2, 3)] for i in range(10)])
        W = affiliation_weights(rng.normal(size=(50, 3)), c, nbrs, k=2)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.count_nonzero(W, axis=1) <= 2)

    def test_affiliate_sensor_ordering(self, small_model, small_data):
        lib = build_signal_library(small_model, small_data[0], SensorSpec.at(SENSOR, small_model.subdomains))
        out = affiliate_sensor(lib.centroid_signals[3] * 1.001, lib, k=2)
        assert out[0][0] == 3 and out[0][1] >= out[-1][1]
        assert sum(w for _, w in out) == pytest.approx(1.0)


class _StubModel:
    K = 3

    def __init__(self, subs):
        self.subdomains = subs

    def sample_centroids(self, sub, points):
        cent = 10.0 * np.eye(3)  # centroid j carries 10 in component j
        return np.repeat(cent[:, None, :], len(points), axis=1)


def test_projection_composition(subs):
    p = np.array([[1.0, 0.2, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 1.0]])
    proj = _Projector(_StubModel(subs), {(1, 2): InferenceMatrix(1, 2, p)}, [[1.0, 0.0, 1.0]], [2])
    vel, q = proj.project(np.array([[0.75, 0.25, 0.0]]), source=1)
    np.testing.assert_allclose(q[0, 0], [0.8, 0.2, 0.0], atol=1e-15)
    np.testing.assert_allclose(vel[0, 0], [8.0, 2.0, 0.0], atol=1e-13)
    # same-subdomain targets skip the matrix
    proj = _Projector(_StubModel(subs), {}, [[-1.0, -1.0, 1.0]], [1])
    vel, q = proj.project(np.array([[0.75, 0.25, 0.0]]), source=1)
    np.testing.assert_allclose(vel[0, 0], [7.5, 2.5, 0.0])


class TestErrors:
    def test_uniform_underestimate(self):
        beta = np.linspace(0, 1, 11)
        truth = np.column_stack([np.sin(3 * beta) + 2, beta, np.ones_like(beta)])
        assert trajectory_errors(0.8 * truth[None], truth[None], beta)[0] == pytest.approx(20.0, abs=1e-12)

    def test_x_component(self):
        beta = np.linspace(0, 1, 5)
        truth = np.tile([1.0, 1.0, 0.0], (5, 1))
        est = truth * [1.0, 0.0, 0.0]
        assert trajectory_errors(est[None], truth[None], beta, "x")[0] == 0.0
        assert trajectory_errors(est[None], truth[None], beta, "all")[0] == pytest.approx(100 / np.sqrt(2))

    def test_zero_truth_is_undefined(self):
        traj = Trajectory(np.zeros((3, 3)) + [-1.0, -1.0, 1.0], np.array([1, 1, 1]))
        with pytest.raises(UndefinedErrorMetric):
            trajectory_error(np.ones((3, 3)), np.zeros((3, 3)), traj)

    def test_quadrature_converges(self, small_model, small_data, subs):
        train, test = small_data
        traj = default_trajectory(subs)
        fine = default_trajectory(subs, n_samples=1001)
        matrices = build_all_matrices(small_model)
        est = ClusterFlowEstimator.from_model(small_model, train, matrices, sensor_location=SENSOR)
        coarse_err, _ = average_error(small_model, matrices, est.library_, est.sensor_, test, traj)
        fine_err, _ = average_error(small_model, matrices, est.library_, est.sensor_, test, fine)
        assert abs(coarse_err - fine_err) < 0.5

    def test_average_matches_per_snapshot(self, small_model, small_matrices, small_data, subs):
        train, test = small_data
        traj = default_trajectory(subs)
        sensor = SensorSpec.at(SENSOR, subs)
        lib = build_signal_library(small_model, train, sensor)
        avg, table = average_error(small_model, small_matrices, lib, sensor, test, traj)
        singles = []
        signals = test.sample(np.array([SENSOR]))[:, 0]
        for snap, signal in zip(test.snapshots, signals):
            e = estimate_trajectory(small_model, small_matrices, lib, signal, traj)
            singles.append(trajectory_error(e, snap, traj))
        np.testing.assert_allclose(table.errors, singles, rtol=1e-12)
        assert avg == pytest.approx(np.mean(singles), rel=1e-12)


class TestEstimation:
    def test_self_reconstruction_k_equals_m(self, subs):
        train, _ = generate_dataset(GenConfig(grid=REDUCED_GRID, m_train=12, n_test=0, seed=5))
        model = fit_clusters(train, subs, K=12, seed=0)
        est = ClusterFlowEstimator.from_model(model, train, knn_affiliation=1, knn_u_inf=1,
                                              sensor_location=SENSOR)
        assert -est.score(train) < 1e-9

    def test_scaling_equivariance(self, small_model, small_data, subs):
        train, test = small_data
        doubled = Dataset(train.grid, train.ids, 2 * train.u_inf, train.alpha, 2 * train.values)
        model2 = fit_clusters(doubled, subs, K=small_model.K, seed=small_model.seed)
        a = ClusterFlowEstimator.from_model(small_model, train, sensor_location=SENSOR)
        b = ClusterFlowEstimator.from_model(model2, doubled, sensor_location=SENSOR)
        signals = test.sample(np.array([SENSOR]))[:, 0]
        np.testing.assert_allclose(b.predict(2 * signals), 2 * a.predict(signals), rtol=1e-9, atol=1e-9)

    def test_estimate_at_point(self, small_model, small_matrices, small_data, subs):
        train, test = small_data
        sensor = SensorSpec.at(SENSOR, subs)
        lib = build_signal_library(small_model, train, sensor)
        signal = test.sample(np.array([SENSOR]))[0, 0]
        u, q = estimate_at_point(small_model, small_matrices, lib, sensor, signal, (1.0, 0.0, 1.0))
        assert u.shape == (3,) and q.shape == (small_model.K,)
        assert q.sum() == pytest.approx(1.0)
        with pytest.raises(OutOfDomainError):
            estimate_at_point(small_model, small_matrices, lib, sensor, signal, (3.5, 3.5, 1.0))
        other = SensorSpec.at((1.0, 0.0, 3.5), subs)
        with pytest.raises(PlacementError):
            estimate_at_point(small_model, small_matrices, lib, other, signal, (1.0, 0.0, 1.0))

    def test_sensor_outside_subdomain(self, small_model, small_data):
        with pytest.raises(PlacementError):
            build_signal_library(small_model, small_data[0], SensorSpec((3.5, 3.5, 1.0), 1))


class TestSklearnAPI:
    def test_fit_predict(self, small_data):
        train, test = small_data
        est = ClusterFlowEstimator(n_clusters=6, sensor_location=SENSOR, random_state=2)
        assert clone(est).get_params() == est.get_params()
        est.fit(train)
        signals = test.sample(np.array([SENSOR]))[:, 0]
        pred = est.predict(signals)
        assert pred.shape == (len(test), 101, 3)
        dist = est.predict_distribution(signals)
        np.testing.assert_allclose(dist.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(est.estimate_u_inf(signals) > 0)
        assert est.score(test) < 0

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ClusterFlowEstimator().predict(np.ones((1, 3)))
