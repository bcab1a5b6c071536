"""Online estimation: sensor signal in, velocities along a trajectory out.

The chain per signal is: incoming-wind speed by kNN over the training
signals, normalization, sensor cluster affiliation (one centroid, or two
with the second searched among the flow-space neighbours of the first),
propagation through the inference matrix into the target subdomain, and
the expectation of the target centroids under that distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .crom import ClusterModel, fit_clusters
from .exceptions import (
    DatasetError,
    OutOfDomainError,
    ParameterError,
    PlacementError,
    UndefinedErrorMetric,
)
from .field import Dataset, Snapshot
from .inference import InferenceMatrix, build_all_matrices, entropy
from .partition import Subdomain, default_subdomains, locate, locate_many
from ._validation import check_choice, check_vectors

N_NEIGHBORS = 3
EXACT_MATCH_RTOL = 1e-12


@dataclass(frozen=True)
class SensorSpec:
    location: tuple[float, float, float]
    sub_index: int

    @classmethod
    def at(cls, location, subs: Sequence[Subdomain]) -> "SensorSpec":
        location = tuple(float(v) for v in location)
        idx = locate(location, subs)
        if idx is None:
            raise PlacementError(f"sensor at {location} lies outside every subdomain")
        return cls(location, idx)


@dataclass(frozen=True, eq=False)
class SignalLibrary:
    """Training and centroid signals at one sensor location.

    ``training_signals`` are dimensional, ``centroid_signals`` dimensionless;
    ``neighbors[i]`` lists the flow-space neighbours of centroid ``i``.
    """

    sensor: SensorSpec
    training_signals: np.ndarray
    training_u_inf: np.ndarray
    training_ids: np.ndarray
    centroid_signals: np.ndarray
    neighbors: np.ndarray

    @property
    def M(self) -> int:
        return len(self.training_signals)

    @property
    def K(self) -> int:
        return len(self.centroid_signals)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Query path sampled at uniform ``beta`` in [0, 1]."""

    points: np.ndarray
    targets: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.points)

    @property
    def beta(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_samples)

    @classmethod
    def from_points(cls, points, subs: Sequence[Subdomain]) -> "Trajectory":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise ParameterError("a trajectory needs at least 2 points with 3 coordinates")
        targets = locate_many(pts, subs)
        if np.any(targets == 0):
            bad = pts[np.argmax(targets == 0)]
            raise OutOfDomainError(f"trajectory point {bad.tolist()} lies outside every subdomain")
        pts.flags.writeable = False
        return cls(pts, targets)

    @classmethod
    def line(cls, start, end, n_samples: int, subs: Sequence[Subdomain]) -> "Trajectory":
        beta = np.linspace(0.0, 1.0, int(n_samples))[:, None]
        start = np.asarray(start, dtype=float)
        end = np.asarray(end, dtype=float)
        return cls.from_points(start + beta * (end - start), subs)


def default_trajectory(subs: Sequence[Subdomain], n_samples: int = 101) -> Trajectory:
    """Straight flight along x at y = 0, height 1 L, spanning the subdomains."""
    return Trajectory.line((-2.0, 0.0, 1.0), (2.0, 0.0, 1.0), n_samples, subs)


@dataclass(frozen=True, eq=False)
class Estimate:
    """Estimated velocities (dimensional) and target-cluster distributions per point."""

    velocity: np.ndarray
    distribution: np.ndarray
    targets: np.ndarray
    u_inf_hat: float

    @property
    def entropy(self) -> np.ndarray:
        return entropy(self.distribution)


def build_signal_library(model: ClusterModel, train: Dataset, sensor: SensorSpec) -> SignalLibrary:
    train.require_nonempty()
    if sensor.sub_index not in model.clusters:
        raise PlacementError(f"sensor subdomain {sensor.sub_index} is not part of the model")
    if locate(sensor.location, model.subdomains) != sensor.sub_index:
        raise PlacementError(f"sensor at {sensor.location} is not inside subdomain {sensor.sub_index}")
    loc = np.asarray(sensor.location)[None, :]
    train_signals = train.sample(loc)[:, 0, :]
    centroid_signals = model.sample_centroids(sensor.sub_index, loc)[:, 0, :]
    return SignalLibrary(sensor, train_signals, train.u_inf.copy(), train.ids.copy(),
                         centroid_signals, model[sensor.sub_index].neighbors(N_NEIGHBORS))


# -- incoming wind ------------------------------------------------------------

def knn_u_inf(signals, train_signals, train_u_inf, train_ids=None, k: int = 4) -> np.ndarray:
    """Mean wind speed of the ``k`` nearest training signals, per query signal."""
    S = np.asarray(signals, dtype=float)
    T = np.asarray(train_signals, dtype=float)
    if S.ndim == 0:
        S = S.reshape(1, 1)
    elif S.ndim == 1:
        S = S[:, None] if T.ndim == 1 else S[None, :]
    if T.ndim == 1:
        T = T[:, None]
    if len(T) == 0:
        raise DatasetError("signal library is empty")
    k = int(k)
    if not 1 <= k <= len(T):
        raise ParameterError(f"k must lie in [1, {len(T)}], got {k}")
    ids = np.arange(len(T)) if train_ids is None else np.asarray(train_ids)
    diff = S[:, None, :] - T[None, :, :]
    d = np.einsum("nmc,nmc->nm", diff, diff)
    order = np.lexsort((np.broadcast_to(ids, d.shape), d), axis=-1)[:, :k]
    return np.asarray(train_u_inf, dtype=float)[order].mean(axis=1)


def estimate_u_inf(signal, lib: SignalLibrary, k: int = 4) -> float:
    s = check_vectors(signal)
    return float(knn_u_inf(s, lib.training_signals, lib.training_u_inf, lib.training_ids, k)[0])


# -- sensor affiliation ---------------------------------------------------------

def affiliation_weights(signals_plus, centroid_signals, neighbors, k: int = 2) -> np.ndarray:
    """Source-cluster weights ``(n, K)`` for normalized signals.

    ``k = 1`` puts unit weight on the centroid with the nearest signal.
    ``k = 2`` adds the nearest-signal centroid among the flow-space
    neighbours of the first and splits the weight by inverse signal
    distance, unless the first match is exact.
    """
    check_choice(k, (1, 2), "k")
    C = np.asarray(centroid_signals, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    S = np.asarray(signals_plus, dtype=float)
    if S.ndim == 0:
        S = S.reshape(1, 1)
    elif S.ndim == 1:
        S = S[:, None] if C.shape[1] == 1 else S[None, :]
    n, K = len(S), len(C)
    diff = S[:, None, :] - C[None, :, :]
    d = np.sqrt(np.einsum("nkc,nkc->nk", diff, diff))
    first = np.argmin(d, axis=1)
    rows = np.arange(n)
    W = np.zeros((n, K))
    if k == 1:
        W[rows, first] = 1.0
        return W
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if K < N_NEIGHBORS + 1 or neighbors.shape[1] < 1:
        raise ParameterError(f"k=2 needs at least {N_NEIGHBORS + 1} clusters, got K={K}")
    chi = neighbors[first]
    d_chi = d[rows[:, None], chi]
    second = chi[rows, np.argmin(d_chi, axis=1)]
    d1 = d[rows, first]
    d2 = d[rows, second]
    exact = d1 <= EXACT_MATCH_RTOL * np.linalg.norm(C[first], axis=1)
    inv1 = np.ones(n)
    inv2 = np.zeros(n)
    inexact = ~exact
    # d2 >= d1 > 0 whenever the first match is inexact.
    inv1[inexact] = 1.0 / d1[inexact]
    inv2[inexact] = 1.0 / d2[inexact]
    total = inv1 + inv2
    W[rows, first] = inv1 / total
    np.add.at(W, (rows, second), inv2 / total)
    return W


def affiliate_sensor(signal_plus, lib: SignalLibrary, model: ClusterModel | None = None,
                     k: int = 2) -> list[tuple[int, float]]:
    """Weighted source clusters for one normalized signal, largest weight first."""
    check_choice(k, (1, 2), "k")
    neighbors = lib.neighbors if model is None else model[lib.sensor.sub_index].neighbors(N_NEIGHBORS)
    W = affiliation_weights(check_vectors(signal_plus), lib.centroid_signals, neighbors, k)[0]
    nz = np.nonzero(W)[0]
    order = nz[np.argsort(-W[nz], kind="stable")]
    return [(int(i), float(W[i])) for i in order]


# -- estimation -----------------------------------------------------------------

class _Projector:
    """Target-side quantities for a fixed set of query points."""

    def __init__(self, model: ClusterModel, matrices, points, targets=None):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if targets is None:
            targets = locate_many(self.points, model.subdomains)
            if np.any(targets == 0):
                bad = self.points[np.argmax(targets == 0)]
                raise OutOfDomainError(f"point {bad.tolist()} lies outside every subdomain")
        self.targets = np.asarray(targets)
        self.K = model.K
        self.groups = {}
        for t in np.unique(self.targets):
            pos = np.nonzero(self.targets == t)[0]
            self.groups[int(t)] = (pos, model.sample_centroids(int(t), self.points[pos]))
        self.matrices = matrices

    def matrix(self, source: int, target: int) -> np.ndarray | None:
        if source == target:
            return None
        try:
            return self.matrices[(source, target)].p
        except KeyError:
            raise ParameterError(f"no inference matrix for {source} -> {target}") from None

    def project(self, W, source: int):
        """Dimensionless expectations ``(n, P, 3)`` and distributions ``(n, P, K)``."""
        n = len(W)
        P = len(self.points)
        vel = np.empty((n, P, 3))
        q = np.empty((n, P, self.K))
        for t, (pos, cent) in self.groups.items():
            mat = self.matrix(source, t)
            qt = W if mat is None else W @ mat.T
            vel[:, pos, :] = np.einsum("nk,kpd->npd", qt, cent)
            q[:, pos, :] = qt[:, None, :]
        return vel, q


def _estimate_batch(signals, lib: SignalLibrary, projector: _Projector, k: int, k_uinf: int):
    u_hat = knn_u_inf(signals, lib.training_signals, lib.training_u_inf, lib.training_ids, k_uinf)
    W = affiliation_weights(signals / u_hat[:, None], lib.centroid_signals, lib.neighbors, k)
    vel_plus, q = projector.project(W, lib.sensor.sub_index)
    return vel_plus * u_hat[:, None, None], q, u_hat


def estimate_points(model: ClusterModel, matrices, lib: SignalLibrary, signal, points,
                    k: int = 2, k_uinf: int = 4) -> Estimate:
    """Estimate velocities at arbitrary points (each inside some subdomain) from one signal."""
    s = check_vectors(signal)
    if len(s) != 1:
        raise ParameterError("estimate_points takes a single signal")
    proj = _Projector(model, matrices, points)
    vel, q, u_hat = _estimate_batch(s, lib, proj, k, k_uinf)
    return Estimate(vel[0], q[0], proj.targets, float(u_hat[0]))


def estimate_at_point(model: ClusterModel, matrices, lib: SignalLibrary, sensor: SensorSpec,
                      signal, point, k: int = 2, k_uinf: int = 4):
    """Velocity (dimensional) and target-cluster distribution at one point."""
    if sensor != lib.sensor:
        raise PlacementError("signal library was built for a different sensor")
    est = estimate_points(model, matrices, lib, signal, np.asarray(point, dtype=float)[None, :],
                          k=k, k_uinf=k_uinf)
    return est.velocity[0], est.distribution[0]


def estimate_trajectory(model: ClusterModel, matrices, lib: SignalLibrary, signal,
                        traj: Trajectory, k: int = 2, k_uinf: int = 4) -> Estimate:
    return estimate_points(model, matrices, lib, signal, traj.points, k=k, k_uinf=k_uinf)


# -- errors ---------------------------------------------------------------------

def _component_mask(component: str) -> np.ndarray:
    check_choice(component, ("all", "x"), "component")
    return np.array([1.0, 1.0, 1.0]) if component == "all" else np.array([1.0, 0.0, 0.0])


def trajectory_errors(estimates, truth, beta, component: str = "all") -> np.ndarray:
    """Relative L2 error (percent) along the trajectory for a batch ``(n, P, 3)``.

    Entries whose reference is identically zero are ``nan``.
    """
    mask = _component_mask(component)
    est = np.asarray(estimates, dtype=float) * mask
    ref = np.asarray(truth, dtype=float) * mask
    num = trapezoid(np.sum((est - ref) ** 2, axis=-1), beta, axis=-1)
    den = trapezoid(np.sum(ref ** 2, axis=-1), beta, axis=-1)
    out = np.full(np.shape(num), np.nan)
    ok = den > 0
    out[ok] = 100.0 * np.sqrt(num[ok] / den[ok])
    return out


def trajectory_error(estimate, truth, traj: Trajectory, component: str = "all") -> float:
    """Estimation error (percent) of one snapshot along ``traj``.

    ``truth`` is a :class:`Snapshot` or an array of true velocities at the
    trajectory points.
    """
    vel = estimate.velocity if isinstance(estimate, Estimate) else np.asarray(estimate, dtype=float)
    if isinstance(truth, Snapshot):
        ds = Dataset(truth.field.grid, [truth.id], [truth.mu.u_inf], [truth.mu.alpha],
                     truth.field.values[None])
        ref = ds.sample(traj.points)[0]
    else:
        ref = np.asarray(truth, dtype=float)
    if vel.shape != ref.shape or ref.shape != (traj.n_samples, 3):
        raise ParameterError("estimate and truth must be sampled at the trajectory points")
    err = trajectory_errors(vel[None], ref[None], traj.beta, component)[0]
    if np.isnan(err):
        raise UndefinedErrorMetric("true velocity vanishes along the whole trajectory")
    return float(err)


@dataclass(frozen=True, eq=False)
class ErrorTable:
    """Per-snapshot estimation errors; ``nan`` marks undefined cases."""

    ids: np.ndarray
    u_inf: np.ndarray
    alpha: np.ndarray
    errors: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.errors)

    @property
    def average(self) -> float:
        return float(np.mean(self.errors[self.valid]))

    @property
    def n_failed(self) -> int:
        return int((~self.valid).sum())


class TrajectoryEvaluator:
    """Reusable evaluation of many sensors against one dataset and trajectory.

    Truth along the trajectory and target-centroid samples are computed once;
    each call then only needs the sensor's signal library.
    """

    def __init__(self, model: ClusterModel, matrices, data: Dataset, traj: Trajectory,
                 k: int = 2, k_uinf: int = 4, component: str = "all"):
        data.require_nonempty()
        if data.grid != model.grid:
            raise DatasetError("dataset is not on the model grid")
        check_choice(k, (1, 2), "k")
        _component_mask(component)
        self.model = model
        self.data = data
        self.traj = traj
        self.k = k
        self.k_uinf = k_uinf
        self.component = component
        self.projector = _Projector(model, matrices, traj.points, traj.targets)
        self.truth = data.sample(traj.points)

    def signals_at(self, sensor: SensorSpec) -> np.ndarray:
        return self.data.sample(np.asarray(sensor.location)[None, :])[:, 0, :]

    def estimate(self, lib: SignalLibrary, signals=None):
        if signals is None:
            signals = self.signals_at(lib.sensor)
        return _estimate_batch(signals, lib, self.projector, self.k, self.k_uinf)

    def table(self, lib: SignalLibrary, signals=None) -> ErrorTable:
        vel, _, _ = self.estimate(lib, signals)
        errs = trajectory_errors(vel, self.truth, self.traj.beta, self.component)
        if np.all(np.isnan(errs)):
            raise UndefinedErrorMetric("estimation error undefined for every snapshot")
        return ErrorTable(self.data.ids.copy(), self.data.u_inf.copy(), self.data.alpha.copy(), errs)


def average_error(model: ClusterModel, matrices, lib: SignalLibrary, sensor: SensorSpec,
                  data: Dataset, traj: Trajectory, k: int = 2, k_uinf: int = 4,
                  component: str = "all"):
    """Mean trajectory error over ``data``; returns ``(average, ErrorTable)``."""
    if sensor != lib.sensor:
        raise PlacementError("signal library was built for a different sensor")
    table = TrajectoryEvaluator(model, matrices, data, traj, k, k_uinf, component).table(lib)
    return table.average, table


class ClusterFlowEstimator(RegressorMixin, BaseEstimator):
    """Sensor-to-trajectory velocity estimator with a scikit-learn interface.

    ``fit`` takes a training :class:`~clusterflow.field.Dataset`; ``predict``
    takes dimensional sensor signals of shape ``(n, 3)`` and returns
    dimensional velocities of shape ``(n, n_points, 3)`` at the query points.

    Parameters
    ----------
    n_clusters : int, default=20
    knn_affiliation : {1, 2}, default=2
        Number of centroids combined in the sensor affiliation.
    knn_u_inf : int, default=4
        Neighbours averaged for the incoming-wind estimate.
    sensor_location : array-like of shape (3,), default=None
        Sensor position in units of L. ``None`` uses the centre top of
        subdomain 1 below its lid.
    points : array-like of shape (n_points, 3), default=None
        Query points. ``None`` uses the default straight trajectory.
    subdomains : sequence of Subdomain, default=None
    random_state : int, default=0
        Seed of the k-means++ initialization.
    component : {"all", "x"}, default="all"
        Velocity components scored by :meth:`score`.
    """

    def __init__(self, n_clusters=20, knn_affiliation=2, knn_u_inf=4, sensor_location=None,
                 points=None, subdomains=None, random_state=0, component="all"):
        self.n_clusters = n_clusters
        self.knn_affiliation = knn_affiliation
        self.knn_u_inf = knn_u_inf
        self.sensor_location = sensor_location
        self.points = points
        self.subdomains = subdomains
        self.random_state = random_state
        self.component = component

    def _subs(self):
        return tuple(self.subdomains) if self.subdomains is not None else default_subdomains(1.0)

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise DatasetError("ClusterFlowEstimator.fit expects a Dataset")
        check_choice(self.knn_affiliation, (1, 2), "knn_affiliation")
        subs = self._subs()
        model = fit_clusters(X, subs, K=self.n_clusters, seed=self.random_state)
        return self._attach(model, build_all_matrices(model), X)

    def _attach(self, model, matrices, train):
        subs = model.subdomains
        if self.points is None:
            self.trajectory_ = default_trajectory(subs)
        else:
            self.trajectory_ = Trajectory.from_points(self.points, subs)
        loc = self.sensor_location
        if loc is None:
            top = subs[0]
            loc = (*top.center_xy, 0.9 * top.height)
        self.sensor_ = SensorSpec.at(loc, subs)
        self.model_ = model
        self.matrices_ = matrices
        self.library_ = build_signal_library(model, train, self.sensor_)
        self._projector = _Projector(model, matrices, self.trajectory_.points, self.trajectory_.targets)
        return self

    @classmethod
    def from_model(cls, model: ClusterModel, train: Dataset, matrices=None, **params):
        """Wrap an already fitted cluster model without refitting."""
        est = cls(n_clusters=model.K, subdomains=model.subdomains, random_state=model.seed, **params)
        return est._attach(model, matrices or build_all_matrices(model), train)

    def _run(self, X):
        check_is_fitted(self, "model_")
        signals = check_vectors(X)
        return _estimate_batch(signals, self.library_, self._projector,
                               self.knn_affiliation, self.knn_u_inf)

    def predict(self, X):
        return self._run(X)[0]

    def predict_distribution(self, X):
        """Target-cluster distributions ``(n, n_points, K)``."""
        return self._run(X)[1]

    def estimate_u_inf(self, X):
        return self._run(X)[2]

    def score(self, X: Dataset, y=None, sample_weight=None):
        """Negative mean trajectory error (percent) over a dataset."""
        check_is_fitted(self, "model_")
        ev = TrajectoryEvaluator(self.model_, self.matrices_, X, self.trajectory_,
                                 self.knn_affiliation, self.knn_u_inf, self.component)
        return -ev.table(self.library_).average
