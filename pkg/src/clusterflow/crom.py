"""Per-subdomain k-means coarse-graining of normalized snapshots.

Each subdomain is clustered independently on the stacked three-component
restriction of the normalized fields. Distances are the volume-weighted L2
norm over the subdomain nodes; since the cell volume is constant on a
regular grid, Lloyd iterations run on raw Euclidean distances and the
weight only enters reported norms.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .exceptions import DatasetError, InfeasibleError, ModelInvariantError, ParameterError
from .field import FIELD_DTYPE, Dataset, GridSpec, VelocityField, interpolation_weights
from .partition import Subdomain, subdomain_nodes
from ._validation import check_samples

logger = logging.getLogger(__name__)


def _sq_distances(X, centers, x_sq=None):
    """Squared Euclidean distances via the dot-product expansion, clipped at zero."""
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", X, X)
    c_sq = np.einsum("ij,ij->i", centers, centers)
    d = x_sq[:, None] - 2.0 * (X @ centers.T) + c_sq[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _exact_sq_distances(X, centers, chunk=64):
    """Squared distances from explicit differences; slower but tie-exact."""
    out = np.empty((len(X), len(centers)))
    for start in range(0, len(X), chunk):
        diff = X[start:start + chunk, None, :] - centers[None, :, :]
        out[start:start + chunk] = np.einsum("ikd,ikd->ik", diff, diff)
    return out


def kmeans_plusplus(X, n_clusters, random_state):
    """k-means++ seeding by D^2 sampling; returns indices of the chosen rows."""
    rng = check_random_state(random_state)
    n = len(X)
    chosen = [int(rng.randint(n))]
    closest = _exact_sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            nxt = int(rng.choice(n, p=probs))
        else:
            # Remaining points coincide with chosen centers; pick any unchosen row.
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.randint(len(free))])
        chosen.append(nxt)
        np.minimum(closest, _exact_sq_distances(X, X[[nxt]])[:, 0], out=closest)
    return np.asarray(chosen)


class SubdomainKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Lloyd's k-means with k-means++ seeding and deterministic empty-cluster repair.

    Parameters
    ----------
    n_clusters : int, default=20
        Number of centroids ``K``.
    max_iter : int, default=300
        Iteration cap.
    tol : float, default=1e-8
        Convergence threshold on the relative Frobenius movement of the
        centroid matrix.
    random_state : int, RandomState instance or None, default=None
        Seed for the k-means++ draw.

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    labels_ : ndarray of shape (n_samples,)
    inertia_ : float
        Sum of squared distances of samples to their assigned centroid.
    inertia_history_ : list of float
        Inertia after every update step; non-increasing.
    n_iter_ : int
    """

    def __init__(self, n_clusters=20, max_iter=300, tol=1e-8, random_state=None):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _inertia(self, X, centers, labels):
        diff = X - centers[labels]
        return float(np.einsum("ij,ij->", diff, diff))

    @staticmethod
    def _means(X, labels, k):
        centers = np.zeros((k, X.shape[1]))
        counts = np.bincount(labels, minlength=k)
        # np.add.at walks samples in index order, so the reduction order is fixed.
        np.add.at(centers, labels, X)
        nonzero = counts > 0
        centers[nonzero] /= counts[nonzero, None]
        return centers, counts

    @staticmethod
    def _repair_empty(X, centers, labels, k):
        """Move the farthest member of the largest cluster into each empty cluster."""
        counts = np.bincount(labels, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            largest = int(np.argmax(counts))
            members = np.nonzero(labels == largest)[0]
            diff = X[members] - centers[largest]
            far = members[int(np.argmax(np.einsum("ij,ij->i", diff, diff)))]
            labels[far] = empty
            counts[largest] -= 1
            counts[empty] += 1
        return labels

    def fit(self, X, y=None):
        X = check_samples(X)
        k = int(self.n_clusters)
        if k < 1:
            raise ParameterError(f"n_clusters must be >= 1, got {k}")
        if k > len(X):
            raise InfeasibleError(f"n_clusters={k} exceeds the number of samples {len(X)}")
        x_sq = np.einsum("ij,ij->i", X, X)
        centers = X[kmeans_plusplus(X, k, self.random_state)].copy()
        labels = None
        history = []
        n_iter = 0
        for n_iter in range(1, int(self.max_iter) + 1):
            new_labels = np.argmin(_sq_distances(X, centers, x_sq), axis=1)
            new_labels = self._repair_empty(X, centers, new_labels, k)
            new_centers, _ = self._means(X, new_labels, k)
            history.append(self._inertia(X, new_centers, new_labels))
            scale = np.linalg.norm(centers)
            shift = np.linalg.norm(new_centers - centers)
            stable = labels is not None and np.array_equal(labels, new_labels)
            centers, labels = new_centers, new_labels
            if stable or shift <= self.tol * max(scale, np.finfo(float).tiny):
                break
        # Final assignment with exact distances so that labels_ is re-checkable.
        final = np.argmin(_exact_sq_distances(X, centers), axis=1)
        if np.all(np.bincount(final, minlength=k) > 0):
            labels = final
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.inertia_ = self._inertia(X, centers, labels)
        self.inertia_history_ = history
        self.n_iter_ = n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_samples(X, n_features=self.cluster_centers_.shape[1])
        return np.argmin(_exact_sq_distances(X, self.cluster_centers_), axis=1)

    def transform(self, X):
        """Euclidean distance of every sample to every centroid."""
        check_is_fitted(self, "cluster_centers_")
        X = check_samples(X, n_features=self.cluster_centers_.shape[1])
        return np.sqrt(_exact_sq_distances(X, self.cluster_centers_))


@dataclass(frozen=True, eq=False)
class SubdomainClusters:
    """Clustering of one subdomain.

    ``centroids`` has shape ``(K, n_nodes, 3)`` over the restricted nodes
    ``nodes``; ``labels[m]`` is the affiliation of training position ``m``.
    """

    subdomain: Subdomain
    nodes: np.ndarray
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: tuple = ()

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    def centroid_distances(self, cell_volume: float) -> np.ndarray:
        flat = self.centroids.reshape(self.K, -1)
        return np.sqrt(_exact_sq_distances(flat, flat) * cell_volume)

    def neighbors(self, n_neighbors: int = 3) -> np.ndarray:
        """For each centroid, the ``n_neighbors`` nearest other centroids (ties to lower index)."""
        flat = self.centroids.reshape(self.K, -1)
        d = _exact_sq_distances(flat, flat)
        out = np.empty((self.K, min(n_neighbors, self.K - 1)), dtype=np.int64)
        for i in range(self.K):
            order = np.argsort(d[i], kind="stable")
            order = order[order != i]
            out[i] = order[: out.shape[1]]
        return out


class ClusterModel:
    """Per-subdomain centroids and training affiliations."""

    def __init__(self, grid: GridSpec, subdomains: Sequence[Subdomain],
                 clusters: Sequence[SubdomainClusters], K: int, seed: int,
                 train_ids, train_digest: str = ""):
        self.grid = grid
        self.subdomains = tuple(subdomains)
        self.clusters = {c.subdomain.index: c for c in clusters}
        self.K = int(K)
        self.seed = int(seed)
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        self.train_digest = train_digest
        for c in clusters:
            if c.K != self.K:
                raise ModelInvariantError(f"subdomain {c.subdomain.index} has {c.K} centroids")
            counts = np.bincount(c.labels, minlength=self.K)
            if np.any(counts == 0):
                raise ModelInvariantError(
                    f"subdomain {c.subdomain.index}: empty clusters {np.nonzero(counts == 0)[0]}")

    def __getitem__(self, sub_index: int) -> SubdomainClusters:
        return self.clusters[sub_index]

    def labels(self, sub_index: int) -> np.ndarray:
        return self.clusters[sub_index].labels

    def centroid_field(self, sub_index: int, i: int) -> VelocityField:
        """Centroid ``i`` embedded in a full-grid field (zero outside the subdomain)."""
        c = self.clusters[sub_index]
        values = np.zeros((self.grid.n_nodes, 3))
        values[c.nodes] = c.centroids[i]
        return VelocityField(self.grid, values, dimensionless=True)

    def sample_centroids(self, sub_index: int, points) -> np.ndarray:
        """All centroids of a subdomain interpolated at ``points``: ``(K, n_points, 3)``.

        Stencil nodes outside the subdomain are dropped and the remaining
        trilinear weights renormalized; on grids aligned with the subdomain
        boxes every stencil node lies inside and this is plain trilinear
        interpolation.
        """
        c = self.clusters[sub_index]
        idx, w = interpolation_weights(self.grid, points)
        local = np.searchsorted(c.nodes, idx)
        local = np.minimum(local, len(c.nodes) - 1)
        inside = c.nodes[local] == idx
        dropped = np.any(~inside & (w > 0), axis=1)
        w = np.where(inside, w, 0.0)
        if np.any(dropped):
            total = w[dropped].sum(axis=1, keepdims=True)
            if np.any(total <= 0):
                raise DatasetError(f"point has no stencil node inside subdomain {sub_index}")
            w[dropped] /= total
        return np.einsum("pc,kpcd->kpd", w, c.centroids[:, local, :])

    # -- persistence --------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        subs = []
        for sub in self.subdomains:
            c = self.clusters[sub.index]
            name = f"centroids_{sub.index}.bin"
            np.ascontiguousarray(c.centroids, dtype=FIELD_DTYPE).tofile(directory / name)
            subs.append({"subdomain": sub.to_dict(), "centroid_file": name,
                         "n_nodes": int(c.nodes.size),
                         "labels": [int(v) for v in c.labels]})
        header = {"K": self.K, "seed": self.seed, "grid": self.grid.to_dict(),
                  "train_ids": [int(v) for v in self.train_ids],
                  "train_digest": self.train_digest, "subdomains": subs}
        path = directory / "model.json"
        path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "ClusterModel":
        directory = Path(directory)
        try:
            header = json.loads((directory / "model.json").read_text())
        except FileNotFoundError:
            raise DatasetError(f"no model artifact at {directory}") from None
        grid = GridSpec.from_dict(header["grid"])
        K = int(header["K"])
        subdomains, clusters = [], []
        for entry in header["subdomains"]:
            sub = Subdomain.from_dict(entry["subdomain"])
            nodes = subdomain_nodes(grid, sub)
            if nodes.size != entry["n_nodes"]:
                raise DatasetError(f"subdomain {sub.index} node count does not match the grid")
            raw = np.fromfile(directory / entry["centroid_file"], dtype=FIELD_DTYPE)
            clusters.append(SubdomainClusters(sub, nodes, raw.reshape(K, nodes.size, 3),
                                              np.asarray(entry["labels"], dtype=np.int64)))
            subdomains.append(sub)
        return cls(grid, subdomains, clusters, K, header["seed"], header["train_ids"],
                   header.get("train_digest", ""))


def fit_clusters(train: Dataset, subs: Sequence[Subdomain], K: int = 20, seed: int = 0,
                 max_iter: int = 300, tol: float = 1e-8) -> ClusterModel:
    """Cluster every subdomain of the normalized training snapshots into ``K`` groups."""
    train.require_nonempty()
    if K > len(train):
        raise InfeasibleError(f"K={K} exceeds the number of training snapshots {len(train)}")
    clusters = []
    for sub in subs:
        nodes = subdomain_nodes(train.grid, sub)
        X = train.normalized_values(nodes).reshape(len(train), -1)
        km = SubdomainKMeans(K, max_iter=max_iter, tol=tol, random_state=seed).fit(X)
        logger.debug("subdomain %d: %d iterations, inertia %.6g", sub.index, km.n_iter_, km.inertia_)
        clusters.append(SubdomainClusters(sub, nodes, km.cluster_centers_.reshape(K, nodes.size, 3),
                                          km.labels_.astype(np.int64), tuple(km.inertia_history_)))
    return ClusterModel(train.grid, subs, clusters, K, seed, train.ids, train.digest())


def affiliation(field: VelocityField, model: ClusterModel, sub_index: int) -> int:
    """Index of the nearest centroid of ``sub_index`` (ties to the lowest index)."""
    if field.grid != model.grid:
        raise DatasetError("field is not on the model grid")
    if not field.dimensionless:
        raise DatasetError("affiliation expects a normalized (dimensionless) field")
    c = model[sub_index]
    x = field.values[c.nodes].reshape(1, -1)
    return int(np.argmin(_exact_sq_distances(x, c.centroids.reshape(c.K, -1))[0]))


def affiliations(data: Dataset, model: ClusterModel, sub_index: int) -> np.ndarray:
    """Affiliation of every snapshot of ``data`` in one subdomain."""
    if data.grid != model.grid:
        raise DatasetError("dataset is not on the model grid")
    c = model[sub_index]
    X = data.normalized_values(c.nodes).reshape(len(data), -1)
    return np.argmin(_exact_sq_distances(X, c.centroids.reshape(c.K, -1)), axis=1)


def representation_error(model: ClusterModel, data: Dataset, sub_index: int):
    """Relative distance (percent) of each snapshot to its affiliated centroid.

    Returns ``(per_snapshot, average)``. Snapshots whose restriction has zero
    norm get ``nan`` and are left out of the average with a warning.
    """
    data.require_nonempty()
    c = model[sub_index]
    X = data.normalized_values(c.nodes).reshape(len(data), -1)
    C = c.centroids.reshape(c.K, -1)
    labels = np.argmin(_exact_sq_distances(X, C), axis=1)
    diff = X - C[labels]
    num = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    den = np.sqrt(np.einsum("ij,ij->i", X, X))
    zero = den == 0
    per = np.full(len(X), np.nan)
    per[~zero] = 100.0 * num[~zero] / den[~zero]
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} snapshot(s) with zero norm in subdomain {sub_index} "
                      "excluded from the representation error", RuntimeWarning, stacklevel=2)
    if np.all(zero):
        return per, float("nan")
    return per, float(np.mean(per[~zero]))
