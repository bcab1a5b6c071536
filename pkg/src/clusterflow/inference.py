"""Cross-subdomain inference matrices.

``p[j, i]`` is the probability that the target subdomain sits in cluster
``j`` given that the source subdomain sits in cluster ``i``; columns are
probability distributions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path

import numpy as np

from .exceptions import DataError, ModelInvariantError
from ._validation import check_distribution


@dataclass(frozen=True, eq=False)
class InferenceMatrix:
    source_sub: int
    target_sub: int
    p: np.ndarray

    @property
    def K(self) -> int:
        return int(self.p.shape[0])

    def column_sums(self) -> np.ndarray:
        return self.p.sum(axis=0)


def count_matrix(k_src, k_tgt, K: int) -> np.ndarray:
    """Co-affiliation counts ``n[j, i]`` over training snapshots."""
    k_src = np.asarray(k_src, dtype=np.int64)
    k_tgt = np.asarray(k_tgt, dtype=np.int64)
    if k_src.shape != k_tgt.shape:
        raise DataError("source and target affiliations differ in length")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (k_tgt, k_src), 1)
    return counts


def matrix_from_affiliations(k_src, k_tgt, K: int, source_sub: int = 0,
                             target_sub: int = 0) -> InferenceMatrix:
    counts = count_matrix(k_src, k_tgt, K)
    per_source = counts.sum(axis=0)
    if np.any(per_source == 0):
        raise ModelInvariantError(
            f"source clusters {np.nonzero(per_source == 0)[0].tolist()} have no members")
    p = counts / per_source[None, :]
    p.flags.writeable = False
    return InferenceMatrix(source_sub, target_sub, p)


def build_inference_matrix(model, source_sub: int, target_sub: int) -> InferenceMatrix:
    """Conditional probabilities of target affiliations given source affiliations."""
    return matrix_from_affiliations(model.labels(source_sub), model.labels(target_sub),
                                    model.K, source_sub, target_sub)


def build_all_matrices(model) -> dict[tuple[int, int], InferenceMatrix]:
    """All ordered pairs of distinct subdomains."""
    idx = [s.index for s in model.subdomains]
    return {(a, b): build_inference_matrix(model, a, b) for a, b in permutations(idx, 2)}


def propagate(weights, P: InferenceMatrix) -> np.ndarray:
    """Push a source-cluster distribution through ``P``.

    ``weights`` may be one distribution of length ``K`` or a stack of shape
    ``(n, K)``.
    """
    w = check_distribution(weights)
    if w.shape[-1] != P.K:
        raise DataError(f"weights have length {w.shape[-1]}, matrix has K={P.K}")
    return w @ P.p.T


def column_uncertainty(P: InferenceMatrix):
    """Shannon entropy and KL divergence from uniform of every column.

    Returns ``(entropy, kl, mean_entropy, mean_kl)`` with natural logarithms.
    """
    p = P.p
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    H = -terms.sum(axis=0)
    KL = np.log(P.K) - H
    return H, KL, float(H.mean()), float(KL.mean())


def entropy(q) -> np.ndarray:
    """Shannon entropy along the last axis (``0 ln 0 = 0``)."""
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(q > 0, q * np.log(q), 0.0).sum(axis=-1)


def write_matrix_csv(P: InferenceMatrix, path) -> Path:
    """K rows (target clusters) by K columns (source clusters)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"source={P.source_sub}", f"target={P.target_sub}"])
        writer.writerow(["target_cluster"] + [f"src_{i}" for i in range(P.K)])
        for j in range(P.K):
            writer.writerow([j] + [repr(float(v)) for v in P.p[j]])
    return path


def read_matrix_csv(path) -> InferenceMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    src = int(rows[0][0].split("=")[1])
    tgt = int(rows[0][1].split("=")[1])
    p = np.array([[float(v) for v in r[1:]] for r in rows[2:]])
    return InferenceMatrix(src, tgt, p)


def matrix_filename(src: int, tgt: int) -> str:
    return f"P_{src}_to_{tgt}.csv"
