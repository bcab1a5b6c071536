import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterflow.exceptions import DataError, ModelInvariantError
from clusterflow.inference import (
    InferenceMatrix,
    build_all_matrices,
    build_inference_matrix,
    count_matrix,
    column_uncertainty,
    matrix_from_affiliations,
    propagate,
    read_matrix_csv,
    write_matrix_csv,
)


def counting_oracle(k_src, k_tgt, K):
    """Independent double loop over the definition of P[j, i]."""
    p = np.zeros((K, K))
    for i in range(K):
        members = [m for m in range(len(k_src)) if k_src[m] == i]
        for j in range(K):
            hits = sum(1 for m in members if k_tgt[m] == j)
            p[j, i] = hits / len(members)
    return p


def test_hand_example():
    # 1-based clusters [1,1,2,2,2] -> [1,2,2,3,3], shifted to 0-based
    k_src, k_tgt = [0, 0, 1, 1, 1], [0, 1, 1, 2, 2]
    counts = count_matrix(k_src, k_tgt, 3)
    np.testing.assert_allclose(counts[:, 0] / counts[:, 0].sum(), [0.5, 0.5, 0.0])
    np.testing.assert_allclose(counts[:, 1] / counts[:, 1].sum(), [0.0, 1 / 3, 2 / 3])
    # source cluster 3 has no members, so the full matrix is not defined
    with pytest.raises(ModelInvariantError):
        matrix_from_affiliations(k_src, k_tgt, 3)
    P = matrix_from_affiliations(k_src + [2], k_tgt + [0], 3)
    np.testing.assert_allclose(P.p[:, :2], np.column_stack([[0.5, 0.5, 0], [0, 1 / 3, 2 / 3]]))


def test_same_subdomain_is_identity(small_model):
    P = build_inference_matrix(small_model, 2, 2)
    np.testing.assert_array_equal(P.p, np.eye(small_model.K))


def test_single_snapshot():
    P = matrix_from_affiliations([0], [0], 1)
    np.testing.assert_array_equal(P.p, [[1.0]])


def test_empty_source_cluster_rejected():
    with pytest.raises(ModelInvariantError):
        matrix_from_affiliations([0, 0], [0, 1], 2)


def test_random_instances_against_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        K = int(rng.integers(1, 9))
        M = int(rng.integers(K, 51))
        k_src = np.concatenate([np.arange(K), rng.integers(0, K, M - K)])
        rng.shuffle(k_src)
        k_tgt = rng.integers(0, K, M)
        P = matrix_from_affiliations(k_src, k_tgt, K)
        assert np.array_equal(P.p, counting_oracle(k_src, k_tgt, K))
        assert np.all(np.abs(P.p.sum(axis=0) - 1.0) <= 1e-12)
        perm = rng.permutation(M)
        assert np.array_equal(matrix_from_affiliations(k_src[perm], k_tgt[perm], K).p, P.p)


def test_model_matrices_stochastic(small_matrices):
    assert len(small_matrices) == 6
    for P in small_matrices.values():
        assert np.all((P.p >= 0) & (P.p <= 1))
        assert np.all(np.abs(P.column_sums() - 1.0) <= 1e-12)


class TestPropagate:
    def test_basis_vector(self, small_matrices):
        P = small_matrices[(1, 2)]
        e = np.zeros(P.K); e[3] = 1.0
        np.testing.assert_array_equal(propagate(e, P), P.p[:, 3])

    def test_hand_product(self):
        P = InferenceMatrix(1, 2, np.array([[1.0, 0.2], [0.0, 0.8]]))
        np.testing.assert_allclose(propagate([0.75, 0.25], P), [0.8, 0.2], rtol=1e-15)

    def test_identity(self):
        P = InferenceMatrix(1, 1, np.eye(4))
        w = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(propagate(w, P), w)

    def test_rejects_unnormalized(self):
        with pytest.raises(DataError):
            propagate([0.5, 0.6], InferenceMatrix(1, 2, np.eye(2)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10 ** 6))
    def test_mass_and_sign_preserved(self, K, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((K, K)); p /= p.sum(axis=0)
        w = rng.random(K); w /= w.sum()
        q = propagate(w, InferenceMatrix(1, 2, p))
        assert np.all(q >= 0) and abs(q.sum() - 1) <= 1e-9


class TestUncertainty:
    def test_deterministic_column(self):
        H, KL, _, _ = column_uncertainty(InferenceMatrix(1, 2, np.eye(5)))
        np.testing.assert_array_equal(H, 0.0)
        np.testing.assert_allclose(KL, np.log(5))

    def test_uniform_column(self):
        H, KL, mH, mKL = column_uncertainty(InferenceMatrix(1, 2, np.full((4, 4), 0.25)))
        np.testing.assert_allclose(H, np.log(4))
        np.testing.assert_allclose(KL, 0.0, atol=1e-15)

    def test_half_half_k20(self):
        p = np.eye(20)
        p[:, 0] = 0.0
        p[0, 0] = p[1, 0] = 0.5
        H, KL, _, _ = column_uncertainty(InferenceMatrix(1, 2, p))
        assert H[0] == pytest.approx(0.6931471805599453, abs=1e-12)
        assert KL[0] == pytest.approx(2.302585092994046, abs=1e-12)


def test_csv_roundtrip(tmp_path, small_matrices):
    P = small_matrices[(3, 1)]
    write_matrix_csv(P, tmp_path / "p.csv")
    back = read_matrix_csv(tmp_path / "p.csv")
    assert (back.source_sub, back.target_sub) == (3, 1)
    np.testing.assert_array_equal(back.p, P.p)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 2 + P.K
