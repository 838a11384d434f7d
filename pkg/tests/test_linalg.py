import numpy as np
import pytest

from fedlora.linalg import (
    LinAlgError,
    check_matrix,
    exact_svd,
    qr_decompose,
    randomized_svd,
    standard_normal_sample,
)


def frob(M):
    return np.linalg.norm(M)


class TestCheckMatrix:
    def test_rejects_nan(self):
        with pytest.raises(LinAlgError):
            check_matrix(np.array([[1.0, np.nan]]))

    def test_rejects_inf(self):
        with pytest.raises(LinAlgError):
            check_matrix(np.array([[np.inf, 0.0]]))

    def test_rejects_1d(self):
        with pytest.raises(LinAlgError):
            check_matrix(np.ones(3))


class TestQr:
    def test_identity(self):
        f = qr_decompose(np.eye(3))
        assert np.allclose(f.Q, np.eye(3))
        assert np.allclose(f.R, np.eye(3))

    def test_column_3_4(self):
        # ||(3, 4)|| = 5 by hand
        f = qr_decompose(np.array([[3.0], [4.0]]))
        assert np.allclose(f.Q, [[0.6], [0.8]], atol=1e-14)
        assert np.allclose(f.R, [[5.0]], atol=1e-14)

    def test_random_8x3_properties(self):
        Y = np.random.default_rng(7).standard_normal((8, 3))
        f = qr_decompose(Y)
        assert frob(f.Q.T @ f.Q - np.eye(3)) < 1e-12
        assert frob(f.Q @ f.R - Y) < 1e-12
        assert np.allclose(f.R, np.triu(f.R))
        assert np.all(np.diag(f.R) >= 0)

    def test_rejects_wide(self):
        with pytest.raises(LinAlgError):
            qr_decompose(np.ones((2, 3)))

    def test_rank_deficient_input(self):
        Y = np.ones((5, 3))  # rank 1
        f = qr_decompose(Y)
        assert frob(f.Q @ f.R - Y) < 1e-12 * max(1.0, frob(Y))
        assert frob(f.Q.T @ f.Q - np.eye(3)) < 1e-12

    def test_deterministic(self):
        Y = np.random.default_rng(3).standard_normal((6, 4))
        a = qr_decompose(Y)
        b = qr_decompose(Y.copy())
        assert np.array_equal(a.Q, b.Q) and np.array_equal(a.R, b.R)

    def test_property_sweep(self):
        rng = np.random.default_rng(100)
        for _ in range(300):
            d = int(rng.integers(1, 12))
            c = int(rng.integers(1, d + 1))
            Y = rng.standard_normal((d, c))
            f = qr_decompose(Y)
            assert frob(f.Q.T @ f.Q - np.eye(c)) <= 1e-10 * np.sqrt(c)
            assert frob(f.Q @ f.R - Y) <= 1e-10 * max(1.0, frob(Y))


class TestExactSvd:
    def test_diagonal(self):
        f = exact_svd(np.diag([3.0, 1.0]))
        assert np.allclose(f.sigma, [3.0, 1.0])
        assert np.allclose(f.U, np.eye(2))
        assert np.allclose(f.V, np.eye(2))

    def test_zero_matrix(self):
        f = exact_svd(np.zeros((4, 3)))
        assert np.array_equal(f.sigma, np.zeros(3))
        assert frob(f.U.T @ f.U - np.eye(3)) < 1e-12
        assert frob(f.V.T @ f.V - np.eye(3)) < 1e-12

    def test_gram_eigen_oracle(self):
        # singular values = sqrt of eigenvalues of M^T M (independent eigensolver)
        M = np.random.default_rng(11).standard_normal((5, 4))
        f = exact_svd(M)
        evals = np.sort(np.linalg.eigvalsh(M.T @ M))[::-1]
        expected = np.sqrt(np.clip(evals, 0, None))
        assert np.allclose(f.sigma, expected, rtol=1e-9)

    def test_reconstruction_tall_square_wide(self):
        rng = np.random.default_rng(21)
        for shape in [(7, 3), (5, 5), (3, 7)]:
            M = rng.standard_normal(shape)
            f = exact_svd(M)
            t = min(shape)
            assert f.U.shape == (shape[0], t)
            assert f.V.shape == (shape[1], t)
            assert np.all(np.diff(f.sigma) <= 1e-12)
            assert frob(f.reconstruct() - M) <= 1e-8 * max(1.0, frob(M))
            assert frob(f.U.T @ f.U - np.eye(t)) <= 1e-9
            assert frob(f.V.T @ f.V - np.eye(t)) <= 1e-9

    def test_rank_deficient(self):
        rng = np.random.default_rng(5)
        M = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        f = exact_svd(M)
        assert f.sigma[0] > 0
        assert np.all(f.sigma[1:] < 1e-12 * f.sigma[0])
        assert frob(f.U.T @ f.U - np.eye(4)) <= 1e-9
        assert frob(f.reconstruct() - M) <= 1e-8 * frob(M)

    def test_sign_convention(self):
        M = np.random.default_rng(2).standard_normal((6, 4))
        f = exact_svd(M)
        for j in range(4):
            col = f.U[:, j]
            idx = np.argmax(np.abs(col) > 1e-12 * np.abs(col).max())
            assert col[idx] >= 0

    def test_deterministic_bits(self):
        M = np.random.default_rng(8).standard_normal((9, 6))
        a = exact_svd(M)
        b = exact_svd(M.copy())
        assert np.array_equal(a.U, b.U)
        assert np.array_equal(a.sigma, b.sigma)
        assert np.array_equal(a.V, b.V)

    def test_property_sweep(self):
        rng = np.random.default_rng(200)
        for _ in range(300):
            d = int(rng.integers(1, 10))
            k = int(rng.integers(1, 10))
            M = rng.standard_normal((d, k))
            f = exact_svd(M)
            t = min(d, k)
            assert frob(f.U.T @ f.U - np.eye(t)) <= 1e-9
            assert frob(f.V.T @ f.V - np.eye(t)) <= 1e-9
            assert frob(f.reconstruct() - M) <= 1e-8 * max(1.0, frob(M))
            ref = np.linalg.svd(M, compute_uv=False)
            assert np.allclose(f.sigma, ref, atol=1e-10 * max(1.0, ref[0]))


class TestRandomizedSvd:
    def test_zero_matrix(self):
        f = randomized_svd(np.zeros((6, 5)), 3, np.random.default_rng(0))
        assert np.allclose(f.sigma, 0.0)

    def test_rank3_matches_exact(self):
        rng = np.random.default_rng(13)
        M = sum(np.outer(rng.standard_normal(8), rng.standard_normal(6)) for _ in range(3))
        f = randomized_svd(M, 3, np.random.default_rng(1))
        ref = exact_svd(M)
        assert np.allclose(f.sigma, ref.sigma[:3], rtol=1e-9)
        assert frob(f.reconstruct() - M) <= 1e-9 * frob(M)

    def test_sum_of_low_rank_products_exact_at_c_nr(self):
        rng = np.random.default_rng(17)
        r, n, d, k = 2, 2, 10, 9
        M = np.zeros((d, k))
        for _ in range(n):
            M += rng.standard_normal((d, r)) @ rng.standard_normal((r, k))
        f = randomized_svd(M, n * r, np.random.default_rng(4))
        assert frob(f.reconstruct() - M) / frob(M) <= 1e-10

    def test_sketch_size_bounds(self):
        M = np.ones((4, 4))
        with pytest.raises(LinAlgError):
            randomized_svd(M, 0, np.random.default_rng(0))
        with pytest.raises(LinAlgError):
            randomized_svd(M, 5, np.random.default_rng(0))

    def test_leading_values_match_exact_when_rank_leq_c(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            rank = int(rng.integers(1, 4))
            d = int(rng.integers(rank + 1, 12))
            k = int(rng.integers(rank + 1, 12))
            M = rng.standard_normal((d, rank)) @ rng.standard_normal((rank, k))
            c = int(rng.integers(rank, min(d, k) + 1))
            f = randomized_svd(M, c, np.random.default_rng(int(rng.integers(1 << 30))))
            ref = exact_svd(M)
            assert np.allclose(f.sigma[:rank], ref.sigma[:rank], rtol=1e-8)


class TestStandardNormal:
    def test_determinism(self):
        a = standard_normal_sample(np.random.default_rng(0), 2, 2)
        b = standard_normal_sample(np.random.default_rng(0), 2, 2)
        assert np.array_equal(a, b)

    def test_seed_sensitivity(self):
        a = standard_normal_sample(np.random.default_rng(0), 2, 2)
        b = standard_normal_sample(np.random.default_rng(1), 2, 2)
        assert not np.array_equal(a, b)

    def test_moments(self):
        x = standard_normal_sample(np.random.default_rng(3), 100, 100)
        assert abs(x.mean()) < 0.05
        assert abs(x.var() - 1.0) < 0.05
