import numpy as np
import pytest
import scipy.sparse as sp

from stextremes.errors import ConfigError, NumericalError
from stextremes.mesh import assemble_fem, build_structured_mesh
from stextremes.spde import MaternParams, SparsePrecision, sample_gmrf, spde_precision
from stextremes.temporal import Ar1Params, ar1_precision, kronecker_st_precision


def ar1_covariance(T, a, tau):
    # analytic oracle: stationary AR(1) covariance
    lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return a**lags / (tau * (1 - a**2))


class TestAr1Precision:
    def test_single_step_is_stationary_marginal(self):
        q = ar1_precision(1, Ar1Params(autocorrelation=0.6, innovation_precision=2.0))
        assert np.allclose(q.Q.toarray(), [[2.0 * (1 - 0.36)]])

    def test_zero_autocorrelation_is_identity_scaled(self):
        q = ar1_precision(5, Ar1Params(autocorrelation=0.0, innovation_precision=3.0))
        assert np.array_equal(q.Q.toarray(), 3.0 * np.eye(5))

    def test_frozen_three_step_matrix(self):
        q = ar1_precision(3, Ar1Params(autocorrelation=0.5, innovation_precision=1.0))
        expected = np.array(
            [[1.0, -0.5, 0.0], [-0.5, 1.25, -0.5], [0.0, -0.5, 1.0]]
        )
        assert np.array_equal(q.Q.toarray(), expected)
        # its inverse is the analytic AR covariance: var 4/3, lag-1 2/3, lag-2 1/3
        cov = np.linalg.inv(expected)
        assert cov[0, 0] == pytest.approx(4 / 3, abs=1e-12)
        assert cov[0, 1] == pytest.approx(2 / 3, abs=1e-12)
        assert cov[0, 2] == pytest.approx(1 / 3, abs=1e-12)

    def test_inverse_matches_analytic_covariance(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.uniform(-0.95, 0.95)
            tau = rng.uniform(0.1, 10)
            T = rng.integers(2, 9)
            q = ar1_precision(int(T), Ar1Params(a, tau))
            cov = np.linalg.inv(q.Q.toarray())
            assert np.max(np.abs(cov - ar1_covariance(int(T), a, tau))) < 1e-10

    def test_invalid_arguments(self):
        with pytest.raises(ConfigError):
            ar1_precision(0, Ar1Params(0.5, 1.0))
        with pytest.raises(ConfigError):
            Ar1Params(autocorrelation=1.0, innovation_precision=1.0)
        with pytest.raises(ConfigError):
            Ar1Params(autocorrelation=0.5, innovation_precision=0.0)


class TestKroneckerPrecision:
    def test_identity_time_gives_block_diagonal(self):
        q_space = SparsePrecision(
            sp.csc_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
        )
        q_time = SparsePrecision(sp.eye(2).tocsc())
        q = kronecker_st_precision(q_time, q_space)
        expected = np.block(
            [
                [q_space.Q.toarray(), np.zeros((2, 2))],
                [np.zeros((2, 2)), q_space.Q.toarray()],
            ]
        )
        assert np.array_equal(q.Q.toarray(), expected)

    def test_logdet_kronecker_identity(self):
        rng = np.random.default_rng(5)
        ms = rng.standard_normal((6, 6))
        q_space = SparsePrecision(sp.csc_matrix(ms @ ms.T + 6 * np.eye(6)))
        q_time = ar1_precision(4, Ar1Params(0.7, 1.3))
        q = kronecker_st_precision(q_time, q_space)
        # dense oracle for the identity n_s*logdet(Qt) + n_t*logdet(Qs)
        _, dense = np.linalg.slogdet(q.Q.toarray())
        assert q.logdet == pytest.approx(dense, rel=1e-8)
        assert q.logdet == pytest.approx(
            6 * q_time.logdet + 4 * q_space.logdet, rel=1e-10
        )

    def test_time_major_ordering(self):
        # index(s, t) = t * n_space + s
        q_space = SparsePrecision(sp.diags([1.0, 2.0, 3.0]).tocsc())
        q_time = ar1_precision(2, Ar1Params(0.5, 1.0))
        q = kronecker_st_precision(q_time, q_space).Q.toarray()
        # the (s=1, t=0) -> (s=1, t=1) coupling sits at (1, 3+1)
        assert q[1, 4] == pytest.approx(-0.5 * 2.0)
        assert q[0, 0] == pytest.approx(1.0 * 1.0)

    def test_sample_correlation_factorizes(self):
        # separable model: corr over time x corr over space (AR lag corr times
        # spatial autocorrelation; cross-year innovations are white)
        mesh = build_structured_mesh((0, 0, 1, 1), 4, 4)  # 16 nodes, use 10 of them
        fem = assemble_fem(mesh)
        params = MaternParams(range_=0.6, marginal_sd=1.0)
        q_space = spde_precision(fem, params)
        a = 0.6
        q_time = ar1_precision(4, Ar1Params(a, 1.0))
        q = kronecker_st_precision(q_time, q_space)
        n_space = q_space.dim
        draws = sample_gmrf(q, 30_000, seed=9)

        cov_space = np.linalg.inv(q_space.Q.toarray())
        s1, s2 = 5, 6
        # same site, lag 1 in time
        x = draws[:, 0 * n_space + s1]
        y = draws[:, 1 * n_space + s1]
        expected = a  # AR(1) stationary lag-1 correlation
        emp = np.corrcoef(x, y)[0, 1]
        se = (1 - expected**2) / np.sqrt(draws.shape[0])
        assert abs(emp - expected) < 3 * se
        # different site, lag 2
        x = draws[:, 0 * n_space + s1]
        y = draws[:, 2 * n_space + s2]
        rho_s = cov_space[s1, s2] / np.sqrt(cov_space[s1, s1] * cov_space[s2, s2])
        expected = a**2 * rho_s
        emp = np.corrcoef(x, y)[0, 1]
        se = 1.0 / np.sqrt(draws.shape[0])
        assert abs(emp - expected) < 3 * se

    def test_nnz_overflow_guard(self):
        n = 60_000
        diag = np.full(n, 2.0)
        off = np.full(n - 1, -0.9)
        big = SparsePrecision(
            sp.diags([off, diag, off], [-1, 0, 1], format="csc"), check_symmetry=False
        )
        eye = SparsePrecision(sp.eye(1000).tocsc())
        with pytest.raises(NumericalError, match="Kronecker"):
            kronecker_st_precision(eye, big)
