import numpy as np
import pytest
import scipy.sparse as sp
from scipy.io import mmread

from stextremes.errors import ConfigError, NumericalError
from stextremes.mesh import assemble_fem, build_structured_mesh
from stextremes.spde import (
    MaternParams,
    SparsePrecision,
    SpdeOperator,
    matern_covariance,
    sample_gmrf,
    spde_precision,
    warn_boundary_proximity,
)


class TestMaternCovariance:
    def test_variance_at_zero_lag(self):
        p = MaternParams(range_=1.0, marginal_sd=2.0)
        assert matern_covariance(0.0, p) == 4.0

    def test_value_at_one_range(self):
        # independent oracle: a*K1(a) at a = sqrt(8) via mpmath
        mpmath = pytest.importorskip("mpmath")
        expected = float(mpmath.sqrt(8) * mpmath.besselk(1, mpmath.sqrt(8)))
        p = MaternParams(range_=3.7, marginal_sd=1.0)
        assert matern_covariance(3.7, p) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.1397, abs=5e-4)

    def test_continuous_at_origin(self):
        p = MaternParams(range_=2.0, marginal_sd=1.5)
        gap = abs(matern_covariance(1e-12 * p.range_, p) - matern_covariance(0.0, p))
        assert gap < 1e-6 * p.marginal_sd**2

    def test_monotone_decay(self):
        p = MaternParams(range_=1.0, marginal_sd=1.0)
        h = np.linspace(0, 5, 200)
        v = matern_covariance(h, p)
        assert np.all(np.diff(v) <= 0)
        assert v[-1] < 0.01

    def test_negative_distance_rejected(self):
        with pytest.raises(ConfigError):
            matern_covariance(-0.1, MaternParams(range_=1.0, marginal_sd=1.0))

    def test_invalid_params_rejected(self):
        with pytest.raises(ConfigError):
            MaternParams(range_=-1.0, marginal_sd=1.0)
        with pytest.raises(ConfigError):
            MaternParams(range_=1.0, marginal_sd=0.0)


class TestSpdePrecision:
    def setup_method(self):
        self.mesh = build_structured_mesh((-0.5, -0.5, 1.5, 1.5), 21, 21)
        self.fem = assemble_fem(self.mesh)

    def test_sigma_scaling_law_exact(self):
        q1 = spde_precision(self.fem, MaternParams(range_=0.4, marginal_sd=1.0))
        q2 = spde_precision(self.fem, MaternParams(range_=0.4, marginal_sd=2.0))
        assert np.array_equal(q2.Q.toarray(), q1.Q.toarray() / 4.0)

    def test_smoothness_other_than_one_rejected(self):
        with pytest.raises(ConfigError, match="smoothness"):
            spde_precision(self.fem, MaternParams(range_=0.4, marginal_sd=1.0, smoothness=2.0))

    def test_interior_marginal_variance(self):
        # mesh extends 0.5 beyond the unit square, > range
        params = MaternParams(range_=0.35, marginal_sd=1.3)
        Q = spde_precision(self.fem, params)
        cov = np.linalg.inv(Q.Q.toarray())
        interior = np.all(np.abs(self.mesh.nodes - 0.5) < 0.35, axis=1)
        marg = np.diag(cov)[interior]
        assert np.all(np.abs(marg - params.marginal_sd**2) < 0.15 * params.marginal_sd**2)

    def test_offdiagonal_decay_along_grid_line(self):
        params = MaternParams(range_=0.35, marginal_sd=1.0)
        Q = spde_precision(self.fem, params)
        cov = np.linalg.inv(Q.Q.toarray())
        # walk from the center node rightwards along its grid row
        center = np.argmin(np.sum((self.mesh.nodes - 0.5) ** 2, axis=1))
        row_mask = self.mesh.nodes[:, 1] == self.mesh.nodes[center, 1]
        row_nodes = np.nonzero(row_mask & (self.mesh.nodes[:, 0] >= self.mesh.nodes[center, 0]))[0]
        row_nodes = row_nodes[np.argsort(self.mesh.nodes[row_nodes, 0])]
        vals = cov[center, row_nodes]
        assert np.all(np.diff(vals) < 0)

    def test_empirical_covariance_matches_matern(self):
        params = MaternParams(range_=0.4, marginal_sd=1.0)
        Q = spde_precision(self.fem, params)
        draws = sample_gmrf(Q, 10_000, seed=42)
        # two interior nodes at distance ~range/2
        nodes = self.mesh.nodes
        i = np.argmin(np.sum((nodes - [0.3, 0.5]) ** 2, axis=1))
        j = np.argmin(np.sum((nodes - [0.5, 0.5]) ** 2, axis=1))
        h = np.linalg.norm(nodes[i] - nodes[j])
        emp = np.cov(draws[:, i], draws[:, j])
        expected = matern_covariance(h, params)
        n = draws.shape[0]
        se = np.sqrt((emp[0, 0] * emp[1, 1] + emp[0, 1] ** 2) / (n - 1))
        assert abs(emp[0, 1] - expected) < 3 * se

    def test_operator_reuse_matches_one_shot(self):
        op = SpdeOperator(self.fem)
        p = MaternParams(range_=0.52, marginal_sd=0.8)
        assert np.array_equal(op.precision(p).Q.toarray(), spde_precision(self.fem, p).Q.toarray())


class TestSparsePrecision:
    def test_asymmetric_rejected(self):
        Q = sp.csc_matrix(np.array([[1.0, 0.5], [0.2, 1.0]]))
        with pytest.raises(NumericalError, match="asymmetric"):
            SparsePrecision(Q)

    def test_non_spd_rejected(self):
        Q = SparsePrecision(sp.diags([1.0, -1.0]).tocsc())
        with pytest.raises(NumericalError, match="positive definite"):
            Q.factor()

    def test_logdet_matches_dense(self):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((30, 30))
        Q = SparsePrecision(sp.csc_matrix(M @ M.T + 30 * np.eye(30)))
        _, expected = np.linalg.slogdet(Q.Q.toarray())
        assert Q.logdet == pytest.approx(expected, rel=1e-10)

    def test_solve_matches_dense(self):
        rng = np.random.default_rng(1)
        M = rng.standard_normal((25, 25))
        A = M @ M.T + 25 * np.eye(25)
        Q = SparsePrecision(sp.csc_matrix(A))
        b = rng.standard_normal(25)
        assert np.allclose(Q.solve(b), np.linalg.solve(A, b), atol=1e-10)
        B = rng.standard_normal((25, 4))
        assert np.allclose(Q.solve(B), np.linalg.solve(A, B), atol=1e-10)

    def test_matrix_market_roundtrip(self, tmp_path):
        Q = SparsePrecision(sp.diags([2.0, 3.0, 4.0]).tocsc())
        path = tmp_path / "q.mtx"
        Q.to_matrix_market(path)
        back = mmread(path)
        assert np.allclose(back.toarray(), Q.Q.toarray())


class TestSampleGmrf:
    def test_identity_precision_sample_covariance(self):
        Q = SparsePrecision(sp.eye(3).tocsc())
        draws = sample_gmrf(Q, 50_000, seed=1)
        emp = np.cov(draws.T)
        se = 3.0 / np.sqrt(draws.shape[0])
        assert np.max(np.abs(emp - np.eye(3))) < 3 * se * 1.5

    def test_deterministic_given_seed(self):
        Q = SparsePrecision(sp.eye(5).tocsc())
        a = sample_gmrf(Q, 10, seed=7)
        b = sample_gmrf(Q, 10, seed=7)
        assert np.array_equal(a, b)
        c = sample_gmrf(Q, 10, seed=8)
        assert not np.array_equal(a, c)

    def test_streams_are_independent_batches(self):
        Q = SparsePrecision(sp.eye(5).tocsc())
        a = sample_gmrf(Q, 10, seed=7, stream=0)
        b = sample_gmrf(Q, 10, seed=7, stream=1)
        assert not np.array_equal(a, b)

    def test_diagonal_precision_sd(self):
        Q = SparsePrecision(sp.diags([4.0, 4.0]).tocsc())
        draws = sample_gmrf(Q, 40_000, seed=3)
        sd = draws.std(axis=0, ddof=1)
        se = 0.5 / np.sqrt(2 * (draws.shape[0] - 1))
        assert np.all(np.abs(sd - 0.5) < 4 * se)

    def test_mean_shift(self):
        Q = SparsePrecision(sp.eye(2).tocsc())
        mean = np.array([5.0, -3.0])
        draws = sample_gmrf(Q, 5_000, seed=0, mean=mean)
        assert np.allclose(draws.mean(axis=0), mean, atol=0.1)


def test_boundary_proximity_warning():
    mesh = build_structured_mesh((0, 0, 1, 1), 6, 6)
    with pytest.warns(UserWarning, match="mesh boundary"):
        n = warn_boundary_proximity(mesh, np.array([[0.05, 0.5], [0.5, 0.5]]), range_=0.2)
    assert n == 1
