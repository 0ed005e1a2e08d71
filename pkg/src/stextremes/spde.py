"""Matern covariance, SPDE precision construction and GMRF sampling.

The spatial field is represented as a Gaussian Markov random field on the
mesh nodes: for smoothness 1 (operator order 2 in 2D) the precision is

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G),

with kappa = sqrt(8)/range and tau^2 chosen so the nodal marginal variance
targets marginal_sd^2 = 1 / (4 pi kappa^2 tau^2).

`SparsePrecision` wraps a symmetric positive-definite sparse matrix with a
cached LDL^T factorization (reverse-Cuthill-McKee reordering + SuperLU with
diagonal pivoting), exposing solves, the log-determinant and a sampling
transform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu
from scipy.special import gammaln, kv

from .errors import ConfigError, NumericalError
from .mesh import FemMatrices, TriangularMesh

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class MaternParams:
    """Range (distance units), marginal sd (response units), smoothness."""

    range_: float
    marginal_sd: float
    smoothness: float = 1.0

    def __post_init__(self):
        if self.range_ <= 0:
            raise ConfigError(f"Matern range must be positive, got {self.range_}")
        if self.marginal_sd <= 0:
            raise ConfigError(f"Matern marginal sd must be positive, got {self.marginal_sd}")
        if self.smoothness <= 0:
            raise ConfigError(f"Matern smoothness must be positive, got {self.smoothness}")


class _LdlFactor:
    """LDL^T factorization of a permuted SPD matrix via SuperLU.

    Minimum-degree ordering with diagonal pivoting keeps the row and
    column permutations equal, so U = D L^T and the factor doubles as a
    Cholesky for sampling and log-determinants. Falls back to an explicit
    reverse-Cuthill-McKee pre-permutation if SuperLU ever pivots off the
    diagonal.
    """

    def __init__(self, Q: sp.csc_matrix):
        n = Q.shape[0]
        lu = None
        direct = False
        perm = np.arange(n)
        try:
            cand = splu(
                Q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
            if np.array_equal(cand.perm_r, cand.perm_c):
                lu = cand
                direct = True
                # L @ U equals Q permuted by the inverse of perm_r
                perm = np.argsort(np.asarray(cand.perm_r))
        except RuntimeError:
            lu = None
        if lu is None:
            if n > 1:
                perm = np.asarray(reverse_cuthill_mckee(Q.tocsr(), symmetric_mode=True))
            Qp = Q[perm][:, perm].tocsc()
            try:
                lu = splu(
                    Qp,
                    permc_spec="NATURAL",
                    diag_pivot_thresh=0.0,
                    options=dict(SymmetricMode=True),
                )
            except RuntimeError as exc:
                raise NumericalError(f"sparse factorization failed: {exc}") from None
        d = lu.U.diagonal()
        if not np.all(d > 0):
            raise NumericalError(
                "matrix is not positive definite "
                f"(min pivot {float(d.min()):.3e})"
            )
        self.perm = perm  # L @ U = Q[perm][:, perm] in both modes
        self._direct = direct
        self._lu = lu
        self._d = d
        self._B = None  # L sqrt(D), built on first sampling use
        self.logdet = float(np.sum(np.log(d)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self._direct:
            return self._lu.solve(b)
        xp = self._lu.solve(np.atleast_2d(b.T).T[self.perm])
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x.reshape(b.shape)

    def sample_transform(self, z: np.ndarray) -> np.ndarray:
        """Map iid standard normals (dim, n) to draws with precision Q."""
        if self._B is None:
            self._B = (self._lu.L @ sp.diags(np.sqrt(self._d))).tocsc()
        w = self._B @ z
        if self._direct:
            w_orig = np.empty_like(w)
            w_orig[self.perm] = w
            return self._lu.solve(w_orig)
        xp = self._lu.solve(w)
        x = np.empty_like(xp)
        x[self.perm] = xp
        return x


class SparsePrecision:
    """Symmetric positive-definite sparse matrix with factorization cache.

    ``known_logdet`` short-circuits the factorization for log-determinant
    queries (used for Kronecker products, whose log-determinant follows
    from the factors).
    """

    def __init__(self, Q, check_symmetry: bool = True, known_logdet: float | None = None):
        Q = sp.csc_matrix(Q)
        if Q.shape[0] != Q.shape[1]:
            raise ConfigError(f"precision matrix must be square, got {Q.shape}")
        if check_symmetry:
            asym = abs(Q - Q.T).max()
            scale = max(abs(Q).max(), 1.0)
            if asym > SYMMETRY_TOL * scale:
                raise NumericalError(
                    f"precision matrix asymmetric: |Q - Q^T| = {asym:.3e}"
                )
            Q = ((Q + Q.T) * 0.5).tocsc()
        Q.sort_indices()
        self._Q = Q
        self._factor: _LdlFactor | None = None
        self._known_logdet = known_logdet

    @property
    def Q(self) -> sp.csc_matrix:
        return self._Q

    @property
    def dim(self) -> int:
        return self._Q.shape[0]

    @property
    def nnz(self) -> int:
        return self._Q.nnz

    def factor(self) -> _LdlFactor:
        if self._factor is None:
            self._factor = _LdlFactor(self._Q)
        return self._factor

    @property
    def logdet(self) -> float:
        if self._known_logdet is not None:
            return self._known_logdet
        return self.factor().logdet

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.factor().solve(b)

    def to_matrix_market(self, path) -> None:
        mmwrite(path, self._Q.tocoo())


def matern_covariance(h, params: MaternParams):
    """Stationary Matern covariance at distance(s) ``h`` (same-year case).

    Cross-year covariance is zero by model construction and handled by the
    caller. Returns marginal_sd^2 at h = 0 (the continuous limit).
    """
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ConfigError("distance must be nonnegative")
    nu = params.smoothness
    sigma2 = params.marginal_sd**2
    arg = np.sqrt(8.0 * nu) * h / params.range_
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        val = sigma2 * np.exp(
            (1.0 - nu) * np.log(2.0) - gammaln(nu) + nu * np.log(arg)
        ) * kv(nu, arg)
    val = np.where(h == 0.0, sigma2, val)
    # kv underflows to 0 for large arguments; the covariance limit is 0.
    val = np.where(np.isnan(val) & (h > 0), 0.0, val)
    return val if val.ndim else float(val)


class SpdeOperator:
    """Pattern-aligned SPDE matrices for fast precision re-assembly.

    Precomputes C, G and G C^-1 G on a shared sparsity pattern so that
    building Q(range, sd) is a pure data-vector combination. Intended for
    inner loops that sweep hyperparameter values on a fixed mesh.
    """

    def __init__(self, fem: FemMatrices):
        C = sp.diags(fem.c).tocsc()
        G = fem.G.tocsc()
        GCG = (G @ sp.diags(1.0 / fem.c) @ G).tocsc()
        pattern = ((C != 0) + (G != 0) + (GCG != 0)).astype(float).tocsc()
        pattern.sort_indices()
        self._pattern = pattern
        self._d0 = self._aligned(C)
        self._d1 = self._aligned(G)
        self._d2 = self._aligned(GCG)
        self.n = fem.n

    def _aligned(self, M: sp.csc_matrix) -> np.ndarray:
        """Scatter M's entries onto the union pattern's data layout."""
        U = self._pattern
        M = M.tocsc()
        M.sort_indices()
        out = np.zeros(U.nnz)
        for j in range(U.shape[1]):
            u0, u1 = U.indptr[j], U.indptr[j + 1]
            m0, m1 = M.indptr[j], M.indptr[j + 1]
            if m1 > m0:
                pos = np.searchsorted(U.indices[u0:u1], M.indices[m0:m1])
                if np.any(U.indices[u0:u1][pos] != M.indices[m0:m1]):
                    raise NumericalError("sparsity pattern alignment failed")
                out[u0 + pos] = M.data[m0:m1]
        return out

    def precision(self, params: MaternParams) -> SparsePrecision:
        if params.smoothness != 1.0:
            raise ConfigError(
                "SPDE precision implemented for smoothness 1 only "
                f"(got {params.smoothness}); other values are not approximated"
            )
        kappa2 = 8.0 / params.range_**2
        tau2 = 1.0 / (4.0 * np.pi * kappa2 * params.marginal_sd**2)
        data = tau2 * (kappa2**2 * self._d0 + 2.0 * kappa2 * self._d1 + self._d2)
        Q = sp.csc_matrix(
            (data, self._pattern.indices.copy(), self._pattern.indptr.copy()),
            shape=self._pattern.shape,
        )
        return SparsePrecision(Q, check_symmetry=False)


def spde_precision(fem: FemMatrices, params: MaternParams) -> SparsePrecision:
    """Sparse GMRF precision of the Matern field on the mesh nodes."""
    return SpdeOperator(fem).precision(params)


def sample_gmrf(
    Q: SparsePrecision, n: int, seed: int, stream: int = 0, mean: np.ndarray | None = None
) -> np.ndarray:
    """Draw ``n`` GMRF samples with precision Q; rows are draws.

    Uses a counter-based Philox generator keyed on (seed, stream), so
    distinct stream ids give independent reproducible batches.
    """
    if n < 1:
        raise ConfigError("sample count must be >= 1")
    key = np.array([int(seed) % 2**64, int(stream) % 2**64], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    z = rng.standard_normal((Q.dim, n))
    x = Q.factor().sample_transform(z)
    if mean is not None:
        x = x + np.asarray(mean, dtype=float)[:, None]
    return x.T


def warn_boundary_proximity(
    mesh: TriangularMesh, locations: np.ndarray, range_: float
) -> int:
    """Warn when observations sit within one range of the mesh boundary.

    The SPDE Neumann boundary inflates marginal variance near edges; the
    mesh should extend past the data hull. Returns the offending count.
    """
    boundary_nodes = mesh.nodes[mesh.boundary]
    if boundary_nodes.size == 0:
        return 0
    locations = np.atleast_2d(locations)
    d2 = (
        (locations[:, None, 0] - boundary_nodes[None, :, 0]) ** 2
        + (locations[:, None, 1] - boundary_nodes[None, :, 1]) ** 2
    )
    dmin = np.sqrt(d2.min(axis=1))
    n_close = int(np.sum(dmin < range_))
    if n_close:
        warnings.warn(
            f"{n_close} observation location(s) lie within one Matern range "
            f"({range_:g}) of the mesh boundary; boundary effects may inflate "
            "their variance",
            stacklevel=2,
        )
    return n_close
