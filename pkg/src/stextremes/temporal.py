"""AR(1) precision matrices and separable space-time precision products.

The space-time interaction effect evolves by first-order autoregression
with spatially correlated innovations; its joint precision is the
Kronecker product of the AR(1) precision (unit innovation precision, so
the spatial factor carries the variance) with the SPDE precision.

Ordering contract: time-major, index(s, t) = t * n_space + s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError
from .spde import SparsePrecision

MAX_KRONECKER_NNZ = 5e7


@dataclass(frozen=True)
class Ar1Params:
    """Autocorrelation in (-1, 1) and innovation precision."""

    autocorrelation: float
    innovation_precision: float = 1.0

    def __post_init__(self):
        if not -1.0 < self.autocorrelation < 1.0:
            raise ConfigError(
                f"AR(1) autocorrelation must lie in (-1, 1), got {self.autocorrelation}"
            )
        if self.innovation_precision <= 0:
            raise ConfigError(
                f"AR(1) innovation precision must be positive, got {self.innovation_precision}"
            )


def ar1_precision(T: int, params: Ar1Params) -> SparsePrecision:
    """Tridiagonal precision of the stationary AR(1) over T steps.

    x_1 ~ N(0, (tau (1 - a^2))^-1), x_t = a x_{t-1} + eps_t with
    eps_t ~ N(0, tau^-1).
    """
    if T < 1:
        raise ConfigError(f"AR(1) length must be >= 1, got {T}")
    a = params.autocorrelation
    tau = params.innovation_precision
    if T == 1:
        return SparsePrecision(sp.csc_matrix(np.array([[tau * (1.0 - a**2)]])))
    diag = np.full(T, 1.0 + a**2)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -a)
    Q = tau * sp.diags([off, diag, off], offsets=[-1, 0, 1], format="csc")
    return SparsePrecision(Q, check_symmetry=False)


def kronecker_st_precision(
    Q_time: SparsePrecision, Q_space: SparsePrecision
) -> SparsePrecision:
    """Q_time (x) Q_space in time-major ordering: index(s,t) = t*n_space + s.

    The log-determinant comes from the Kronecker identity
    n_space * logdet(Q_time) + n_time * logdet(Q_space), so the product
    itself is never factorized just for normalization constants.
    """
    est_nnz = Q_time.nnz * Q_space.nnz
    if est_nnz > MAX_KRONECKER_NNZ:
        raise NumericalError(
            f"Kronecker product would hold ~{est_nnz:.2e} nonzeros "
            f"(limit {MAX_KRONECKER_NNZ:.0e})"
        )
    Q = sp.kron(Q_time.Q, Q_space.Q, format="csc")
    logdet = Q_space.dim * Q_time.logdet + Q_time.dim * Q_space.logdet
    return SparsePrecision(Q, check_symmetry=False, known_logdet=logdet)
