"""Spatio-temporal Bayesian extreme-value modelling toolkit.

Hierarchical Gumbel/GEV/Gaussian models with SPDE-Matern spatial fields
and AR(1) dynamics, fitted by an inner-Newton + Laplace + grid-mixing
engine, evaluated by DIC/WAIC/CPO/PIT/validation criteria, and summarized
as excursion-function hot-spot maps.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    MeshError,
    NumericalError,
    StExtremesError,
)
from .mesh import (
    FemMatrices,
    TriangularMesh,
    assemble_fem,
    build_structured_mesh,
    load_mesh,
    projection_matrix,
    save_mesh,
)
from .spde import (
    MaternParams,
    SparsePrecision,
    SpdeOperator,
    matern_covariance,
    sample_gmrf,
    spde_precision,
)
from .temporal import Ar1Params, ar1_precision, kronecker_st_precision
from .likelihoods import (
    FAMILIES,
    Family,
    GaussianParams,
    GevParams,
    GumbelParams,
    gaussian_cdf,
    gaussian_logpdf,
    gev_cdf,
    gev_logpdf,
    gumbel_cdf,
    gumbel_logpdf,
    loglik_derivs,
)
from .priors import (
    GaussianPrior,
    PcCor1Prior,
    PcMaternPrior,
    PcSdPrior,
    gaussian_prior_logdensity,
    pc_prior_cor1_logdensity,
    pc_prior_matern_logdensity,
    pc_prior_sd_logdensity,
)
