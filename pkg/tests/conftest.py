import numpy as np
import pytest

from stextremes.data import PreparedDataset
from stextremes.mesh import build_structured_mesh


def make_dataset(
    coords,
    years,
    covariates: dict | None = None,
    y_max=None,
    y_mean=None,
    train_years=None,
    validation_years=(),
):
    """Assemble a PreparedDataset directly (columns already on model scale).

    ``coords`` is per-station; rows are year-major (all stations for the
    first year, then the next). Covariate columns are taken as-is, with
    identity standardization parameters recorded.
    """
    coords = np.asarray(coords, dtype=float)
    years = tuple(int(y) for y in years)
    n_st, T = coords.shape[0], len(years)
    n = n_st * T
    covariates = covariates or {}
    names = tuple(covariates)
    cov = (
        np.column_stack([np.asarray(covariates[c], dtype=float) for c in names])
        if names
        else np.empty((n, 0))
    )
    year_col = np.repeat(years, n_st)
    train_years = tuple(train_years if train_years is not None else years)
    nan = np.full(n, np.nan)
    return PreparedDataset(
        station_id=[f"s{i}" for _ in years for i in range(n_st)],
        coords=np.tile(coords, (T, 1)),
        year=year_col,
        y_mean=np.asarray(y_mean, dtype=float) if y_mean is not None else nan.copy(),
        y_max=np.asarray(y_max, dtype=float) if y_max is not None else nan.copy(),
        covariates=cov,
        covariate_names=names,
        standardization={c: (0.0, 1.0) for c in names},
        train_mask=np.isin(year_col, train_years),
        validation_mask=np.isin(year_col, tuple(validation_years)),
        train_years=train_years,
        validation_years=tuple(validation_years),
    )


@pytest.fixture
def small_mesh():
    return build_structured_mesh((-0.4, -0.4, 1.4, 1.4), 7, 7)
