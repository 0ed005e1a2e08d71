"""Observation tables, preprocessing and the synthetic-data simulator.

Input CSV schema (header names are exact; extra columns are ignored)::

    station_id, lon, lat, altitude, year, pm10_mean, pm10_max,
    temperature, precipitation, vapour_pressure, population_density,
    valid_fraction

Responses may be empty per cell (a station-year with only one of
mean/max); covariate cells left empty cause the row to be dropped during
preparation, never imputed. Preparation log-transforms responses,
standardizes covariates on training rows only, and emits train/validation
masks keyed on years.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .likelihoods import FAMILIES
from .mesh import TriangularMesh, build_structured_mesh, projection_matrix
from .spde import MaternParams, SpdeOperator, sample_gmrf
from .temporal import Ar1Params, ar1_precision, kronecker_st_precision

MANDATORY_COLUMNS = (
    "station_id",
    "lon",
    "lat",
    "altitude",
    "year",
    "pm10_mean",
    "pm10_max",
    "temperature",
    "precipitation",
    "vapour_pressure",
    "population_density",
    "valid_fraction",
)

COVARIATE_COLUMNS = (
    "lon",
    "lat",
    "altitude",
    "temperature",
    "precipitation",
    "vapour_pressure",
    "population_density",
)

RESPONSE_COLUMNS = ("pm10_mean", "pm10_max")


@dataclass
class ObservationTable:
    """Station-year records; responses may be NaN where absent."""

    station_id: list[str]
    lon: np.ndarray
    lat: np.ndarray
    altitude: np.ndarray
    year: np.ndarray
    pm10_mean: np.ndarray
    pm10_max: np.ndarray
    temperature: np.ndarray
    precipitation: np.ndarray
    vapour_pressure: np.ndarray
    population_density: np.ndarray
    valid_fraction: np.ndarray
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.station_id)

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)


def _parse_cell(text: str, column: str, line: int):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line}: cannot parse {column}='{text}'") from None


def load_observations(path) -> ObservationTable:
    """Read the documented CSV schema, collecting row-level rejections.

    Rows with nonpositive PM values or valid_fraction outside [0, 1] are
    rejected (recorded on ``table.rejected``); a missing mandatory column
    or a duplicated (station, year) pair is a schema-level DataError.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in MANDATORY_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing mandatory column(s): {', '.join(missing)}")

        columns: dict[str, list] = {c: [] for c in MANDATORY_COLUMNS}
        rejected: list[tuple[int, str]] = []
        seen: set[tuple[str, int]] = set()
        for line, row in enumerate(reader, start=2):
            try:
                sid = (row["station_id"] or "").strip()
                if not sid:
                    raise DataError(f"line {line}: empty station_id")
                year_text = (row["year"] or "").strip()
                try:
                    year = int(year_text)
                except ValueError:
                    raise DataError(f"line {line}: cannot parse year='{year_text}'") from None
                values = {
                    c: _parse_cell(row[c] or "", c, line)
                    for c in MANDATORY_COLUMNS
                    if c not in ("station_id", "year")
                }
                for resp in RESPONSE_COLUMNS:
                    if not math.isnan(values[resp]) and values[resp] <= 0:
                        raise DataError(
                            f"line {line}: nonpositive {resp}={values[resp]}"
                        )
                vf = values["valid_fraction"]
                if math.isnan(vf) or not 0.0 <= vf <= 1.0:
                    raise DataError(f"line {line}: valid_fraction={vf} outside [0, 1]")
            except DataError as exc:
                rejected.append((line, str(exc)))
                continue
            key = (sid, year)
            if key in seen:
                raise DataError(f"line {line}: duplicate (station_id, year) = {key}")
            seen.add(key)
            columns["station_id"].append(sid)
            columns["year"].append(year)
            for c, v in values.items():
                columns[c].append(v)

    table = ObservationTable(
        station_id=columns["station_id"],
        lon=np.array(columns["lon"]),
        lat=np.array(columns["lat"]),
        altitude=np.array(columns["altitude"]),
        year=np.array(columns["year"], dtype=int),
        pm10_mean=np.array(columns["pm10_mean"]),
        pm10_max=np.array(columns["pm10_max"]),
        temperature=np.array(columns["temperature"]),
        precipitation=np.array(columns["precipitation"]),
        vapour_pressure=np.array(columns["vapour_pressure"]),
        population_density=np.array(columns["population_density"]),
        valid_fraction=np.array(columns["valid_fraction"]),
        rejected=rejected,
    )
    return table


def save_observations(table: ObservationTable, path) -> None:
    """Write a table back to CSV (exact float round-trip, NaN as empty)."""

    def fmt(column: str, v) -> str:
        if column == "station_id":
            return v
        if column == "year":
            return str(int(v))
        v = float(v)
        return "" if math.isnan(v) else repr(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANDATORY_COLUMNS)
        for i in range(table.n_rows):
            writer.writerow(
                [fmt(c, table.column(c)[i] if c != "station_id" else table.station_id[i])
                 for c in MANDATORY_COLUMNS]
            )


@dataclass
class PreparedDataset:
    """Log responses, standardized covariates and split masks.

    ``y_mean``/``y_max`` are natural logs of the PM columns (NaN where the
    raw cell was absent). ``covariates`` holds one standardized column per
    name in ``covariate_names``; the standardization mean/sd come from
    training rows only.
    """

    station_id: list[str]
    coords: np.ndarray  # (n_rows, 2) lon/lat
    year: np.ndarray
    y_mean: np.ndarray
    y_max: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    standardization: dict[str, tuple[float, float]]
    train_mask: np.ndarray
    validation_mask: np.ndarray
    train_years: tuple[int, ...]
    validation_years: tuple[int, ...]
    n_dropped_low_valid: int = 0
    n_dropped_missing_covariate: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.station_id)

    def standardize_new(self, raw: dict[str, np.ndarray]) -> np.ndarray:
        """Standardize raw covariate columns with the stored training params."""
        cols = []
        for name in self.covariate_names:
            if name not in raw:
                raise DataError(f"missing covariate column '{name}'")
            mean, sd = self.standardization[name]
            cols.append((np.asarray(raw[name], dtype=float) - mean) / sd)
        return np.column_stack(cols)


def prepare(
    table: ObservationTable,
    min_valid: float = 0.6,
    train_years: tuple[int, ...] | None = None,
    validation_years: tuple[int, ...] | None = None,
    covariate_names: tuple[str, ...] = COVARIATE_COLUMNS,
) -> PreparedDataset:
    """Filter, log-transform and standardize an observation table.

    Station-years below ``min_valid`` valid fraction are dropped, as are
    rows missing any model covariate. By default the last year is held out
    for validation and all earlier years train.
    """
    years_present = np.unique(table.year)
    if train_years is None and validation_years is None:
        if len(years_present) < 2:
            train_years = tuple(int(y) for y in years_present)
            validation_years = ()
        else:
            train_years = tuple(int(y) for y in years_present[:-1])
            validation_years = (int(years_present[-1]),)
    elif train_years is None or validation_years is None:
        raise ConfigError("give both train_years and validation_years, or neither")
    train_years = tuple(int(y) for y in train_years)
    validation_years = tuple(int(y) for y in validation_years)
    if set(train_years) & set(validation_years):
        raise ConfigError("train and validation years must be disjoint")

    keep = table.valid_fraction >= min_valid
    n_low = int(np.sum(~keep))

    cov_raw = np.column_stack([table.column(c) for c in covariate_names])
    cov_ok = ~np.isnan(cov_raw).any(axis=1)
    n_missing = int(np.sum(keep & ~cov_ok))
    keep &= cov_ok

    year = table.year[keep]
    in_split = np.isin(year, train_years + validation_years)
    idx = np.nonzero(keep)[0][in_split]
    year = table.year[idx]

    train_mask = np.isin(year, train_years)
    validation_mask = np.isin(year, validation_years)
    if not train_mask.any():
        raise DataError("empty training set after filtering")

    cov_raw = cov_raw[idx]
    standardization: dict[str, tuple[float, float]] = {}
    cov_std = np.empty_like(cov_raw)
    for j, name in enumerate(covariate_names):
        col_train = cov_raw[train_mask, j]
        mean = float(col_train.mean())
        sd = float(col_train.std(ddof=1)) if len(col_train) > 1 else 0.0
        if sd == 0.0 or not np.isfinite(sd):
            raise DataError(f"covariate '{name}' is constant on the training rows")
        standardization[name] = (mean, sd)
        cov_std[:, j] = (cov_raw[:, j] - mean) / sd

    with np.errstate(invalid="ignore"):
        y_mean = np.log(table.pm10_mean[idx])
        y_max = np.log(table.pm10_max[idx])

    return PreparedDataset(
        station_id=[table.station_id[i] for i in idx],
        coords=np.column_stack([table.lon[idx], table.lat[idx]]),
        year=year,
        y_mean=y_mean,
        y_max=y_max,
        covariates=cov_std,
        covariate_names=tuple(covariate_names),
        standardization=standardization,
        train_mask=train_mask,
        validation_mask=validation_mask,
        train_years=train_years,
        validation_years=validation_years,
        n_dropped_low_valid=n_low,
        n_dropped_missing_covariate=n_missing,
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SimulationConfig:
    """Generative settings for one synthetic dataset.

    ``coefficients`` apply to covariates standardized over the training
    rows (matching what a fit estimates); ``truth`` holds natural-scale
    hyperparameter values. Model classes: model1/model3 use the AR x SPDE
    interaction effect, model2/model4 add the temporal and spatial
    effects, joint generates both responses with sharing links.
    """

    model: str = "model1"
    n_stations: int = 100
    years: tuple[int, ...] = (2017, 2018, 2019, 2020)
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    mesh_nx: int = 12
    mesh_ny: int = 12
    mesh_pad: float = 0.3
    covariates: tuple[str, ...] = ("altitude", "temperature")
    coefficients: dict = field(default_factory=lambda: {"intercept": 4.0})
    coefficients_mean: dict = field(default_factory=dict)  # joint only
    sharing_beta1: dict = field(default_factory=dict)  # joint: covariate -> scale
    sharing_beta2: float = 1.0
    truth: dict = field(default_factory=dict)
    valid_fraction_low_count: int = 0

    def __post_init__(self):
        known = {"model1", "model2", "model3", "model4", "joint"}
        if self.model not in known:
            raise ConfigError(f"unknown model class '{self.model}' (choose from {sorted(known)})")
        defaults = {
            "a": 0.8,
            "rho_M": 0.3 * math.hypot(self.bbox[2] - self.bbox[0], self.bbox[3] - self.bbox[1]),
            "sigma_M": 0.58,
            "sigma": 0.2,
            "xi": 0.2,
            "sigma_AR": 0.3,
            "sigma_mean": 0.15,
        }
        self.truth = {**defaults, **self.truth}


def simulation_mesh(config: SimulationConfig) -> TriangularMesh:
    xmin, ymin, xmax, ymax = config.bbox
    p = config.mesh_pad
    return build_structured_mesh(
        (xmin - p, ymin - p, xmax + p, ymax + p), config.mesh_nx, config.mesh_ny
    )


def _draw_covariates(rng, config, n_st, T):
    """Plausible raw-scale covariates; station-level plus yearly wobble."""
    base = {
        "altitude": rng.uniform(0.0, 2000.0, n_st),
        "temperature": rng.normal(14.0, 3.0, n_st),
        "precipitation": rng.uniform(20.0, 120.0, n_st),
        "vapour_pressure": rng.normal(10.0, 2.0, n_st),
        "population_density": np.exp(rng.normal(4.0, 1.0, n_st)),
    }
    rows = {}
    for name, vals in base.items():
        tiled = np.tile(vals, T)
        if name in ("temperature", "precipitation", "vapour_pressure"):
            tiled = tiled + rng.normal(0.0, 0.1 * np.std(vals), n_st * T)
        rows[name] = tiled
    return rows


def simulate_dataset(config: SimulationConfig, seed: int):
    """Draw one synthetic dataset plus its ground-truth record.

    Returns (ObservationTable, truth dict). Random effects are drawn from
    the same mesh-based GMRFs the fitting engine uses, so fits on the same
    mesh are exactly calibrated against the recorded truth.
    """
    rng = np.random.Generator(np.random.Philox(key=np.array([int(seed) % 2**64, 0], dtype=np.uint64)))
    mesh = simulation_mesh(config)
    n_st, years = config.n_stations, tuple(config.years)
    T = len(years)
    xmin, ymin, xmax, ymax = config.bbox

    coords = np.column_stack(
        [rng.uniform(xmin, xmax, n_st), rng.uniform(ymin, ymax, n_st)]
    )
    A_bary = projection_matrix(mesh, coords)

    raw_cov = _draw_covariates(rng, config, n_st, T)
    raw_cov["lon"] = np.tile(coords[:, 0], T)
    raw_cov["lat"] = np.tile(coords[:, 1], T)

    # standardize on training rows (all but the last year when T > 1) so
    # the recorded coefficients live on the fitted scale
    year_col = np.repeat(years, n_st)
    train_rows = year_col != years[-1] if T > 1 else np.ones(n_st * T, dtype=bool)
    std_cov = {}
    for name, vals in raw_cov.items():
        mean = vals[train_rows].mean()
        sd = vals[train_rows].std(ddof=1)
        std_cov[name] = (vals - mean) / sd

    truth = dict(config.truth)
    from .spde import spde_precision  # local alias for clarity
    from .mesh import assemble_fem

    def draw_interaction():
        if truth["sigma_M"] <= 0:
            return np.zeros(mesh.n_nodes * T)
        q_space = spde_precision(
            assemble_fem(mesh), MaternParams(truth["rho_M"], truth["sigma_M"])
        )
        q_time = ar1_precision(T, Ar1Params(truth["a"], 1.0))
        q = kronecker_st_precision(q_time, q_space)
        return sample_gmrf(q, 1, seed=seed, stream=1)[0]

    def draw_temporal():
        if truth["sigma_AR"] <= 0:
            return np.zeros(T)
        tau = 1.0 / truth["sigma_AR"] ** 2
        q = ar1_precision(T, Ar1Params(truth["a"], tau))
        f = sample_gmrf(q, 1, seed=seed, stream=2)[0]
        return f - f.mean()  # sum-to-zero, matching the fitted constraint

    def draw_spatial():
        if truth["sigma_M"] <= 0:
            return np.zeros(mesh.n_nodes)
        q = spde_precision(
            assemble_fem(mesh), MaternParams(truth["rho_M"], truth["sigma_M"])
        )
        return sample_gmrf(q, 1, seed=seed, stream=3)[0]

    def eta_fixed(coeffs: dict) -> np.ndarray:
        eta = np.full(n_st * T, float(coeffs.get("intercept", 0.0)))
        for name, beta in coeffs.items():
            if name == "intercept":
                continue
            if name not in std_cov:
                raise ConfigError(f"coefficient on unknown covariate '{name}'")
            eta = eta + beta * std_cov[name]
        return eta

    u = draw_interaction()
    u_rows = np.concatenate(
        [A_bary @ u[t * mesh.n_nodes : (t + 1) * mesh.n_nodes] for t in range(T)]
    )

    if config.model in ("model1", "model3"):
        eta_max = eta_fixed(config.coefficients) + u_rows
    elif config.model in ("model2", "model4"):
        f = draw_temporal()
        w = draw_spatial()
        eta_max = (
            eta_fixed(config.coefficients)
            + np.repeat(f, n_st)
            + np.tile(A_bary @ w, T)
            + u_rows
        )
    else:  # joint
        eta_max = None

    if config.model == "joint":
        shared = {c: config.coefficients[c] for c in config.sharing_beta1}
        eta_shared = eta_fixed({**shared})
        eta_mean = (
            eta_fixed({k: v for k, v in config.coefficients_mean.items()})
            + eta_shared
            + u_rows
        )
        eta_shared_scaled = np.zeros(n_st * T)
        for c, b1 in config.sharing_beta1.items():
            eta_shared_scaled += config.coefficients[c] * b1 * std_cov[c]
        eta_max = (
            eta_fixed({k: v for k, v in config.coefficients.items() if k not in shared})
            + eta_shared_scaled
            + config.sharing_beta2 * u_rows
        )
        y_mean = FAMILIES["gaussian"].draw(rng, eta_mean, (truth["sigma_mean"],))
    else:
        y_mean = np.full(n_st * T, np.nan)

    family = "gev" if config.model in ("model3", "model4") else "gumbel"
    scale = (truth["sigma"], truth["xi"]) if family == "gev" else (truth["sigma"],)
    y_max = FAMILIES[family].draw(rng, eta_max, scale)

    valid_fraction = np.ones(n_st * T)
    if config.valid_fraction_low_count:
        k = min(config.valid_fraction_low_count, n_st * T)
        valid_fraction[rng.choice(n_st * T, size=k, replace=False)] = 0.4

    table = ObservationTable(
        station_id=[f"st{s:04d}" for _ in years for s in range(n_st)],
        lon=raw_cov["lon"],
        lat=raw_cov["lat"],
        altitude=raw_cov["altitude"],
        year=year_col.astype(int),
        pm10_mean=np.exp(y_mean),
        pm10_max=np.exp(y_max),
        temperature=raw_cov["temperature"],
        precipitation=raw_cov["precipitation"],
        vapour_pressure=raw_cov["vapour_pressure"],
        population_density=raw_cov["population_density"],
        valid_fraction=valid_fraction,
    )
    truth_record = {
        "model": config.model,
        "seed": int(seed),
        "hyperparameters": {k: float(v) for k, v in truth.items()},
        "coefficients": {k: float(v) for k, v in config.coefficients.items()},
        "coefficients_mean": {k: float(v) for k, v in config.coefficients_mean.items()},
        "sharing_beta1": {k: float(v) for k, v in config.sharing_beta1.items()},
        "sharing_beta2": float(config.sharing_beta2),
        "years": list(years),
        "bbox": list(config.bbox),
        "mesh": {"nx": config.mesh_nx, "ny": config.mesh_ny, "pad": config.mesh_pad},
    }
    return table, truth_record
