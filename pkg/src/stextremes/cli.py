"""Command-line entry point: simulate | fit | predict | evaluate | excursion | compare.

Configuration is a plain INI file with sections [mesh], [model], [priors],
[start], [fixed], [fit], [simulate], [excursion]; unknown keys fail fast
with the nearest valid key suggested. All stochastic subcommands take
--seed; identical inputs, config and seeds give byte-identical outputs.

Exit codes: 0 success, 2 validation/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import difflib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .data import (
    MANDATORY_COLUMNS,
    ObservationTable,
    PreparedDataset,
    SimulationConfig,
    load_observations,
    prepare,
    save_observations,
    simulate_dataset,
    simulation_mesh,
)
from .errors import ConfigError, DataError, NumericalError, StExtremesError
from .excursion import ExcursionRequest, exceedance_map, excursion_function
from .inference import (
    FitOptions,
    FitResult,
    ModelSpec,
    PredictionTargets,
    PriorSet,
    fit as run_fit,
    model_spec,
    predict as run_predict,
)
from .joint import build_joint_spec
from .mesh import load_mesh, save_mesh
from .priors import (
    DEFAULT_COEFF_PRECISION,
    GaussianPrior,
    PcCor1Prior,
    PcMaternPrior,
    PcSdPrior,
)

KNOWN_KEYS = {
    "mesh": {"nx", "ny", "pad_frac", "file"},
    "model": {"class", "covariates", "shared", "nonshared"},
    "priors": {
        "likelihood_sd_u",
        "likelihood_sd_alpha",
        "matern_rho0",
        "matern_alpha_rho",
        "matern_sigma0",
        "matern_alpha_sigma",
        "ar_cor_p0",
        "ar_sd_u",
        "ar_sd_alpha",
        "coeff_precision",
        "sharing_sd",
    },
    "start": None,  # hyperparameter names, validated against the spec
    "fixed": None,
    "fit": {
        "grid_step",
        "lp_drop",
        "hess_step",
        "nm_xatol",
        "nm_fatol",
        "nm_maxiter",
        "min_valid",
        "train_years",
        "validation_years",
    },
    "simulate": None,  # validated separately (coef_*/truth_* families)
    "excursion": {"thresholds", "direction", "n_samples", "grid_step", "mix_hyper", "target_se"},
}

SIMULATE_FIXED_KEYS = {
    "model",
    "n_stations",
    "years",
    "bbox",
    "covariates",
    "beta2",
    "low_valid_rows",
}


def _fail_unknown_key(section: str, key: str, valid) -> None:
    hint = difflib.get_close_matches(key, sorted(valid), n=1)
    suffix = f"; did you mean '{hint[0]}'?" if hint else ""
    raise ConfigError(f"unknown key '{key}' in section [{section}]{suffix}")


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # hyperparameter names are case-sensitive (rho_M, ...)
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    cp.read(path)
    for section in cp.sections():
        if section not in KNOWN_KEYS:
            hint = difflib.get_close_matches(section, sorted(KNOWN_KEYS), n=1)
            suffix = f"; did you mean '[{hint[0]}]'?" if hint else ""
            raise ConfigError(f"unknown config section [{section}]{suffix}")
        valid = KNOWN_KEYS[section]
        if valid is None:
            continue
        for key in cp[section]:
            if key not in valid:
                _fail_unknown_key(section, key, valid)
    return cp


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _years(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# config -> model objects
# ---------------------------------------------------------------------------


def build_priors(cp, block_names, domain_diameter: float) -> PriorSet:
    sec = cp["priors"] if cp.has_section("priors") else {}
    u = float(sec.get("likelihood_sd_u", 3.0))
    alpha = float(sec.get("likelihood_sd_alpha", 0.01))
    rho0 = float(sec.get("matern_rho0", 0.1 * domain_diameter))
    return PriorSet(
        likelihood_sd={b: PcSdPrior(u=u, alpha=alpha) for b in block_names},
        matern=PcMaternPrior(
            rho0=rho0,
            alpha_rho=float(sec.get("matern_alpha_rho", 0.01)),
            sigma0=float(sec.get("matern_sigma0", 3.0)),
            alpha_sigma=float(sec.get("matern_alpha_sigma", 0.01)),
        ),
        ar_cor=PcCor1Prior(p0=float(sec.get("ar_cor_p0", 0.9))),
        ar_sd=PcSdPrior(
            u=float(sec.get("ar_sd_u", 5.0)), alpha=float(sec.get("ar_sd_alpha", 0.01))
        ),
        sharing=GaussianPrior(mean=0.0, sd=float(sec.get("sharing_sd", 5.0))),
        coeff_precision=float(sec.get("coeff_precision", DEFAULT_COEFF_PRECISION)),
    )


def build_spec(cp, domain_diameter: float) -> ModelSpec:
    if not cp.has_section("model"):
        raise ConfigError("config needs a [model] section")
    sec = cp["model"]
    model_class = sec.get("class", "model1").strip()
    fixed = {k: float(v) for k, v in (cp["fixed"].items() if cp.has_section("fixed") else [])}
    start = {k: float(v) for k, v in (cp["start"].items() if cp.has_section("start") else [])}

    if model_class == "joint":
        shared = _names(sec.get("shared", ""))
        nonshared = _names(sec.get("nonshared", ""))
        priors = build_priors(cp, ["mean", "max"], domain_diameter)
        spec = build_joint_spec(
            shared=shared, nonshared=nonshared, priors=priors, fixed=fixed, start=start
        )
    elif model_class in ("model1", "model2", "model3", "model4"):
        covariates = _names(sec.get("covariates", ""))
        priors = build_priors(cp, ["max"], domain_diameter)
        spec = model_spec(
            int(model_class[-1]), covariates=covariates, priors=priors, fixed=fixed, start=start
        )
    else:
        raise ConfigError(
            f"unknown model class '{model_class}' "
            "(choose model1, model2, model3, model4 or joint)"
        )
    known_hypers = {n for n, _ in spec.hyper_names()}
    for k in list(start) + list(fixed):
        if k not in known_hypers:
            _fail_unknown_key("start/fixed", k, known_hypers)
    return spec


def build_fit_options(cp, mesh_override=None) -> FitOptions:
    opts = FitOptions()
    if mesh_override is not None:
        opts.mesh = mesh_override
    elif cp.has_section("mesh"):
        sec = cp["mesh"]
        if sec.get("file"):
            opts.mesh = load_mesh(sec["file"])
        else:
            opts.mesh_nx = int(sec.get("nx", opts.mesh_nx))
            opts.mesh_ny = int(sec.get("ny", opts.mesh_ny))
            opts.mesh_pad_frac = float(sec.get("pad_frac", opts.mesh_pad_frac))
    if cp.has_section("fit"):
        sec = cp["fit"]
        opts.grid_step = float(sec.get("grid_step", opts.grid_step))
        opts.lp_drop = float(sec.get("lp_drop", opts.lp_drop))
        opts.hess_step = float(sec.get("hess_step", opts.hess_step))
        opts.nm_xatol = float(sec.get("nm_xatol", opts.nm_xatol))
        opts.nm_fatol = float(sec.get("nm_fatol", opts.nm_fatol))
        if sec.get("nm_maxiter"):
            opts.nm_maxiter = int(sec["nm_maxiter"])
    return opts


def build_simulation_config(cp) -> SimulationConfig:
    if not cp.has_section("simulate"):
        raise ConfigError("config needs a [simulate] section")
    sec = cp["simulate"]
    coefficients, coefficients_mean, sharing_beta1, truth = {}, {}, {}, {}
    known_truth = {"a", "rho_M", "sigma_M", "sigma", "xi", "sigma_AR", "sigma_mean"}
    mesh_keys = {"nx", "ny", "pad"}
    kwargs = {}
    for key, value in sec.items():
        if key in SIMULATE_FIXED_KEYS:
            continue
        if key.startswith("coef_"):
            coefficients[key[len("coef_"):]] = float(value)
        elif key.startswith("mean_coef_"):
            coefficients_mean[key[len("mean_coef_"):]] = float(value)
        elif key.startswith("beta1_"):
            sharing_beta1[key[len("beta1_"):]] = float(value)
        elif key.startswith("truth_"):
            name = key[len("truth_"):]
            if name not in known_truth:
                _fail_unknown_key("simulate", key, {f"truth_{t}" for t in known_truth})
            truth[name] = float(value)
        elif key.startswith("mesh_"):
            name = key[len("mesh_"):]
            if name not in mesh_keys:
                _fail_unknown_key("simulate", key, {f"mesh_{m}" for m in mesh_keys})
            kwargs[f"mesh_{name}"] = int(value) if name != "pad" else float(value)
        else:
            valid = (
                SIMULATE_FIXED_KEYS
                | {f"truth_{t}" for t in known_truth}
                | {"coef_<name>", "mean_coef_<name>", "beta1_<name>", "mesh_nx", "mesh_ny", "mesh_pad"}
            )
            _fail_unknown_key("simulate", key, valid)
    bbox = tuple(_floats(sec.get("bbox", "0, 0, 1, 1")))
    if len(bbox) != 4:
        raise ConfigError("bbox needs four numbers: xmin, ymin, xmax, ymax")
    return SimulationConfig(
        model=sec.get("model", "model1"),
        n_stations=int(sec.get("n_stations", 100)),
        years=_years(sec.get("years", "2017 2018 2019 2020")),
        bbox=bbox,
        covariates=_names(sec.get("covariates", "altitude, temperature")),
        coefficients=coefficients or {"intercept": 4.0},
        coefficients_mean=coefficients_mean,
        sharing_beta1=sharing_beta1,
        sharing_beta2=float(sec.get("beta2", 1.0)),
        truth=truth,
        valid_fraction_low_count=int(sec.get("low_valid_rows", 0)),
        **kwargs,
    )


# ---------------------------------------------------------------------------
# shared data plumbing
# ---------------------------------------------------------------------------


def load_and_prepare(cp, data_path) -> tuple[ObservationTable, PreparedDataset]:
    table = load_observations(data_path)
    if table.rejected:
        print(f"note: {len(table.rejected)} row(s) rejected during load", file=sys.stderr)
    min_valid = 0.6
    train_years = validation_years = None
    if cp is not None and cp.has_section("fit"):
        sec = cp["fit"]
        min_valid = float(sec.get("min_valid", 0.6))
        if sec.get("train_years"):
            train_years = _years(sec["train_years"])
            validation_years = _years(sec.get("validation_years", ""))
    data = prepare(
        table,
        min_valid=min_valid,
        train_years=train_years,
        validation_years=validation_years,
    )
    return table, data


def data_diameter(data: PreparedDataset) -> float:
    span = data.coords.max(axis=0) - data.coords.min(axis=0)
    return float(np.hypot(*span)) or 1.0


def targets_from_table(path, fit_result: FitResult) -> PredictionTargets:
    """Read a targets CSV: lon, lat, year plus raw covariate columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lon", "lat", "year"} <= set(reader.fieldnames):
            raise DataError(f"{path}: targets need at least lon, lat, year columns")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no target rows")
    lon = np.array([float(r["lon"]) for r in rows])
    lat = np.array([float(r["lat"]) for r in rows])
    year = np.array([int(r["year"]) for r in rows])
    raw = {}
    for c in fit_result.data_meta["covariate_names"]:
        if c == "lon":
            raw[c] = lon
        elif c == "lat":
            raw[c] = lat
        elif c in rows[0]:
            raw[c] = np.array([float(r[c]) for r in rows])
    return PredictionTargets(
        coords=np.column_stack([lon, lat]), year=year, raw_covariates=raw
    )


def validation_targets(
    table: ObservationTable, data: PreparedDataset, fit_result: FitResult, block: str
) -> tuple[PredictionTargets, np.ndarray]:
    """Validation-year rows as prediction targets plus their log responses."""
    years = set(data.validation_years)
    response = {"max": "pm10_max", "mean": "pm10_mean"}[block]
    rows = [
        i
        for i in range(table.n_rows)
        if int(table.year[i]) in years and not math.isnan(float(table.column(response)[i]))
        and table.valid_fraction[i] >= 0.6
    ]
    if not rows:
        raise DataError("no validation rows available")
    raw = {}
    for c in fit_result.data_meta["covariate_names"]:
        raw[c] = np.array([float(table.column(c)[i]) for i in rows])
    targets = PredictionTargets(
        coords=np.array([[table.lon[i], table.lat[i]] for i in rows]),
        year=np.array([int(table.year[i]) for i in rows]),
        raw_covariates=raw,
        block=block,
    )
    observed = np.log(np.array([float(table.column(response)[i]) for i in rows]))
    return targets, observed


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cp = read_config(args.config)
    config = build_simulation_config(cp)
    table, truth = simulate_dataset(config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_observations(table, out / "observations.csv")
    with open(out / "truth.json", "w") as fh:
        json.dump(truth, fh, sort_keys=True, indent=1)
        fh.write("\n")
    save_mesh(simulation_mesh(config), out / "mesh.txt")
    print(f"wrote {out / 'observations.csv'} ({table.n_rows} rows)")
    return 0


def hyper_report_rows(fit_result: FitResult):
    """Hyperparameter table rows; scale parameters also as precisions."""
    rows = []
    for m in fit_result.hyper_marginals:
        rows.append((m.name, m.mean, m.sd, m.q025, m.q50, m.q975))
        if m.name.startswith("sigma_") and m.name != "sigma_M":
            # report 1/sigma^2 with quantiles by monotone inversion
            idx = fit_result.hyper_map.names.index(m.name)
            mu_t = float(fit_result.theta_mode_t[idx])
            sd_t = float(np.sqrt(fit_result.theta_cov[idx, idx]))
            from .inference import GH_POINTS, GH_WEIGHTS

            tau = np.exp(-2.0 * (mu_t + sd_t * GH_POINTS))
            mean = float(np.sum(GH_WEIGHTS * tau))
            sd = float(np.sqrt(max(np.sum(GH_WEIGHTS * tau**2) - mean**2, 0.0)))
            q = lambda p: float(np.exp(-2.0 * (mu_t + sd_t * p)))
            z975 = 1.959963984540054
            rows.append(
                (f"tau_{m.name[6:]}", mean, sd, q(z975), q(0.0), q(-z975))
            )
    for name, value in sorted(fit_result.hyper_map.fixed.items()):
        rows.append((f"{name} (fixed)", value, 0.0, value, value, value))
    return rows


def cmd_fit(args) -> int:
    cp = read_config(args.config)
    table, data = load_and_prepare(cp, args.data)
    spec = build_spec(cp, data_diameter(data))
    mesh_override = load_mesh(args.mesh) if args.mesh else None
    options = build_fit_options(cp, mesh_override)
    options.seed = args.seed
    result = run_fit(spec, data, options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.save(out / "fit.json")

    rows = [
        (m.name, m.mean, m.sd, m.q025, m.q50, m.q975) for m in result.coeff_marginals
    ] + hyper_report_rows(result)
    write_csv(
        out / "summary.csv",
        ("parameter", "mean", "sd", "q0.025", "q0.5", "q0.975"),
        rows,
    )
    for w in result.diagnostics.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {out / 'fit.json'} and {out / 'summary.csv'}")
    return 0


def cmd_predict(args) -> int:
    fit_result = FitResult.load(args.fit)
    cp = read_config(args.config) if args.config else None
    table, data = load_and_prepare(cp, args.data)
    targets = targets_from_table(args.targets, fit_result)
    if args.block:
        targets.block = args.block
    pred = run_predict(fit_result, data, targets)
    header = ["lon", "lat", "year"] + sorted(pred.keys())
    rows = [
        [targets.coords[i, 0], targets.coords[i, 1], int(targets.year[i])]
        + [pred[k][i] for k in sorted(pred.keys())]
        for i in range(len(targets.year))
    ]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, header, rows)
    print(f"wrote {args.out}")
    return 0


def _criteria_row(label, report):
    return (
        label,
        report.dic,
        report.p_d,
        report.waic,
        report.p_waic,
        report.ls,
        report.n_cpo_failed,
        "" if report.coverage is None else report.coverage,
        "" if report.correlation is None else report.correlation,
        "" if report.rmse is None else report.rmse,
    )


CRITERIA_HEADER = (
    "model",
    "DIC",
    "p_D",
    "WAIC",
    "p_WAIC",
    "LS",
    "cpo_failures",
    "coverage",
    "correlation",
    "RMSE",
)


def _evaluate_one(fit_result: FitResult, table, data, seed: int):
    predictions = observed = None
    if data.validation_years:
        block = fit_result.spec.blocks[-1].name
        targets, observed = validation_targets(table, data, fit_result, block)
        predictions = run_predict(fit_result, data, targets)
    return evaluation.evaluate(
        fit_result, data, predictions=predictions, observed=observed, cpo_seed=seed
    )


def cmd_evaluate(args) -> int:
    fit_result = FitResult.load(args.fit)
    cp = read_config(args.config) if args.config else None
    table, data = load_and_prepare(cp, args.data)
    report = _evaluate_one(fit_result, table, data, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "criteria.csv", CRITERIA_HEADER, [_criteria_row(fit_result.spec.label, report)])
    write_csv(
        out / "pointwise.csv",
        ("index", "cpo", "pit"),
        [(i, report.cpo[i], report.pit[i]) for i in range(len(report.cpo))],
    )
    print(f"wrote {out / 'criteria.csv'} and {out / 'pointwise.csv'}")
    return 0


def cmd_compare(args) -> int:
    cp = read_config(args.config) if args.config else None
    rows = []
    reports = []
    for fit_path in args.fits:
        fit_result = FitResult.load(fit_path)
        table, data = load_and_prepare(cp, args.data)
        report = _evaluate_one(fit_result, table, data, args.seed)
        reports.append((fit_result.spec.label, report))
        rows.append(_criteria_row(fit_result.spec.label, report))
    # rank per criterion, lower is better
    for crit, get in (("DIC", lambda r: r.dic), ("WAIC", lambda r: r.waic), ("LS", lambda r: r.ls)):
        vals = [get(r) for _, r in reports]
        order = np.argsort(vals)
        ranks = np.empty(len(vals), dtype=int)
        ranks[order] = np.arange(1, len(vals) + 1)
        rows = [row + (int(ranks[i]),) for i, row in enumerate(rows)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(
        args.out,
        CRITERIA_HEADER + ("rank_DIC", "rank_WAIC", "rank_LS"),
        rows,
    )
    print(f"wrote {args.out}")
    return 0


def _grid_targets(data: PreparedDataset, fit_result: FitResult, spacing: float):
    """Regular grid over the data bbox plus the station locations."""
    xmin, ymin = data.coords.min(axis=0)
    xmax, ymax = data.coords.max(axis=0)
    xs = np.arange(xmin, xmax + spacing / 2, spacing)
    ys = np.arange(ymin, ymax + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    stations = np.unique(data.coords, axis=0)
    coords = np.vstack([grid, stations])
    year = np.full(len(coords), max(fit_result.data_meta["train_years"]))
    cov_names = fit_result.data_meta["covariate_names"]
    needed = set(fit_result.spec.shared_covariates)
    for b in fit_result.spec.blocks:
        needed |= set(b.covariates)
    missing = needed - {"lon", "lat"}
    if missing:
        raise ConfigError(
            f"excursion grid targets need covariates {sorted(missing)}; "
            "provide a --targets CSV instead"
        )
    raw = {}
    if "lon" in cov_names:
        raw["lon"] = coords[:, 0]
    if "lat" in cov_names:
        raw["lat"] = coords[:, 1]
    return PredictionTargets(coords=coords, year=year, raw_covariates=raw, block="max")


def cmd_excursion(args) -> int:
    fit_result = FitResult.load(args.fit)
    cp = read_config(args.config) if args.config else None
    table, data = load_and_prepare(cp, args.data)

    sec = cp["excursion"] if (cp is not None and cp.has_section("excursion")) else {}
    thresholds = (
        [float(t) for t in args.threshold]
        if args.threshold
        else _floats(sec.get("thresholds", "50, 100"))
    )
    direction = args.direction or sec.get("direction", "positive")
    n_samples = args.n_samples or int(sec.get("n_samples", 10_000))
    mix = bool(int(sec.get("mix_hyper", "0"))) if "mix_hyper" in sec else args.mix_hyper

    if args.targets:
        targets = targets_from_table(args.targets, fit_result)
        targets.block = "max" if fit_result.spec.is_joint else None
    else:
        spacing = float(sec.get("grid_step", 0.1))
        targets = _grid_targets(data, fit_result, spacing)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exceed = exceedance_map(fit_result, data, thresholds, targets)
    for u in thresholds:
        request = ExcursionRequest(
            threshold=u,
            direction=direction,
            targets=targets,
            n_samples=n_samples,
            seed=args.seed,
            mix_hyper=mix,
        )
        result = excursion_function(fit_result, data, request)
        tag = f"{u:g}" if direction == "positive" else f"{u:g}_neg"
        rows = [
            (
                i,
                targets.coords[i, 0],
                targets.coords[i, 1],
                result.marginal_prob[i],
                result.excursion[i],
                result.mc_se[i],
                exceed[f"prob_exceed_{u:g}"][i],
            )
            for i in range(len(targets.year))
        ]
        write_csv(
            out / f"excursion_{tag}.csv",
            (
                "location_id",
                "lon",
                "lat",
                "marginal_prob",
                "excursion_value",
                "mc_se",
                "prob_exceed_response",
            ),
            rows,
        )
        features = [
            {
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    "coordinates": [float(targets.coords[i, 0]), float(targets.coords[i, 1])],
                },
                "properties": {
                    "location_id": i,
                    "marginal_prob": float(result.marginal_prob[i]),
                    "excursion_value": float(result.excursion[i]),
                    "mc_se": float(result.mc_se[i]),
                },
            }
            for i in range(len(targets.year))
        ]
        payload = {
            "type": "FeatureCollection",
            "metadata": {
                "threshold_raw": u,
                "threshold_log": float(np.log(u)),
                "direction": direction,
                "n_samples": n_samples,
                "seed": args.seed,
            },
            "features": features,
        }
        with open(out / f"excursion_{tag}.geojson", "w") as fh:
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        for note in result.notes:
            print(f"warning: {note}", file=sys.stderr)
        print(f"wrote {out / f'excursion_{tag}.csv'} (+ .geojson)")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stextremes",
        description="Spatio-temporal Bayesian extreme-value modelling toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model and write the artifact")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mesh", help="mesh file overriding the [mesh] section")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predictive table at target locations")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--config")
    p.add_argument("--block")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="criteria report for one fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="rank several fits per criterion")
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("excursion", help="hot-spot excursion maps")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--targets")
    p.add_argument("--threshold", action="append", type=float)
    p.add_argument("--direction", choices=("positive", "negative"))
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--mix-hyper", action="store_true", dest="mix_hyper")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_excursion)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except StExtremesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
