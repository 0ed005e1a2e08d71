import numpy as np
import pytest

from conftest import make_dataset
from stextremes.data import SimulationConfig, prepare, simulate_dataset, simulation_mesh
from stextremes.errors import ConfigError
from stextremes.inference import (
    FitOptions,
    HyperMap,
    LikelihoodBlock,
    ModelContext,
    ModelSpec,
    PriorSet,
    fit,
)
from stextremes.joint import SharingLink, build_joint_spec, sharing_posteriors
from stextremes.mesh import build_structured_mesh
from stextremes.priors import PcSdPrior


class TestBuildJointSpec:
    def test_paper_configuration(self):
        # altitude and precipitation shared; the rest non-shared
        spec = build_joint_spec(
            shared=("altitude", "precipitation"),
            nonshared=("lon", "lat", "temperature", "vapour_pressure", "population_density"),
        )
        assert spec.label == "joint"
        assert [b.family for b in spec.blocks] == ["gaussian", "gumbel"]
        assert [b.response for b in spec.blocks] == ["y_mean", "y_max"]
        assert spec.shared_covariates == ("altitude", "precipitation")
        names = [n for n, _ in spec.hyper_names()]
        assert "beta1_altitude" in names
        assert "beta1_precipitation" in names
        assert "beta2" in names
        assert "sigma_mean" in names and "sigma_max" in names

    def test_overlapping_sets_rejected(self):
        with pytest.raises(ConfigError, match="shared and non-shared"):
            SharingLink(shared=("altitude",), nonshared_mean=("altitude",), nonshared_max=())
        with pytest.raises(ConfigError):
            build_joint_spec(shared=("altitude",), nonshared=("altitude", "lon"))

    def test_identity_scaling_reuses_block1_terms(self):
        rng = np.random.default_rng(0)
        n = 12
        coords = rng.uniform(0.2, 0.8, (n, 2))
        alt = rng.standard_normal(n)
        y = rng.normal(3, 0.3, n)
        data = make_dataset(
            coords, (2020,), {"altitude": alt}, y_max=y, y_mean=y - 1.0
        )
        spec = build_joint_spec(
            shared=("altitude",),
            nonshared=(),
            fixed={"beta2": 1.0, "beta1_altitude": 1.0},
        )
        mesh = build_structured_mesh((-0.3, -0.3, 1.3, 1.3), 5, 5)
        ctx = ModelContext(spec, data, mesh)
        nat = HyperMap(spec).to_natural(
            HyperMap(spec).to_transformed(
                {"sigma_mean": 0.3, "sigma_max": 0.3, "rho_M": 0.5, "sigma_M": 0.5, "a": 0.5}
            )
        )
        A = ctx.design(nat).toarray()
        shared_col = ctx.layout.slices["coeff"].start
        # identical shared-covariate loadings and interaction loadings
        assert np.allclose(A[:n, shared_col], alt)
        assert np.allclose(A[n:, shared_col], alt)
        int_slice = ctx.layout.slices["interaction"]
        assert np.allclose(A[:n, int_slice], A[n:, int_slice])


class TestJointFit:
    def test_empty_shared_set_matches_separate_fits(self):
        cfg = SimulationConfig(
            model="joint",
            n_stations=35,
            years=(2018, 2019, 2020),
            mesh_nx=6,
            mesh_ny=6,
            covariates=("altitude",),
            coefficients={"intercept": 4.0, "altitude": 0.4},
            coefficients_mean={"intercept": 2.8, "altitude": -0.3},
            sharing_beta1={},
            sharing_beta2=0.0,
            truth={"a": 0.7, "sigma_M": 0.4, "sigma": 0.25, "sigma_mean": 0.2},
        )
        table, _ = simulate_dataset(cfg, seed=7)
        data = prepare(table, train_years=cfg.years, validation_years=())
        mesh = simulation_mesh(cfg)

        joint = build_joint_spec(
            shared=(),
            nonshared=("altitude",),
            fixed={"beta2": 0.0},
            domain_diameter=np.sqrt(2),
        )
        res_joint = fit(joint, data, FitOptions(mesh=mesh))

        # separate Gumbel block: fixed effects only (beta2=0 removed its field)
        gumbel_only = ModelSpec(
            blocks=(LikelihoodBlock("max", "gumbel", "y_max", covariates=("altitude",)),),
            effects=(),
            priors=PriorSet(likelihood_sd={"max": PcSdPrior(3.0, 0.01)}),
        )
        res_max = fit(gumbel_only, data, FitOptions(mesh=mesh))

        gauss_only = ModelSpec(
            blocks=(LikelihoodBlock("mean", "gaussian", "y_mean", covariates=("altitude",)),),
            effects=("interaction",),
            priors=PriorSet(
                likelihood_sd={"mean": PcSdPrior(3.0, 0.01)},
                matern=PriorSet.default(["mean"], np.sqrt(2)).matern,
            ),
        )
        res_mean = fit(gauss_only, data, FitOptions(mesh=mesh))

        for name_joint, name_sep, sep in [
            ("altitude[max]", "altitude", res_max),
            ("intercept[max]", "intercept", res_max),
            ("altitude[mean]", "altitude", res_mean),
            ("intercept[mean]", "intercept", res_mean),
        ]:
            mj = res_joint.coeff_marginal(name_joint)
            ms = sep.coeff_marginal(name_sep)
            assert mj.mean == pytest.approx(ms.mean, abs=5e-2)
            assert mj.sd == pytest.approx(ms.sd, rel=0.25)

    def test_sign_recovery_single_replicate(self):
        cfg = SimulationConfig(
            model="joint",
            n_stations=60,
            years=(2017, 2018, 2019, 2020),
            mesh_nx=7,
            mesh_ny=7,
            covariates=("altitude", "precipitation"),
            coefficients={"intercept": 4.0, "altitude": 1.0, "precipitation": 0.9},
            coefficients_mean={"intercept": 2.8},
            sharing_beta1={"altitude": -0.5, "precipitation": 0.7},
            sharing_beta2=1.0,
            truth={"a": 0.8, "sigma_M": 0.5, "sigma": 0.15, "sigma_mean": 0.12},
        )
        table, truth = simulate_dataset(cfg, seed=21)
        data = prepare(table, train_years=cfg.years, validation_years=())
        spec = build_joint_spec(
            shared=("altitude", "precipitation"),
            nonshared=(),
            domain_diameter=np.sqrt(2),
        )
        res = fit(spec, data, FitOptions(mesh=simulation_mesh(cfg)))
        posts = {p.name: p for p in sharing_posteriors(res)}
        assert posts["beta1_altitude"].prob_negative > 0.9
        assert posts["beta1_precipitation"].prob_negative < 0.1
        assert posts["beta2"].summary.mean > 0
        # density tables integrate to ~1
        grid = posts["beta1_altitude"].density_grid
        mass = np.trapezoid(grid[:, 1], grid[:, 0])
        assert mass == pytest.approx(1.0, abs=2e-3)

    def test_degenerate_shared_covariate_flagged(self):
        rng = np.random.default_rng(4)
        n = 20
        coords = rng.uniform(0.2, 0.8, (n, 2))
        y = rng.normal(3, 0.3, n)
        data = make_dataset(
            coords,
            (2020,),
            {"dead": np.zeros(n), "x1": rng.standard_normal(n)},
            y_max=y,
            y_mean=y - 1.0,
        )
        spec = build_joint_spec(
            shared=("dead",),
            nonshared=("x1",),
            fixed={
                "sigma_mean": 0.3,
                "sigma_max": 0.3,
                "rho_M": 0.5,
                "sigma_M": 0.4,
                "a": 0.5,
                "beta2": 1.0,
            },
        )
        mesh = build_structured_mesh((-0.3, -0.3, 1.3, 1.3), 5, 5)
        with pytest.warns(UserWarning, match="identically zero"):
            res = fit(spec, data, FitOptions(mesh=mesh))
        with pytest.warns(UserWarning, match="prior-dominated"):
            posts = {p.name: p for p in sharing_posteriors(res)}
        assert posts["beta1_dead"].prior_dominated
