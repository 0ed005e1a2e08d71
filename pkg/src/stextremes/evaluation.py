"""Model comparison and validation criteria.

DIC and WAIC integrate the per-observation log-densities over the fitted
posterior (theta grid x Gaussian latent marginals) with Gauss-Hermite
quadrature. CPO/PIT are leave-one-out quantities: for datasets up to
``CPO_EXACT_MAX`` observations each observation is removed and the latent
field re-optimized per grid point (grid locations kept, weights
recomputed); beyond that an importance-weighted shortcut is used with a
per-observation failure check falling back to the exact refit.

All logarithms are natural. Reductions run in fixed observation order, so
results are bitwise reproducible and permutation-invariant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PreparedDataset
from .errors import DataError, NumericalError
from .inference import (
    GH_POINTS,
    GH_WEIGHTS,
    FitResult,
    InnerResult,
    ModelContext,
    _grid_inners,
    _stacked_loglik,
    rebuild_context,
)
from .spde import SparsePrecision

CPO_EXACT_MAX = 500
CPO_WEIGHT_CV_MAX = 10.0
CPO_UNDERFLOW = 1e-290
WAIC_VAR_WARN = 0.4


@dataclass
class EvaluationReport:
    dic: float
    p_d: float
    waic: float
    p_waic: float
    cpo: np.ndarray
    pit: np.ndarray
    ls: float
    n_cpo_failed: int
    coverage: float | None = None
    correlation: float | None = None
    rmse: float | None = None
    notes: list[str] = field(default_factory=list)


def _obs_scales(fit: FitResult, ctx: ModelContext, nat: dict) -> list[tuple]:
    return ctx.scales(nat)


def _pointwise_gh(fit: FitResult, ctx: ModelContext):
    """Per grid point k and observation i: E[ln p], E[(ln p)^2], E[p], E[cdf].

    Expectations are over eta_i ~ N(m_ik, v_ik) by Gauss-Hermite.
    """
    n_grid = len(fit.grid)
    n_obs = ctx.n_obs
    e_log = np.empty((n_grid, n_obs))
    e_log2 = np.empty((n_grid, n_obs))
    e_dens = np.empty((n_grid, n_obs))
    for k, g in enumerate(fit.grid):
        scales = _obs_scales(fit, ctx, g.nat)
        sd = np.sqrt(g.obs_var)
        for bd, sl, scale in zip(ctx.blocks, ctx.block_slices, scales):
            m = g.obs_mean[sl]
            s = sd[sl]
            eta = m[:, None] + s[:, None] * GH_POINTS[None, :]
            with np.errstate(over="ignore", invalid="ignore"):
                lp = bd.family.logpdf(bd.y[:, None], eta, scale)
            lp = np.where(np.isfinite(lp), lp, -745.0)  # exp underflows to 0
            e_log[k, sl] = np.sum(GH_WEIGHTS * lp, axis=1)
            e_log2[k, sl] = np.sum(GH_WEIGHTS * lp**2, axis=1)
            e_dens[k, sl] = np.sum(GH_WEIGHTS * np.exp(lp), axis=1)
    return e_log, e_log2, e_dens


def dic(fit: FitResult, data: PreparedDataset, ctx: ModelContext | None = None):
    """Deviance information criterion: (DIC, p_D).

    The plug-in deviance evaluates posterior means of the latent field and
    of the natural-scale hyperparameters; the mean deviance integrates
    over the fitted posterior.
    """
    ctx = ctx or rebuild_context(fit, data)
    weights = fit.weights

    e_log, _, _ = _pointwise_gh(fit, ctx)
    mean_dev = float(-2.0 * np.sum(weights[:, None] * e_log))

    nat_mean = {
        key: float(np.sum(weights * np.array([g.nat[key] for g in fit.grid])))
        for key in fit.grid[0].nat
    }
    x_mean = np.sum(weights[:, None] * np.array([g.x_star for g in fit.grid]), axis=0)
    A = ctx.design(nat_mean)
    eta_hat = A @ x_mean
    d_hat = -2.0 * _stacked_loglik(ctx, eta_hat, ctx.scales(nat_mean))

    p_d = mean_dev - d_hat
    if len(fit.grid) == 1 and float(np.max(fit.grid[0].obs_var)) < 1e-12:
        warnings.warn("degenerate posterior (single point, zero spread): p_D = 0", stacklevel=2)
        p_d = 0.0
    return d_hat + 2.0 * p_d, p_d


def waic(fit: FitResult, data: PreparedDataset, ctx: ModelContext | None = None):
    """Widely applicable information criterion: (WAIC, p_WAIC)."""
    ctx = ctx or rebuild_context(fit, data)
    weights = fit.weights
    e_log, e_log2, e_dens = _pointwise_gh(fit, ctx)

    lppd_i = np.log(np.maximum(np.sum(weights[:, None] * e_dens, axis=0), 1e-300))
    mean_log = np.sum(weights[:, None] * e_log, axis=0)
    mean_log2 = np.sum(weights[:, None] * e_log2, axis=0)
    var_i = np.maximum(mean_log2 - mean_log**2, 0.0)

    n_bad = int(np.sum(var_i > WAIC_VAR_WARN))
    if n_bad:
        warnings.warn(
            f"{n_bad} observation(s) have WAIC variance term > {WAIC_VAR_WARN}; "
            "pointwise estimates may be unreliable",
            stacklevel=2,
        )
    waic_val = float(-2.0 * np.sum(lppd_i - var_i))
    return waic_val, float(np.sum(var_i))


def _loo_inner(ctx: ModelContext, nat: dict, full: InnerResult, drop: int) -> tuple:
    """Newton refit with one observation's likelihood contribution removed.

    Returns (x_star, Q_star, loglik_wo, quad_form). Warm-started at the
    full-data mode, so a couple of iterations suffice.
    """
    A = full.A
    At = A.T.tocsc()
    Qp = full.Q_prior
    scales = full.scales
    keep = np.ones(ctx.n_obs, dtype=bool)
    keep[drop] = False

    def loglik_masked(eta):
        total = 0.0
        for bd, sl, scale in zip(ctx.blocks, ctx.block_slices, scales):
            with np.errstate(over="ignore", invalid="ignore"):
                lp = bd.family.logpdf(bd.y, eta[sl], scale)
            lp = lp * keep[sl]
            if np.any(~np.isfinite(lp)):
                return -np.inf
            total += float(lp.sum())
        return total

    x = full.x_star.copy()
    eta = A @ x
    obj = loglik_masked(eta) - 0.5 * float(x @ (Qp.Q @ x))
    Q_star = None
    for it in range(50):
        d1 = np.empty(ctx.n_obs)
        d2 = np.empty(ctx.n_obs)
        for bd, sl, scale in zip(ctx.blocks, ctx.block_slices, scales):
            a, b = bd.family.mu_derivs(bd.y, eta[sl], scale)
            d1[sl], d2[sl] = a, b
        d1[drop] = 0.0
        d2[drop] = 0.0
        grad = At @ d1 - Qp.Q @ x
        W = np.maximum(-d2, 1e-10)
        W[drop] = 0.0
        M = Qp.Q + (At.multiply(W)) @ A
        Q_star = SparsePrecision(((M + M.T) * 0.5).tocsc(), check_symmetry=False)
        if float(np.max(np.abs(grad))) < 1e-8:
            return x, Q_star, loglik_masked(eta), float(x @ (Qp.Q @ x))
        step = Q_star.solve(grad)
        alpha = 1.0
        for _ in range(40):
            x_new = x + alpha * step
            eta_new = A @ x_new
            obj_new = loglik_masked(eta_new) - 0.5 * float(x_new @ (Qp.Q @ x_new))
            if np.isfinite(obj_new) and obj_new > obj - 1e-14:
                x, eta, obj = x_new, eta_new, obj_new
                break
            alpha *= 0.5
        else:
            break
    raise NumericalError(f"leave-one-out refit failed to converge for observation {drop}")


def _predictive_at(ctx: ModelContext, i: int, m: float, v: float, scales) -> tuple[float, float]:
    """(density, cdf) of observation i under eta ~ N(m, v)."""
    for bd, sl, scale in zip(ctx.blocks, ctx.block_slices, scales):
        if sl.start <= i < sl.stop:
            j = i - sl.start
            eta = m + np.sqrt(max(v, 0.0)) * GH_POINTS
            with np.errstate(over="ignore", invalid="ignore"):
                lp = bd.family.logpdf(bd.y[j], eta, scale)
            dens = float(np.sum(GH_WEIGHTS * np.exp(np.where(np.isfinite(lp), lp, -745.0))))
            cdf = float(np.sum(GH_WEIGHTS * bd.family.cdf(bd.y[j], eta, scale)))
            return dens, cdf
    raise IndexError(i)


def cpo_pit(
    fit: FitResult,
    data: PreparedDataset,
    ctx: ModelContext | None = None,
    exact_max: int = CPO_EXACT_MAX,
    mc_draws: int = 512,
    seed: int = 0,
):
    """Leave-one-out CPO and PIT vectors plus the summed log-score.

    Returns (cpo, pit, ls, n_failed). Exact refit when n <= exact_max;
    otherwise the importance shortcut CPO_i = 1 / E[1 / p(y_i | x)] with a
    weight-CV failure check (> 10 falls back to the refit for that i).
    Underflowed CPO values are excluded from LS and counted.
    """
    ctx = ctx or rebuild_context(fit, data)
    inners = _grid_inners(fit, ctx)
    n_obs = ctx.n_obs
    n_grid = len(fit.grid)
    lps = np.array([g.lp for g in fit.grid])

    cpo = np.empty(n_obs)
    pit = np.empty(n_obs)

    def exact_for(i: int):
        dens = np.empty(n_grid)
        cdfs = np.empty(n_grid)
        lp_wo = np.empty(n_grid)
        for k, (g, inner) in enumerate(zip(fit.grid, inners)):
            x_wo, q_wo, ll_wo, quad = _loo_inner(ctx, g.nat, inner, i)
            a_i = inner.A.getrow(i)
            m = float((a_i @ x_wo)[0])
            a_dense = np.zeros(ctx.layout.dim)
            a_dense[a_i.indices] = a_i.data
            v = float(a_dense @ q_wo.solve(a_dense))
            dens[k], cdfs[k] = _predictive_at(ctx, i, m, v, inner.scales)
            lp_wo[k] = (
                ll_wo
                - 0.5 * quad
                + 0.5 * inner.Q_prior.logdet
                - 0.5 * q_wo.logdet
                + fit.hyper_map.log_prior(g.nat)
                + fit.hyper_map.log_jacobian(g.theta_t)
            )
        w = np.exp(lp_wo - lp_wo.max())
        w /= w.sum()
        return float(np.sum(w * dens)), float(np.sum(w * cdfs))

    use_exact = n_obs <= exact_max
    if use_exact:
        for i in range(n_obs):
            cpo[i], pit[i] = exact_for(i)
    else:
        rng = np.random.Generator(
            np.random.Philox(key=np.array([int(seed) % 2**64, 17], dtype=np.uint64))
        )
        z = rng.standard_normal((n_grid, mc_draws))
        weights = fit.weights
        for i in range(n_obs):
            inv_p = np.empty((n_grid, mc_draws))
            cdf_over_p = np.empty((n_grid, mc_draws))
            for k, (g, inner) in enumerate(zip(fit.grid, inners)):
                m = g.obs_mean[i]
                s = float(np.sqrt(g.obs_var[i]))
                eta = m + s * z[k]
                for bd, sl, scale in zip(ctx.blocks, ctx.block_slices, inner.scales):
                    if sl.start <= i < sl.stop:
                        j = i - sl.start
                        with np.errstate(over="ignore", invalid="ignore"):
                            lp = bd.family.logpdf(bd.y[j], eta, scale)
                        p = np.exp(np.where(np.isfinite(lp), lp, -745.0))
                        inv_p[k] = 1.0 / np.maximum(p, 1e-300)
                        cdf_over_p[k] = bd.family.cdf(bd.y[j], eta, scale) * inv_p[k]
                        break
            mean_r = float(np.sum(weights * inv_p.mean(axis=1)))
            mean_r2 = float(np.sum(weights * (inv_p**2).mean(axis=1)))
            cv = float(np.sqrt(max(mean_r2 - mean_r**2, 0.0)) / max(mean_r, 1e-300))
            if cv > CPO_WEIGHT_CV_MAX:
                cpo[i], pit[i] = exact_for(i)
            else:
                e_cdf_over = float(np.sum(weights * cdf_over_p.mean(axis=1)))
                cpo[i] = 1.0 / mean_r
                pit[i] = e_cdf_over / mean_r

    flagged = ~np.isfinite(cpo) | (cpo <= CPO_UNDERFLOW)
    n_failed = int(np.sum(flagged))
    if n_failed:
        warnings.warn(
            f"{n_failed} CPO value(s) underflowed and were excluded from LS",
            stacklevel=2,
        )
    ls = float(-np.sum(np.log(cpo[~flagged])))
    return cpo, pit, ls, n_failed


def validation_metrics(predictions: dict, observed: np.ndarray):
    """(coverage, correlation, RMSE) of predictions against held-out data.

    ``predictions`` is a predict() table carrying resp_mean and the 2.5% /
    97.5% response quantile columns; ``observed`` is on the same (log)
    scale as the fitted responses.
    """
    observed = np.asarray(observed, dtype=float)
    if observed.size == 0:
        raise DataError("empty validation set")
    lo = predictions["resp_q0.025"]
    hi = predictions["resp_q0.975"]
    mean = predictions["resp_mean"]
    if not (len(lo) == len(hi) == len(mean) == len(observed)):
        raise DataError("prediction/observation length mismatch")
    coverage = float(np.mean((observed >= lo) & (observed <= hi)))
    if np.std(mean) == 0.0 or np.std(observed) == 0.0:
        correlation = 0.0 if np.std(mean) != np.std(observed) else 1.0
    else:
        correlation = float(np.corrcoef(mean, observed)[0, 1])
    rmse = float(np.sqrt(np.mean((mean - observed) ** 2)))
    return coverage, correlation, rmse


def evaluate(
    fit: FitResult,
    data: PreparedDataset,
    predictions: dict | None = None,
    observed: np.ndarray | None = None,
    cpo_seed: int = 0,
) -> EvaluationReport:
    """Full criteria bundle; validation metrics included when given."""
    ctx = rebuild_context(fit, data)
    dic_val, p_d = dic(fit, data, ctx)
    waic_val, p_w = waic(fit, data, ctx)
    cpo, pit, ls, n_failed = cpo_pit(fit, data, ctx, seed=cpo_seed)
    report = EvaluationReport(
        dic=dic_val,
        p_d=p_d,
        waic=waic_val,
        p_waic=p_w,
        cpo=cpo,
        pit=pit,
        ls=ls,
        n_cpo_failed=n_failed,
    )
    if predictions is not None and observed is not None:
        report.coverage, report.correlation, report.rmse = validation_metrics(
            predictions, observed
        )
    return report
