"""Excursion functions and exceedance maps over prediction targets.

The positive excursion function ranks locations by how credibly they
*jointly* exceed a threshold: locations are ordered by marginal
exceedance probability, and the value at rank k is the joint probability
that the k most extreme locations all exceed. By construction the values
are nonincreasing along the ordering, which makes the map a nested-set
("hot-spot") summary. Negative excursions mirror the construction below
the threshold.

Joint probabilities are Monte Carlo estimates over the fitted Gaussian
approximation of the target linear predictors, drawn at the modal
hyperparameter grid point (a flag enables full grid mixing). Thresholds
arrive on the raw response scale (e.g. micrograms per cubic meter) and
are applied on the model's log scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .data import PreparedDataset
from .errors import ConfigError
from .inference import (
    FitResult,
    PredictionTargets,
    _grid_inners,
    _target_rows,
    rebuild_context,
)
from .spde import sample_gmrf

MC_BATCH = 2048
MC_SE_WARN = 0.02


@dataclass
class ExcursionRequest:
    """Threshold (raw response scale), direction, targets and MC budget."""

    threshold: float
    direction: str  # "positive" | "negative"
    targets: PredictionTargets
    n_samples: int = 10_000
    seed: int = 0
    mix_hyper: bool = False
    target_se: float = MC_SE_WARN

    def __post_init__(self):
        if self.threshold <= 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold}")
        if self.direction not in ("positive", "negative"):
            raise ConfigError("direction must be 'positive' or 'negative'")
        if self.n_samples < 1000:
            raise ConfigError(f"need at least 1000 MC samples, got {self.n_samples}")
        if self.target_se <= 0:
            raise ConfigError("target_se must be positive")


@dataclass
class ExcursionResult:
    threshold: float
    log_threshold: float
    direction: str
    order: np.ndarray  # target indices sorted by construction order
    marginal_prob: np.ndarray  # per target, input order
    excursion: np.ndarray  # F+ / F- per target, input order
    mc_se: np.ndarray  # per target, input order
    n_samples: int
    notes: list[str] = field(default_factory=list)


def _joint_draws_modal(fit, ctx, R, n_samples, seed):
    inner = _grid_inners(fit, ctx)[fit.modal_index]
    return _draws_from_inner(inner, R, n_samples, seed, stream_base=0)


def _draws_from_inner(inner, R, n_samples, seed, stream_base):
    """Batched GMRF draws of the target linear predictors; (n, m)."""
    out = np.empty((n_samples, R.shape[0]))
    done = 0
    batch_id = 0
    while done < n_samples:
        n = min(MC_BATCH, n_samples - done)
        lat = sample_gmrf(
            inner.Q_star, n, seed=seed, stream=stream_base + batch_id,
            mean=inner.x_star,
        )
        out[done : done + n] = lat @ R.T.toarray()
        done += n
        batch_id += 1
    return out


def excursion_function(
    fit: FitResult, data: PreparedDataset, request: ExcursionRequest
) -> ExcursionResult:
    """Excursion function over the request's targets.

    F+(s at rank k) = P(eta > ln u at all of the k most extreme targets);
    marginal exceedance probabilities come from the Gaussian marginals
    analytically, only the joint prefix probabilities use Monte Carlo.
    """
    ctx = rebuild_context(fit, data)
    u_log = float(np.log(request.threshold))
    inners = _grid_inners(fit, ctx)
    weights = fit.weights

    grids = range(len(fit.grid)) if request.mix_hyper else [fit.modal_index]
    m = len(request.targets.year)

    # analytic marginals (mixed over the used grid points)
    marg = np.zeros(m)
    used_w = np.array([weights[k] for k in grids])
    used_w = used_w / used_w.sum()
    rows_per_grid = {}
    for w_k, k in zip(used_w, grids):
        g = fit.grid[k]
        R, extra, _ = _target_rows(fit, ctx, request.targets, g.nat)
        rows_per_grid[k] = (R, extra)
        mean = R @ inners[k].x_star
        Rd = R.T.toarray()
        S = inners[k].Q_star.factor().solve(Rd)
        var = np.maximum(np.einsum("ij,ij->j", Rd, S), 0.0) + extra
        z = (u_log - mean) / np.sqrt(np.maximum(var, 1e-300))
        exceed = 1.0 - ndtr(z)
        marg += w_k * (exceed if request.direction == "positive" else 1.0 - exceed)

    order = np.lexsort((np.arange(m), -marg))  # descending prob, stable

    # joint prefix probabilities by MC over the Gaussian approximation
    n_total = request.n_samples
    counts = np.zeros(m)
    if request.mix_hyper:
        # largest-remainder allocation of draws across grid points
        alloc = np.floor(used_w * n_total).astype(int)
        rem = n_total - alloc.sum()
        frac_order = np.argsort(-(used_w * n_total - alloc))
        alloc[frac_order[:rem]] += 1
    else:
        alloc = np.array([n_total])
    for slot, (w_k, k) in enumerate(zip(used_w, grids)):
        n_k = int(alloc[slot])
        if n_k == 0:
            continue
        R, extra = rows_per_grid[k]
        draws = _draws_from_inner(inners[k], R, n_k, request.seed, stream_base=1000 * slot)
        if np.any(extra > 0):
            rng = np.random.Generator(
                np.random.Philox(key=np.array([request.seed % 2**64, 999 + slot], dtype=np.uint64))
            )
            draws = draws + rng.standard_normal(draws.shape) * np.sqrt(extra)[None, :]
        if request.direction == "positive":
            hits = draws[:, order] > u_log
        else:
            hits = draws[:, order] < u_log
        counts += np.cumprod(hits, axis=1).sum(axis=0)

    f_sorted = counts / n_total
    se_sorted = np.sqrt(np.maximum(f_sorted * (1 - f_sorted), 0.0) / n_total)
    assert np.all(np.diff(f_sorted) <= 1e-12), "excursion values must be nested"

    excursion = np.empty(m)
    mc_se = np.empty(m)
    excursion[order] = f_sorted
    mc_se[order] = se_sorted

    notes = []
    if np.max(se_sorted) > request.target_se:
        needed = int(np.ceil(np.max(f_sorted * (1 - f_sorted)) / request.target_se**2))
        notes.append(
            f"MC standard error up to {np.max(se_sorted):.4f} > {request.target_se}; "
            f"use n_samples >= {needed}"
        )
        warnings.warn(notes[-1], stacklevel=2)

    return ExcursionResult(
        threshold=request.threshold,
        log_threshold=u_log,
        direction=request.direction,
        order=order,
        marginal_prob=marg,
        excursion=excursion,
        mc_se=mc_se,
        n_samples=n_total,
        notes=notes,
    )


def exceedance_map(
    fit: FitResult,
    data: PreparedDataset,
    thresholds,
    targets: PredictionTargets,
) -> dict:
    """Marginal response-scale exceedance probabilities per location.

    P(annual max > u) under the fitted predictive (observation family on
    top of the Gaussian linear predictor), mixed over the theta grid.
    Returns {"prob_exceed_<u>": array} per threshold.
    """
    thresholds = [float(u) for u in np.atleast_1d(thresholds)]
    if any(u <= 0 for u in thresholds):
        raise ConfigError("thresholds must be positive")
    ctx = rebuild_context(fit, data)
    inners = _grid_inners(fit, ctx)
    weights = fit.weights
    m = len(targets.year)

    from .inference import GH_POINTS, GH_WEIGHTS

    probs = {u: np.zeros(m) for u in thresholds}
    for k, (g, inner) in enumerate(zip(fit.grid, inners)):
        R, extra, bi = _target_rows(fit, ctx, targets, g.nat)
        mean = R @ inner.x_star
        Rd = R.T.toarray()
        S = inner.Q_star.factor().solve(Rd)
        sd = np.sqrt(np.maximum(np.einsum("ij,ij->j", Rd, S), 0.0) + extra)
        fam = ctx.blocks[bi].family
        scale = inner.scales[bi]
        eta = mean[:, None] + sd[:, None] * GH_POINTS[None, :]
        for u in thresholds:
            cdf = np.sum(GH_WEIGHTS * fam.cdf(np.log(u), eta, scale), axis=1)
            probs[u] += weights[k] * (1.0 - cdf)
    return {f"prob_exceed_{u:g}": probs[u] for u in thresholds}
