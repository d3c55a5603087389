"""Nuisance functions for the counterfactual concentration index.

For an exposure level ``e`` the estimators need

* the propensity ``pi_e(x) = P(E = e | X = x)`` (multinomial logit),
* the outcome mean ``M_e(x) = E(Y | X = x, E = e)`` (linear by default),
* the conditional income CDF ``N_e(i, x) = P(I <= i | X = x, E = e)``, whose
  covariate average is the counterfactual CDF ``Xi_e(i)``,
* the pair surface ``D_e(x, x') = P(I' <= I | X = x, X' = x', E = e)`` for two
  independent arm-``e`` draws, fitted by a probit regression of
  ``1(i_ref <= i_target)`` on ``(1, x_target, x_ref)`` over all arm pairs.
  Its row means estimate ``E(Xi_e(I) | X = x, E = e)``.

Everything the influence-function code consumes reduces to row or column
averages of the ``n x n`` surfaces, so those are computed in row blocks and
never materialised unless asked for.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import optimize, special

from . import glm
from .data import Dataset
from .errors import CfIndexError, DataError
from .glm import GlmFit

logger = logging.getLogger(__name__)

CDF_STRATEGIES = ("per-income-logit", "pairwise")
DEFAULT_BLOCK = 1024


def add_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


# ---------------------------------------------------------------------------
# propensity and trimming
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropensityFit:
    fit: GlmFit | None
    probabilities: np.ndarray  # (n, K), rows aligned with the input data
    kept: np.ndarray  # row indices surviving trimming
    threshold: float


def trim_rows(probabilities, threshold: float) -> np.ndarray:
    """Indices of rows whose smallest class probability is >= ``threshold``."""
    if not 0.0 <= threshold < 0.5:
        raise ValueError("trim threshold must lie in [0, 0.5)")
    probabilities = np.asarray(probabilities)
    return np.flatnonzero(probabilities.min(axis=1) >= threshold)


def fit_propensity(
    data: Dataset,
    trim_threshold: float = 0.01,
    covariates=None,
    known=None,
) -> PropensityFit:
    """Multinomial-logit propensity fit on all rows, then one trimming pass.

    ``known`` substitutes a supplied ``(n, K)`` propensity matrix for the
    fitted one.  With a single exposure level every propensity is 1.
    """
    if not 0.0 <= trim_threshold < 0.5:
        raise ValueError("trim threshold must lie in [0, 0.5)")
    if known is not None:
        probs = np.asarray(known, dtype=float)
        if probs.shape != (data.n, data.n_levels):
            raise ValueError("known propensities must be (n, K)")
        fit = None
    elif data.n_levels == 1:
        probs = np.ones((data.n, 1))
        fit = None
    else:
        X = data.covariates if covariates is None else covariates
        fit = glm.fit_multinomial(add_intercept(X), data.exposure, n_classes=data.n_levels)
        probs = glm.predict(fit, add_intercept(X))
    kept = trim_rows(probs, trim_threshold)
    if kept.size < data.n:
        logger.info("trimming removed %d of %d rows", data.n - kept.size, data.n)
    probs.setflags(write=False)
    return PropensityFit(fit, probs, kept, trim_threshold)


# ---------------------------------------------------------------------------
# outcome regressions
# ---------------------------------------------------------------------------


class OutcomeFit(Protocol):
    def predict(self, X) -> np.ndarray: ...


class OutcomeModel(Protocol):
    """Anything that regresses one or more response columns on covariates."""

    def fit(self, X, Y) -> OutcomeFit: ...


@dataclass(frozen=True)
class LinearOutcomeFit:
    glm_fit: GlmFit

    def predict(self, X) -> np.ndarray:
        return glm.predict(self.glm_fit, add_intercept(X))

    def mean_prediction(self, X) -> np.ndarray:
        xbar = add_intercept(X).mean(axis=0)
        return xbar @ self.glm_fit.coefficients


class LinearOutcomeModel:
    """Least-squares regression with an intercept."""

    def fit(self, X, Y) -> LinearOutcomeFit:
        return LinearOutcomeFit(glm.fit_linear(add_intercept(X), Y))


def mean_prediction(fit: OutcomeFit, X) -> np.ndarray:
    """Average of ``fit``'s predictions over the rows of ``X``."""
    if hasattr(fit, "mean_prediction"):
        return fit.mean_prediction(X)
    return np.asarray(fit.predict(X)).mean(axis=0)


def fit_outcome_mean(data: Dataset, e: int, covariates=None, model: OutcomeModel | None = None):
    """Regress ``y`` on covariates within arm ``e``."""
    model = model or LinearOutcomeModel()
    X = data.covariates if covariates is None else np.asarray(covariates, dtype=float)
    arm = data.exposure == e
    if not arm.any():
        raise DataError(f"exposure level {e} has no observations")
    return model.fit(X[arm], data.y[arm])


def fit_product_regression(
    data: Dataset, e: int, xi, covariates=None, model: OutcomeModel | None = None
):
    """Regress ``y * Xi_e(i)`` on covariates within arm ``e``.

    ``xi`` holds ``Xi_e`` evaluated at every observed income (length ``n``)
    or at the arm's incomes only.
    """
    model = model or LinearOutcomeModel()
    X = data.covariates if covariates is None else np.asarray(covariates, dtype=float)
    arm = data.exposure == e
    xi = np.asarray(xi, dtype=float)
    xi_arm = xi[arm] if xi.shape[0] == data.n else xi
    return model.fit(X[arm], data.y[arm] * xi_arm)


# ---------------------------------------------------------------------------
# pair grids
# ---------------------------------------------------------------------------


_PAIR_CELLS_PER_BLOCK = 1 << 20
_WARM_START_ROWS = 150


def fit_pair_grid(
    target_feats,
    ref_feats,
    incomes,
    block_size=DEFAULT_BLOCK,
    max_coef=glm.MAX_COEF,
    self_pairs: bool = True,
):
    """Probit regression of ``1(i_k <= i_j)`` on ``(1, target_j, ref_k)``.

    All ordered pairs of the given rows are used, self-pairs included with
    response 1.  The linear predictor of the pair grid is
    ``a_j + c_k``, so each IRLS pass works on ``m x m`` blocks of it and
    reduces them to the information matrix by matrix products; the
    ``m**2``-row design is never formed.  Blocks hold at most
    ``block_size`` target rows (fewer when the arm is large).  Large arms
    start IRLS from the fit on an evenly strided subset of rows; the
    converged estimate is the same, only the iteration count drops.
    """
    T = np.asarray(target_feats, dtype=float)
    R = np.asarray(ref_feats, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    if R.ndim == 1:
        R = R[:, None]
    incomes = np.asarray(incomes, dtype=float)
    m = incomes.shape[0]
    if m < 2:
        raise DataError("pair model needs at least two observations in the arm")
    qt, qr = T.shape[1], R.shape[1]
    p = 1 + qt + qr
    # responses are all 1 only when every income is tied
    if np.all(incomes == incomes[0]):
        return glm.constant_fit(p, "probit", 1.0)
    rows = max(1, min(block_size, _PAIR_CELLS_PER_BLOCK // m))
    slices = list(glm.iter_row_blocks(m, rows))
    T1 = np.column_stack([np.ones(m), T])

    def pass_fn(beta):
        a = T1 @ beta[: 1 + qt]
        c = R @ beta[1 + qt:]
        dev = 0.0
        s_row = np.empty(m)
        s_col = np.zeros(m)
        w_row = np.empty(m)
        w_col = np.zeros(m)
        HTR = np.zeros((1 + qt, qr))
        for sl in slices:
            Yb = (incomes[None, :] <= incomes[sl, None]).astype(float)
            d, w, sc = glm.binary_terms(a[sl, None] + c[None, :], Yb, "probit")
            if not self_pairs:
                diag = np.arange(sl.start, sl.stop)
                for arr in (d, w, sc):
                    arr[diag - sl.start, diag] = 0.0
            dev += float(d.sum())
            s_row[sl] = sc.sum(axis=1)
            s_col += sc.sum(axis=0)
            w_row[sl] = w.sum(axis=1)
            w_col += w.sum(axis=0)
            HTR += T1[sl].T @ (w @ R)
        g = np.concatenate([T1.T @ s_row, R.T @ s_col])
        H = np.empty((p, p))
        H[: 1 + qt, : 1 + qt] = (T1 * w_row[:, None]).T @ T1
        H[1 + qt:, 1 + qt:] = (R * w_col[:, None]).T @ R
        H[: 1 + qt, 1 + qt:] = HTR
        H[1 + qt:, : 1 + qt] = HTR.T
        return dev, H, g, m * m if self_pairs else m * (m - 1)

    start = None
    if m > 2 * _WARM_START_ROWS:
        sub = np.arange(0, m, m // _WARM_START_ROWS)
        try:
            warm = fit_pair_grid(T[sub], R[sub], incomes[sub], block_size, max_coef=None, self_pairs=self_pairs)
        except CfIndexError:
            warm = None
        if warm is not None and warm.constant is None and np.all(np.isfinite(warm.coefficients)):
            start = warm.coefficients
    return glm.irls(pass_fn, p, "probit", max_coef=max_coef, start=start)


def fit_pairwise_rank_model(
    data: Dataset, e: int, covariates=None, block_size=DEFAULT_BLOCK, self_pairs: bool = True
) -> GlmFit:
    """Pair-surface model for arm ``e``: design ``(1, x_target, x_ref)``."""
    X = data.covariates if covariates is None else np.asarray(covariates, dtype=float)
    arm = np.flatnonzero(data.exposure == e)
    return fit_pair_grid(X[arm], X[arm], data.income[arm], block_size=block_size, self_pairs=self_pairs)


def _split_pair_coefficients(fit: GlmFit, q: int):
    b = fit.coefficients
    return b[0], b[1:1 + q], b[1 + q:1 + 2 * q]


def pair_surface(fit: GlmFit, X_target, X_ref) -> np.ndarray:
    """``D(x_k, x_l)`` for target rows ``k`` and reference rows ``l``."""
    X_target = np.atleast_2d(np.asarray(X_target, dtype=float))
    X_ref = np.atleast_2d(np.asarray(X_ref, dtype=float))
    if fit.constant is not None:
        return np.full((X_target.shape[0], X_ref.shape[0]), fit.constant)
    b0, bt, br = _split_pair_coefficients(fit, X_target.shape[1])
    return special.ndtr((b0 + X_target @ bt)[:, None] + (X_ref @ br)[None, :])


def pair_reductions(fit: GlmFit, X, weights, block_size=DEFAULT_BLOCK):
    """Row means and weighted column means of the ``n x n`` pair surface.

    Returns ``(row_mean, col_weighted)`` with ``row_mean[k] = mean_l D[k, l]``
    and ``col_weighted[l] = mean_k weights[k] * D[k, l]``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    weights = np.asarray(weights, dtype=float)
    row_mean = np.empty(n)
    col = np.zeros(n)
    for sl in glm.iter_row_blocks(n, block_size):
        D = pair_surface(fit, X[sl], X)
        row_mean[sl] = D.mean(axis=1)
        col += weights[sl] @ D
    return row_mean, col / n


# ---------------------------------------------------------------------------
# conditional income CDF models
# ---------------------------------------------------------------------------


class CdfModel(Protocol):
    def surface(self, incomes, X) -> np.ndarray:
        """``N(i, x_k)`` with one row per income and one column per row of X."""


@dataclass(frozen=True)
class PairwiseProbitCdf:
    """``N(i, x) = Phi(g0 + g1 * i + x'g)`` fitted on the arm's pair grid.

    Training rows are ``(1, i_target, x_ref)`` with response
    ``1(i_ref <= i_target)``.
    """

    fit: GlmFit

    def surface(self, incomes, X) -> np.ndarray:
        incomes = np.asarray(incomes, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.fit.constant is not None:
            return np.full((incomes.shape[0], X.shape[0]), self.fit.constant)
        b = self.fit.coefficients
        return special.ndtr((b[0] + b[1] * incomes)[:, None] + (X @ b[2:])[None, :])


@dataclass(frozen=True)
class PerIncomeLogitCdf:
    """One binary regression of ``1(I <= g)`` on X per grid income ``g``.

    Predictions are rearranged (sorted across the grid) per covariate row so
    that each ``N(., x)`` is nondecreasing, then linearly interpolated
    between grid points.  Below the smallest grid income the CDF is 0.
    """

    grid: np.ndarray
    fit: glm.BatchBinaryFit

    def grid_values(self, X) -> np.ndarray:
        P = glm.predict_many(self.fit, add_intercept(X))
        return np.sort(P, axis=1)

    def _locate(self, incomes):
        g = self.grid
        q = np.searchsorted(g, incomes, side="right") - 1
        below = q < 0
        qc = np.clip(q, 0, len(g) - 1)
        qn = np.clip(qc + 1, 0, len(g) - 1)
        width = g[qn] - g[qc]
        t = np.where(width > 0, (incomes - g[qc]) / np.where(width > 0, width, 1.0), 0.0)
        return qc, qn, t, below

    def interpolate(self, incomes, values) -> np.ndarray:
        """Interpolate grid values (last axis = grid) at ``incomes``."""
        incomes = np.asarray(incomes, dtype=float)
        qc, qn, t, below = self._locate(incomes)
        out = (1.0 - t) * values[..., qc] + t * values[..., qn]
        out[..., below] = 0.0
        return out

    def surface(self, incomes, X) -> np.ndarray:
        P = self.grid_values(X)  # (n_x, Q)
        return self.interpolate(incomes, P).T


def income_grid(incomes, grid_size: int | None) -> np.ndarray:
    """Evaluation grid: quantiles of the arm incomes, endpoints included."""
    incomes = np.unique(np.asarray(incomes, dtype=float))
    if grid_size is None or incomes.size <= grid_size:
        return incomes
    return np.unique(np.quantile(incomes, np.linspace(0.0, 1.0, grid_size)))


def fit_income_cdf(
    data: Dataset,
    e: int,
    strategy: str = "per-income-logit",
    covariates=None,
    grid_size: int | None = 200,
    link: str = "logit",
    block_size: int = DEFAULT_BLOCK,
):
    """Fit the conditional income CDF ``N_e(i, x)`` for arm ``e``."""
    X = data.covariates if covariates is None else np.asarray(covariates, dtype=float)
    arm = np.flatnonzero(data.exposure == e)
    inc = data.income[arm]
    if strategy == "pairwise":
        return PairwiseProbitCdf(fit_pair_grid(inc[:, None], X[arm], inc, block_size=block_size))
    if strategy == "per-income-logit":
        grid = income_grid(inc, grid_size)
        Y = (inc[:, None] <= grid[None, :]).astype(float)
        return PerIncomeLogitCdf(grid, glm.fit_binary_glm_many(add_intercept(X[arm]), Y, link=link))
    raise ValueError(f"unknown cdf strategy {strategy!r}; choose from {CDF_STRATEGIES}")


def cdf_weighted_means(model, incomes, X, weights=None, block_size=DEFAULT_BLOCK) -> np.ndarray:
    """``mean_k w_k N(i, x_k)`` for each query income (``w = 1`` by default)."""
    incomes = np.asarray(incomes, dtype=float)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if isinstance(model, PerIncomeLogitCdf):
        # interpolation is linear in the grid values, so average first
        gbar = (w @ model.grid_values(X)) / n
        return model.interpolate(incomes, gbar)
    out = np.zeros(incomes.shape[0])
    for sl in glm.iter_row_blocks(n, block_size):
        out += model.surface(incomes, X[sl]) @ w[sl]
    return out / n


def monotone_cdf(incomes, values) -> np.ndarray:
    """Clip to [0, 1] and project onto nondecreasing functions of income."""
    incomes = np.asarray(incomes, dtype=float)
    values = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    order = np.argsort(incomes, kind="stable")
    fitted = optimize.isotonic_regression(values[order]).x
    out = np.empty_like(values)
    out[order] = fitted
    return out


# ---------------------------------------------------------------------------
# all fits for a dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceConfig:
    trim_threshold: float = 0.01
    cdf_strategy: str = "per-income-logit"
    grid_size: int | None = 200
    cdf_link: str = "logit"
    block_size: int = DEFAULT_BLOCK
    self_pairs: bool = True
    outcome_model: object = field(default_factory=LinearOutcomeModel)

    def __post_init__(self):
        if self.cdf_strategy not in CDF_STRATEGIES:
            raise ValueError(f"unknown cdf strategy {self.cdf_strategy!r}")
        if self.cdf_link not in ("logit", "probit"):
            raise ValueError(f"unknown link {self.cdf_link!r}")
        if not 0.0 <= self.trim_threshold < 0.5:
            raise ValueError("trim threshold must lie in [0, 0.5)")


@dataclass(frozen=True)
class LevelFits:
    level: int
    outcome: OutcomeFit
    outcome_values: np.ndarray  # M_e(x_k) for every kept row
    pairwise: GlmFit
    cdf: object


@dataclass(frozen=True)
class NuisanceFits:
    """Fitted nuisance functions on the trimmed sample.

    ``data`` is the kept subsample; ``kept`` maps its rows back to the input.
    The covariate matrices used by each model family are stored alongside.
    """

    data: Dataset
    kept: np.ndarray
    propensity: PropensityFit
    pi: np.ndarray  # (n_kept, K)
    x_outcome: np.ndarray
    x_rank: np.ndarray
    levels: dict
    config: NuisanceConfig

    @property
    def n(self) -> int:
        return self.data.n

    def level(self, e: int) -> LevelFits:
        try:
            return self.levels[e]
        except KeyError:
            raise KeyError(f"no nuisance fits for level {e}") from None


def fit_nuisance(
    data: Dataset,
    config: NuisanceConfig | None = None,
    levels=None,
    propensity_covariates=None,
    outcome_covariates=None,
    rank_covariates=None,
    known_propensity=None,
    reuse: NuisanceFits | None = None,
) -> NuisanceFits:
    """Fit every nuisance model needed for the requested exposure levels.

    Covariate overrides are ``(n, q)`` arrays aligned with ``data``; they let
    different model families see different (possibly transformed)
    covariates.  ``reuse`` supplies earlier fits on the same data whose
    pair and income-CDF models are taken over when the kept rows, rank
    covariates and configuration match.
    """
    config = config or NuisanceConfig()
    prop = fit_propensity(
        data, config.trim_threshold, covariates=propensity_covariates, known=known_propensity
    )
    kept = prop.kept
    sub = data.subset(kept)
    if sub.n == 0:
        raise DataError("no rows left after trimming")
    counts = sub.level_counts()
    levels = range(data.n_levels) if levels is None else levels

    def pick(override):
        X = data.covariates if override is None else np.asarray(override, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != data.n:
            raise ValueError("covariate override must have one row per observation")
        return X[kept]

    x_out = pick(outcome_covariates)
    x_rank = pick(rank_covariates)
    can_reuse = (
        reuse is not None
        and reuse.data.n_levels == data.n_levels
        and np.array_equal(reuse.kept, kept)
        and np.array_equal(reuse.x_rank, x_rank)
        and np.array_equal(reuse.data.income, sub.income)
        and np.array_equal(reuse.data.exposure, sub.exposure)
        and (reuse.config.cdf_strategy, reuse.config.grid_size, reuse.config.cdf_link, reuse.config.self_pairs)
        == (config.cdf_strategy, config.grid_size, config.cdf_link, config.self_pairs)
    )
    fitted = {}
    for e in levels:
        if counts[e] == 0:
            raise DataError(f"exposure level {e} is empty after trimming")
        out = fit_outcome_mean(sub, e, covariates=x_out, model=config.outcome_model)
        M = np.asarray(out.predict(x_out), dtype=float)
        M.setflags(write=False)
        if can_reuse and e in reuse.levels:
            old = reuse.levels[e]
            fitted[e] = LevelFits(e, out, M, old.pairwise, old.cdf)
            continue
        pair = fit_pairwise_rank_model(
            sub, e, covariates=x_rank, block_size=config.block_size, self_pairs=config.self_pairs
        )
        cdf = fit_income_cdf(
            sub,
            e,
            strategy=config.cdf_strategy,
            covariates=x_rank,
            grid_size=config.grid_size,
            link=config.cdf_link,
            block_size=config.block_size,
        )
        fitted[e] = LevelFits(e, out, M, pair, cdf)
    pi = prop.probabilities[kept]
    return NuisanceFits(sub, kept, prop, pi, x_out, x_rank, fitted, config)


# ---------------------------------------------------------------------------
# surfaces consumed by the estimators
# ---------------------------------------------------------------------------


def counterfactual_cdf(fits: NuisanceFits, e: int, incomes) -> np.ndarray:
    """``Xi_e(i)``: mean over all kept rows of ``N_e(i, x_k)``, made monotone."""
    lf = fits.level(e)
    incomes = np.asarray(incomes, dtype=float)
    raw = cdf_weighted_means(lf.cdf, incomes, fits.x_rank, block_size=fits.config.block_size)
    return monotone_cdf(incomes, raw)


def cond_rank_expectation(fits: NuisanceFits, e: int) -> np.ndarray:
    """``E(Xi_e(I) | X = x_k, E = e)`` for every kept row: pair-surface row means."""
    lf = fits.level(e)
    row, _ = pair_reductions(lf.pairwise, fits.x_rank, np.zeros(fits.n), fits.config.block_size)
    return row


def pairwise_matrix(fits: NuisanceFits, e: int) -> np.ndarray:
    """Materialised ``n x n`` pair surface (small samples only)."""
    return pair_surface(fits.level(e).pairwise, fits.x_rank, fits.x_rank)


def cdf_matrix(fits: NuisanceFits, e: int, incomes) -> np.ndarray:
    """Materialised ``N_e(i, x_k)``: one row per income, one column per kept row."""
    return fits.level(e).cdf.surface(np.asarray(incomes, dtype=float), fits.x_rank)


@dataclass(frozen=True)
class RankSurfaces:
    """Reductions of the rank surfaces for one level.

    ``xi`` and ``cond_xi`` are length ``n``.  ``pair_colmean_m[l]`` is
    ``mean_k M_k D(x_k, x_l)``; ``cdf_rowmean_m[j]`` is
    ``mean_k M_k N(i_j, x_k)``.  The ``a2_*`` fields are filled only when the
    product-regression variant was requested.
    """

    level: int
    xi: np.ndarray
    cond_xi: np.ndarray
    pair_colmean_m: np.ndarray
    cdf_rowmean_m: np.ndarray
    product: OutcomeFit | None = None
    a2_fitted: np.ndarray | None = None  # E(Y Xi(I) | x_k, e)
    a2_upper: np.ndarray | None = None  # mean_k E(Y 1(i_j <= I) | x_k, e), arm rows
    a2_cdf: np.ndarray | None = None  # mean_k E(Y N(I, x_l) | x_k, e), every l


def rank_surfaces(fits: NuisanceFits, e: int, with_product: bool = False) -> RankSurfaces:
    data = fits.data
    lf = fits.level(e)
    bs = fits.config.block_size
    M = lf.outcome_values
    xi = counterfactual_cdf(fits, e, data.income)
    cond, colm = pair_reductions(lf.pairwise, fits.x_rank, M, bs)
    arm = np.flatnonzero(data.exposure == e)
    rowm = np.zeros(data.n)
    rowm[arm] = cdf_weighted_means(lf.cdf, data.income[arm], fits.x_rank, M, bs)
    if not with_product:
        return RankSurfaces(e, xi, cond, colm, rowm)

    model = fits.config.outcome_model
    Xo = fits.x_outcome
    product = fit_product_regression(data, e, xi, covariates=Xo, model=model)
    fitted = np.asarray(product.predict(Xo), dtype=float)
    y_arm = data.y[arm]
    inc_arm = data.income[arm]
    upper = np.zeros(data.n)
    cdf_term = np.empty(data.n)
    for sl in glm.iter_row_blocks(arm.size, bs):
        V = y_arm[:, None] * (inc_arm[sl][None, :] <= inc_arm[:, None])
        upper[arm[sl]] = mean_prediction(model.fit(Xo[arm], V), Xo)
    for sl in glm.iter_row_blocks(data.n, bs):
        V = y_arm[:, None] * lf.cdf.surface(inc_arm, fits.x_rank[sl])
        cdf_term[sl] = mean_prediction(model.fit(Xo[arm], V), Xo)
    return RankSurfaces(e, xi, cond, colm, rowm, product, fitted, upper, cdf_term)
