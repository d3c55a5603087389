"""Estimators of the counterfactual concentration index and its contrasts.

The index for exposure level ``e`` is ``G(e) = 2 A / B - 1`` where ``B`` is the
counterfactual outcome mean and ``A`` the counterfactual mean of
``Y * F_e(I)``.  Two identifying functionals are supported for ``A``:

``"A1"``
    ``E[ M_e(X) E(Xi_e(I) | X, E = e) ]``, valid when the potential outcome and
    potential income are independent given X.
``"A2"``
    ``E[ E(Y Xi_e(I) | X, E = e) ]``, which needs a product regression.

Every estimator returns an :class:`IndexEstimate` carrying its
per-observation influence values, so contrasts can use the joint influence
function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import DataError, DegenerateOutcome, NumericDegeneracy
from .nuisance import NuisanceFits, RankSurfaces, rank_surfaces

VARIANTS = ("A1", "A2")
ESTIMATORS = ("naive", "plug-in", "one-step", "est-eq")


@dataclass(frozen=True)
class EifVector:
    """Fitted influence function of ``G(e)`` and its components.

    ``values = 2 phi_a / B - 2 phi_b A / B**2``.  ``phi_a`` and ``phi_b`` are the
    centred influence functions of ``A`` and ``B``.
    """

    level: int
    variant: str
    values: np.ndarray
    phi_a: np.ndarray
    phi_b: np.ndarray
    a: float
    b: float


@dataclass(frozen=True)
class IndexEstimate:
    """Point estimate with influence-function standard error.

    ``influence`` is aligned with the rows the estimate was computed on;
    ``se = sd(influence) / sqrt(n)``.  For the plug-in estimator the
    standard error is the influence-function one, which is conservative
    when the nuisance models are correct.
    """

    estimand: str  # "G(e)" or "theta(e)"
    estimator: str
    level: int
    value: float
    se: float | None
    ci: tuple[float, float] | None
    influence: np.ndarray | None = field(default=None, repr=False)
    conf_level: float = 0.95
    conservative_se: bool = False

    def as_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "estimator": self.estimator,
            "level": self.level,
            "value": self.value,
            "se": self.se,
            "ci_low": None if self.ci is None else self.ci[0],
            "ci_high": None if self.ci is None else self.ci[1],
            "conf_level": self.conf_level,
            "conservative_se": self.conservative_se,
        }


def _z(conf_level: float) -> float:
    if not 0.0 < conf_level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + conf_level / 2.0))


def influence_se(influence) -> float:
    """``sd(influence) / sqrt(n)`` with the n - 1 sample variance."""
    influence = np.asarray(influence, dtype=float)
    n = influence.shape[0]
    if n < 2:
        return float("nan")
    return math.sqrt(float(np.var(influence, ddof=1)) / n)


def _estimate(estimand, estimator, level, value, influence, conf_level, conservative=False):
    se = influence_se(influence)
    half = _z(conf_level) * se
    return IndexEstimate(
        estimand,
        estimator,
        level,
        float(value),
        se,
        (value - half, value + half),
        influence,
        conf_level,
        conservative,
    )


# ---------------------------------------------------------------------------
# naive index
# ---------------------------------------------------------------------------


def empirical_cdf(values) -> np.ndarray:
    """Proportion of observations ``<=`` each value (ties counted)."""
    values = np.asarray(values, dtype=float)
    s = np.sort(values)
    return np.searchsorted(s, values, side="right") / values.shape[0]


def _upper_weighted_mean(income, y):
    """``mean_j y_j 1(i_j >= i_k)`` for every k."""
    n = income.shape[0]
    order = np.argsort(income, kind="stable")
    s_inc = income[order]
    tail = np.concatenate([np.cumsum(y[order][::-1])[::-1], [0.0]])
    first = np.searchsorted(s_inc, income, side="left")
    return tail[first] / n


def naive_index(data: Dataset, level: int | None = None, conf_level: float = 0.95) -> IndexEstimate:
    """Concentration index ``2 cov(y, F(i)) / mean(y)`` with empirical ranks.

    With ``level`` given, the index is computed on that exposure arm only
    and its influence values are embedded in the full sample (zero outside
    the arm, scaled by ``n / n_e``) so it can be contrasted with other arms.
    """
    rows = np.arange(data.n) if level is None else np.flatnonzero(data.exposure == level)
    if rows.size < 2:
        raise DataError("naive index needs at least two observations")
    y = data.y[rows]
    inc = data.income[rows]
    mu = y.mean()
    if mu <= 0:
        raise DegenerateOutcome("mean outcome must be positive")
    F = empirical_cdf(inc)
    cov = np.mean(y * F) - mu * F.mean()
    value = 2.0 * cov / mu
    # influence of 2 E[Y F(I)] / E[Y] - 1 where F is the CDF of I
    myf = np.mean(y * F)
    upper = _upper_weighted_mean(inc, y)
    phi_a = y * F + upper - 2.0 * myf
    phi_b = y - mu
    infl = 2.0 * phi_a / mu - 2.0 * myf * phi_b / mu**2
    if level is not None:
        full = np.zeros(data.n)
        full[rows] = infl * data.n / rows.size
        infl = full
    return _estimate("G(e)", "naive", -1 if level is None else level, value, infl, conf_level)


def naive_bootstrap_se(data: Dataset, level: int | None = None, n_boot: int = 500, rng=None) -> float:
    """Nonparametric bootstrap standard error of :func:`naive_index`."""
    rng = np.random.default_rng(rng)
    rows = np.arange(data.n) if level is None else np.flatnonzero(data.exposure == level)
    y = data.y[rows]
    inc = data.income[rows]
    m = rows.size
    draws = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, m, m)
        yb, ib = y[idx], inc[idx]
        F = empirical_cdf(ib)
        draws[b] = 2.0 * (np.mean(yb * F) - yb.mean() * F.mean()) / yb.mean()
    return float(draws.std(ddof=1))


# ---------------------------------------------------------------------------
# plug-in and influence functions
# ---------------------------------------------------------------------------


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


def _surfaces(fits, e, surfaces, variant):
    if surfaces is None or (variant == "A2" and surfaces.product is None):
        surfaces = rank_surfaces(fits, e, with_product=variant == "A2")
    if surfaces.level != e:
        raise ValueError("surfaces belong to a different level")
    return surfaces


def plug_in_components(fits: NuisanceFits, e: int, surfaces: RankSurfaces, variant: str = "A1"):
    """``(A, B)`` of the plug-in estimator."""
    _check_variant(variant)
    M = fits.level(e).outcome_values
    B = float(M.mean())
    if variant == "A1":
        A = float(np.mean(M * surfaces.cond_xi))
    else:
        A = float(surfaces.a2_fitted.mean())
    return A, B


def _ratio_value(A, B):
    if B <= 0:
        raise DegenerateOutcome(f"estimated counterfactual outcome mean is {B:.4g}, must be positive")
    return 2.0 * A / B - 1.0


def eif(fits: NuisanceFits, e: int, surfaces: RankSurfaces | None = None, variant: str = "A1") -> EifVector:
    """Per-observation fitted influence function of ``G(e)``.

    Every expectation over the data distribution is replaced by the fitted
    nuisance functions and sample averages over the kept rows.
    """
    _check_variant(variant)
    surfaces = _surfaces(fits, e, surfaces, variant)
    data = fits.data
    y = data.y
    pi = fits.pi[:, e]
    arm = data.exposure == e
    if np.any(pi[arm] <= 0):
        raise NumericDegeneracy("zero propensity on a kept row")
    w = np.where(arm, 1.0 / np.where(arm, pi, 1.0), 0.0)
    M = fits.level(e).outcome_values
    A, B = plug_in_components(fits, e, surfaces, variant)
    _ratio_value(A, B)

    phi_b = w * (y - M) + M - B
    xi = surfaces.xi
    if variant == "A1":
        inner = M * surfaces.cond_xi
        # E[ M(X) E{phi_Xi(I, o) | X} ] with E{1(i_o <= I) | x} = 1 - N(i_o, x)
        upper = B - surfaces.cdf_rowmean_m
        cross = surfaces.pair_colmean_m
    else:
        inner = surfaces.a2_fitted
        upper = surfaces.a2_upper
        cross = surfaces.a2_cdf
    rank_term = w * (upper - cross) + cross - A
    phi_a = w * (y * xi - inner) + inner - A + rank_term
    values = 2.0 * phi_a / B - 2.0 * phi_b * A / B**2
    if not np.all(np.isfinite(values)):
        raise NumericDegeneracy("non-finite influence values")
    return EifVector(e, variant, values, phi_a, phi_b, A, B)


def plug_in(
    fits: NuisanceFits,
    e: int,
    surfaces: RankSurfaces | None = None,
    variant: str = "A1",
    conf_level: float = 0.95,
    eif_vector: EifVector | None = None,
) -> IndexEstimate:
    """Plug-in ``2 A / B - 1``; its standard error is the (conservative) EIF one."""
    _check_variant(variant)
    surfaces = _surfaces(fits, e, surfaces, variant)
    A, B = plug_in_components(fits, e, surfaces, variant)
    value = _ratio_value(A, B)
    phi = eif_vector or eif(fits, e, surfaces, variant)
    return _estimate("G(e)", "plug-in", e, value, phi.values, conf_level, conservative=True)


def one_step(
    fits: NuisanceFits,
    e: int,
    surfaces: RankSurfaces | None = None,
    variant: str = "A1",
    conf_level: float = 0.95,
    eif_vector: EifVector | None = None,
) -> IndexEstimate:
    """Plug-in plus the sample mean of the fitted influence function."""
    phi = eif_vector or eif(fits, e, surfaces, variant)
    value = _ratio_value(phi.a, phi.b) + float(np.mean(phi.values))
    return _estimate("G(e)", "one-step", e, value, phi.values, conf_level)


def est_eq_value(phi: EifVector) -> float:
    """Root of the averaged influence equation, solved as a ratio."""
    num = float(np.mean(phi.phi_a)) + 2.0 * phi.a
    den = float(np.mean(phi.phi_b)) + 2.0 * phi.b
    if abs(den) <= 1e-12 * max(abs(phi.b), 1.0):
        raise NumericDegeneracy("estimating-equation denominator vanished")
    return 2.0 * num / den - 1.0


def est_eq(
    fits: NuisanceFits,
    e: int,
    surfaces: RankSurfaces | None = None,
    variant: str = "A1",
    conf_level: float = 0.95,
    eif_vector: EifVector | None = None,
) -> IndexEstimate:
    """Estimating-equation estimator; shares the influence-function se."""
    phi = eif_vector or eif(fits, e, surfaces, variant)
    return _estimate("G(e)", "est-eq", e, est_eq_value(phi), phi.values, conf_level)


def contrast(est: IndexEstimate, base: IndexEstimate, conf_level: float | None = None) -> IndexEstimate:
    """``theta(e) = G(e) - G(base)`` with the se of the influence difference."""
    if est.influence is None or base.influence is None:
        raise ValueError("both estimates must carry influence values")
    if est.influence.shape != base.influence.shape:
        raise ValueError("estimates were computed on different rows")
    if est.estimator != base.estimator:
        raise ValueError("cannot contrast different estimators")
    conf_level = est.conf_level if conf_level is None else conf_level
    diff = est.influence - base.influence
    return _estimate(
        "theta(e)",
        est.estimator,
        est.level,
        est.value - base.value,
        diff,
        conf_level,
        conservative=est.conservative_se,
    )


def estimate_all(
    fits: NuisanceFits,
    estimators=("plug-in", "one-step", "est-eq"),
    variant: str = "A1",
    conf_level: float = 0.95,
    baseline: int = 0,
    levels=None,
) -> list[IndexEstimate]:
    """Every requested estimator of ``G(e)`` per level plus contrasts to ``baseline``.

    The naive estimator is computed on the kept rows of each arm.
    """
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}")
    levels = sorted(fits.levels) if levels is None else list(levels)
    per_level = {}
    for e in levels:
        out = {}
        if "naive" in estimators:
            out["naive"] = naive_index(fits.data, e, conf_level)
        model_based = [k for k in estimators if k != "naive"]
        if model_based:
            surf = rank_surfaces(fits, e, with_product=variant == "A2")
            phi = eif(fits, e, surf, variant)
            if "plug-in" in model_based:
                out["plug-in"] = plug_in(fits, e, surf, variant, conf_level, eif_vector=phi)
            if "one-step" in model_based:
                out["one-step"] = one_step(fits, e, surf, variant, conf_level, eif_vector=phi)
            if "est-eq" in model_based:
                out["est-eq"] = est_eq(fits, e, surf, variant, conf_level, eif_vector=phi)
        per_level[e] = out
    results = []
    for e in levels:
        results.extend(per_level[e][k] for k in estimators)
    if baseline in per_level:
        for e in levels:
            if e == baseline:
                continue
            results.extend(contrast(per_level[e][k], per_level[baseline][k]) for k in estimators)
    return results
