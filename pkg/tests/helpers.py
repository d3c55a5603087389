"""Small-data generators and scalar loop oracles shared by the tests."""

from __future__ import annotations

import math

import numpy as np

from cfindex.data import Dataset
from cfindex.nuisance import PairwiseProbitCdf, PerIncomeLogitCdf


def small_dataset(seed: int, n: int, q: int = 1, K: int = 2, min_arm: int = 4) -> Dataset:
    """Noisy data with every arm holding at least ``min_arm`` rows."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, q))
    exposure = np.arange(n) % K
    rng.shuffle(exposure)
    income = X.sum(axis=1) * 0.5 + rng.normal(size=n) * 1.5
    y = 5.0 + X.sum(axis=1) + rng.exponential(size=n) + exposure
    assert np.bincount(exposure, minlength=K).min() >= min_arm
    return Dataset(y, income, exposure, X, n_levels=K)


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def pair_value(fit, x_target, x_ref) -> float:
    """Scalar pair-surface evaluation ``Phi(b0 + x_t bt + x_r br)``."""
    if fit.constant is not None:
        return fit.constant
    b = fit.coefficients
    q = len(x_target)
    eta = b[0]
    for a in range(q):
        eta += x_target[a] * b[1 + a] + x_ref[a] * b[1 + q + a]
    return norm_cdf(eta)


def cdf_value(model, income: float, x) -> float:
    """Scalar ``N(i, x)`` evaluation by explicit loops."""
    if isinstance(model, PairwiseProbitCdf):
        if model.fit.constant is not None:
            return model.fit.constant
        b = model.fit.coefficients
        eta = b[0] + b[1] * income
        for a in range(len(x)):
            eta += x[a] * b[2 + a]
        return norm_cdf(eta)
    assert isinstance(model, PerIncomeLogitCdf)
    fit = model.fit
    vals = []
    for qi in range(len(model.grid)):
        if not math.isnan(fit.constant[qi]):
            vals.append(fit.constant[qi])
            continue
        eta = fit.coefficients[0, qi]
        for a in range(len(x)):
            eta += x[a] * fit.coefficients[1 + a, qi]
        if fit.link == "logit":
            z = math.exp(-abs(eta))
            vals.append(1.0 / (1.0 + z) if eta >= 0 else z / (1.0 + z))
        else:
            vals.append(norm_cdf(eta))
    vals.sort()
    g = model.grid
    if income < g[0]:
        return 0.0
    if income >= g[-1]:
        return vals[-1]
    for qi in range(len(g) - 1):
        if g[qi] <= income < g[qi + 1]:
            t = (income - g[qi]) / (g[qi + 1] - g[qi])
            return (1.0 - t) * vals[qi] + t * vals[qi + 1]
    raise AssertionError("unreachable")


def pav(values) -> list:
    """Pool-adjacent-violators for a nondecreasing least-squares fit."""
    blocks = []  # (mean, weight)
    for v in values:
        blocks.append([float(v), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2 = blocks.pop()
            m1, w1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2])
    out = []
    for m, w in blocks:
        out.extend([m] * w)
    return out


def xi_oracle(model, incomes, X) -> list:
    """Counterfactual CDF at ``incomes``: covariate average, clip, then PAV."""
    n = X.shape[0]
    raw = []
    for i in incomes:
        s = 0.0
        for k in range(n):
            s += cdf_value(model, i, X[k])
        raw.append(min(1.0, max(0.0, s / n)))
    order = sorted(range(len(incomes)), key=lambda j: (incomes[j], j))
    fitted = pav([raw[j] for j in order])
    out = [0.0] * len(incomes)
    for pos, j in enumerate(order):
        out[j] = fitted[pos]
    return out


def ols_predict(X_fit, y_fit, X_pred) -> np.ndarray:
    """Least squares with intercept via explicit normal equations."""
    D = np.column_stack([np.ones(len(X_fit)), X_fit])
    beta = np.linalg.solve(D.T @ D, D.T @ y_fit)
    return np.column_stack([np.ones(len(X_pred)), X_pred]) @ beta
