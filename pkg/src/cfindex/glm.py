"""Generalized linear models fitted from scratch.

Linear regression (QR least squares), binary regression with logit or probit
link by iteratively reweighted least squares, and baseline-category
multinomial logistic regression by Newton iterations.  All nuisance models
in the package are built on these routines.

Binary and multinomial fits use step-halving so that the deviance never
increases from one iteration to the next.  Convergence requires both a
small relative change in deviance and a small mean score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy import special

from .errors import EmptyClass, RankDeficient, Separation

logger = logging.getLogger(__name__)

__all__ = [
    "GlmFit",
    "BatchBinaryFit",
    "fit_linear",
    "fit_binary_glm",
    "fit_binary_glm_blocked",
    "fit_binary_glm_many",
    "fit_multinomial",
    "predict",
    "predict_many",
    "inverse_link",
    "irls",
]

DEV_TOL = 1e-8
SCORE_TOL = 1e-6
MAX_ITER = 100
MAX_COEF = 30.0
_MAX_HALVINGS = 30
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_PROBIT_CLIP = 37.0

Blocks = Callable[[], Iterable[tuple[np.ndarray, np.ndarray]]]


@dataclass(frozen=True)
class GlmFit:
    """A fitted generalized linear model.

    ``coefficients`` has shape ``(p,)`` for binary and single-response linear
    fits, ``(p, m)`` for a linear fit with ``m`` response columns and
    ``(K - 1, p)`` for a multinomial fit (class 0 is the baseline).  When the
    binary response was constant, ``constant`` holds that value and the
    coefficients are NaN.
    """

    family: str
    coefficients: np.ndarray
    converged: bool = True
    iterations: int = 0
    deviance: float = 0.0
    link: str | None = None
    n_classes: int | None = None
    cov: np.ndarray | None = field(default=None, repr=False)
    constant: float | None = None
    deviance_path: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        self.coefficients.setflags(write=False)

    @property
    def n_features(self) -> int:
        if self.family == "multinomial":
            return self.coefficients.shape[1]
        return self.coefficients.shape[0]

    @property
    def stderr(self) -> np.ndarray | None:
        """Standard errors shaped like ``coefficients`` (None if unavailable)."""
        if self.cov is None:
            return None
        se = np.sqrt(np.clip(np.diag(self.cov), 0.0, None))
        return se.reshape(self.coefficients.shape)


# ---------------------------------------------------------------------------
# rank checks
# ---------------------------------------------------------------------------


def _as_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("design matrix must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("design matrix has non-finite entries")
    return X


def _check_rank(X: np.ndarray) -> None:
    n, p = X.shape
    if n < p:
        raise RankDeficient(n, f"need at least {p} rows for {p} columns, got {n}")
    r = np.abs(np.diag(np.linalg.qr(X, mode="r")))
    tol = max(n, p) * np.finfo(float).eps * max(r.max(initial=0.0), 1.0)
    bad = np.flatnonzero(r <= tol)
    if bad.size:
        raise RankDeficient(int(bad[0]))


def _check_gram(G: np.ndarray) -> None:
    """Find the first column whose Cholesky pivot of ``G`` vanishes."""
    G = np.array(G, dtype=float)
    p = G.shape[0]
    scale = max(np.abs(np.diag(G)).max(initial=0.0), 1e-300)
    L = np.zeros_like(G)
    for j in range(p):
        d = G[j, j] - L[j, :j] @ L[j, :j]
        if d <= 1e-12 * scale:
            raise RankDeficient(j)
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (G[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def fit_linear(X, y) -> GlmFit:
    """Ordinary least squares.

    ``y`` may be a vector or an ``(n, m)`` matrix of responses sharing one
    design; the returned coefficients then have shape ``(p, m)``.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    _check_rank(X)
    Q, R = np.linalg.qr(X)
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(np.sum(resid**2))
    cov = None
    n, p = X.shape
    if y.ndim == 1 and n > p:
        Rinv = np.linalg.inv(R)
        cov = rss / (n - p) * (Rinv @ Rinv.T)
    return GlmFit("linear", beta, deviance=rss, cov=cov)


# ---------------------------------------------------------------------------
# binary response
# ---------------------------------------------------------------------------


def inverse_link(eta, link: str):
    if link == "logit":
        return special.expit(eta)
    if link == "probit":
        return special.ndtr(eta)
    raise ValueError(f"unknown link {link!r}")


def binary_terms(eta, y, link):
    """Deviance contributions, IRLS weights and score residuals.

    The score residual is ``(y - mu) * dmu/deta / V(mu)`` and the weight is
    ``(dmu/deta)**2 / V(mu)``; both are evaluated on the log scale for the
    probit link so the tails do not underflow.
    """
    if link == "logit":
        mu = special.expit(eta)
        dev = 2.0 * (np.logaddexp(0.0, eta) - y * eta)
        return dev, mu * (1.0 - mu), y - mu
    if link == "probit":
        # tail probabilities from ndtr stay relatively accurate until |eta| ~ 37
        eta = np.clip(eta, -_PROBIT_CLIP, _PROBIT_CLIP)
        neg = eta < 0
        small = special.ndtr(-np.abs(eta))
        big = 1.0 - small
        p = np.where(neg, small, big)
        q = np.where(neg, big, small)
        phi = np.exp(-0.5 * eta**2 - _LOG_SQRT_2PI)
        dev = -2.0 * (y * np.log(p) + (1.0 - y) * np.log(q))
        w = phi * phi / (small * big)
        score = phi * (y / p - (1.0 - y) / q)
        return dev, w, score
    raise ValueError(f"unknown link {link!r}")


def _binary_pass(blocks: Blocks, beta, link):
    p = beta.shape[0]
    H = np.zeros((p, p))
    g = np.zeros(p)
    dev = 0.0
    n = 0
    for Xb, yb in blocks():
        eta = Xb @ beta
        d, w, s = binary_terms(eta, yb, link)
        dev += float(d.sum())
        H += (Xb * w[:, None]).T @ Xb
        g += Xb.T @ s
        n += Xb.shape[0]
    return dev, H, g, n


def _converged(dev_old, dev_new, score, n, tol, score_tol):
    rel = abs(dev_old - dev_new) / (abs(dev_new) + 0.1)
    return rel < tol and np.max(np.abs(score)) / n < score_tol


def _newton_step(H, g):
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


PassFn = Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray, int]]


def irls(
    pass_fn: PassFn,
    p: int,
    link: str,
    tol: float = DEV_TOL,
    max_iter: int = MAX_ITER,
    max_coef: float | None = MAX_COEF,
    score_tol: float = SCORE_TOL,
    check_rank: bool = True,
    start=None,
) -> GlmFit:
    """Newton/IRLS iterations with step-halving for a binary GLM.

    ``pass_fn(beta)`` returns ``(deviance, information, score, n)`` at
    ``beta``.  The caller has already ruled out a constant response.
    Iterations start from ``start`` (zeros by default).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    dev, H, g, n = pass_fn(beta)
    if check_rank:
        _check_gram(H)
    path = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = _newton_step(H, g)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta + t * step
            if np.all(np.isfinite(cand)):
                res = pass_fn(cand)
                if res[0] <= dev * (1.0 + 1e-12) + 1e-12:
                    break
            t *= 0.5
        else:
            logger.debug("step-halving exhausted at iteration %d", it)
            break
        beta = cand
        if max_coef is not None and np.max(np.abs(beta)) > max_coef:
            raise Separation(
                f"coefficient max-norm {np.max(np.abs(beta)):.3g} exceeds {max_coef}; "
                "fitted probabilities are numerically 0 or 1"
            )
        dev_old = dev
        dev, H, g, n = res
        path.append(dev)
        if _converged(dev_old, dev, g, n, tol, score_tol):
            converged = True
            break
    if not converged:
        logger.warning("binary %s fit did not converge in %d iterations", link, max_iter)
    cov = None
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        pass
    return GlmFit(
        "binomial",
        beta,
        converged=converged,
        iterations=it,
        deviance=dev,
        link=link,
        cov=cov,
        deviance_path=tuple(path),
    )


def fit_binary_glm_blocked(
    blocks: Blocks,
    p: int,
    link: str = "logit",
    tol: float = DEV_TOL,
    max_iter: int = MAX_ITER,
    max_coef: float | None = MAX_COEF,
    score_tol: float = SCORE_TOL,
    check_rank: bool = True,
) -> GlmFit:
    """IRLS for a binary GLM whose rows arrive in blocks.

    ``blocks`` is called once per pass and must yield ``(X_block, y_block)``
    pairs in a fixed order.  :func:`fit_binary_glm` wraps it for an
    explicit design.
    """
    total = 0
    ones = 0.0
    for Xb, yb in blocks():
        if np.any((yb != 0) & (yb != 1)):
            raise ValueError("binary response must contain only 0 and 1")
        total += yb.shape[0]
        ones += float(yb.sum())
    if total == 0:
        raise ValueError("empty response")
    if ones == 0 or ones == total:
        return constant_fit(p, link, 0.0 if ones == 0 else 1.0)
    return irls(
        lambda beta: _binary_pass(blocks, beta, link),
        p,
        link,
        tol=tol,
        max_iter=max_iter,
        max_coef=max_coef,
        score_tol=score_tol,
        check_rank=check_rank,
    )


def constant_fit(p: int, link: str, value: float) -> GlmFit:
    """Shortcut fit for an all-0 or all-1 response."""
    return GlmFit("binomial", np.full(p, np.nan), link=link, constant=value)


def fit_binary_glm(
    X,
    y,
    link: str = "logit",
    tol: float = DEV_TOL,
    max_iter: int = MAX_ITER,
    max_coef: float | None = MAX_COEF,
    score_tol: float = SCORE_TOL,
) -> GlmFit:
    """Binary regression with logit or probit link.

    Parameters
    ----------
    X : (n, p) array
        Design matrix, intercept column included by the caller.
    y : (n,) array of 0/1
    link : {'logit', 'probit'}
    tol : float
        Relative deviance change required for convergence.
    max_iter : int
    max_coef : float or None
        A coefficient whose absolute value exceeds this bound is taken as
        evidence of separation and raises :class:`Separation`.  ``None``
        disables the check.

    A constant response returns a fit with ``constant`` set, whose
    predictions are exactly 0 or 1.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValueError("y must be a vector with one entry per row of X")
    if np.all(y == y[0]) and y[0] in (0.0, 1.0):
        return GlmFit("binomial", np.full(X.shape[1], np.nan), link=link, constant=float(y[0]))
    _check_rank(X)
    return fit_binary_glm_blocked(
        lambda: ((X, y),),
        X.shape[1],
        link=link,
        tol=tol,
        max_iter=max_iter,
        max_coef=max_coef,
        score_tol=score_tol,
        check_rank=False,
    )


# ---------------------------------------------------------------------------
# many binary responses on one design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchBinaryFit:
    """Independent binary fits sharing a design, one per response column.

    Columns with a constant response carry that value in ``constant`` (NaN
    elsewhere).  Columns that never met the convergence rule, which happens
    under separation, keep their last iterate and are flagged in
    ``converged``.
    """

    coefficients: np.ndarray  # (p, Q)
    constant: np.ndarray  # (Q,)
    converged: np.ndarray  # (Q,)
    link: str


def _batch_terms(X, Y, B, link):
    eta = X @ B
    d, w, s = binary_terms(eta, Y, link)
    return d.sum(axis=0), w, s


def fit_binary_glm_many(
    X,
    Y,
    link: str = "logit",
    tol: float = DEV_TOL,
    max_iter: int = MAX_ITER,
    score_tol: float = SCORE_TOL,
    max_coef: float = MAX_COEF,
) -> BatchBinaryFit:
    """Fit ``Q`` binary regressions of the columns of ``Y`` on ``X`` at once.

    Separation is tolerated here: a column whose coefficients pass
    ``max_coef`` stops iterating, is flagged as not converged and keeps
    predicting the near 0/1 step it has reached.
    """
    X = _as_design(X)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ValueError("Y must be (n, Q) with n matching X")
    n, p = X.shape
    Q = Y.shape[1]
    means = Y.mean(axis=0)
    constant = np.full(Q, np.nan)
    constant[means == 0.0] = 0.0
    constant[means == 1.0] = 1.0
    B = np.zeros((p, Q))
    converged = ~np.isnan(constant)
    active = np.flatnonzero(~converged)
    if active.size:
        _check_rank(X)
    dev_prev = np.full(Q, np.inf)
    for it in range(max_iter + 1):
        if active.size == 0:
            break
        Ya = Y[:, active]
        Ba = B[:, active]
        dev_a, w, s = _batch_terms(X, Ya, Ba, link)
        g = (X.T @ s).T  # (q, p)
        rel = np.abs(dev_prev[active] - dev_a) / (np.abs(dev_a) + 0.1)
        done = (rel < tol) & (np.max(np.abs(g), axis=1) / n < score_tol)
        converged[active[done]] = True
        keep = ~done & (np.max(np.abs(Ba), axis=0) <= max_coef)
        if it == max_iter:
            break
        active, Ya, Ba, dev_a, w, g = active[keep], Ya[:, keep], Ba[:, keep], dev_a[keep], w[:, keep], g[keep]
        if active.size == 0:
            break
        H = np.einsum("nq,ni,nj->qij", w, X, X)
        try:
            step = np.linalg.solve(H, g[:, :, None])[:, :, 0].T
        except np.linalg.LinAlgError:
            step = np.einsum("qij,qj->iq", np.linalg.pinv(H), g)
        t = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        cand = Ba.copy()
        for _h in range(_MAX_HALVINGS):
            todo = np.flatnonzero(~accepted)
            trial = Ba[:, todo] + t[todo] * step[:, todo]
            d_trial, _, _ = _batch_terms(X, Ya[:, todo], trial, link)
            ok = np.isfinite(d_trial) & (d_trial <= dev_a[todo] * (1.0 + 1e-12) + 1e-12)
            ok &= np.all(np.isfinite(trial), axis=0)
            cand[:, todo[ok]] = trial[:, ok]
            accepted[todo[ok]] = True
            if accepted.all():
                break
            t[todo[~ok]] *= 0.5
        B[:, active] = cand
        dev_prev[active] = dev_a
        # a column with no acceptable step has stalled at its optimum
        converged[active[~accepted]] = True
        active = active[accepted]
    return BatchBinaryFit(B, constant, converged, link)


def predict_many(fit: BatchBinaryFit, X) -> np.ndarray:
    """Fitted probabilities, shape ``(n, Q)``."""
    X = _as_design(X)
    if X.shape[1] != fit.coefficients.shape[0]:
        raise ValueError("X column count does not match the fit")
    const = ~np.isnan(fit.constant)
    B = np.where(const, 0.0, fit.coefficients)
    P = inverse_link(X @ B, fit.link)
    P[:, const] = fit.constant[const]
    return P


# ---------------------------------------------------------------------------
# multinomial
# ---------------------------------------------------------------------------


def _softmax_base0(eta):
    """Class probabilities and log-probabilities for baseline-0 logits."""
    full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    logp = full - special.logsumexp(full, axis=1, keepdims=True)
    return np.exp(logp), logp


def fit_multinomial(
    X,
    labels,
    n_classes: int | None = None,
    tol: float = DEV_TOL,
    max_iter: int = MAX_ITER,
    max_coef: float | None = MAX_COEF,
    score_tol: float = SCORE_TOL,
) -> GlmFit:
    """Baseline-category multinomial logistic regression (class 0 baseline).

    Returns coefficients of shape ``(K - 1, p)``.
    """
    X = _as_design(X)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise ValueError("labels must be a vector with one entry per row of X")
    if not np.all(labels == np.round(labels)) or labels.min(initial=0) < 0:
        raise ValueError("labels must be non-negative integers")
    labels = labels.astype(int)
    K = int(n_classes if n_classes is not None else labels.max() + 1)
    counts = np.bincount(labels, minlength=K)
    if counts.size > K:
        raise ValueError(f"label {counts.size - 1} out of range for {K} classes")
    if np.any(counts == 0):
        raise EmptyClass(f"class {int(np.flatnonzero(counts == 0)[0])} has no observations")
    if K < 2:
        raise ValueError("need at least two classes")
    _check_rank(X)
    n, p = X.shape
    m = K - 1
    Yd = np.zeros((n, K))
    Yd[np.arange(n), labels] = 1.0
    Yd = Yd[:, 1:]

    def deviance(Bm):
        _, logp = _softmax_base0(X @ Bm.T)
        return -2.0 * float(logp[np.arange(n), labels].sum())

    def grad_hess(Bm):
        P, _ = _softmax_base0(X @ Bm.T)
        P = P[:, 1:]
        g = ((Yd - P).T @ X).ravel()  # class-major
        H = np.empty((m * p, m * p))
        for a in range(m):
            for b in range(a, m):
                w = P[:, a] * ((a == b) - P[:, b])
                blk = (X * w[:, None]).T @ X
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk
        return g, H

    B = np.zeros((m, p))
    dev = deviance(B)
    path = [dev]
    g, H = grad_hess(B)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        step = _newton_step(H, g).reshape(m, p)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = B + t * step
            if np.all(np.isfinite(cand)):
                dev_c = deviance(cand)
                if dev_c <= dev * (1.0 + 1e-12) + 1e-12:
                    break
            t *= 0.5
        else:
            break
        B = cand
        if max_coef is not None and np.max(np.abs(B)) > max_coef:
            raise Separation(
                f"coefficient max-norm {np.max(np.abs(B)):.3g} exceeds {max_coef}; "
                "some class probabilities are numerically 0 or 1"
            )
        dev_old, dev = dev, dev_c
        path.append(dev)
        g, H = grad_hess(B)
        if _converged(dev_old, dev, g, n, tol, score_tol):
            converged = True
            break
    if not converged:
        logger.warning("multinomial fit did not converge in %d iterations", max_iter)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = None
    return GlmFit(
        "multinomial",
        B,
        converged=converged,
        iterations=it,
        deviance=dev,
        n_classes=K,
        cov=cov,
        deviance_path=tuple(path),
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(fit: GlmFit, X) -> np.ndarray:
    """Apply a fit to new rows.

    Linear fits return the linear predictor, binary fits the success
    probability, multinomial fits an ``(n, K)`` matrix of class
    probabilities.
    """
    X = _as_design(X)
    if X.shape[1] != fit.n_features:
        raise ValueError(
            f"X has {X.shape[1]} columns but the fit expects {fit.n_features}"
        )
    if fit.family == "linear":
        return X @ fit.coefficients
    if fit.family == "binomial":
        if fit.constant is not None:
            return np.full(X.shape[0], fit.constant)
        return inverse_link(X @ fit.coefficients, fit.link)
    if fit.family == "multinomial":
        return _softmax_base0(X @ fit.coefficients.T)[0]
    raise ValueError(f"unknown family {fit.family!r}")


def iter_row_blocks(n: int, block_size: int) -> Iterator[slice]:
    """Consecutive row slices of at most ``block_size`` rows."""
    if block_size < 1:
        raise ValueError("block_size must be positive")
    for start in range(0, n, block_size):
        yield slice(start, min(start + block_size, n))
