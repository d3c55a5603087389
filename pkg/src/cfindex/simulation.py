"""Simulation study: data-generating process, true values and Monte Carlo harness.

Two covariates ``X1 ~ N(1, 1)`` and ``X2 ~ N(10, 1)`` drive three potential
incomes and three potential outcomes through linear formulas with Gaussian
noise; exposure is drawn from a three-class softmax in ``X``.  The
misspecification scenarios hand ``log X**2`` instead of ``X`` to selected
nuisance models; the data themselves never change.

Replicate ``r`` of a run with master seed ``s`` draws its data from
``numpy.random.SeedSequence([s, n, r])`` feeding a PCG64 generator, so every
replicate is reproducible on its own and replicates can run in any order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import CfIndexError
from .estimators import estimate_all
from .nuisance import NuisanceConfig, fit_nuisance

logger = logging.getLogger(__name__)

SCENARIOS = ("correct", "wrong_pi", "wrong_y", "wrong_all")
ESTIMANDS = ("G(0)", "theta(1)", "theta(2)")
DEFAULT_ESTIMATORS = ("plug-in", "one-step", "est-eq")
MAX_FAILURE_RATE = 0.01
NOISE_SCALE = 2.0

# published approximations to the true values
REFERENCE_TRUTH = {"G(0)": 0.12486, "theta(1)": -0.1887868, "theta(2)": 0.02209007}


class SimulationFailure(CfIndexError):
    """Too many replicates failed to produce estimates."""


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of one simulated dataset.

    ``noise_scale_is_sd`` reads the noise scale 2 as a standard deviation
    (``False``: as a variance).  ``income1_sign`` multiplies the covariate
    part of the arm-1 income; ``-1`` gives ``I(1) = -X1 + 1.5 X2 + eps``,
    which reproduces the published true values, ``+1`` the alternative
    ``X1 - 1.5 X2 + eps``.
    """

    n: int = 1000
    seed: int = 0
    scenario: str = "correct"
    noise_scale_is_sd: bool = True
    income1_sign: int = -1

    def __post_init__(self):
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.income1_sign not in (-1, 1):
            raise ValueError("income1_sign must be +1 or -1")

    @property
    def noise_sd(self) -> float:
        return NOISE_SCALE if self.noise_scale_is_sd else math.sqrt(NOISE_SCALE)


@dataclass(frozen=True)
class Population:
    """Covariates, potential outcomes, true propensities and assigned exposure."""

    covariates: np.ndarray  # (n, 2)
    incomes: np.ndarray  # (n, 3) potential incomes
    outcomes: np.ndarray  # (n, 3) potential outcomes
    propensity: np.ndarray  # (n, 3)
    exposure: np.ndarray  # (n,)

    def observed(self) -> Dataset:
        rows = np.arange(self.exposure.shape[0])
        return Dataset(
            self.outcomes[rows, self.exposure],
            self.incomes[rows, self.exposure],
            self.exposure,
            self.covariates,
            n_levels=3,
            allow_negative_outcome=True,
        )


def true_propensity(X) -> np.ndarray:
    """Softmax exposure probabilities with class 0 as baseline."""
    X = np.asarray(X, dtype=float)
    x1, x2 = X[:, 0], X[:, 1]
    r2 = math.sqrt(2.0)
    l1 = (5.0 * (x1 + x2) - 55.0) / (10.0 * r2)
    l2 = (3.0 * r2 * x1 - 43.0 * r2 + 4.0 * r2 * x2) / (10.0 * r2)
    eta = np.column_stack([np.zeros_like(l1), l1, l2])
    eta -= eta.max(axis=1, keepdims=True)
    p = np.exp(eta)
    return p / p.sum(axis=1, keepdims=True)


def draw_population(n: int, rng: np.random.Generator, noise_sd: float = NOISE_SCALE, income1_sign: int = -1) -> Population:
    x1 = rng.normal(1.0, 1.0, n)
    x2 = rng.normal(10.0, 1.0, n)
    eps = rng.normal(0.0, noise_sd, (n, 6))
    incomes = np.column_stack(
        [
            x1 - 0.1 * x2 + eps[:, 0],
            income1_sign * (x1 - 1.5 * x2) + eps[:, 1],
            20.0 * x1 - x2 + 10.0 + eps[:, 2],
        ]
    )
    base = 10.0 * x1 + x2
    outcomes = np.column_stack([base + eps[:, 3], base + 8.0 + eps[:, 4], base + 18.0 + eps[:, 5]])
    X = np.column_stack([x1, x2])
    pi = true_propensity(X)
    # inverse-CDF draw of the exposure class
    u = rng.random(n)
    exposure = (u[:, None] > np.cumsum(pi, axis=1)[:, :2]).sum(axis=1)
    return Population(X, incomes, outcomes, pi, exposure)


def generator_for(seed) -> np.random.Generator:
    """PCG64 generator seeded through ``SeedSequence`` (``seed`` may be a tuple)."""
    entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def simulate(config: DgpConfig, seed=None) -> Population:
    rng = generator_for(config.seed if seed is None else seed)
    return draw_population(config.n, rng, config.noise_sd, config.income1_sign)


def generate(config: DgpConfig) -> Dataset:
    """Observed data for ``config``; identical seeds give identical data."""
    return simulate(config).observed()


def transformed(X) -> np.ndarray:
    """The misspecifying transformation ``log X**2``."""
    return np.log(np.asarray(X, dtype=float) ** 2)


def scenario_covariates(X, scenario: str) -> dict:
    """Covariates handed to each nuisance-model family under ``scenario``.

    Keys ``propensity``, ``outcome`` (also used by product regressions) and
    ``rank`` (pair and income-CDF models, always the original X).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    X = np.asarray(X, dtype=float)
    Xt = transformed(X)
    wrong_pi = scenario in ("wrong_pi", "wrong_all")
    wrong_y = scenario in ("wrong_y", "wrong_all")
    return {
        "propensity": Xt if wrong_pi else X,
        "outcome": Xt if wrong_y else X,
        "rank": X,
    }


# ---------------------------------------------------------------------------
# true values
# ---------------------------------------------------------------------------


def concentration_index(y, income) -> float:
    """``2 mean(y F(i)) / mean(y) - 1`` with ``F`` the proportion ``<=``."""
    y = np.asarray(y, dtype=float)
    F = stats.rankdata(income, method="max") / y.shape[0]
    return float(2.0 * np.mean(y * F) / np.mean(y) - 1.0)


@dataclass(frozen=True)
class Truth:
    g: tuple[float, float, float]
    n_big: int
    seed: int
    noise_scale_is_sd: bool = True
    income1_sign: int = -1

    @property
    def theta1(self) -> float:
        return self.g[1] - self.g[0]

    @property
    def theta2(self) -> float:
        return self.g[2] - self.g[0]

    def values(self) -> dict:
        return {"G(0)": self.g[0], "theta(1)": self.theta1, "theta(2)": self.theta2}

    def as_dict(self) -> dict:
        return {
            **self.values(),
            "G(1)": self.g[1],
            "G(2)": self.g[2],
            "n_big": self.n_big,
            "seed": self.seed,
            "noise_scale_is_sd": self.noise_scale_is_sd,
            "income1_sign": self.income1_sign,
        }


def approximate_truth(n_big: int = 1_000_000, seed: int = 20240101, noise_scale_is_sd: bool = True, income1_sign: int = -1) -> Truth:
    """Counterfactual indexes computed directly from a large draw of potential outcomes."""
    if n_big < 100_000:
        raise ValueError("n_big must be at least 1e5")
    cfg = DgpConfig(n=n_big, seed=seed, noise_scale_is_sd=noise_scale_is_sd, income1_sign=income1_sign)
    pop = simulate(cfg)
    g = tuple(concentration_index(pop.outcomes[:, e], pop.incomes[:, e]) for e in range(3))
    return Truth(g, n_big, seed, noise_scale_is_sd, income1_sign)


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McSettings:
    """Everything a replicate needs besides its index."""

    n: int
    scenarios: tuple = ("correct",)
    estimators: tuple = DEFAULT_ESTIMATORS
    variant: str = "A1"
    master_seed: int = 0
    conf_level: float = 0.95
    noise_scale_is_sd: bool = True
    income1_sign: int = -1
    nuisance: NuisanceConfig = field(default_factory=lambda: NuisanceConfig(trim_threshold=0.0))


def replicate_seed(master_seed: int, n: int, r: int) -> tuple:
    return (int(master_seed), int(n), int(r))


def run_replicate(settings: McSettings, r: int) -> dict:
    """Estimates for one replicate: ``{scenario: {(estimand, estimator): (value, se)}}``.

    A scenario whose fit raised a package error maps to the error message.
    """
    cfg = DgpConfig(
        n=settings.n,
        seed=0,
        noise_scale_is_sd=settings.noise_scale_is_sd,
        income1_sign=settings.income1_sign,
    )
    data = simulate(cfg, seed=replicate_seed(settings.master_seed, settings.n, r)).observed()
    out = {}
    previous = None
    for scenario in settings.scenarios:
        cov = scenario_covariates(data.covariates, scenario)
        try:
            fits = fit_nuisance(
                data,
                settings.nuisance,
                propensity_covariates=cov["propensity"],
                outcome_covariates=cov["outcome"],
                rank_covariates=cov["rank"],
                reuse=previous,
            )
            previous = fits
            ests = estimate_all(fits, settings.estimators, settings.variant, settings.conf_level)
        except CfIndexError as exc:
            out[scenario] = f"{type(exc).__name__}: {exc}"
            continue
        table = {}
        for est in ests:
            if est.estimand == "G(e)" and est.level == 0:
                table[("G(0)", est.estimator)] = (est.value, est.se)
            elif est.estimand == "theta(e)" and est.level in (1, 2):
                table[(f"theta({est.level})", est.estimator)] = (est.value, est.se)
        out[scenario] = table
    return out


@dataclass(frozen=True)
class McRow:
    scenario: str
    estimand: str
    estimator: str
    n: int
    replicates: int
    bias: float
    mc_sd: float | None
    est_sd: float | None
    coverage: float | None
    failures: int


CSV_COLUMNS = ("scenario", "estimand", "estimator", "n", "replicates", "bias", "mc_sd", "est_sd", "coverage", "failures")


@dataclass(frozen=True)
class McReport:
    rows: tuple
    truth: dict
    settings: dict
    failures: dict

    def row(self, scenario: str, estimand: str, estimator: str, n: int | None = None) -> McRow:
        for row in self.rows:
            if (row.scenario, row.estimand, row.estimator) == (scenario, estimand, estimator) and (
                n is None or row.n == n
            ):
                return row
        raise KeyError((scenario, estimand, estimator, n))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(["" if v is None else _fmt(v) for v in (getattr(row, c) for c in CSV_COLUMNS)])
        return buf.getvalue()

    def to_text(self) -> str:
        """Tables in the layout bias / MC sd / est sd / coverage per estimand."""
        lines = []
        estimands = [e for e in ESTIMANDS if any(r.estimand == e for r in self.rows)]
        for n in sorted({r.n for r in self.rows}):
            lines.append(f"n = {n}")
            header = f"{'Estimator':<10}" + "".join(f" | {e:^35}" for e in estimands)
            sub = f"{'':<10}" + "".join(f" | {'bias':>8} {'MC sd':>8} {'est sd':>8} {'cov':>6}" for _ in estimands)
            for scenario in dict.fromkeys(r.scenario for r in self.rows if r.n == n):
                lines.extend(["", f"[{scenario}]", header, sub])
                for estimator in dict.fromkeys(r.estimator for r in self.rows if r.n == n):
                    cells = []
                    for e in estimands:
                        try:
                            row = self.row(scenario, e, estimator, n)
                        except KeyError:
                            cells.append(" | " + " " * 35)
                            continue
                        cells.append(
                            f" | {_fmt(row.bias, 4):>8} {_fmt(row.mc_sd, 4):>8} {_fmt(row.est_sd, 4):>8} {_fmt(row.coverage, 3):>6}"
                        )
                    lines.append(f"{estimator:<10}" + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def _fmt(v, digits=6):
    if v is None:
        return "NA"
    if isinstance(v, float):
        if math.isnan(v):
            return "NA"
        return f"{v:.{digits}g}" if digits > 4 else f"{v:.{digits}f}"
    return str(v)


def aggregate(results: list, truth: dict, settings: McSettings) -> McReport:
    """Ordered reduction of replicate results into table rows."""
    z = stats.norm.ppf(0.5 + settings.conf_level / 2.0)
    rows = []
    failures = {}
    for scenario in settings.scenarios:
        ok = [res[scenario] for res in results if isinstance(res[scenario], dict)]
        failed = len(results) - len(ok)
        failures[scenario] = failed
        for estimand in ESTIMANDS:
            for estimator in settings.estimators:
                pairs = [t[(estimand, estimator)] for t in ok if (estimand, estimator) in t]
                if not pairs:
                    continue
                values = np.array([p[0] for p in pairs])
                ses = np.array([np.nan if p[1] is None else p[1] for p in pairs])
                err = values - truth[estimand]
                mc_sd = float(values.std(ddof=1)) if values.size > 1 else None
                has_se = bool(np.all(np.isfinite(ses)))
                est_sd = float(ses.mean()) if has_se else None
                coverage = float(np.mean(np.abs(err) <= z * ses)) if has_se else None
                rows.append(
                    McRow(scenario, estimand, estimator, settings.n, values.size, float(err.mean()), mc_sd, est_sd, coverage, failed)
                )
    meta = {
        "n": settings.n,
        "scenarios": list(settings.scenarios),
        "estimators": list(settings.estimators),
        "variant": settings.variant,
        "master_seed": settings.master_seed,
        "conf_level": settings.conf_level,
        "noise_scale_is_sd": settings.noise_scale_is_sd,
        "income1_sign": settings.income1_sign,
        "nuisance": {k: v for k, v in asdict(settings.nuisance).items() if k != "outcome_model"},
    }
    return McReport(tuple(rows), dict(truth), meta, failures)


def _replicate_task(args):
    settings, r = args
    return run_replicate(settings, r)


def default_workers() -> int:
    env = os.environ.get("CFINDEX_THREADS")
    if env:
        return max(1, int(env))
    return 1


def run_mc(
    n: int,
    replicates: int,
    scenarios=("correct",),
    estimators=DEFAULT_ESTIMATORS,
    master_seed: int = 0,
    truth: dict | Truth | None = None,
    workers: int | None = None,
    variant: str = "A1",
    conf_level: float = 0.95,
    nuisance: NuisanceConfig | None = None,
    noise_scale_is_sd: bool = True,
    income1_sign: int = -1,
    progress=None,
) -> McReport:
    """Monte Carlo study for one sample size.

    Every estimator and scenario of replicate ``r`` sees the same dataset.
    ``truth`` defaults to the published approximations.  Replicates whose
    fits fail are dropped and counted; more than 1% failures in any scenario
    raises :class:`SimulationFailure`.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    if isinstance(truth, Truth):
        truth = truth.values()
    truth = dict(REFERENCE_TRUTH if truth is None else truth)
    settings = McSettings(
        n=n,
        scenarios=tuple(scenarios),
        estimators=tuple(estimators),
        variant=variant,
        master_seed=master_seed,
        conf_level=conf_level,
        noise_scale_is_sd=noise_scale_is_sd,
        income1_sign=income1_sign,
    )
    if nuisance is not None:
        settings = replace(settings, nuisance=nuisance)
    workers = default_workers() if workers is None else max(1, int(workers))
    tasks = [(settings, r) for r in range(replicates)]
    if workers == 1:
        results = []
        for i, task in enumerate(tasks):
            results.append(_replicate_task(task))
            if progress is not None:
                progress(i + 1, replicates)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, replicates // (4 * workers))))
    report = aggregate(results, truth, settings)
    for scenario, failed in report.failures.items():
        if failed:
            messages = sorted({res[scenario] for res in results if isinstance(res[scenario], str)})
            logger.warning("%s: %d of %d replicates failed (%s)", scenario, failed, replicates, "; ".join(messages[:3]))
        if failed > MAX_FAILURE_RATE * replicates:
            raise SimulationFailure(f"{scenario}: {failed} of {replicates} replicates failed")
    return report
