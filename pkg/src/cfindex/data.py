"""Observed-data container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Dataset:
    """Observed data ``(Y, I, E, X)``.

    ``exposure`` holds integer levels ``0..K-1``.  ``covariates`` is the
    ``(n, q)`` covariate matrix *without* an intercept column; the nuisance
    layer adds intercepts where needed.  Outcomes must be non-negative
    unless ``allow_negative_outcome`` is set (the simulation design has a
    small share of negative outcomes); estimators only need a positive mean.
    """

    y: np.ndarray
    income: np.ndarray
    exposure: np.ndarray
    covariates: np.ndarray
    n_levels: int | None = None
    level_labels: tuple = field(default=())
    allow_negative_outcome: bool = False

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        income = np.asarray(self.income, dtype=float)
        exposure = np.asarray(self.exposure)
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = y.shape[0]
        if y.ndim != 1 or income.shape != (n,) or exposure.shape != (n,) or X.shape[0] != n:
            raise DataError("y, income, exposure and covariates must have the same length")
        if n == 0:
            raise DataError("dataset is empty")
        for name, arr in (("y", y), ("income", income), ("covariates", X)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        if not self.allow_negative_outcome and np.any(y < 0):
            raise DataError("health outcome must be non-negative")
        if not np.all(exposure == np.round(exposure)) or exposure.min() < 0:
            raise DataError("exposure must hold integer levels 0..K-1")
        exposure = exposure.astype(int)
        K = int(self.n_levels) if self.n_levels is not None else int(exposure.max()) + 1
        if exposure.max() >= K:
            raise DataError(f"exposure level {exposure.max()} out of range for {K} levels")
        for name, arr in (("y", y), ("income", income), ("exposure", exposure), ("covariates", X)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n_levels", K)
        if not self.level_labels:
            object.__setattr__(self, "level_labels", tuple(range(K)))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def level_counts(self) -> np.ndarray:
        return np.bincount(self.exposure, minlength=self.n_levels)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.y[rows],
            self.income[rows],
            self.exposure[rows],
            self.covariates[rows],
            n_levels=self.n_levels,
            level_labels=self.level_labels,
            allow_negative_outcome=self.allow_negative_outcome,
        )
