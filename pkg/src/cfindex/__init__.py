"""Counterfactual concentration indexes under hypothetical exposure levels."""

from __future__ import annotations

from .data import Dataset
from .errors import (
    CfIndexError,
    DataError,
    DegenerateOutcome,
    EmptyClass,
    NumericDegeneracy,
    RankDeficient,
    Separation,
)
from .estimators import (
    EifVector,
    IndexEstimate,
    contrast,
    eif,
    est_eq,
    estimate_all,
    naive_index,
    one_step,
    plug_in,
)
from .nuisance import NuisanceConfig, NuisanceFits, fit_nuisance, rank_surfaces

__version__ = "0.1.0"

__all__ = [
    "CfIndexError",
    "DataError",
    "Dataset",
    "DegenerateOutcome",
    "EifVector",
    "EmptyClass",
    "IndexEstimate",
    "NuisanceConfig",
    "NuisanceFits",
    "NumericDegeneracy",
    "RankDeficient",
    "Separation",
    "contrast",
    "eif",
    "est_eq",
    "estimate_all",
    "fit_nuisance",
    "naive_index",
    "one_step",
    "plug_in",
    "rank_surfaces",
]
