"""Copula joint models of longitudinal measurements and right-censored event times."""

from .corr import CorrelationSpec, NotPositiveDefinite, build_R, tail_dependence
from .data import Dataset, DataError, ModelSpec, ParamLayout, ParamVector, SubjectRecord, parse_dataset
from .likelihood import subject_contributions, total_loglik

__version__ = "0.1.0"

__all__ = [
    "CorrelationSpec",
    "DataError",
    "Dataset",
    "ModelSpec",
    "NotPositiveDefinite",
    "ParamLayout",
    "ParamVector",
    "SubjectRecord",
    "build_R",
    "parse_dataset",
    "subject_contributions",
    "tail_dependence",
    "total_loglik",
]
