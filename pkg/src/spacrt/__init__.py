"""spacrt: resampling-free conditional independence testing via the
conditional saddlepoint approximation, with its resampling and
asymptotic baselines, the regression and HMM machinery they need, and a
simulation harness."""

__version__ = "0.1.0"

from .citest import (
    Dataset,
    FittedConditionals,
    Method,
    TestOutcome,
    dcrt,
    fit_conditionals,
    gcm,
    score_test_nb,
    signflip_spa,
    spacrt,
    test_statistic,
)
from .nef import CgfTerm, NefFamily
from .saddlepoint import (
    SpaInputs,
    SpaSolution,
    SpaStatus,
    lugannani_rice,
    robinson,
    solve_saddlepoint,
    spa_tail_probability,
)

__all__ = [
    "CgfTerm",
    "Dataset",
    "FittedConditionals",
    "Method",
    "NefFamily",
    "SpaInputs",
    "SpaSolution",
    "SpaStatus",
    "TestOutcome",
    "dcrt",
    "fit_conditionals",
    "gcm",
    "lugannani_rice",
    "robinson",
    "score_test_nb",
    "signflip_spa",
    "solve_saddlepoint",
    "spa_tail_probability",
    "spacrt",
    "test_statistic",
    "__version__",
]
