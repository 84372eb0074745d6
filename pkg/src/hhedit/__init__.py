"""Edit-imputation engine for household-nested categorical microdata."""

__version__ = "0.1.0"

from .data import Dataset, Household, read_microdata, write_microdata
from .gibbs import GibbsConfig, GibbsResult, run_gibbs
from .model import Hyperparams, NdpmpmParams, load_params, save_params
from .rules import RuleSet, parse_predicate, parse_rules
from .schema import Schema, Variable, cell_index, load_schema

__all__ = [
    "Dataset",
    "Household",
    "GibbsConfig",
    "GibbsResult",
    "Hyperparams",
    "NdpmpmParams",
    "RuleSet",
    "Schema",
    "Variable",
    "cell_index",
    "load_params",
    "load_schema",
    "parse_predicate",
    "parse_rules",
    "read_microdata",
    "run_gibbs",
    "save_params",
    "write_microdata",
]
