"""Deterministic simulator of Ethereum block-production auctions."""

from .actors import (
    BuilderProfile,
    BuilderStrategy,
    MevOpportunitySet,
    RelayProfile,
    UserCohort,
    ValidatorProfile,
)
from .config import ConfigError, parse_config
from .engine import OpportunityParams, SimulationConfig, run_simulation
from .metrics import SimulationReport

__all__ = [
    "BuilderProfile",
    "BuilderStrategy",
    "ConfigError",
    "MevOpportunitySet",
    "OpportunityParams",
    "RelayProfile",
    "SimulationConfig",
    "SimulationReport",
    "UserCohort",
    "ValidatorProfile",
    "parse_config",
    "run_simulation",
]

__version__ = "0.1.0"
