"""Configuration-driven simulated clients."""

from .actor import (
    Busy,
    Client,
    ClientError,
    CostClock,
    EmptyGroup,
    GrowthPaused,
    NoKeyPackageAvailable,
    PolicyDenied,
    Ramp,
)
from .config import (
    FIG4_EXAMPLE,
    BadValue,
    ClientConfig,
    ConfigError,
    MissingKey,
    UnknownKey,
    format_config,
    load_config,
    parse_config,
)
from .policy import UpdaterPolicy, policy_allows

__all__ = [
    "BadValue", "Busy", "Client", "ClientConfig", "ClientError", "ConfigError", "CostClock",
    "EmptyGroup", "FIG4_EXAMPLE", "GrowthPaused", "MissingKey", "NoKeyPackageAvailable",
    "PolicyDenied", "Ramp", "UnknownKey", "UpdaterPolicy", "format_config", "load_config",
    "parse_config", "policy_allows",
]
