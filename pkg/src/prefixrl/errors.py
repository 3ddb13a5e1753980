"""Exception types shared across the package."""


class PrefixRlError(Exception):
    """Base class for all package errors."""


class ContractError(PrefixRlError):
    """A caller violated a documented precondition or interface contract."""


class NumericalError(PrefixRlError):
    """A computation produced a non-finite value."""


class DomainError(PrefixRlError):
    """An input lies outside the mathematical domain of a primitive."""


class BudgetError(PrefixRlError):
    """An exhaustive computation would exceed its enumeration budget."""


class GenerationError(PrefixRlError):
    """Synthetic data generation failed after bounded retries."""


class CollectionError(PrefixRlError):
    """Rollout collection could not assemble a full mixed-outcome batch."""


class ConfigError(PrefixRlError):
    """Configuration failed validation; message lists every violation."""
