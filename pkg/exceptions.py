"""Custom exception classes for the GHQ framework"""


class GHQError(Exception):
    """Base exception for framework errors"""
    pass


class ConfigError(GHQError):
    """Invalid configuration, shapes, maps or manifests"""
    pass


class CheckpointError(ConfigError):
    """Unreadable or incompatible checkpoints"""
    pass


class UsageError(GHQError):
    """API used outside its preconditions"""
    pass


class ContractViolation(GHQError):
    """Caller broke an environment or controller contract (e.g. picked a masked action)"""
    pass


class ValidationError(GHQError):
    """Errors raised by the oracle/invariant suite"""
    pass
