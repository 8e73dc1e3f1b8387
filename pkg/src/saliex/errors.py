"""Exception hierarchy shared by every saliex module."""


class SaliexError(Exception):
    """Base class for all errors raised by saliex."""


class ContractError(SaliexError, ValueError):
    """An operation was called with arguments violating its shape/type contract."""


class ConfigError(SaliexError, ValueError):
    """Invalid configuration value or a geometry that cannot be realized."""


class DataError(SaliexError, ValueError):
    """Input data is malformed (bad labels, unparsable files, ...)."""


class CheckpointError(SaliexError):
    """Checkpoint file is corrupt or does not match the expected model."""


class ExplanationError(SaliexError):
    """The explainer cannot build a valid sampling neighbourhood."""


class TrainingDiverged(SaliexError):
    """Training produced a non-finite loss."""
