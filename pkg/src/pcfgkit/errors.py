"""Exception hierarchy shared across the toolkit.

Exit-code mapping for the CLI lives in cli.py: ConfigError -> 2, every
other PcfgkitError -> 1.
"""


class PcfgkitError(Exception):
    """Base class for all toolkit errors."""


class StructuralError(PcfgkitError):
    """Shapes, indices, or tree structure violate a contract."""


class ValidationError(PcfgkitError):
    """A rule table failed normalization/finiteness checks."""


class DegenerateInputError(PcfgkitError):
    """Input too small or constant for the requested operation."""


class NoParseError(PcfgkitError):
    """The grammar assigns zero probability to the sentence."""


class ConfigError(PcfgkitError):
    """Bad configuration: unknown strategy, missing paths, invalid knobs."""


class DataError(PcfgkitError):
    """Malformed input files or misaligned prediction/gold data."""


class TrainingFault(PcfgkitError):
    """Non-finite loss or similar fault during an optimization step."""
