"""Exception hierarchy shared by every fuselab module."""


class FuselabError(Exception):
    """Base class for all errors raised by fuselab."""


class ConfigError(FuselabError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ParseError(FuselabError, ValueError):
    """Input text is syntactically malformed."""


class SchemaError(FuselabError, ValueError):
    """Input parsed but a required field is missing or has the wrong type."""


class ValidationError(FuselabError, ValueError):
    """Input is well-formed but breaks a data invariant."""


class EvaluationError(FuselabError, ValueError):
    """A metric is undefined for the given inputs."""
