"""Exception taxonomy shared across the pipeline.

The CLI maps the concrete class name to its single-line error output, so
raising the right class is part of the external contract.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PipelineError):
    """Invalid configuration value, preset name, or stats."""


class ValidationError(PipelineError):
    """Inputs are structurally valid but inconsistent with each other."""


class SchemaError(PipelineError):
    """A required column or field is missing from an input file."""


class ParseError(PipelineError):
    """A cell or row of an input file could not be parsed."""


class NumericError(PipelineError):
    """A non-finite value appeared where a finite one is required."""
