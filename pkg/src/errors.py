#!/usr/bin/env python3
"""
Error types shared by every module.

Core modules raise these; the CLI and the pipeline runner map them to exit codes.
"""


class OmniVLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OmniVLError):
    """Invalid or unknown configuration."""


class ArgumentError(OmniVLError, ValueError):
    """Invalid argument passed to an operation."""


class ShapeError(ArgumentError):
    """Array dimension mismatch. The message names the offending axis."""

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"dimension error on axis '{axis}': {message}")


class NumericError(OmniVLError):
    """Non-finite activations or losses."""


class ManifestError(OmniVLError):
    """Malformed corpus manifest line."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class SchemaError(ManifestError):
    """Manifest record violates the record schema."""


class TrainingError(OmniVLError):
    """Training aborted."""
