"""Shared exception types."""

from __future__ import annotations


class NapError(Exception):
    """Base class for all package errors."""


class ShapeError(NapError):
    """Tensor shapes are incompatible for the requested operation."""


class GradientStateError(NapError):
    """Autograd contract violation: non-scalar backward, or backward called
    while parameter gradients from a previous pass are still present."""


class DegenerateInputError(NapError):
    """An input that is structurally valid but has no defined result
    (e.g. mean over zero unmasked positions)."""


class DivergenceError(NapError):
    """Training produced non-finite values."""

    def __init__(self, message: str, param_name: str | None = None,
                 checkpoint_path: str | None = None):
        super().__init__(message)
        self.param_name = param_name
        self.checkpoint_path = checkpoint_path


class ConfigError(NapError):
    """Invalid configuration value (empty corpus, bad ratios, n_calls <= 0, ...)."""


class SOPValidationError(NapError):
    """SOP document failed validation. Carries every diagnostic, not just the first."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("SOP validation failed:\n" + "\n".join(self.diagnostics))


class SlotSchemaError(NapError):
    """A slot name not present in the SOP slot schema was used."""


class UnknownActionError(NapError):
    """A request referenced action names the SOP does not define."""

    def __init__(self, names: list[str]):
        self.names = list(names)
        super().__init__(f"unknown action name(s): {', '.join(names)}")


class CheckpointError(NapError):
    """Checkpoint container is malformed or incompatible."""
