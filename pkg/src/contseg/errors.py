"""Error types raised across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class PlacementError(RuntimeError):
    """Scene generation could not place a segment without overlap."""


class IntegrityError(ValueError):
    """A structural invariant was violated (overlapping masks, bad labels)."""


class CapacityError(ValueError):
    """More annotation targets than model outputs."""


class NumericError(FloatingPointError):
    """A non-finite value appeared; the message names where."""
