"""Exception types shared across the package.

The CLI maps these onto its exit codes, so library code should raise the
most specific one that applies instead of bare ValueError/RuntimeError.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Bad configuration, bad file contents, or bad arguments (exit code 2)."""


class InputError(ValueError):
    """Invalid runtime input to a library call (non-finite points, shape mismatch...)."""


class NumericsError(RuntimeError):
    """Numerical failure such as divergence to NaN during optimization (exit code 3)."""


class MetricUndefined(RuntimeError):
    """A requested metric is undefined for the inputs, e.g. an empty mesh (exit code 4)."""
