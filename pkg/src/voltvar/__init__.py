"""Neural power-flow surrogates for volt-var optimization and droop-rule learning."""

__version__ = "0.1.0"
