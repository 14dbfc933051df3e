"""Physics-informed test-time refinement of AC power-flow surrogates."""

__version__ = "0.1.0"
