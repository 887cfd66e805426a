"""Domain-incremental learning with per-domain batch-norm statistics banks.

A small numpy CNN, forward-only BN statistics adaptation, a synthetic
weather-corrupted glyph benchmark, and an experiment harness comparing the
statistics-bank method against five training baselines.
"""

__version__ = "0.1.0"
