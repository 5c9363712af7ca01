"""Statistical postprocessing of ensemble weather forecasts.

Permutation-invariant network architectures (set pooling, set transformer)
and summary-statistic baselines (EMOS, DRN, BQN) trained by proper scoring
rules, with verification metrics and ensemble-oriented permutation
importance analysis.
"""

__version__ = "0.1.0"
