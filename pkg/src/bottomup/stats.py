"""Small statistical helpers shared across modules.

Every credible interval in the package goes through :func:`quantile` so that
prediction summaries and coverage checks agree on the same percentile
definition (linear interpolation between order statistics, rank
``h = 1 + (n - 1) p``).
"""
from __future__ import annotations

import numpy as np

CI_LEVELS = (0.025, 0.975)


def quantile(values, q, axis=None):
    """Linear-interpolation quantile (``numpy`` method ``"linear"``)."""
    return np.quantile(np.asarray(values, dtype=float), q, axis=axis, method="linear")


def credible_interval(draws, axis=0, level=0.95):
    """Equal-tailed interval of ``draws`` along ``axis``; returns ``(lo, hi)``."""
    tail = (1.0 - level) / 2.0
    lo, hi = quantile(draws, [tail, 1.0 - tail], axis=axis)
    return lo, hi


def summarize(draws, axis=0):
    """Mean, median and 95% equal-tailed bounds of ``draws`` along ``axis``."""
    draws = np.asarray(draws, dtype=float)
    lo, med, hi = quantile(draws, [0.025, 0.5, 0.975], axis=axis)
    return {"mean": draws.mean(axis=axis), "median": med, "lo95": lo, "hi95": hi}
