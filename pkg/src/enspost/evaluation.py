"""Probabilistic forecast verification: mean CRPS, central prediction
intervals at the ensemble-size-dependent nominal level, and PIT histograms.

Forecasts come in three shapes: parametric truncated-logistic objects (scored
in closed form), Bernstein quantile objects and aggregated quantile arrays
(both scored as K-point empirical forecasts via the ensemble CRPS), and the
raw ensemble itself (the EPS baseline).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import Dataset
from .dist import (BernsteinQuantile, QuantileLevels, TruncLogistic,
                   bqn_quantile, crps_sample_batch, crps_tlogis,
                   pit, tlogis_quantile)
from .errors import ContractError, DomainError


@dataclass(frozen=True)
class EvaluationReport:
    """The verification columns of a method row: CRPS, PI, PIT."""

    mean_crps: float
    pi_level: float
    mean_pi_length: float
    pi_coverage: float          # percent of observations inside the PI
    pit_histogram: tuple        # counts over equal-width bins on [0, 1]
    n_samples: int

    def __post_init__(self):
        if not 0.0 <= self.pi_coverage <= 100.0:
            raise DomainError("coverage must be a percentage")
        if sum(self.pit_histogram) != self.n_samples:
            raise ContractError("PIT histogram must count every sample")

    def to_dict(self):
        return {
            "mean_crps": self.mean_crps,
            "pi_level": self.pi_level,
            "mean_pi_length": self.mean_pi_length,
            "pi_coverage": self.pi_coverage,
            "pit_histogram": list(self.pit_histogram),
            "n_samples": self.n_samples,
        }


def nominal_pi_level(m):
    """Nominal central-interval level (M-1)/(M+1) of an M-member ensemble.

    Returned as an exact rational; round ``float(level)`` for display.
    """
    if m < 2:
        raise DomainError("ensemble size must be at least 2")
    return Fraction(m - 1, m + 1)


def pi_bounds(forecast, level, levels=None):
    """Central prediction interval (lo, hi) at the given level.

    ``forecast`` is a distribution object, or an array of grid quantiles in
    which case ``levels`` supplies the grid and the bounds interpolate
    linearly between grid points.
    """
    level = float(level)
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie strictly inside (0, 1)")
    p_lo, p_hi = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    if isinstance(forecast, TruncLogistic):
        return (tlogis_quantile(forecast, p_lo), tlogis_quantile(forecast, p_hi))
    if isinstance(forecast, BernsteinQuantile):
        return (float(bqn_quantile(forecast, p_lo)),
                float(bqn_quantile(forecast, p_hi)))
    grid = np.asarray(forecast, dtype=np.float64)
    if levels is None:
        raise ContractError("quantile-array forecasts need their level grid")
    lv = levels.levels if isinstance(levels, QuantileLevels) else np.asarray(levels)
    return (float(np.interp(p_lo, lv, grid)), float(np.interp(p_hi, lv, grid)))


def ensemble_pit(values, y, rng):
    """Unified PIT of an observation against an empirical forecast.

    Rank position among the values, uniformly randomized across ties, mapped
    to (0, 1) by the (M+1) convention.
    """
    values = np.asarray(values, dtype=np.float64)
    below = int(np.count_nonzero(values < y))
    ties = int(np.count_nonzero(values == y))
    return (below + rng.uniform() * (1 + ties)) / (values.size + 1.0)


def _forecast_crps(forecast, y, levels):
    if isinstance(forecast, TruncLogistic):
        return crps_tlogis(forecast, y)
    if isinstance(forecast, BernsteinQuantile):
        grid = bqn_quantile(forecast, levels.levels)
        return float(crps_sample_batch(grid[None], np.array([y]))[0])
    grid = np.asarray(forecast, dtype=np.float64)
    return float(crps_sample_batch(grid[None], np.array([y]))[0])


def _forecast_pit(forecast, y, levels, rng):
    if isinstance(forecast, (TruncLogistic, BernsteinQuantile)):
        return pit(forecast, y, rng)
    return ensemble_pit(np.asarray(forecast), y, rng)


def evaluate(forecasts, observations, level, pit_bins=20, rng=None,
             levels=None):
    """Score a forecast list against observations.

    Parametric truncated-logistic forecasts use the closed-form CRPS;
    Bernstein and aggregated quantile-array forecasts are scored with the
    ensemble CRPS on their ``levels`` grid (default the 99-level percent
    grid).  Coverage counts boundary hits as covered.
    """
    observations = np.asarray(observations, dtype=np.float64)
    if len(forecasts) != observations.size:
        raise ContractError("forecasts and observations differ in length")
    if observations.size == 0:
        raise DomainError("nothing to evaluate")
    level = float(level)
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie strictly inside (0, 1)")
    if levels is None:
        levels = QuantileLevels.equidistant()
    rng = rng if rng is not None else np.random.default_rng(0)

    crps_vals, lengths, covered, pits = [], [], 0, []
    for forecast, y in zip(forecasts, observations):
        crps_vals.append(_forecast_crps(forecast, y, levels))
        lo, hi = pi_bounds(forecast, level, levels)
        lengths.append(hi - lo)
        covered += int(lo <= y <= hi)
        pits.append(_forecast_pit(forecast, y, levels, rng))
    hist, _ = np.histogram(pits, bins=pit_bins, range=(0.0, 1.0))
    return EvaluationReport(
        mean_crps=float(np.mean(crps_vals)),
        pi_level=level,
        mean_pi_length=float(np.mean(lengths)),
        pi_coverage=100.0 * covered / observations.size,
        pit_histogram=tuple(int(c) for c in hist),
        n_samples=int(observations.size),
    )


def evaluate_quantiles(quantiles, observations, level, levels=None,
                       pit_bins=20, rng=None):
    """Vectorized :func:`evaluate` for an (n, K) aggregated quantile matrix."""
    quantiles = np.asarray(quantiles, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    if quantiles.shape[0] != observations.size:
        raise ContractError("forecasts and observations differ in length")
    if observations.size == 0:
        raise DomainError("nothing to evaluate")
    level = float(level)
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie strictly inside (0, 1)")
    if levels is None:
        levels = QuantileLevels.equidistant(quantiles.shape[1])
    lv = levels.levels if isinstance(levels, QuantileLevels) else np.asarray(levels)
    rng = rng if rng is not None else np.random.default_rng(0)

    crps = crps_sample_batch(quantiles, observations)
    p_lo, p_hi = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    lo = np.array([np.interp(p_lo, lv, q) for q in quantiles])
    hi = np.array([np.interp(p_hi, lv, q) for q in quantiles])
    covered = (lo <= observations) & (observations <= hi)
    pits = [ensemble_pit(q, y, rng) for q, y in zip(quantiles, observations)]
    hist, _ = np.histogram(pits, bins=pit_bins, range=(0.0, 1.0))
    return EvaluationReport(
        mean_crps=float(crps.mean()),
        pi_level=level,
        mean_pi_length=float(np.mean(hi - lo)),
        pi_coverage=100.0 * float(covered.mean()),
        pit_histogram=tuple(int(c) for c in hist),
        n_samples=int(observations.size),
    )


def model_mean_crps(model, dataset: Dataset, levels=None):
    """Mean CRPS of a fitted model on a dataset.

    Truncated-logistic families use the closed form; quantile families are
    scored as K-point empirical forecasts.
    """
    from .dist import SCALE_FLOOR, crps_tlogis_core
    theta = model.raw_theta(dataset)
    if model.family == "tlogis":
        mu = theta[:, 0]
        sigma = np.logaddexp(0.0, theta[:, 1]) + SCALE_FLOOR
        return float(np.mean(crps_tlogis_core(mu, sigma, dataset.obs, 0.0)))
    if levels is None:
        levels = QuantileLevels.equidistant(model.config.n_quantile_levels)
    quantiles = model.quantiles(dataset, levels)
    return float(crps_sample_batch(quantiles, dataset.obs).mean())


def raw_eps_report(dataset: Dataset, primary=None, level=None, pit_bins=20,
                   rng=None):
    """Score the raw primary ensemble itself (the EPS baseline row).

    PI bounds interpolate the sorted members at the order-statistic levels
    k/(M+1); at the nominal (M-1)/(M+1) level this is exactly the ensemble
    range.  PIT is the randomized rank position.
    """
    primary = dataset.primary if primary is None else int(primary)
    if not 0 <= primary < dataset.n_predictors:
        raise DomainError("primary predictor index out of range")
    members = np.sort(dataset.ens[:, :, primary], axis=1)
    m = members.shape[1]
    level = float(nominal_pi_level(m)) if level is None else float(level)
    rng = rng if rng is not None else np.random.default_rng(0)

    crps = crps_sample_batch(members, dataset.obs)
    stat_levels = np.arange(1, m + 1) / (m + 1.0)
    p_lo, p_hi = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    lo = np.array([np.interp(p_lo, stat_levels, row) for row in members])
    hi = np.array([np.interp(p_hi, stat_levels, row) for row in members])
    covered = (lo <= dataset.obs) & (dataset.obs <= hi)
    pits = [ensemble_pit(row, y, rng) for row, y in zip(members, dataset.obs)]
    hist, _ = np.histogram(pits, bins=pit_bins, range=(0.0, 1.0))
    return EvaluationReport(
        mean_crps=float(crps.mean()),
        pi_level=level,
        mean_pi_length=float(np.mean(hi - lo)),
        pi_coverage=100.0 * float(covered.mean()),
        pit_histogram=tuple(int(c) for c in hist),
        n_samples=len(dataset),
    )


# ---------------------------------------------------------------------------
# Text/CSV rendering
# ---------------------------------------------------------------------------


def report_table(rows):
    """Aligned-column text table from ``{method name: EvaluationReport}``."""
    header = ("method", "mean_crps", "pi_length", "pi_coverage_%")
    lines = [list(header)]
    for name, rep in rows.items():
        lines.append([name, f"{rep.mean_crps:.4f}", f"{rep.mean_pi_length:.4f}",
                      f"{rep.pi_coverage:.2f}"])
    widths = [max(len(row[j]) for row in lines) for j in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in lines) + "\n"


def pit_csv(report: EvaluationReport):
    """CSV text (bin_lo, bin_hi, count) of a report's PIT histogram."""
    n = len(report.pit_histogram)
    lines = ["bin_lo,bin_hi,count"]
    for i, count in enumerate(report.pit_histogram):
        lines.append(f"{i / n:.6f},{(i + 1) / n:.6f},{count}")
    return "\n".join(lines) + "\n"
