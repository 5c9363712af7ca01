"""Ensemble-oriented permutation feature importance.

Three shuffling operators act on one ensemble predictor across a dataset:
fully random (destroys within-ensemble structure), rank-aware (transplanted
values are reordered to the original member ranks), and conditional
(rank-aware shuffles restricted to bins of samples with similar values of a
chosen summary statistic).  The relative skill loss Delta0 measures a
predictor's importance; the ratio chi measures how much of that loss a
statistic-preserving shuffle restores, i.e. how much of the predictor's
information lives in that statistic.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import ConfigError, ContractError, DomainError
from .evaluation import model_mean_crps

SUMMARY_KINDS = ("mean", "std", "min", "max", "iqr", "range",
                 "skewness", "kurtosis")
PERTURBATION_KINDS = ("fully_random", "rank_aware", "conditional")
DEFAULT_BINS = 100
CHI_RELIABLE_FRACTION = 1e-3  # denominator threshold relative to base score


@dataclass(frozen=True)
class PerturbationSpec:
    """One shuffling operation on one ensemble predictor."""

    predictor: int
    kind: str
    statistic: str = None
    bins: int = DEFAULT_BINS
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "conditional":
            if self.statistic not in SUMMARY_KINDS:
                raise ConfigError(
                    f"conditional shuffling needs a statistic, got "
                    f"{self.statistic!r}")
            if self.bins < 2:
                raise ConfigError("conditional shuffling needs bins >= 2")
        if self.predictor < 0:
            raise ConfigError("predictor index must be non-negative")


@dataclass(frozen=True)
class ChiResult:
    """Importance ratio with a denominator-reliability flag."""

    value: float
    reliable: bool


# ---------------------------------------------------------------------------
# Summary statistics
# ---------------------------------------------------------------------------


def summary_statistic(values, kind):
    """One of the eight ensemble summary statistics, along the last axis.

    Central moments use the n denominator except the standard deviation
    (n-1); the inter-quartile range interpolates order statistics linearly.
    Constant ensembles yield 0 for every spread and shape statistic.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] < 2:
        raise DomainError("need at least two members")
    if kind == "mean":
        return values.mean(axis=-1)
    if kind == "std":
        return values.std(axis=-1, ddof=1)
    if kind == "min":
        return values.min(axis=-1)
    if kind == "max":
        return values.max(axis=-1)
    if kind == "iqr":
        q25, q75 = np.percentile(values, [25, 75], axis=-1)
        return q75 - q25
    if kind == "range":
        return values.max(axis=-1) - values.min(axis=-1)
    centered = values - values.mean(axis=-1, keepdims=True)
    m2 = np.mean(centered**2, axis=-1)
    safe = np.where(m2 > 0, m2, 1.0)
    if kind == "skewness":
        return np.where(m2 > 0, np.mean(centered**3, axis=-1) / safe**1.5, 0.0)
    if kind == "kurtosis":
        return np.where(m2 > 0, np.mean(centered**4, axis=-1) / safe**2 - 3.0,
                        0.0)
    raise ConfigError(f"unknown summary statistic {kind!r}")


# ---------------------------------------------------------------------------
# Shuffling operators
# ---------------------------------------------------------------------------


def _member_ranks(col):
    """Within-row ranks, ties broken by original member index."""
    order = np.argsort(col, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(col.shape[0])[:, None]
    ranks[rows, order] = np.arange(col.shape[1])[None, :]
    return ranks


def _rank_aware_transplant(col, donor_perm):
    """Donor rows reordered to the receiving rows' member rank patterns."""
    donor_sorted = np.sort(col[donor_perm], axis=1)
    rows = np.arange(col.shape[0])[:, None]
    return donor_sorted[rows, _member_ranks(col)]


def conditional_bins(stat_values, bins):
    """Bin ids from ranking on the *unique* statistic values.

    Unique values are ranked ascending and cut into contiguous runs of
    ``ceil(U/B)``; samples sharing a value share a bin.  Returns
    ``(bin_ids, n_bins, collapsed)`` where ``collapsed`` flags B exceeding
    the number of unique values.
    """
    uniq, inverse = np.unique(np.asarray(stat_values), return_inverse=True)
    n_unique = uniq.size
    run = -(-n_unique // bins)  # ceil
    bin_ids = inverse // run
    return bin_ids, int(bin_ids.max()) + 1, bins > n_unique


def perturb(dataset: Dataset, spec: PerturbationSpec) -> Dataset:
    """Shuffle one ensemble predictor across the dataset.

    All three operators permute whole member columns between samples, so the
    dataset-wide multiset of values is conserved exactly; rank-aware and
    conditional additionally preserve each sample's member rank pattern.
    """
    if spec.predictor >= dataset.n_predictors:
        raise ConfigError("predictor index out of range")
    if len(dataset) < 2:
        raise DomainError("need at least two samples to shuffle")
    col = dataset.ens[:, :, spec.predictor]
    rng = np.random.default_rng(spec.seed)
    t, m = col.shape

    if spec.kind == "fully_random":
        donor = col[rng.permutation(t)]
        member_perms = np.argsort(rng.random((t, m)), axis=1)
        new_col = donor[np.arange(t)[:, None], member_perms]
    elif spec.kind == "rank_aware":
        new_col = _rank_aware_transplant(col, rng.permutation(t))
    else:
        stat = summary_statistic(col, spec.statistic)
        bin_ids, n_bins, _ = conditional_bins(stat, spec.bins)
        donor_perm = np.arange(t)
        for b in range(n_bins):
            members = np.nonzero(bin_ids == b)[0]
            donor_perm[members] = members[rng.permutation(members.size)]
        new_col = _rank_aware_transplant(col, donor_perm)

    ens = dataset.ens.copy()
    ens[:, :, spec.predictor] = new_col
    return dataset.with_ens(ens)


# ---------------------------------------------------------------------------
# Importance scores
# ---------------------------------------------------------------------------


def derive_seed(seed, *tags):
    """Stable child seed for a named random stream."""
    digest = zlib.crc32("/".join(str(t) for t in tags).encode("utf-8"))
    return int(np.random.SeedSequence([int(seed), digest]).generate_state(1)[0])


def delta0(model, test: Dataset, spec: PerturbationSpec = None):
    """Relative skill loss (S[g o P] - S[g]) / S[g] under mean CRPS.

    ``spec=None`` is the identity perturbation and returns exactly 0.
    """
    base = model_mean_crps(model, test)
    if base == 0.0:
        raise DomainError("degenerate model: mean CRPS is zero")
    if spec is None:
        return 0.0
    perturbed = model_mean_crps(model, perturb(test, spec))
    return (perturbed - base) / base


def chi_ratio(model, test: Dataset, spec_num: PerturbationSpec,
              spec_ref: PerturbationSpec):
    """Skill-loss ratio of two perturbation operators.

    Returns (S[g o P_num] - S[g]) / (S[g o P_ref] - S[g]); identical specs
    give exactly 1.  The result is flagged unreliable when the reference
    skill loss is below ``1e-3`` of the base score.
    """
    if spec_num.predictor != spec_ref.predictor:
        raise ContractError("operators must act on the same predictor")
    base = model_mean_crps(model, test)
    if base == 0.0:
        raise DomainError("degenerate model: mean CRPS is zero")
    num = model_mean_crps(model, perturb(test, spec_num)) - base
    den = model_mean_crps(model, perturb(test, spec_ref)) - base
    reliable = abs(den) >= CHI_RELIABLE_FRACTION * base
    value = num / den if den != 0.0 else np.nan
    return ChiResult(value=float(value), reliable=bool(reliable))


def chi(model, test: Dataset, predictor, statistic, bins=DEFAULT_BINS,
        seed=0):
    """Fraction of the rank-aware skill loss restored by conditioning on a
    summary statistic.

    Computed as ``1 - chi_ratio(conditional, rank_aware)``, so (absent
    sampling noise) 1 means knowledge of the statistic recovers the model
    skill entirely and 0 means the statistic is uninformative.
    """
    spec_num = PerturbationSpec(predictor, "conditional", statistic=statistic,
                                bins=bins,
                                seed=derive_seed(seed, "chi-num", predictor,
                                                 statistic))
    spec_ref = PerturbationSpec(predictor, "rank_aware",
                                seed=derive_seed(seed, "chi-ref", predictor))
    ratio = chi_ratio(model, test, spec_num, spec_ref)
    return ChiResult(value=1.0 - ratio.value, reliable=ratio.reliable)


def spearman(x, y):
    """Rank correlation (Pearson correlation of mid-ranks).

    Returns NaN when either rank vector is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise DomainError("need two equal-length vectors")
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return float("nan")
    return float(np.corrcoef(rx, ry)[0, 1])


def preservation_matrix(dataset: Dataset, predictor, bins=DEFAULT_BINS,
                        seed=0, statistics=SUMMARY_KINDS):
    """Spearman preservation of each statistic under conditional shuffling.

    Entry (row s, column s') correlates s' computed on the original
    ensembles with s' after conditional shuffling on s.  Diagonals near 1
    mean the binning preserves the conditioning statistic.
    """
    if len(dataset) < 10:
        raise DomainError("need at least 10 samples")
    col = dataset.ens[:, :, predictor]
    original = {s: summary_statistic(col, s) for s in statistics}
    matrix = np.empty((len(statistics), len(statistics)))
    for i, cond in enumerate(statistics):
        spec = PerturbationSpec(predictor, "conditional", statistic=cond,
                                bins=bins,
                                seed=derive_seed(seed, "preserve", predictor,
                                                 cond))
        shuffled = perturb(dataset, spec).ens[:, :, predictor]
        for j, measured in enumerate(statistics):
            matrix[i, j] = spearman(original[measured],
                                    summary_statistic(shuffled, measured))
    return matrix


# ---------------------------------------------------------------------------
# Pool-level report
# ---------------------------------------------------------------------------


def _box_stats(values):
    values = np.asarray(values, dtype=np.float64)
    q25, median, q75 = np.percentile(values, [25, 50, 75])
    return {"mean": float(values.mean()), "min": float(values.min()),
            "q25": float(q25), "median": float(median), "q75": float(q75),
            "max": float(values.max())}


def importance_report(models, test: Dataset, bins=DEFAULT_BINS, seed=0,
                      statistics=SUMMARY_KINDS, chi_predictors=None):
    """Pool-aggregated importance analysis as a JSON-ready dict.

    Delta0 uses the fully-random operator; chi ratios use the rank-aware
    reference.  Each (model, predictor) cell gets an independently derived
    seed; preservation matrices are model-free and computed once.
    """
    if not models:
        raise DomainError("need at least one model")
    names = test.predictor_names
    if chi_predictors is None:
        chi_predictors = list(range(test.n_predictors))

    delta_runs = {name: [] for name in names}
    for run, model in enumerate(models):
        for i, name in enumerate(names):
            spec = PerturbationSpec(i, "fully_random",
                                    seed=derive_seed(seed, "delta0", run, i))
            delta_runs[name].append(delta0(model, test, spec))

    chi_block = {}
    for i in chi_predictors:
        per_stat = {}
        for stat in statistics:
            results = [chi(model, test, i, stat, bins=bins,
                           seed=derive_seed(seed, "chi", run, i))
                       for run, model in enumerate(models)]
            per_stat[stat] = {
                **_box_stats([r.value for r in results]),
                "reliable": all(r.reliable for r in results),
            }
        chi_block[names[i]] = per_stat

    preservation = {
        names[i]: preservation_matrix(test, i, bins=bins, seed=seed,
                                      statistics=statistics).tolist()
        for i in chi_predictors
    }
    return {
        "bins": bins,
        "statistics": list(statistics),
        "delta0": {name: _box_stats(vals) for name, vals in delta_runs.items()},
        "chi": chi_block,
        "preservation": preservation,
        "n_models": len(models),
        "n_samples": len(test),
    }


def preservation_csv(matrix, statistics=SUMMARY_KINDS):
    """CSV heatmap table (conditioning statistic x measured statistic)."""
    matrix = np.asarray(matrix)
    lines = ["conditioning," + ",".join(statistics)]
    for name, row in zip(statistics, matrix):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
