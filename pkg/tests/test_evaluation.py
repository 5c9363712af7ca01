"""Unit tests for forecast verification."""

from fractions import Fraction

import numpy as np
import pytest

from enspost.data import SynthConfig, generate_synthetic, split_temporal
from enspost.dist import BernsteinQuantile, QuantileLevels, TruncLogistic, tlogis_quantile
from enspost.errors import ContractError, DomainError
from enspost.evaluation import (EvaluationReport, ensemble_pit, evaluate,
                                evaluate_quantiles, model_mean_crps,
                                nominal_pi_level, pi_bounds, pit_csv,
                                raw_eps_report, report_table)
from oracles import crps_tlogis_quad


# ---------------------------------------------------------------------------
# Nominal levels and intervals
# ---------------------------------------------------------------------------


def test_nominal_pi_level_exact_fractions():
    assert nominal_pi_level(20) == Fraction(19, 21)
    assert nominal_pi_level(11) == Fraction(5, 6)
    assert nominal_pi_level(51) == Fraction(25, 26)
    with pytest.raises(DomainError):
        nominal_pi_level(1)


def test_pi_bounds_tlogis_are_central_quantiles():
    d = TruncLogistic(3.0, 1.0)
    lo, hi = pi_bounds(d, 0.8)
    assert lo == pytest.approx(tlogis_quantile(d, 0.1))
    assert hi == pytest.approx(tlogis_quantile(d, 0.9))
    with pytest.raises(DomainError):
        pi_bounds(d, 1.0)


def test_pi_bounds_quantile_array_interpolates():
    levels = np.array([0.1, 0.5, 0.9])
    grid = np.array([0.0, 5.0, 10.0])
    lo, hi = pi_bounds(grid, 0.5, levels=levels)
    assert lo == pytest.approx(np.interp(0.25, levels, grid))
    assert hi == pytest.approx(np.interp(0.75, levels, grid))
    with pytest.raises(ContractError):
        pi_bounds(grid, 0.5)          # grid forecasts need their levels


def test_pi_bounds_bernstein():
    bq = BernsteinQuantile(np.array([0.0, 1.0, 2.0]))
    lo, hi = pi_bounds(bq, 0.8)
    assert lo == pytest.approx(2 * 0.1, abs=1e-12)   # Q(p) = 2p here
    assert hi == pytest.approx(2 * 0.9, abs=1e-12)


# ---------------------------------------------------------------------------
# PIT of empirical forecasts
# ---------------------------------------------------------------------------


def test_ensemble_pit_rank_position():
    values = np.array([1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(0)
    p = ensemble_pit(values, 2.5, rng)
    assert (2 + 0.0) / 5 <= p <= (2 + 1.0) / 5
    # ties randomize across the tied block
    draws = [ensemble_pit(np.array([1.0, 2.0, 2.0, 3.0]), 2.0,
                          np.random.default_rng(i)) for i in range(200)]
    assert min(draws) < 0.35 and max(draws) > 0.65


def test_ensemble_pit_of_self_drawn_sample_is_uniform():
    rng = np.random.default_rng(1)
    n, m = 4000, 10
    pits = []
    for _ in range(n):
        pool = rng.normal(size=m + 1)
        pits.append(ensemble_pit(pool[:m], pool[m], rng))
    hist, _ = np.histogram(pits, bins=10, range=(0, 1))
    assert hist.min() > 300 and hist.max() < 500


# ---------------------------------------------------------------------------
# Report construction
# ---------------------------------------------------------------------------


def test_evaluation_report_validation():
    with pytest.raises(DomainError):
        EvaluationReport(1.0, 0.9, 1.0, 150.0, (1,), 1)
    with pytest.raises(ContractError):
        EvaluationReport(1.0, 0.9, 1.0, 50.0, (1, 1), 3)
    rep = EvaluationReport(1.0, 0.9, 1.0, 50.0, (1, 1), 2)
    assert rep.to_dict()["pit_histogram"] == [1, 1]


def test_evaluate_parametric_forecasts_closed_form_crps():
    rng = np.random.default_rng(2)
    forecasts = [TruncLogistic(rng.uniform(2, 8), rng.uniform(0.5, 2))
                 for _ in range(10)]
    obs = np.array([f.location + 0.3 for f in forecasts])
    rep = evaluate(forecasts, obs, 0.9, rng=np.random.default_rng(0))
    expected = np.mean([crps_tlogis_quad(f.location, f.scale, y)
                        for f, y in zip(forecasts, obs)])
    assert rep.mean_crps == pytest.approx(expected, abs=1e-8)
    assert rep.n_samples == 10
    assert sum(rep.pit_histogram) == 10


def test_evaluate_input_validation():
    with pytest.raises(ContractError):
        evaluate([TruncLogistic(1, 1)], np.array([1.0, 2.0]), 0.9)
    with pytest.raises(DomainError):
        evaluate([], np.array([]), 0.9)
    with pytest.raises(DomainError):
        evaluate([TruncLogistic(1, 1)], np.array([1.0]), 1.5)


def test_evaluate_quantiles_matches_evaluate_on_grids():
    rng = np.random.default_rng(3)
    levels = QuantileLevels.equidistant(19)
    quantiles = np.sort(rng.normal(5, 2, size=(30, 19)), axis=1)
    obs = rng.normal(5, 2, size=30)
    rep_v = evaluate_quantiles(quantiles, obs, 0.8, levels=levels,
                               rng=np.random.default_rng(7))
    rep_s = evaluate(list(quantiles), obs, 0.8, levels=levels,
                     rng=np.random.default_rng(7))
    assert rep_v.mean_crps == pytest.approx(rep_s.mean_crps, rel=1e-12)
    assert rep_v.mean_pi_length == pytest.approx(rep_s.mean_pi_length,
                                                 rel=1e-12)
    assert rep_v.pi_coverage == rep_s.pi_coverage


def test_coverage_counts_boundary_hits():
    levels = np.array([0.25, 0.5, 0.75])
    quantiles = np.array([[0.0, 1.0, 2.0]])
    # with level 0.5 the PI is exactly [0, 2]; an observation on the edge
    # counts as covered
    rep = evaluate_quantiles(quantiles, np.array([2.0]), 0.5, levels=levels)
    assert rep.pi_coverage == 100.0


# ---------------------------------------------------------------------------
# Model scoring and the EPS baseline
# ---------------------------------------------------------------------------


def _quick_model():
    from enspost.models import ModelConfig
    from enspost.train import train_model
    ds = generate_synthetic(SynthConfig(stations=3, days=40, members=8))
    train, val, test = split_temporal(ds, (0.6, 0.2, 0.2))
    cfg = ModelConfig(architecture="drn", hidden_sizes=(6, 5),
                      latent_width=8, attention_heads=2,
                      n_attention_blocks=2, bernstein_degree=4,
                      embedding_dim=3, n_quantile_levels=9, max_epochs=5)
    model, _ = train_model(cfg, train, val)
    return model, test


def test_model_mean_crps_matches_forecast_scoring():
    model, test = _quick_model()
    fast = model_mean_crps(model, test)
    rep = evaluate(model.forecast(test), test.obs, 0.9)
    assert fast == pytest.approx(rep.mean_crps, rel=1e-10)


def test_raw_eps_report_nominal_interval_is_ensemble_range():
    ds = generate_synthetic(SynthConfig(stations=3, days=30, members=10))
    rep = raw_eps_report(ds, rng=np.random.default_rng(0))
    assert rep.pi_level == pytest.approx(float(nominal_pi_level(10)))
    members = np.sort(ds.ens[:, :, ds.primary], axis=1)
    expected = np.mean(members[:, -1] - members[:, 0])
    assert rep.mean_pi_length == pytest.approx(expected)
    with pytest.raises(DomainError):
        raw_eps_report(ds, primary=99)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def test_report_table_and_pit_csv_formats():
    rep = EvaluationReport(1.2345, 0.9, 2.5, 88.0, (2, 1, 1), 4)
    table = report_table({"eps": rep})
    lines = table.strip().split("\n")
    assert lines[0].split() == ["method", "mean_crps", "pi_length",
                                "pi_coverage_%"]
    assert "1.2345" in lines[1] and "88.00" in lines[1]
    csv = pit_csv(rep)
    rows = csv.strip().split("\n")
    assert rows[0] == "bin_lo,bin_hi,count"
    assert len(rows) == 4
    assert rows[1].endswith(",2")
