"""Unit tests for dataset handling and the synthetic generator."""

import json

import numpy as np
import pytest
from scipy import stats as sps

from enspost.data import (PREDICTOR_NAMES, SCALAR_NAMES, Dataset, SynthConfig,
                          generate_synthetic, load_ndjson, save_ndjson,
                          split_temporal, standardize)
from enspost.errors import ConfigError


def _tiny_dataset(t=6, m=4, p=2, q=2, seed=0):
    rng = np.random.default_rng(seed)
    times = [f"2020-01-{d + 1:02d}" for d in range(t // 2) for _ in (0, 1)]
    return Dataset(
        ens=rng.normal(5, 1, size=(t, m, p)),
        scalars=rng.normal(size=(t, q)),
        station=[0, 1] * (t // 2),
        times=times,
        obs=rng.normal(5, 1, size=t),
        lead_hours=6,
        predictor_names=[f"p{i}" for i in range(p)],
        scalar_names=[f"s{i}" for i in range(q)],
    )


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------


def test_dataset_sorts_by_time_then_station():
    ds = Dataset(
        ens=np.ones((3, 2, 1)) * np.arange(3)[:, None, None],
        scalars=np.zeros((3, 1)),
        station=[1, 0, 0],
        times=["2020-01-02", "2020-01-02", "2020-01-01"],
        obs=[1.0, 2.0, 3.0],
        lead_hours=6,
        predictor_names=["x"],
        scalar_names=["s"],
    )
    assert list(ds.times) == ["2020-01-01", "2020-01-02", "2020-01-02"]
    assert list(ds.station) == [0, 0, 1]
    assert list(ds.obs) == [3.0, 2.0, 1.0]


def test_dataset_is_write_protected():
    ds = _tiny_dataset()
    with pytest.raises(ValueError):
        ds.ens[0, 0, 0] = 99.0


def test_dataset_validation_errors():
    with pytest.raises(ConfigError):
        _tiny_dataset(m=1)
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError, match="non-finite"):
        Dataset(ens=np.full((1, 2, 1), np.nan), scalars=np.zeros((1, 1)),
                station=[0], times=["2020-01-01"], obs=[1.0], lead_hours=6,
                predictor_names=["x"], scalar_names=["s"])
    with pytest.raises(ConfigError):
        Dataset(ens=rng.normal(size=(2, 2, 1)), scalars=np.zeros((2, 1)),
                station=[0, 5], times=["2020-01-01"] * 2, obs=[1.0, 2.0],
                lead_hours=6, predictor_names=["x"], scalar_names=["s"],
                n_stations=2)


def test_dataset_sample_and_months():
    ds = _tiny_dataset()
    s = ds.sample(0)
    assert s.ens.shape == (4, 2)
    assert s.lead_hours == 6
    assert set(ds.months()) == {1}


def test_subset_and_with_ens_roundtrip():
    ds = _tiny_dataset()
    sub = ds.subset(np.arange(3))
    assert len(sub) == 3
    swapped = ds.with_ens(ds.ens * 2.0)
    np.testing.assert_allclose(swapped.ens, ds.ens * 2.0)
    np.testing.assert_allclose(swapped.obs, ds.obs)


# ---------------------------------------------------------------------------
# NDJSON round trip
# ---------------------------------------------------------------------------


def test_ndjson_roundtrip_is_exact(tmp_path):
    ds = generate_synthetic(SynthConfig(stations=3, days=5, members=4))
    path = tmp_path / "data.ndjson"
    save_ndjson(ds, path)
    back = load_ndjson(path, primary=ds.primary, n_stations=ds.n_stations)
    np.testing.assert_array_equal(back.ens, ds.ens)
    np.testing.assert_array_equal(back.scalars, ds.scalars)
    np.testing.assert_array_equal(back.obs, ds.obs)
    assert list(back.times) == list(ds.times)
    assert back.predictor_names == ds.predictor_names
    assert back.lead_hours == ds.lead_hours


def test_load_ndjson_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.ndjson"
    good = {"time": "2020-01-01", "station": 0, "lead": 6, "obs": 1.0,
            "ens": {"x": [1.0, 2.0]}, "scalars": {"s": 0.5}}
    path.write_text(json.dumps(good) + "\nnot json\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_ndjson(path)
    bad = dict(good)
    del bad["obs"]
    path.write_text(json.dumps(bad) + "\n")
    with pytest.raises(ConfigError, match="obs"):
        load_ndjson(path)


def test_load_ndjson_rejects_inconsistent_schema(tmp_path):
    path = tmp_path / "mixed.ndjson"
    a = {"time": "2020-01-01", "station": 0, "lead": 6, "obs": 1.0,
         "ens": {"x": [1.0, 2.0]}, "scalars": {"s": 0.5}}
    b = dict(a, ens={"y": [1.0, 2.0]})
    path.write_text(json.dumps(a) + "\n" + json.dumps(b) + "\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_ndjson(path)


# ---------------------------------------------------------------------------
# Standardization and splitting
# ---------------------------------------------------------------------------


def test_standardize_fit_and_apply():
    ds = _tiny_dataset(t=40, seed=3)
    std, stats = standardize(ds)
    np.testing.assert_allclose(std.ens.mean(axis=(0, 1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(std.ens.std(axis=(0, 1)), 1.0, atol=1e-12)
    np.testing.assert_allclose(std.scalars.mean(axis=0), 0.0, atol=1e-12)
    # applying train stats to other data uses the train statistics
    other = _tiny_dataset(t=40, seed=4)
    applied, stats2 = standardize(other, stats)
    assert stats2 is stats
    expected = (other.ens - np.asarray(stats["ens_mean"])) \
        / np.asarray(stats["ens_std"])
    np.testing.assert_allclose(applied.ens, expected)


def test_standardize_rejects_constant_column():
    ds = _tiny_dataset()
    flat = ds.with_ens(np.concatenate(
        [ds.ens[:, :, :1], np.full_like(ds.ens[:, :, 1:], 2.5)], axis=2))
    with pytest.raises(ConfigError, match="constant"):
        standardize(flat)


def test_split_temporal_blocks_are_disjoint_and_ordered():
    ds = generate_synthetic(SynthConfig(stations=2, days=30, members=3))
    train, val, test = split_temporal(ds, (0.6, 0.2, 0.2))
    assert len(train) + len(val) + len(test) == len(ds)
    assert max(train.times) < min(val.times) < min(test.times)
    assert max(val.times) < min(test.times)
    with pytest.raises(ConfigError):
        split_temporal(ds, (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        split_temporal(ds, (0.99, 0.005, 0.005))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def test_synthetic_shapes_names_and_determinism():
    cfg = SynthConfig(stations=4, days=10, members=8, seed=5)
    ds = generate_synthetic(cfg)
    assert len(ds) == 40
    assert ds.n_members == 8
    assert ds.predictor_names == list(PREDICTOR_NAMES)
    assert ds.scalar_names == list(SCALAR_NAMES)
    again = generate_synthetic(cfg)
    np.testing.assert_array_equal(ds.ens, again.ens)
    np.testing.assert_array_equal(ds.obs, again.obs)
    different = generate_synthetic(SynthConfig(stations=4, days=10,
                                               members=8, seed=6))
    assert not np.array_equal(ds.obs, different.obs)


def test_synthetic_primary_is_biased_and_underdispersed():
    ds = generate_synthetic(SynthConfig(stations=6, days=400, members=20,
                                        seed=0))
    primary = ds.ens[:, :, 0]
    bias = (primary.mean(axis=1) - ds.obs).mean()
    assert bias > 0.4                      # configured mean bias 0.8
    spread = primary.std(axis=1, ddof=1).mean()
    rmse = np.sqrt(((primary.mean(axis=1) - ds.obs) ** 2).mean())
    assert spread < 0.5 * rmse             # underdispersion


def test_synthetic_hidden_signals_live_in_the_right_moments():
    ds = generate_synthetic(SynthConfig(stations=6, days=500, members=20,
                                        seed=1))
    obs = ds.obs
    # the skew channel's member mean carries (almost) no signal, its
    # skewness does
    skew_members = ds.ens[:, :, 2]
    skew_stat = sps.skew(skew_members, axis=1, bias=True)
    mean_stat = skew_members.mean(axis=1)
    assert abs(np.corrcoef(skew_stat, obs)[0, 1]) > 0.25
    assert abs(np.corrcoef(mean_stat, obs)[0, 1]) < 0.1
    # the dead channel correlates with nothing
    dead = ds.ens[:, :, 3].mean(axis=1)
    assert abs(np.corrcoef(dead, obs)[0, 1]) < 0.05


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(stations=0)
    with pytest.raises(ConfigError):
        SynthConfig(members=1)
