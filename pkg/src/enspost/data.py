"""Dataset handling: NDJSON I/O, normalization, temporal splits and the
synthetic ensemble-forecast generator.

The NDJSON schema is one JSON object per line:

    {"time": "YYYY-MM-DD", "station": int, "lead": int, "obs": float,
     "ens": {"<name>": [M floats], ...}, "scalars": {"<name>": float, ...}}

The synthetic generator produces a desk-scale postprocessing task with known
ground truth: a biased, underdispersed primary ensemble, one auxiliary
channel whose ensemble *spread* encodes the observation noise regime, one
whose ensemble *skewness* encodes a location signal, and a dead channel of
pure noise.  Summary-statistic models (ensemble mean only for auxiliary
channels) cannot see the hidden spread/skewness signals, full-ensemble
models can.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

PREDICTOR_NAMES = ("primary", "aux_spread", "aux_skew", "noise")
SCALAR_NAMES = ("lat", "lon", "yday_cos")


@dataclass(frozen=True)
class EnsembleSample:
    """One forecast case: ensemble matrix, scalar context and observation."""

    ens: np.ndarray        # (M, p) member x predictor, physical units
    scalars: np.ndarray    # (q,)
    station: int
    time: str              # ISO date
    lead_hours: int
    obs: float


class Dataset:
    """Immutable column-major collection of forecast cases.

    Samples are kept sorted by (time, station).  ``ens`` has shape
    (T, M, p), ``scalars`` (T, q), ``station`` and ``obs`` length T.
    """

    def __init__(self, ens, scalars, station, times, obs, lead_hours,
                 predictor_names, scalar_names, primary=0, n_stations=None):
        ens = np.asarray(ens, dtype=np.float64)
        scalars = np.asarray(scalars, dtype=np.float64)
        station = np.asarray(station, dtype=np.int64)
        times = np.asarray(times, dtype=object)
        obs = np.asarray(obs, dtype=np.float64)
        if ens.ndim != 3:
            raise ConfigError("ens must have shape (T, M, p)")
        t, m, p = ens.shape
        if m < 2:
            raise ConfigError("ensembles need at least two members")
        if scalars.shape != (t, len(scalar_names)) or station.shape != (t,) \
                or obs.shape != (t,) or times.shape != (t,):
            raise ConfigError("inconsistent column lengths")
        if len(predictor_names) != p:
            raise ConfigError("predictor_names must match ensemble width")
        for arr, what in ((ens, "ens"), (scalars, "scalars"), (obs, "obs")):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"non-finite values in {what}")
        if n_stations is None:
            n_stations = int(station.max()) + 1 if t else 0
        if t and station.max() >= n_stations:
            raise ConfigError("station id out of range")
        order = np.lexsort((station, times))
        self.ens = ens[order]
        self.scalars = scalars[order]
        self.station = station[order]
        self.times = times[order]
        self.obs = obs[order]
        self.lead_hours = int(lead_hours)
        self.predictor_names = list(predictor_names)
        self.scalar_names = list(scalar_names)
        self.primary = int(primary)
        self.n_stations = int(n_stations)
        for arr in (self.ens, self.scalars, self.station, self.times, self.obs):
            arr.setflags(write=False)

    def __len__(self):
        return self.ens.shape[0]

    @property
    def n_members(self):
        return self.ens.shape[1]

    @property
    def n_predictors(self):
        return self.ens.shape[2]

    @property
    def n_scalars(self):
        return self.scalars.shape[1]

    def months(self):
        """Calendar month (1-12) of each sample."""
        return np.array([int(t[5:7]) for t in self.times], dtype=np.int64)

    def sample(self, i) -> EnsembleSample:
        return EnsembleSample(
            ens=self.ens[i].copy(),
            scalars=self.scalars[i].copy(),
            station=int(self.station[i]),
            time=str(self.times[i]),
            lead_hours=self.lead_hours,
            obs=float(self.obs[i]),
        )

    def with_ens(self, ens):
        """Copy of the dataset with a replaced ensemble block."""
        return Dataset(ens, self.scalars, self.station, self.times, self.obs,
                       self.lead_hours, self.predictor_names, self.scalar_names,
                       self.primary, self.n_stations)

    def subset(self, idx):
        return Dataset(self.ens[idx], self.scalars[idx], self.station[idx],
                       self.times[idx], self.obs[idx], self.lead_hours,
                       self.predictor_names, self.scalar_names, self.primary,
                       self.n_stations)


# ---------------------------------------------------------------------------
# NDJSON serialization
# ---------------------------------------------------------------------------


def load_ndjson(path, primary=0, n_stations=None):
    """Parse an NDJSON forecast file into a :class:`Dataset`."""
    rows = []
    predictor_names = scalar_names = None
    lead = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: invalid JSON ({exc})") from exc
            for key in ("time", "station", "lead", "obs", "ens", "scalars"):
                if key not in rec:
                    raise ConfigError(f"line {lineno}: missing field {key!r}")
            if predictor_names is None:
                predictor_names = list(rec["ens"])
                scalar_names = list(rec["scalars"])
                lead = int(rec["lead"])
            if list(rec["ens"]) != predictor_names:
                raise ConfigError(f"line {lineno}: inconsistent predictor names")
            if list(rec["scalars"]) != scalar_names:
                raise ConfigError(f"line {lineno}: inconsistent scalar names")
            ens = np.array([rec["ens"][k] for k in predictor_names],
                           dtype=np.float64).T
            if rows and ens.shape != rows[0][0].shape:
                raise ConfigError(f"line {lineno}: inconsistent ensemble size")
            scal = np.array([rec["scalars"][k] for k in scalar_names],
                            dtype=np.float64)
            if not (np.all(np.isfinite(ens)) and np.all(np.isfinite(scal))
                    and np.isfinite(rec["obs"])):
                raise ConfigError(f"line {lineno}: non-finite value")
            rows.append((ens, scal, int(rec["station"]), str(rec["time"]),
                         float(rec["obs"])))
    if not rows:
        raise ConfigError(f"{path}: empty dataset")
    return Dataset(
        ens=np.stack([r[0] for r in rows]),
        scalars=np.stack([r[1] for r in rows]),
        station=[r[2] for r in rows],
        times=[r[3] for r in rows],
        obs=[r[4] for r in rows],
        lead_hours=lead,
        predictor_names=predictor_names,
        scalar_names=scalar_names,
        primary=primary,
        n_stations=n_stations,
    )


def save_ndjson(dataset: Dataset, path):
    """Write a dataset in the NDJSON schema (UTF-8, LF separators)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(dataset)):
            rec = {
                "time": str(dataset.times[i]),
                "station": int(dataset.station[i]),
                "lead": dataset.lead_hours,
                "obs": float(dataset.obs[i]),
                "ens": {name: dataset.ens[i, :, j].tolist()
                        for j, name in enumerate(dataset.predictor_names)},
                "scalars": {name: float(dataset.scalars[i, j])
                            for j, name in enumerate(dataset.scalar_names)},
            }
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Normalization and splitting
# ---------------------------------------------------------------------------


def standardize(dataset: Dataset, stats=None):
    """Standardize predictor and scalar columns to zero mean, unit variance.

    When ``stats`` is None the statistics are fitted on ``dataset`` and
    returned; otherwise the supplied statistics are applied (the usual
    train-fit / test-apply contract).
    """
    if stats is None:
        ens_mean = dataset.ens.mean(axis=(0, 1))
        ens_std = dataset.ens.std(axis=(0, 1))
        sc_mean = dataset.scalars.mean(axis=0)
        sc_std = dataset.scalars.std(axis=0)
        for std, names in ((ens_std, dataset.predictor_names),
                           (sc_std, dataset.scalar_names)):
            bad = np.nonzero(std == 0)[0]
            if bad.size:
                raise ConfigError(f"constant column {names[bad[0]]!r}")
        stats = {
            "predictor_names": list(dataset.predictor_names),
            "scalar_names": list(dataset.scalar_names),
            "ens_mean": ens_mean.tolist(),
            "ens_std": ens_std.tolist(),
            "scalar_mean": sc_mean.tolist(),
            "scalar_std": sc_std.tolist(),
        }
    else:
        if stats["predictor_names"] != dataset.predictor_names \
                or stats["scalar_names"] != dataset.scalar_names:
            raise ConfigError("normalization stats name mismatch")
    ens = (dataset.ens - np.asarray(stats["ens_mean"])) / np.asarray(stats["ens_std"])
    scalars = (dataset.scalars - np.asarray(stats["scalar_mean"])) \
        / np.asarray(stats["scalar_std"])
    out = Dataset(ens, scalars, dataset.station, dataset.times, dataset.obs,
                  dataset.lead_hours, dataset.predictor_names,
                  dataset.scalar_names, dataset.primary, dataset.n_stations)
    return out, stats


def split_temporal(dataset: Dataset, fractions):
    """Split into contiguous (train, val, test) time blocks."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) \
            or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions must be three non-negatives summing to 1")
    times = np.unique(dataset.times)
    n = times.size
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    cuts = [times[:n_train], times[n_train:n_train + n_val],
            times[n_train + n_val:]]
    parts = []
    for block in cuts:
        if block.size == 0:
            raise ConfigError("temporal split produced an empty block")
        mask = np.isin(dataset.times, block)
        parts.append(dataset.subset(mask))
    return tuple(parts)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic forecast task.

    Signal weights: ``bias`` is the mean station bias of the primary
    ensemble, ``spread_signal`` scales how strongly the hidden noise regime
    modulates the observation noise (visible only through the spread of the
    ``aux_spread`` channel), ``skew_signal`` scales the location signal
    hidden in the skewness of the ``aux_skew`` channel, and ``dead_channel``
    is the amplitude of the pure-noise channel.
    """

    stations: int = 8
    days: int = 400
    members: int = 20
    seed: int = 0
    lead_hours: int = 6
    bias: float = 0.8
    spread_signal: float = 0.5
    skew_signal: float = 1.2
    dead_channel: float = 1.0

    def __post_init__(self):
        if self.stations < 1 or self.days < 1:
            raise ConfigError("stations and days must be positive")
        if self.members < 2:
            raise ConfigError("members must be >= 2")


BASE_LEVEL = 10.0       # keeps observations far from the truncation bound
AR_COEF = 0.7
AR_INNOVATION = 0.4
SEASONAL_AMPLITUDE = 0.6
NONLINEAR_AMPLITUDE = 0.7
NONLINEAR_SLOPE = 1.5
NOISE_FLOOR = 0.25
ENSEMBLE_SPREAD = 0.3   # well below the predictive uncertainty: underdispersion


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Generate a bias/dispersion-flawed ensemble forecasting task."""
    rng = np.random.default_rng(config.seed)
    s, d, m = config.stations, config.days, config.members

    bias = rng.normal(config.bias, 0.3, size=s)
    phase = rng.uniform(0, 2 * np.pi, size=s)
    lat = rng.uniform(47.0, 55.0, size=s)
    lon = rng.uniform(6.0, 15.0, size=s)

    start = datetime.date(2016, 1, 1)
    dates = [start + datetime.timedelta(days=k) for k in range(d)]
    yday = np.array([dt.timetuple().tm_yday for dt in dates], dtype=np.float64)

    # latent truth: station AR(1) anomaly plus seasonal cycle
    anom = np.zeros((d, s))
    innov = rng.normal(0.0, AR_INNOVATION, size=(d, s))
    for t in range(d):
        prev = anom[t - 1] if t else np.zeros(s)
        anom[t] = AR_COEF * prev + innov[t]
    seasonal = SEASONAL_AMPLITUDE * np.cos(
        2 * np.pi * yday[:, None] / 365.0 + phase[None, :])
    y_star = BASE_LEVEL + seasonal + anom

    regime = rng.uniform(0.0, 1.0, size=(d, s))      # hidden noise regime
    skew_lat = rng.uniform(-1.0, 1.0, size=(d, s))   # hidden skewness signal
    sigma_obs = NOISE_FLOOR + config.spread_signal * regime
    nonlin = NONLINEAR_AMPLITUDE * np.tanh(NONLINEAR_SLOPE * (y_star - BASE_LEVEL))
    obs = (y_star + nonlin + config.skew_signal * skew_lat
           + sigma_obs * rng.normal(size=(d, s)))

    ens = np.empty((d, s, m, len(PREDICTOR_NAMES)))
    ens[..., 0] = (y_star[..., None] + bias[None, :, None]
                   + ENSEMBLE_SPREAD * rng.normal(size=(d, s, m)))
    # aux_spread: member mean is noise, spread encodes the regime
    ens[..., 1] = (rng.normal(size=(d, s, 1))
                   + (0.2 + regime[..., None]) * rng.normal(size=(d, s, m)))
    # aux_skew: zero-mean unit-variance members u*(G-1) + sqrt(1-u^2)*Z with
    # G ~ Exp(1), Z ~ N(0,1); u = cbrt(w) makes the population skewness
    # exactly 2*w, linear in the latent signal
    g = rng.exponential(1.0, size=(d, s, m))
    z = rng.normal(size=(d, s, m))
    u = np.cbrt(skew_lat)[..., None]
    ens[..., 2] = (rng.normal(size=(d, s, 1))
                   + u * (g - 1.0) + np.sqrt(1.0 - u * u) * z)
    ens[..., 3] = config.dead_channel * rng.normal(size=(d, s, m))

    scalars = np.empty((d, s, len(SCALAR_NAMES)))
    scalars[..., 0] = lat[None, :]
    scalars[..., 1] = lon[None, :]
    scalars[..., 2] = np.cos(2 * np.pi * yday[:, None] / 365.0)

    t_total = d * s
    return Dataset(
        ens=ens.reshape(t_total, m, -1),
        scalars=scalars.reshape(t_total, -1),
        station=np.tile(np.arange(s), d),
        times=np.repeat([dt.isoformat() for dt in dates], s),
        obs=obs.reshape(t_total),
        lead_hours=config.lead_hours,
        predictor_names=PREDICTOR_NAMES,
        scalar_names=SCALAR_NAMES,
        primary=0,
        n_stations=s,
    )
