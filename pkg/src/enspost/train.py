"""Optimization loops, validation-based model selection, network pools and
quantile aggregation.

All models are fitted by minimizing a proper scoring rule with Adam:
truncated-logistic families minimize the closed-form CRPS, Bernstein
quantile families the mean quantile (pinball) score over the level grid.
Early stopping tracks validation mean CRPS; the parameters of the best
validation epoch are returned.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamVector
from .data import Dataset, standardize
from .dist import (SCALE_FLOOR, TENSOR_OPS, QuantileLevels, bernstein_basis,
                   bqn_coefficients, crps_sample_batch, crps_tlogis_core)
from .errors import ConfigError, ContractError, DomainError, NumericError
from .models import (EMOSModel, ModelConfig, NeuralModel, build_graph,
                     graph_inputs, init_params)

MIN_EMOS_CELL = 10    # station/month cells smaller than this use the global fit
EMOS_CELL_STEPS = 80  # full-batch fine-tuning steps per cell


# ---------------------------------------------------------------------------
# Differentiable losses
# ---------------------------------------------------------------------------


def _abs(t):
    return ad.where(t.value >= 0.0, t, -t)


def _tlogis_params(theta):
    mu = theta[:, 0]
    sigma = ad.softplus(theta[:, 1]) + SCALE_FLOOR
    return mu, sigma


def _bqn_alpha(theta, degree):
    increments = ad.concat([theta[:, :1], ad.softplus(theta[:, 1:])], axis=-1)
    accum = np.triu(np.ones((degree + 1, degree + 1)))
    return increments @ ad.constant(accum)


def _tlogis_quantiles(mu, sigma, levels):
    """Differentiable inverse CDF of the truncated logistic on a level grid.

    With a = mu/sigma the truncated level p maps to the base level
    qq = sigmoid(-a) + p sigmoid(a); log(1 - qq) = -softplus(-a) + log(1-p)
    keeps the upper tail stable.
    """
    a = ad.reshape(mu / sigma, (-1, 1))
    qq = ad.sigmoid(-a) + ad.sigmoid(a) * levels
    log_one_minus = -ad.softplus(-a) + np.log1p(-levels)
    mu2 = ad.reshape(mu, (-1, 1))
    sg2 = ad.reshape(sigma, (-1, 1))
    return mu2 + sg2 * (ad.log(qq) - log_one_minus)


def _pinball_mean(quantiles, y, levels):
    y2 = ad.reshape(y, (-1, 1))
    indicator = (y.value[:, None] < quantiles.value).astype(np.float64)
    return ad.mean(2.0 * (ad.constant(indicator) - levels) * (quantiles - y2))


def _crps_sample_mean(quantiles, y):
    """Mean ensemble CRPS of row-sorted quantile matrices (differentiable)."""
    k = quantiles.value.shape[1]
    term1 = ad.mean(_abs(quantiles - ad.reshape(y, (-1, 1))), axis=1)
    weights = (2.0 * np.arange(k) - k + 1.0) / (k * k)
    term2 = ad.reshape(quantiles @ ad.constant(weights[:, None]), (-1,))
    return ad.mean(term1 - term2)


def loss_graph(config: ModelConfig, loss=None):
    """Scalar training-loss graph for an architecture.

    ``loss`` is "crps" or "quantile_score"; by default the family-matched
    rule (closed-form CRPS for truncated-logistic outputs, mean quantile
    score for Bernstein outputs).  Inputs are those of the forward graph
    plus the observation vector ``y``.
    """
    if loss is None:
        loss = "crps" if config.family == "tlogis" else "quantile_score"
    if loss not in ("crps", "quantile_score"):
        raise ConfigError(f"unknown loss {loss!r}")
    base = build_graph(config)
    levels = QuantileLevels.equidistant(config.n_quantile_levels).levels

    if config.family == "tlogis":
        def fn(P, I):
            mu, sigma = _tlogis_params(base.fn(P, I))
            if loss == "crps":
                return ad.mean(crps_tlogis_core(mu, sigma, I["y"], 0.0,
                                                ops=TENSOR_OPS))
            return _pinball_mean(_tlogis_quantiles(mu, sigma, levels),
                                 I["y"], levels)
        return Graph(fn)

    basis = bernstein_basis(config.bernstein_degree, levels)  # (K, d+1)

    def fn(P, I):
        alpha = _bqn_alpha(base.fn(P, I), config.bernstein_degree)
        quantiles = alpha @ ad.constant(basis.T)
        if loss == "quantile_score":
            return _pinball_mean(quantiles, I["y"], levels)
        return _crps_sample_mean(quantiles, I["y"])
    return Graph(fn)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive per-parameter steps, beta=(0.9, 0.999), eps=1e-8."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrainReport:
    """Trajectory of one training run.

    ``val_crps[0]`` scores the initial parameters; ``train_losses[e]`` is
    the mean mini-batch loss of epoch e+1.  Equality compares the training
    trajectory and ignores wall time.
    """

    seed: int
    train_losses: list
    val_crps: list
    selected_epoch: int
    wall_time: float

    def __post_init__(self):
        if self.val_crps[self.selected_epoch] != min(self.val_crps):
            raise ContractError("selected epoch must minimize validation CRPS")

    def __eq__(self, other):
        if not isinstance(other, TrainReport):
            return NotImplemented
        return (self.seed == other.seed
                and self.train_losses == other.train_losses
                and self.val_crps == other.val_crps
                and self.selected_epoch == other.selected_epoch)

    def to_dict(self):
        return {"seed": self.seed, "train_losses": self.train_losses,
                "val_crps": self.val_crps,
                "selected_epoch": self.selected_epoch,
                "wall_time": self.wall_time}


def _softplus_inv(x):
    # inverse of log(1 + e^t); valid for x > 0
    return x + np.log1p(-np.exp(-x))


def _init_output_bias(params: ParamVector, config: ModelConfig, obs):
    """Point the initial forecast at the climatology of the training data.

    With zero output bias every network starts its location near 0; for
    observations far from 0 the CRPS gradient is bounded, so Adam would burn
    thousands of steps just drifting to the data scale.  Setting the output
    bias to a climatological distribution removes that plateau.
    """
    mu0, s0 = float(np.mean(obs)), max(float(np.std(obs)), 1e-3)
    if config.architecture in ("drn", "bqn"):
        name = f"b{len(config.hidden_sizes)}"
    else:
        name = "dec_b1"
    bias = params.view(name)
    if config.family == "tlogis":
        bias[:] = (mu0, _softplus_inv(s0))
    else:
        # alpha spanning mu0 +- s0 in equal softplus increments
        bias[0] = mu0 - s0
        bias[1:] = _softplus_inv(2.0 * s0 / config.bernstein_degree)


def _theta_chunked(graph, params, inputs, n, chunk=4096):
    out = []
    for start in range(0, n, chunk):
        part = {k: v[start:start + chunk] for k, v in inputs.items()}
        out.append(ad.eval_graph(graph, params, part))
    return np.concatenate(out, axis=0)


def _val_crps(config, graph, params, inputs, obs, basis):
    theta = _theta_chunked(graph, params, inputs, obs.size)
    if config.family == "tlogis":
        mu = theta[:, 0]
        sigma = np.logaddexp(0.0, theta[:, 1]) + SCALE_FLOOR
        return float(np.mean(crps_tlogis_core(mu, sigma, obs, 0.0)))
    quantiles = bqn_coefficients(theta) @ basis.T
    return float(crps_sample_batch(quantiles, obs).mean())


def _check_split(train, val):
    if len(train) == 0 or len(val) == 0:
        raise DomainError("train and validation sets must be non-empty")
    if set(train.times) & set(val.times):
        raise DomainError("train and validation sets share times")


def _fit_loop(config, loss, params, inputs, obs, val_graph, val_inputs,
              val_obs, basis, rng):
    """Mini-batch Adam with early stopping; returns (best values, report)."""
    optimizer = Adam(params.size, config.learning_rate)
    val_scores = [_val_crps(config, val_graph, params, val_inputs, val_obs,
                            basis)]
    best_values = params.values.copy()
    best_epoch, since_best = 0, 0
    train_losses = []
    n = obs.size
    epoch = 0
    while epoch < config.max_epochs and since_best < config.patience:
        epoch += 1
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = {k: v[idx] for k, v in inputs.items()}
            batch["y"] = obs[idx]
            try:
                value, gradient = ad.value_and_grad(loss, params, batch)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch}, batch at {start}: {exc}") from exc
            optimizer.step(params.values, gradient.values)
            total += value * idx.size
        train_losses.append(total / n)
        score = _val_crps(config, val_graph, params, val_inputs, val_obs,
                          basis)
        val_scores.append(score)
        if score < val_scores[best_epoch]:
            best_epoch, since_best = epoch, 0
            best_values = params.values.copy()
        else:
            since_best += 1
    return best_values, train_losses, val_scores, best_epoch


def train_model(config: ModelConfig, train: Dataset, val: Dataset):
    """Fit one model; returns (fitted model, TrainReport)."""
    _check_split(train, val)
    t0 = time.perf_counter()
    if config.architecture == "emos":
        return _train_emos(config, train, val, t0)

    std_train, norm = standardize(train)
    std_val, _ = standardize(val, norm)
    inputs = graph_inputs(config, std_train)
    val_inputs = graph_inputs(config, std_val)
    params = init_params(config, train.n_predictors, train.n_scalars,
                         train.n_stations)
    _init_output_bias(params, config, train.obs)
    forward = build_graph(config)
    loss = loss_graph(config)
    basis = bernstein_basis(
        config.bernstein_degree,
        QuantileLevels.equidistant(config.n_quantile_levels).levels)
    rng = np.random.default_rng(config.seed)

    best_values, train_losses, val_scores, best_epoch = _fit_loop(
        config, loss, params, inputs, train.obs, forward, val_inputs,
        val.obs, basis, rng)

    model = NeuralModel(config, ParamVector(best_values, params.layout), norm,
                        train.n_stations, train.primary,
                        train.predictor_names, train.scalar_names)
    report = TrainReport(seed=config.seed, train_losses=train_losses,
                         val_crps=val_scores, selected_epoch=best_epoch,
                         wall_time=time.perf_counter() - t0)
    return model, report


def _emos_coeffs(values):
    return values[:4].reshape(2, 2).copy(), values[4:6].copy()


def _train_emos(config: ModelConfig, train: Dataset, val: Dataset, t0):
    """Global full-batch fit, then per-(station, month) cell fine-tuning."""
    inputs = graph_inputs(config, train)
    val_inputs = graph_inputs(config, val)
    layout = {"gamma_mat": (0, (2, 2)), "gamma_vec": (4, (2,))}
    # identity link start: mu = ensemble mean, raw scale = ensemble std
    params = ParamVector(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), layout)
    forward = build_graph(config)
    loss = loss_graph(config)
    full_batch = replace(config, batch_size=max(len(train), 1))
    rng = np.random.default_rng(config.seed)

    best_values, train_losses, val_scores, best_epoch = _fit_loop(
        full_batch, loss, params, inputs, train.obs, forward, val_inputs,
        val.obs, None, rng)

    features = inputs["features"]
    months = train.months()
    cells = {}
    for station in np.unique(train.station):
        for month in np.unique(months):
            mask = (train.station == station) & (months == month)
            if mask.sum() < MIN_EMOS_CELL:
                continue
            cell_params = ParamVector(best_values.copy(), layout)
            optimizer = Adam(cell_params.size, config.learning_rate)
            cell_inputs = {"features": features[mask], "y": train.obs[mask]}
            for _ in range(EMOS_CELL_STEPS):
                _, gradient = ad.value_and_grad(loss, cell_params, cell_inputs)
                optimizer.step(cell_params.values, gradient.values)
            cells[(int(station), int(month))] = _emos_coeffs(cell_params.values)

    model = EMOSModel(config, _emos_coeffs(best_values), cells,
                      primary=train.primary, n_stations=train.n_stations,
                      predictor_names=train.predictor_names,
                      scalar_names=train.scalar_names)
    report = TrainReport(seed=config.seed, train_losses=train_losses,
                         val_crps=val_scores, selected_epoch=best_epoch,
                         wall_time=time.perf_counter() - t0)
    return model, report


# ---------------------------------------------------------------------------
# Pools and aggregation
# ---------------------------------------------------------------------------


@dataclass
class ModelPool:
    """Independently seeded fits of one configuration."""

    config: ModelConfig
    models: list
    reports: list = None     # None for pools reloaded from checkpoints

    def __post_init__(self):
        if not self.models:
            raise ContractError("pool needs at least one model")
        if self.reports is not None and len(self.models) != len(self.reports):
            raise ContractError("pool needs matching models and reports")

    def __len__(self):
        return len(self.models)

    def val_crps_summary(self):
        """(min, median, max) of the selected-epoch validation CRPS."""
        if self.reports is None:
            raise ContractError("pool was loaded without training reports")
        best = [r.val_crps[r.selected_epoch] for r in self.reports]
        return (float(np.min(best)), float(np.median(best)),
                float(np.max(best)))


def _fit_one(args):
    config, train, val = args
    return train_model(config, train, val)


def train_pool(config: ModelConfig, train: Dataset, val: Dataset, n=20,
               workers=1):
    """Train ``n`` models with seeds ``config.seed + 0..n-1``.

    Results are ordered by seed and independent of ``workers``.
    """
    if n < 1:
        raise DomainError("pool size must be at least 1")
    tasks = [(replace(config, seed=config.seed + i), train, val)
             for i in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_one, tasks))
    else:
        results = [_fit_one(task) for task in tasks]
    return ModelPool(config=config, models=[r[0] for r in results],
                     reports=[r[1] for r in results])


def aggregate_quantiles(models, dataset: Dataset, levels):
    """Level-wise mean of the models' quantiles; (n, K), non-decreasing rows.

    For Bernstein models this equals the quantile function of the
    coefficient-averaged alpha (the expansion is linear in alpha).
    """
    if not models:
        raise DomainError("need at least one model")
    families = {m.family for m in models}
    if len(families) > 1:
        raise ContractError(f"mixed forecast families {sorted(families)}")
    return np.mean([m.quantiles(dataset, levels) for m in models], axis=0)


def resample_and_score(pool: ModelPool, test: Dataset, k=10, reps=50,
                       rng=None, level=None, pit_bins=20):
    """Score ``reps`` random k-subsets of the pool on the test set.

    Draws are without replacement within a draw.  Returns the list of
    per-draw EvaluationReports and a summary dict (mean/min/max/spread of
    the mean CRPS across draws).
    """
    from .evaluation import evaluate_quantiles, nominal_pi_level
    if k > len(pool):
        raise DomainError(f"draw size {k} exceeds pool size {len(pool)}")
    if reps < 1:
        raise DomainError("reps must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    levels = QuantileLevels.equidistant(pool.config.n_quantile_levels)
    if level is None:
        level = float(nominal_pi_level(test.n_members))

    reports = []
    for _ in range(reps):
        idx = rng.choice(len(pool), size=k, replace=False)
        quantiles = aggregate_quantiles([pool.models[i] for i in idx],
                                        test, levels)
        reports.append(evaluate_quantiles(quantiles, test.obs, level,
                                          levels=levels, pit_bins=pit_bins,
                                          rng=rng))
    scores = np.array([r.mean_crps for r in reports])
    summary = {
        "mean_crps": float(scores.mean()),
        "min_crps": float(scores.min()),
        "max_crps": float(scores.max()),
        "spread": float(scores.max() - scores.min()),
        "reps": reps,
        "draw_size": k,
    }
    return reports, summary
