"""Inference bodies mapping forecast cases to raw distribution parameters.

Four families share the same output contract (a raw parameter matrix theta of
shape (n, D)): EMOS on primary mean/std with per-station-per-month
coefficients, a summary-statistic MLP (DRN/BQN benchmark), an
encoder-decoder set pooling network and a set transformer.  The network
families consume standardized predictors plus a learned station embedding;
all of them are permutation invariant in the ensemble members.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import dist as dist_mod
from .autodiff import Graph, ParamVector, Tensor
from .data import Dataset, standardize
from .errors import ConfigError, DomainError

ARCHITECTURES = ("emos", "drn", "bqn", "ed-drn", "ed-bqn", "st-drn", "st-bqn")
POOLING_KINDS = ("mean", "max", "min", "attention")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "drn"
    hidden_sizes: tuple = (64, 32)
    latent_width: int = 64
    attention_heads: int = 8
    n_attention_blocks: int = 3
    bernstein_degree: int = 12
    embedding_dim: int = 8
    pooling: str = "attention"
    n_quantile_levels: int = 99
    learning_rate: float = 5e-3
    batch_size: int = 512
    max_epochs: int = 150
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"unknown pooling kind {self.pooling!r}")
        if min(self.latent_width, self.embedding_dim, self.attention_heads,
               self.n_attention_blocks, self.bernstein_degree,
               self.n_quantile_levels, self.batch_size) < 1:
            raise ConfigError("dimensions must be positive")
        if any(h < 1 for h in self.hidden_sizes) or len(self.hidden_sizes) < 2:
            raise ConfigError("hidden_sizes needs two positive entries")
        if self.latent_width % self.attention_heads != 0:
            raise ConfigError("attention heads must divide the latent width")

    @property
    def family(self):
        return "bqn" if self.architecture.endswith("bqn") else "tlogis"

    @property
    def n_outputs(self):
        return self.bernstein_degree + 1 if self.family == "bqn" else 2

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Summary statistics of the ensemble block
# ---------------------------------------------------------------------------


def summary_base(ens, primary):
    """Primary mean/std plus auxiliary means; vectorized over samples.

    ``ens`` is (n, M, p).  Returns (n, 2 + (p - 1)); the standard deviation
    uses the unbiased (n-1) estimator.  Exactly member-permutation invariant.
    """
    ens = np.asarray(ens, dtype=np.float64)
    if ens.ndim != 3:
        raise ConfigError("ens must be (n, M, p)")
    if ens.shape[1] < 2:
        raise DomainError("need at least two members for the std estimator")
    # sort each channel (and force a canonical memory layout) so the
    # reductions see identical operands in identical order, making the
    # statistics exactly -- not just approximately -- invariant under
    # member permutations; numpy's pairwise summation is layout-sensitive
    ens = np.sort(np.ascontiguousarray(ens), axis=1)
    prim = ens[..., primary]
    others = np.delete(ens, primary, axis=-1)
    cols = [prim.mean(axis=-1), prim.std(axis=-1, ddof=1)]
    cols.extend(others.mean(axis=-2).T)
    return np.stack(cols, axis=-1)


def summary_features(sample, primary, embed_table):
    """Full summary feature vector of one sample, embedding row appended."""
    base = summary_base(sample.ens[None], primary)[0]
    return np.concatenate([base, sample.scalars,
                           np.asarray(embed_table)[sample.station]])


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def _glorot(rng, shape):
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _initializer(rng):
    def init(name, shape):
        if len(shape) == 2 and not name.startswith(("emb", "pool_q")):
            return _glorot(rng, shape)
        if name.startswith(("emb", "pool_q")):
            return rng.normal(0.0, 0.1, size=shape)
        return np.zeros(shape)
    return init


def _attention_shapes(prefix, width):
    return {f"{prefix}_w{k}": (width, width) for k in ("q", "k", "v", "o")}


def param_shapes(config: ModelConfig, n_predictors, n_scalars, n_stations):
    """Named parameter slices for a given architecture and data dimensions."""
    arch = config.architecture
    d_out = config.n_outputs
    lw = config.latent_width
    shapes = {}
    if arch == "emos":
        return {"gamma_mat": (2, 2), "gamma_vec": (2,)}
    shapes["emb"] = (n_stations, config.embedding_dim)
    if arch in ("drn", "bqn"):
        f = 2 + (n_predictors - 1) + n_scalars + config.embedding_dim
        sizes = [f, *config.hidden_sizes, d_out]
        for i in range(len(sizes) - 1):
            shapes[f"w{i}"] = (sizes[i], sizes[i + 1])
            shapes[f"b{i}"] = (sizes[i + 1],)
        return shapes
    member_dim = n_predictors + n_scalars + config.embedding_dim
    if arch.startswith("ed-"):
        shapes.update({
            "enc_w0": (member_dim, lw), "enc_b0": (lw,),
            "enc_w1": (lw, lw), "enc_b1": (lw,),
        })
    else:  # set transformer
        shapes.update({"in_w": (member_dim, lw), "in_b": (lw,)})
        for i in range(config.n_attention_blocks):
            shapes.update(_attention_shapes(f"blk{i}", lw))
            for j in range(3):
                shapes[f"blk{i}_m{j}w"] = (lw, lw)
                shapes[f"blk{i}_m{j}b"] = (lw,)
    if arch.startswith("st-") or config.pooling == "attention":
        shapes["pool_q"] = (1, lw)
        shapes.update(_attention_shapes("pool", lw))
    h0 = config.hidden_sizes[0]
    shapes.update({
        "dec_w0": (lw, h0), "dec_b0": (h0,),
        "dec_w1": (h0, d_out), "dec_b1": (d_out,),
    })
    return shapes


def init_params(config: ModelConfig, n_predictors, n_scalars, n_stations,
                rng=None):
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return ParamVector.build(
        param_shapes(config, n_predictors, n_scalars, n_stations),
        _initializer(rng))


# ---------------------------------------------------------------------------
# Differentiable building blocks
# ---------------------------------------------------------------------------


def emos_forward(coeffs, features):
    """Affine-linear link on [primary mean, primary std]."""
    gamma_mat, gamma_vec = coeffs
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != 2:
        raise ConfigError("EMOS expects exactly [mean, std] features")
    return features @ np.asarray(gamma_mat) + np.asarray(gamma_vec)


def mlp_forward(x, P, prefix, n_layers, activation=ad.tanh):
    """Affine stack with tanh hidden activations and a linear output."""
    h = x
    for i in range(n_layers):
        h = ad.linear(h, P[f"{prefix}w{i}"], P[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = activation(h)
    return h


def _split_heads(t, heads):
    # (n, s, L) -> (n, heads, s, L/heads)
    n, s, lw = t.value.shape
    t = ad.reshape(t, (n, s, heads, lw // heads))
    return ad.transpose(t, (0, 2, 1, 3))


def multihead_attention(queries, keys, values, heads, wq, wk, wv, wo):
    """Batched multi-head softmax attention on (n, set, width) tensors.

    Broadcasts on the batch axis, so a (1, k, width) learnable query attends
    to per-sample keys/values without tiling.
    """
    lw = wq.value.shape[0] if isinstance(wq, Tensor) else wq.shape[0]
    if lw % heads != 0:
        raise ConfigError("heads must divide the channel width")
    q = _split_heads(queries @ wq, heads)
    k = _split_heads(keys @ wk, heads)
    v = _split_heads(values @ wv, heads)
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(lw / heads))
    weights = ad.softmax(scores, axis=-1)
    mixed = weights @ v  # (n, heads, n_q, head_dim)
    n = mixed.value.shape[0]
    n_q = mixed.value.shape[2]
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, n_q, lw))
    return mixed @ wo


def attention_pool(latents, P, heads, prefix="pool"):
    """Attend a learnable query over the member latents; returns (n, L)."""
    lw = latents.value.shape[-1]
    query = ad.reshape(P[f"{prefix}_q"], (1, 1, lw))
    out = multihead_attention(query, latents, latents, heads,
                              P[f"{prefix}_wq"], P[f"{prefix}_wk"],
                              P[f"{prefix}_wv"], P[f"{prefix}_wo"])
    n = out.value.shape[0]
    return ad.reshape(out, (n, lw))


def pool(latents, kind, P=None, heads=None):
    """Permutation-invariant reduction over the member axis of (n, M, L)."""
    if kind == "mean":
        return ad.mean(latents, axis=1)
    if kind == "max":
        return ad.amax(latents, axis=1)
    if kind == "min":
        return ad.amin(latents, axis=1)
    if kind == "attention":
        return attention_pool(latents, P, heads)
    raise ConfigError(f"unknown pooling kind {kind!r}")


def _member_inputs(P, I, embedding_dim):
    """Concatenate member predictors with scalars and the station embedding,
    replicated across members."""
    ens = I["ens"]                       # (n, M, p)
    n, m, _ = ens.value.shape
    idx = I["station"].value.astype(np.int64)
    emb = ad.embedding(P["emb"], idx)    # (n, E)
    context = ad.concat([I["scalars"], emb], axis=-1)
    context = ad.reshape(context, (n, 1, context.value.shape[-1]))
    tile = np.ones((1, m, 1))
    context = ad.mul(context, tile)      # broadcast across members
    return ad.concat([ens, context], axis=-1)


def build_graph(config: ModelConfig):
    """Forward graph from inputs to raw theta for one architecture.

    Inputs expected (as constants): summary models use ``features`` (n, F)
    and ``station`` (n,); set models use ``ens`` (n, M, p), ``scalars``
    (n, q) and ``station`` (n,).
    """
    arch = config.architecture
    if arch == "emos":
        def fn(P, I):
            return ad.linear(I["features"], P["gamma_mat"], P["gamma_vec"])
        return Graph(fn)
    if arch in ("drn", "bqn"):
        n_layers = len(config.hidden_sizes) + 1

        def fn(P, I):
            idx = I["station"].value.astype(np.int64)
            x = ad.concat([I["features"], ad.embedding(P["emb"], idx)], axis=-1)
            return mlp_forward(x, P, "", n_layers)
        return Graph(fn)
    if arch.startswith("ed-"):
        def fn(P, I):
            x = _member_inputs(P, I, config.embedding_dim)
            h = ad.tanh(ad.linear(x, P["enc_w0"], P["enc_b0"]))
            latents = ad.linear(h, P["enc_w1"], P["enc_b1"])
            pooled = pool(latents, config.pooling, P, config.attention_heads)
            h = ad.tanh(ad.linear(pooled, P["dec_w0"], P["dec_b0"]))
            return ad.linear(h, P["dec_w1"], P["dec_b1"])
        return Graph(fn)

    def fn(P, I):
        x = _member_inputs(P, I, config.embedding_dim)
        h = ad.linear(x, P["in_w"], P["in_b"])
        for i in range(config.n_attention_blocks):
            att = multihead_attention(h, h, h, config.attention_heads,
                                      P[f"blk{i}_wq"], P[f"blk{i}_wk"],
                                      P[f"blk{i}_wv"], P[f"blk{i}_wo"])
            h = ad.add(h, att)
            m = h
            for j in range(3):
                m = ad.linear(m, P[f"blk{i}_m{j}w"], P[f"blk{i}_m{j}b"])
                if j < 2:
                    m = ad.tanh(m)
            h = ad.add(h, m)
        pooled = attention_pool(h, P, config.attention_heads)
        h = ad.tanh(ad.linear(pooled, P["dec_w0"], P["dec_b0"]))
        return ad.linear(h, P["dec_w1"], P["dec_b1"])
    return Graph(fn)


def encoder_decoder_forward(params, config, ens, scalars, station):
    """Raw theta of the set pooling architecture (numpy in, numpy out)."""
    graph = build_graph(config)
    return ad.eval_graph(graph, params, {
        "ens": ens, "scalars": scalars, "station": station})


def set_transformer_forward(params, config, ens, scalars, station):
    """Raw theta of the set transformer (numpy in, numpy out)."""
    return encoder_decoder_forward(params, config, ens, scalars, station)


def graph_inputs(config: ModelConfig, dataset: Dataset):
    """Input arrays expected by :func:`build_graph` for a dataset.

    Network inputs are assumed already standardized by the caller; EMOS
    consumes raw primary mean/std.
    """
    if config.architecture == "emos":
        return {"features": summary_base(dataset.ens, dataset.primary)[:, :2]}
    if config.architecture in ("drn", "bqn"):
        return {"features": np.concatenate(
                    [summary_base(dataset.ens, dataset.primary),
                     dataset.scalars], axis=-1),
                "station": dataset.station.astype(np.float64)}
    return {"ens": dataset.ens, "scalars": dataset.scalars,
            "station": dataset.station.astype(np.float64)}


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------


class NeuralModel:
    """A trained network plus the preprocessing state it was fitted with."""

    def __init__(self, config, params, norm, n_stations, primary,
                 predictor_names, scalar_names):
        self.config = config
        self.params = params
        self.norm = norm
        self.n_stations = n_stations
        self.primary = primary
        self.predictor_names = list(predictor_names)
        self.scalar_names = list(scalar_names)
        self._graph = build_graph(config)

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_graph"]  # closures don't pickle; rebuilt on load
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._graph = build_graph(self.config)

    @property
    def family(self):
        return self.config.family

    def _inputs(self, dataset: Dataset):
        std, _ = standardize(dataset, self.norm)
        return graph_inputs(self.config, std)

    def raw_theta(self, dataset: Dataset, chunk=4096):
        inputs = self._inputs(dataset)
        n = len(dataset)
        out = []
        for start in range(0, n, chunk):
            part = {k: v[start:start + chunk] for k, v in inputs.items()}
            out.append(ad.eval_graph(self._graph, self.params, part))
        return np.concatenate(out, axis=0)

    def forecast(self, dataset: Dataset):
        """Per-sample forecast distribution objects."""
        theta = self.raw_theta(dataset)
        if self.family == "tlogis":
            return [dist_mod.tlogis_map(t) for t in theta]
        alpha = dist_mod.bqn_coefficients(theta)
        return [dist_mod.BernsteinQuantile(a) for a in alpha]

    def quantiles(self, dataset: Dataset, levels):
        """Quantile matrix (n, K) at the given levels."""
        levels = levels.levels if hasattr(levels, "levels") else np.asarray(levels)
        theta = self.raw_theta(dataset)
        if self.family == "tlogis":
            out = np.empty((theta.shape[0], levels.size))
            for i, t in enumerate(theta):
                out[i] = dist_mod.tlogis_quantile(dist_mod.tlogis_map(t), levels)
            return out
        alpha = dist_mod.bqn_coefficients(theta)
        basis = dist_mod.bernstein_basis(self.config.bernstein_degree, levels)
        return alpha @ basis.T


class EMOSModel:
    """Affine-linear postprocessing with per-station-per-month coefficients.

    Missing (station, month) cells fall back to globally fitted coefficients
    with a warning.
    """

    def __init__(self, config, global_coeffs, cells, primary, n_stations,
                 predictor_names, scalar_names, norm=None):
        self.config = config
        self.global_coeffs = global_coeffs          # (gamma_mat, gamma_vec)
        self.cells = dict(cells)                    # (station, month) -> coeffs
        self.primary = primary
        self.n_stations = n_stations
        self.predictor_names = list(predictor_names)
        self.scalar_names = list(scalar_names)
        self.norm = norm
        self._warned = False

    @property
    def family(self):
        return "tlogis"

    def raw_theta(self, dataset: Dataset):
        feats = summary_base(dataset.ens, self.primary)[:, :2]
        months = dataset.months()
        theta = np.empty((len(dataset), 2))
        missing = 0
        for i in range(len(dataset)):
            key = (int(dataset.station[i]), int(months[i]))
            coeffs = self.cells.get(key)
            if coeffs is None:
                coeffs = self.global_coeffs
                missing += 1
            theta[i] = emos_forward(coeffs, feats[i])
        if missing and not self._warned:
            warnings.warn(f"{missing} samples used global EMOS coefficients "
                          "(no station/month cell fitted)")
            self._warned = True
        return theta

    def forecast(self, dataset: Dataset):
        return [dist_mod.tlogis_map(t) for t in self.raw_theta(dataset)]

    def quantiles(self, dataset: Dataset, levels):
        levels = levels.levels if hasattr(levels, "levels") else np.asarray(levels)
        theta = self.raw_theta(dataset)
        out = np.empty((theta.shape[0], levels.size))
        for i, t in enumerate(theta):
            out[i] = dist_mod.tlogis_quantile(dist_mod.tlogis_map(t), levels)
        return out


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + little-endian float64 parameter block
# ---------------------------------------------------------------------------

_MAGIC = b"ENSPOST1"


def _header(model):
    header = {
        "config": model.config.to_dict(),
        "n_stations": model.n_stations,
        "primary": model.primary,
        "predictor_names": model.predictor_names,
        "scalar_names": model.scalar_names,
        "norm": model.norm,
    }
    if isinstance(model, EMOSModel):
        header["kind"] = "emos"
        header["cell_keys"] = sorted([list(k) for k in model.cells])
    else:
        header["kind"] = "neural"
        header["layout"] = {name: [off, list(shape)]
                            for name, (off, shape) in model.params.layout.items()}
    return header


def _emos_flat(model):
    parts = [np.concatenate([model.global_coeffs[0].ravel(),
                             model.global_coeffs[1].ravel()])]
    for key in sorted(model.cells):
        gm, gv = model.cells[key]
        parts.append(np.concatenate([np.asarray(gm).ravel(),
                                     np.asarray(gv).ravel()]))
    return np.concatenate(parts)


def save_model(model, path):
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    if isinstance(model, EMOSModel):
        block = _emos_flat(model)
    else:
        block = model.params.values
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(block.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        block = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    common = dict(n_stations=header["n_stations"], primary=header["primary"],
                  predictor_names=header["predictor_names"],
                  scalar_names=header["scalar_names"])
    if header["kind"] == "emos":
        chunks = block.reshape(-1, 6)
        unpack = lambda c: (c[:4].reshape(2, 2), c[4:])
        cells = {tuple(k): unpack(chunks[i + 1])
                 for i, k in enumerate(header["cell_keys"])}
        return EMOSModel(config, unpack(chunks[0]), cells,
                         norm=header["norm"], **common)
    layout = {name: (off, tuple(shape))
              for name, (off, shape) in header["layout"].items()}
    params = ParamVector(block, layout)
    return NeuralModel(config, params, header["norm"], **common)
