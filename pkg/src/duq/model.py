"""GRU encoder-decoder emitting a Gaussian (mean, variance) per step and target.

The encoder runs over the observed history; the final state of each encoder
layer seeds the matching decoder layer. Each decoder step reads
``[station_embedding, time_embedding, NWP]`` and the top decoder state feeds
one linear head producing ``2 * n_targets`` values: the first half is the
mean, the second half passes through softplus plus ``min_variance``.

GRU weights are fused column-wise in gate order ``[z | r | candidate]``::

    z  = sigmoid(x W_z + h U_z + b_z)
    r  = sigmoid(x W_r + h U_r + b_r)
    h~ = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * h~

Internally sequences are time-major: a batch of ``B`` samples over ``T``
steps is a ``(T * B, features)`` matrix with step ``t`` in rows
``t*B .. (t+1)*B - 1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .container import PARAM_MAGIC, read_container, write_container
from .data import ID_COLUMNS, DatasetTensors, TrainingSample
from .diffcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_obs: int
    n_nwp: int
    n_targets: int
    t_enc: int
    t_dec: int
    n_stations: int
    hidden_sizes: tuple[int, ...] = (300, 300)
    embed_dim_station: int = 2
    embed_dim_time: int = 2
    min_variance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a non-empty list of positive ints")
        if self.min_variance <= 0:
            raise ValueError("min_variance must be positive")
        if self.embed_dim_station < 1 or self.embed_dim_time < 1:
            raise ValueError("embedding dimensions must be >= 1")
        for name in ("n_obs", "n_targets", "t_enc", "t_dec", "n_stations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_nwp < 0:
            raise ValueError("n_nwp must be >= 0")

    @property
    def decoder_input_size(self) -> int:
        return self.embed_dim_station + self.embed_dim_time + self.n_nwp

    @classmethod
    def for_tensors(cls, tensors: DatasetTensors, **kwargs) -> "ModelConfig":
        return cls(
            n_obs=tensors.n_obs,
            n_nwp=tensors.n_nwp,
            n_targets=tensors.n_targets,
            t_enc=tensors.t_enc,
            t_dec=tensors.t_dec,
            n_stations=tensors.n_stations,
            **kwargs,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "hidden_sizes": tuple(d["hidden_sizes"])})


@dataclass
class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: dc.parameter(t.data.copy(), name=k) for k, t in self.tensors.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


@dataclass(frozen=True)
class ForecastDistribution:
    """Predicted mean and variance in normalized units, shape ``(..., T_D, N3)``."""

    mean: np.ndarray
    variance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter's shape; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix, first_in in (("enc", config.n_obs), ("dec", config.decoder_input_size)):
        fan_in = first_in
        for layer, h in enumerate(config.hidden_sizes):
            shapes[f"{prefix}{layer}.W"] = (fan_in, 3 * h)
            shapes[f"{prefix}{layer}.U"] = (h, 3 * h)
            shapes[f"{prefix}{layer}.b"] = (3 * h,)
            fan_in = h
    shapes["embed.station"] = (config.n_stations, config.embed_dim_station)
    shapes["embed.time"] = (config.t_dec, config.embed_dim_time)
    shapes["head.W"] = (config.hidden_sizes[-1], 2 * config.n_targets)
    shapes["head.b"] = (2 * config.n_targets,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, embeddings uniform in +-0.05."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.startswith("embed."):
            data = rng.uniform(-0.05, 0.05, size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = dc.parameter(data, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# recurrent core


def _gru_scan(W: Tensor, U: Tensor, b: Tensor, x_seq, h0, n_steps: int, batch: int) -> list[Tensor]:
    """Run one GRU layer over a time-major input; returns the per-step states."""
    hidden = U.shape[0]
    xw = dc.matmul(x_seq, W) + dc.tile_rows(b, n_steps * batch)
    xw_zr, xw_h = dc.split(xw, 1, [2 * hidden, hidden])
    steps_zr = dc.split(xw_zr, 0, [batch] * n_steps)
    steps_h = dc.split(xw_h, 0, [batch] * n_steps)
    U_zr, U_h = dc.split(U, 1, [2 * hidden, hidden])
    h = h0
    states = []
    for t in range(n_steps):
        zr = dc.sigmoid(steps_zr[t] + dc.matmul(h, U_zr))
        z, r = dc.split(zr, 1, [hidden, hidden])
        cand = dc.tanh(steps_h[t] + dc.matmul(r * h, U_h))
        h = h + z * (cand - h)
        states.append(h)
    return states


def gru_step(params: ModelParams, layer: str, x_t, h_prev) -> Tensor:
    """One GRU update for ``layer`` (e.g. ``"enc0"``) on a ``(B, in)`` input."""
    W, U, b = params[f"{layer}.W"], params[f"{layer}.U"], params[f"{layer}.b"]
    x_t = x_t if isinstance(x_t, Tensor) else dc.constant(np.atleast_2d(x_t))
    h_prev = h_prev if isinstance(h_prev, Tensor) else dc.constant(np.atleast_2d(h_prev))
    return _gru_scan(W, U, b, x_t, h_prev, 1, x_t.shape[0])[0]


def _time_major(x: np.ndarray) -> np.ndarray:
    # (B, T, F) -> (T * B, F)
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(-1, x.shape[2])


def _batched(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def encode(params: ModelParams, E) -> list[Tensor]:
    """Final hidden state of every encoder layer for a ``(B, T_E, N1)`` batch."""
    E = _batched(E)
    batch, n_steps = E.shape[0], E.shape[1]
    if n_steps < 1:
        raise ValueError("encoder needs at least one history step")
    if E.shape[2] != params.config.n_obs:
        raise ValueError(f"encoder expects {params.config.n_obs} features, got {E.shape[2]}")
    x_seq = dc.constant(_time_major(E))
    context = []
    for layer, hidden in enumerate(params.config.hidden_sizes):
        h0 = dc.constant(np.zeros((batch, hidden)))
        states = _gru_scan(
            params[f"enc{layer}.W"], params[f"enc{layer}.U"], params[f"enc{layer}.b"],
            x_seq, h0, n_steps, batch,
        )
        context.append(states[-1])
        x_seq = dc.concat(states, axis=0)
    return context


def _ids(column: np.ndarray, what: str) -> np.ndarray:
    ids = np.rint(column)
    if not np.allclose(ids, column, atol=1e-9):
        raise ValueError(f"{what} column holds non-integer values")
    return ids.astype(np.int64)


def decode(params: ModelParams, context: list[Tensor], D) -> tuple[Tensor, Tensor]:
    """Mean and variance tensors in time-major ``(T_D * B, N3)`` layout."""
    cfg = params.config
    D = _batched(D)
    batch, n_steps = D.shape[0], D.shape[1]
    if len(context) != len(cfg.hidden_sizes):
        raise ValueError("context must hold one state per decoder layer")
    if D.shape[2] != ID_COLUMNS + cfg.n_nwp:
        raise ValueError(f"decoder expects {ID_COLUMNS + cfg.n_nwp} columns, got {D.shape[2]}")
    flat = _time_major(D)
    time_ids = _ids(flat[:, 0], "TimeID")
    sta_ids = _ids(flat[:, 1], "StaID")
    x_seq = dc.concat(
        [
            dc.gather_rows(params["embed.station"], sta_ids),
            dc.gather_rows(params["embed.time"], time_ids),
            dc.constant(flat[:, ID_COLUMNS:]),
        ],
        axis=1,
    )
    for layer in range(len(cfg.hidden_sizes)):
        states = _gru_scan(
            params[f"dec{layer}.W"], params[f"dec{layer}.U"], params[f"dec{layer}.b"],
            x_seq, context[layer], n_steps, batch,
        )
        x_seq = dc.concat(states, axis=0)
    out = dc.matmul(x_seq, params["head.W"]) + dc.tile_rows(params["head.b"], n_steps * batch)
    n3 = cfg.n_targets
    mean = dc.take(out, 1, 0, n3)
    variance = dc.softplus(dc.take(out, 1, n3, 2 * n3)) + cfg.min_variance
    return mean, variance


def forward_tensors(params: ModelParams, E, D) -> tuple[Tensor, Tensor]:
    return decode(params, encode(params, E), D)


def from_time_major(x: np.ndarray, batch: int) -> np.ndarray:
    # (T * B, N) -> (B, T, N)
    return x.reshape(-1, batch, x.shape[1]).transpose(1, 0, 2)


def to_time_major(y: np.ndarray) -> np.ndarray:
    return _time_major(_batched(y))


def forward_batch(params: ModelParams, E, D) -> ForecastDistribution:
    """Batched inference: ``(B, T_D, N3)`` mean and variance (no tape)."""
    E, D = _batched(E), _batched(D)
    mean, var = forward_tensors(params, E, D)
    batch = E.shape[0]
    return ForecastDistribution(from_time_major(mean.data, batch), from_time_major(var.data, batch))


def forward(params: ModelParams, sample: TrainingSample) -> ForecastDistribution:
    """Forecast for one sample; ``(T_D, N3)`` arrays. Targets are never read."""
    dist = forward_batch(params, sample.encoder, sample.decoder)
    return ForecastDistribution(dist.mean[0], dist.variance[0])


def predict_dataset(params: ModelParams, tensors: DatasetTensors, chunk: int = 1024) -> ForecastDistribution:
    """Forecast every (date, station) pair; arrays shaped ``(I, T_D, S, N3)``."""
    i_idx, s_idx = tensors.all_pairs()
    means, variances = [], []
    for start in range(0, len(i_idx), chunk):
        sl = slice(start, start + chunk)
        E, D, _ = tensors.gather(i_idx[sl], s_idx[sl])
        dist = forward_batch(params, E, D)
        means.append(dist.mean)
        variances.append(dist.variance)
    shape = (tensors.n_dates, tensors.n_stations, tensors.t_dec, params.config.n_targets)
    mean = np.concatenate(means).reshape(shape).transpose(0, 2, 1, 3)
    var = np.concatenate(variances).reshape(shape).transpose(0, 2, 1, 3)
    return ForecastDistribution(mean, var)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, params: ModelParams, extra: dict | None = None) -> None:
    meta = {"kind": "params", "config": params.config.to_dict()}
    if extra:
        meta["extra"] = extra
    write_container(path, PARAM_MAGIC, params.arrays(), meta)


def load_params(path) -> ModelParams:
    arrays, meta = read_container(path, PARAM_MAGIC)
    config = ModelConfig.from_dict(meta["config"])
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        raise ValueError(f"{path}: parameter names do not match the stored config")
    tensors = {}
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        tensors[name] = dc.parameter(arrays[name], name=name)
    return ModelParams(config, tensors)


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
