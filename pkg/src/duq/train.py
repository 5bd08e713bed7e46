"""Mini-batch training with periodic validation and early stopping.

Every iteration draws ``batch_size`` (date, station) pairs with replacement,
takes one Adam step on the chosen loss, and every ``validation_interval``
iterations scores the whole validation set. Training stops once
``early_stop_tolerance`` consecutive validations fail to beat the best loss
(strictly; ties keep the earlier snapshot) or at ``max_iterations``. The
parameters from the best validation are returned.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import loss as losses
from .data import DatasetTensors, _write_text_atomic, draw_indices
from .diffcore import Tape
from .model import ModelConfig, ModelParams, forward_tensors, init_params, to_time_major

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"training loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    max_iterations: int = 10000
    validation_interval: int = 50
    early_stop_tolerance: int = 10
    loss_kind: str = "nle"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")
        if self.early_stop_tolerance < 1:
            raise ValueError("early_stop_tolerance must be >= 1")
        if self.max_iterations < self.validation_interval:
            raise ValueError("max_iterations must be >= validation_interval")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in losses.LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {losses.LOSS_KINDS}")


@dataclass(frozen=True)
class ValidationEvent:
    iteration: int
    val_loss: float
    is_best: bool


@dataclass
class TrainHistory:
    validation_interval: int
    events: list[ValidationEvent] = field(default_factory=list)
    total_iterations: int = 0
    stopped_early: bool = False

    @property
    def validation_times(self) -> int:
        return len(self.events)

    @property
    def best(self) -> ValidationEvent | None:
        best = [e for e in self.events if e.is_best]
        return best[-1] if best else None

    @property
    def best_iteration(self) -> int | None:
        return self.best.iteration if self.best else None

    @property
    def best_loss(self) -> float:
        return self.best.val_loss if self.best else math.inf

    def summary(self) -> str:
        vt, vi = self.validation_times, self.validation_interval
        return f"ti={self.total_iterations} (vt={vt} x vi={vi}), best val loss {self.best_loss:.6g} at iteration {self.best_iteration}"

    def to_csv(self) -> str:
        lines = ["iter,val_loss,is_best"]
        lines += [f"{e.iteration},{e.val_loss!r},{int(e.is_best)}" for e in self.events]
        return "\n".join(lines) + "\n"

    def write_log(self, path) -> None:
        _write_text_atomic(path, self.to_csv())


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.tensors.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def batch_loss(params: ModelParams, E, D, Y, kind: str):
    """Loss tensor of one batch (records on the active tape, if any)."""
    mean, var = forward_tensors(params, E, D)
    return losses.compute(kind, mean, var, to_time_major(Y), n_samples=E.shape[0])


def gradients(params: ModelParams, E, D, Y, kind: str) -> tuple[float, dict[str, np.ndarray]]:
    with Tape() as tape:
        value = batch_loss(params, E, D, Y, kind)
    grads = tape.backward(value)
    return value.item(), {name: grads[p].copy() for name, p in params.tensors.items()}


def validate(params: ModelParams, dataset: DatasetTensors, loss_kind: str, chunk: int = 2048) -> float:
    """Loss over every (date, station) pair of ``dataset`` in date-major order."""
    if len(dataset) == 0:
        raise ValueError("validation set is empty")
    i_idx, s_idx = dataset.all_pairs()
    means, variances, targets = [], [], []
    for start in range(0, len(i_idx), chunk):
        sl = slice(start, start + chunk)
        E, D, Y = dataset.gather(i_idx[sl], s_idx[sl])
        mean, var = forward_tensors(params, E, D)
        means.append(mean.data)
        variances.append(var.data)
        targets.append(to_time_major(Y))
    value = losses.compute(
        loss_kind,
        np.concatenate(means),
        np.concatenate(variances),
        np.concatenate(targets),
        n_samples=len(i_idx),
    )
    return value.item()


def train(
    params: ModelParams,
    train_set: DatasetTensors,
    val_set: DatasetTensors,
    config: TrainConfig,
    log_path=None,
) -> tuple[ModelParams, TrainHistory]:
    """Optimise a copy of ``params``; returns the best-validation snapshot and the history."""
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    history = TrainHistory(validation_interval=config.validation_interval)
    best_params = None
    best_loss = math.inf
    strikes = 0

    for it in range(1, config.max_iterations + 1):
        i_idx, s_idx = draw_indices(rng, train_set.n_dates, train_set.n_stations, config.batch_size)
        E, D, Y = train_set.gather(i_idx, s_idx)
        value, grads = gradients(params, E, D, Y, config.loss_kind)
        if not math.isfinite(value):
            raise TrainingDiverged(it, value)
        clip_by_global_norm(grads, config.clip_norm)
        opt.step(params, grads)
        history.total_iterations = it

        if it % config.validation_interval:
            continue
        val_loss = validate(params, val_set, config.loss_kind)
        improved = val_loss < best_loss
        if improved:
            best_loss = val_loss
            best_params = params.copy()
            strikes = 0
        else:
            strikes += 1
        history.events.append(ValidationEvent(it, val_loss, improved))
        log.debug("iter %d val %.6g%s", it, val_loss, " *" if improved else "")
        if strikes >= config.early_stop_tolerance:
            history.stopped_early = True
            break

    if best_params is None:
        best_params = params.copy()
    if log_path is not None:
        history.write_log(log_path)
    return best_params, history


@dataclass(frozen=True)
class MemberSpec:
    hidden_sizes: tuple[int, ...]
    seed: int


def _train_member(args):
    spec, model_kwargs, train_set, val_set, train_config = args
    mc = ModelConfig.for_tensors(train_set, hidden_sizes=spec.hidden_sizes, seed=spec.seed, **model_kwargs)
    tc = replace(train_config, seed=spec.seed)
    return train(init_params(mc), train_set, val_set, tc)


def train_members(
    members: list[MemberSpec],
    train_set: DatasetTensors,
    val_set: DatasetTensors,
    train_config: TrainConfig,
    workers: int = 1,
    **model_kwargs,
) -> list[tuple[ModelParams, TrainHistory]]:
    """Train independent ensemble members, optionally in worker processes."""
    jobs = [(m, model_kwargs, train_set, val_set, train_config) for m in members]
    if workers <= 1:
        return [_train_member(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_member, jobs))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


