"""Prediction intervals and ensembles in physical units.

The model predicts ``(u, var)`` in normalized space. Bounds are formed there as
``u -/+ lam * sqrt(var)`` and then de-normalized one target at a time. Because
min-max scaling is affine, that equals scaling sigma by ``max - min``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .data import DatasetTensors, NormalizationSpec, TrainingSample, _write_text_atomic, target_names
from .model import ForecastDistribution, ModelParams, forward, predict_dataset

VARIANCE_RULES = ("mean", "mixture")

# Acklam's rational approximation to the standard normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155692189e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    )


def normal_quantile(p: float) -> float:
    """Standard normal quantile, Acklam's approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    x = _acklam(p)
    # refine against the exact CDF; brings relative error to ~1e-15
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def lambda_from_z(z: float) -> float:
    """Half-width multiplier of a two-sided ``(1 - z)`` Gaussian interval."""
    if not 0.0 < z < 1.0:
        raise ValueError(f"z must lie in (0, 1), got {z}")
    return normal_quantile(1.0 - z / 2.0)


@dataclass(frozen=True)
class PredictionInterval:
    """Point forecast and symmetric bounds in physical units.

    Arrays end in ``(..., T_D, N3)`` (a single sample) or are
    ``(I, T_D, S, N3)`` for a whole dataset.
    """

    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sigma: np.ndarray
    z: float
    lam: float
    variance_rule: str = "single"
    target_names: tuple[str, ...] = field(default=())

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def metadata(self) -> dict:
        return {
            "z": self.z,
            "lambda": self.lam,
            "variance_rule": self.variance_rule,
            "targets": list(self.target_names),
        }


def interval(dist: ForecastDistribution, z: float, spec: NormalizationSpec, names: Sequence[str], rule: str = "single") -> PredictionInterval:
    """Turn a normalized distribution into physical bounds (last axis = targets)."""
    names = tuple(names)
    if dist.mean.shape[-1] != len(names):
        raise ValueError(f"distribution has {dist.mean.shape[-1]} targets, {len(names)} names given")
    lam = lambda_from_z(z)
    sd = np.sqrt(dist.variance)
    lo_n = dist.mean - lam * sd
    hi_n = dist.mean + lam * sd
    return PredictionInterval(
        point=spec.invert(dist.mean, names),
        lower=spec.invert(lo_n, names),
        upper=spec.invert(hi_n, names),
        sigma=sd * spec.scale(names),
        z=float(z),
        lam=lam,
        variance_rule=rule,
        target_names=names,
    )


def predict(params: ModelParams, sample: TrainingSample, z: float, spec: NormalizationSpec, names: Sequence[str] | None = None) -> PredictionInterval:
    """Single-model ``(1 - z)`` interval for one sample."""
    names = names or target_names(params.config.n_targets)
    return interval(forward(params, sample), z, spec, names)


def combine(dists: Sequence[ForecastDistribution], rule: str = "mean") -> ForecastDistribution:
    """Average member distributions.

    Args:
        dists: member outputs, all of one shape.
        rule: ``"mean"`` averages member variances; ``"mixture"`` also adds
            the spread of member means (variance of the equal-weight mixture).
    """
    if not dists:
        raise ValueError("an ensemble needs at least one member")
    if rule not in VARIANCE_RULES:
        raise ValueError(f"variance rule must be one of {VARIANCE_RULES}, got {rule!r}")
    shapes = {d.mean.shape for d in dists}
    if len(shapes) != 1:
        raise ValueError(f"members disagree on output shape: {sorted(shapes)}")
    means = np.stack([d.mean for d in dists])
    variances = np.stack([d.variance for d in dists])
    mean = means.mean(axis=0)
    var = variances.mean(axis=0)
    if rule == "mixture":
        var = var + ((means - mean) ** 2).mean(axis=0)
    return ForecastDistribution(mean, var)


def ensemble_predict(
    members: Sequence[ModelParams],
    sample: TrainingSample,
    z: float,
    spec: NormalizationSpec,
    rule: str = "mean",
    names: Sequence[str] | None = None,
) -> PredictionInterval:
    if not members:
        raise ValueError("an ensemble needs at least one member")
    dist = combine([forward(m, sample) for m in members], rule)
    names = names or target_names(members[0].config.n_targets)
    return interval(dist, z, spec, names, rule=f"ensemble-{rule}")


def predict_tensors(
    members: Sequence[ModelParams],
    tensors: DatasetTensors,
    z: float,
    rule: str = "mean",
) -> PredictionInterval:
    """Interval for every (date, station) pair; arrays ``(I, T_D, S, N3)``.

    One member gives the plain single-model forecast.
    """
    if not members:
        raise ValueError("an ensemble needs at least one member")
    if tensors.spec is None:
        raise ValueError("tensors carry no normalization spec; cannot de-normalize")
    dists = [predict_dataset(m, tensors) for m in members]
    if len(dists) == 1:
        return interval(dists[0], z, tensors.spec, tensors.target_feature_names)
    return interval(combine(dists, rule), z, tensors.spec, tensors.target_feature_names, rule=f"ensemble-{rule}")


FORECAST_COLUMNS = ["date_idx", "station_id", "step", "target", "point", "lower", "upper", "sigma"]


def forecast_frame(pi: PredictionInterval, date_ids) -> pd.DataFrame:
    """Long table with one row per (date, station, step, target)."""
    n_i, n_t, n_s, n_o = pi.point.shape
    d, t, s, o = np.meshgrid(np.asarray(date_ids), np.arange(n_t), np.arange(n_s), np.arange(n_o), indexing="ij")
    names = np.asarray(pi.target_names or target_names(n_o))
    frame = pd.DataFrame(
        {
            "date_idx": d.reshape(-1),
            "station_id": s.reshape(-1),
            "step": t.reshape(-1),
            "target": names[o.reshape(-1)],
            "point": pi.point.reshape(-1),
            "lower": pi.lower.reshape(-1),
            "upper": pi.upper.reshape(-1),
            "sigma": pi.sigma.reshape(-1),
        }
    )
    return frame.sort_values(["date_idx", "station_id", "step", "target"], kind="stable").reset_index(drop=True)


def save_forecasts(path, pi: PredictionInterval, date_ids, extra: dict | None = None) -> None:
    """Write the forecast CSV plus a ``.meta.json`` sidecar holding z and lambda."""
    frame = forecast_frame(pi, date_ids)
    _write_text_atomic(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    meta = pi.metadata()
    if extra:
        meta.update(extra)
    _write_text_atomic(f"{path}.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_forecasts(path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in FORECAST_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: forecast file lacks columns {missing}")
    return frame
