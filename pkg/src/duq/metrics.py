"""Forecast verification: RMSE, skill score against NWP, PICP, paired t-test.

Scores are computed per day. Within a day, each objective (target) gets a
pooled RMSE over every station and step, a skill score ``1 - rmse / rmse_nwp``
and the share of cells whose truth falls inside the closed interval. Day
level values average the objectives; the ``*_avg`` aggregates average days.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .data import _write_text_atomic

KEY_COLUMNS = ["date_idx", "station_id", "step", "target"]


def _pair(y, yhat, objective):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if objective is not None:
        y, yhat = y[..., objective], yhat[..., objective]
    return y, yhat


def rmse_obj(y, yhat, objective: int | None = None) -> float:
    """Root mean squared error pooled over every cell (stations x steps).

    With ``objective`` set, the last axis indexes targets and only that one
    is scored.
    """
    y, yhat = _pair(y, yhat, objective)
    if y.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def ss_obj(rmse_ml: float, rmse_nwp: float) -> float:
    """Skill score against the NWP reference; positive means better than NWP."""
    if not rmse_nwp > 0:
        raise ValueError(f"skill score undefined for reference rmse {rmse_nwp}")
    return 1.0 - rmse_ml / rmse_nwp


def ss_day(scores: Sequence[float]) -> float:
    return float(np.mean(scores))


def picp_obj(y, lower, upper, objective: int | None = None) -> float:
    """Fraction of cells with ``lower <= y <= upper``."""
    y_full = y
    y, lower = _pair(y_full, lower, objective)
    _, upper = _pair(y_full, upper, objective)
    if np.any(lower > upper):
        k = int(np.flatnonzero((lower > upper).reshape(-1))[0])
        raise ValueError(f"lower bound exceeds upper bound at flat cell {k}")
    return float(np.mean((lower <= y) & (y <= upper)))


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc needs x in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    """Student t cumulative distribution function."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float
    df: int
    mean_difference: float
    alternative: str


def paired_t_test(a, b, alternative: str = "greater") -> TTestResult:
    """One-tail paired t-test on ``d = a - b`` with ``n - 1`` degrees of freedom.

    Args:
        a, b: per-day scores of two models, same length >= 2.
        alternative: ``"greater"`` tests mean(a - b) > 0, ``"less"`` tests
            mean(a - b) < 0.

    Raises:
        ValueError: on length mismatch, fewer than two pairs, or differences
            with zero spread (the statistic is undefined).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    d = a - b
    if np.all(d == 0):
        raise ValueError("all paired differences are zero; the t statistic is undefined")
    sd = float(np.std(d, ddof=1))
    # a constant shift leaves only rounding noise in the spread
    if sd <= 1e-12 * float(np.max(np.abs(d))):
        raise ValueError("paired differences have zero variance (constant shift); the t statistic is undefined")
    n = d.size
    mean = float(np.mean(d))
    t = mean / (sd / math.sqrt(n))
    cdf = t_cdf(t, n - 1)
    p = 1.0 - cdf if alternative == "greater" else cdf
    return TTestResult(t, p, n - 1, mean, alternative)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    """Per-day, per-objective scores and their aggregates.

    ``rows`` holds one row per (day, objective): ``date_idx, target, rmse,
    rmse_nwp, ss, picp``. ``days`` holds ``date_idx, rmse_day, ss_day,
    picp_day``. Scores that lack an input (no NWP, no bounds) are NaN.
    """

    rows: pd.DataFrame
    days: pd.DataFrame
    z: float | None
    n_stations: int
    meta: dict = field(default_factory=dict)

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def rmse_avg(self) -> float:
        return float(self.days["rmse_day"].mean())

    @property
    def ss_avg(self) -> float:
        return float(self.days["ss_day"].mean())

    @property
    def picp_avg(self) -> float:
        return float(self.days["picp_day"].mean())

    def by_target(self) -> pd.DataFrame:
        """Day-averaged rmse / ss / picp per objective."""
        return self.rows.groupby("target", sort=False)[["rmse", "rmse_nwp", "ss", "picp"]].mean()

    def summary(self) -> dict:
        per = self.by_target()
        return {
            "z": self.z,
            "n_days": self.n_days,
            "n_stations": self.n_stations,
            "rmse_avg": _num(self.rmse_avg),
            "ss_avg": _num(self.ss_avg),
            "picp_avg": _num(self.picp_avg),
            "targets": {
                name: {k: _num(per.loc[name, k]) for k in ("rmse", "rmse_nwp", "ss", "picp")} for name in per.index
            },
            **self.meta,
        }

    def to_csv(self) -> str:
        frame = self.rows.merge(self.days, on="date_idx", how="left")
        return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, csv_path, json_path) -> None:
        _write_text_atomic(csv_path, self.to_csv())
        _write_text_atomic(json_path, self.to_json())


def _num(x) -> float | None:
    x = float(x)
    return None if math.isnan(x) else x


def report_from_arrays(
    y,
    point,
    date_ids,
    names: Sequence[str],
    lower=None,
    upper=None,
    nwp=None,
    z: float | None = None,
) -> MetricsReport:
    """Score ``(I, T_D, S, N3)`` arrays in physical units."""
    y = np.asarray(y, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if y.ndim != 4 or y.shape != point.shape:
        raise ValueError(f"expected matching (I, T_D, S, N3) arrays, got {y.shape} and {point.shape}")
    if (lower is None) != (upper is None):
        raise ValueError("give both interval bounds or neither")
    date_ids = np.asarray(date_ids)
    names = list(names)
    if len(date_ids) != y.shape[0] or len(names) != y.shape[3]:
        raise ValueError("date ids or target names do not match the array extents")
    rows = []
    for i, day in enumerate(date_ids):
        for o, name in enumerate(names):
            r = rmse_obj(y[i], point[i], o)
            r_nwp = rmse_obj(y[i], nwp[i], o) if nwp is not None else math.nan
            ss = ss_obj(r, r_nwp) if nwp is not None else math.nan
            p = picp_obj(y[i][..., o], lower[i][..., o], upper[i][..., o]) if lower is not None else math.nan
            rows.append((int(day), name, r, r_nwp, ss, p))
    rows = pd.DataFrame(rows, columns=["date_idx", "target", "rmse", "rmse_nwp", "ss", "picp"])
    days = (
        rows.groupby("date_idx", sort=False)
        .agg(rmse_day=("rmse", "mean"), ss_day=("ss", "mean"), picp_day=("picp", "mean"))
        .reset_index()
    )
    return MetricsReport(rows, days, z, int(y.shape[2]))


def _pivot(frame: pd.DataFrame, column: str, index: pd.MultiIndex) -> np.ndarray:
    return frame.set_index(KEY_COLUMNS)[column].reindex(index).to_numpy(dtype=np.float64)


def _check_keys(name: str, frame: pd.DataFrame, expected: pd.MultiIndex) -> None:
    missing_cols = [c for c in KEY_COLUMNS if c not in frame.columns]
    if missing_cols:
        raise ValueError(f"{name} lacks key columns {missing_cols}")
    got = pd.MultiIndex.from_frame(frame[KEY_COLUMNS])
    if got.has_duplicates:
        raise ValueError(f"{name} has duplicate keys, e.g. {got[got.duplicated()][0]}")
    absent = expected.difference(got)
    extra = got.difference(expected)
    if len(absent) or len(extra):
        parts = []
        if len(absent):
            parts.append(f"{len(absent)} missing cells, first {list(absent[:5])}")
        if len(extra):
            parts.append(f"{len(extra)} unexpected cells, first {list(extra[:5])}")
        raise ValueError(f"{name} is misaligned with the truth: " + "; ".join(parts))


def build_report(
    forecasts: pd.DataFrame,
    truths: pd.DataFrame,
    nwp_forecasts: pd.DataFrame | None = None,
    z: float | None = None,
) -> MetricsReport:
    """Score long-format forecasts against long-format truth.

    Args:
        forecasts: columns ``date_idx, station_id, step, target, point`` and
            optionally ``lower, upper``.
        truths: key columns plus ``value``.
        nwp_forecasts: key columns plus ``value``; enables the skill score.
        z: recorded in the report metadata.

    Raises:
        ValueError: if any frame's keys differ from the truth's, listing the
            first missing or unexpected cells.
    """
    truths = truths.sort_values(KEY_COLUMNS, kind="stable")
    expected = pd.MultiIndex.from_frame(truths[KEY_COLUMNS])
    if expected.has_duplicates:
        raise ValueError("truth has duplicate keys")
    _check_keys("forecasts", forecasts, expected)
    if nwp_forecasts is not None:
        _check_keys("nwp forecasts", nwp_forecasts, expected)

    dates = np.sort(truths["date_idx"].unique())
    stations = np.sort(truths["station_id"].unique())
    steps = np.sort(truths["step"].unique())
    names = list(dict.fromkeys(sorted(truths["target"].unique(), key=_target_order)))
    grid = pd.MultiIndex.from_product([dates, stations, steps, names], names=KEY_COLUMNS)
    if len(grid) != len(expected):
        raise ValueError("truth does not cover a full (date, station, step, target) grid")
    shape = (len(dates), len(stations), len(steps), len(names))

    def arr(frame, column):
        # (I, S, T, O) -> (I, T, S, O)
        return _pivot(frame, column, grid).reshape(shape).transpose(0, 2, 1, 3)

    has_bounds = "lower" in forecasts.columns and "upper" in forecasts.columns
    return report_from_arrays(
        arr(truths, "value"),
        arr(forecasts, "point"),
        dates,
        names,
        lower=arr(forecasts, "lower") if has_bounds else None,
        upper=arr(forecasts, "upper") if has_bounds else None,
        nwp=arr(nwp_forecasts, "value") if nwp_forecasts is not None else None,
        z=z,
    )


def _target_order(name: str):
    # "t10" sorts after "t9"
    digits = name.lstrip("t")
    return (0, int(digits), name) if digits.isdigit() else (1, 0, name)


def compare_reports(a: MetricsReport, b: MetricsReport, column: str = "rmse_day", alternative: str = "less") -> TTestResult:
    """Paired test over the days both reports share (default: is ``a`` lower?)."""
    merged = a.days.merge(b.days, on="date_idx", suffixes=("_a", "_b"))
    if merged.empty:
        raise ValueError("reports share no days")
    return paired_t_test(merged[f"{column}_a"], merged[f"{column}_b"], alternative=alternative)
