"""Station records, missing-value repair, min-max scaling and tensor assembly.

Records live on a per-date hour grid: ``t_enc`` history hours carrying the
observed features, followed by ``t_dec`` forecast hours carrying the NWP
columns and the targets. Missing cells are NaN throughout.

CSV schema (one row per date x station x hour)::

    date_idx,station_id,hour_idx,role,f1..fK,t1..tN3

``role`` is ``obs`` for ``hour_idx < t_enc`` and ``fcst`` otherwise. On
``obs`` rows the first ``n_obs`` f-columns hold observed features; on
``fcst`` rows the first ``n_nwp`` f-columns hold NWP forecasts and the
t-columns hold the ground truth. ``K = max(n_obs, n_nwp)``; unused cells are
left empty, as are t-cells on ``obs`` rows. Empty cells mean missing.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .container import TENSOR_MAGIC, read_container, write_container

ID_COLUMNS = 2  # TimeID, StaID at the front of decoder inputs


class DataError(ValueError):
    """Input records or tensors violate the expected layout."""


@dataclass(frozen=True)
class RecordSchema:
    n_obs: int
    n_nwp: int
    n_targets: int
    t_enc: int
    t_dec: int
    n_stations: int

    @property
    def n_f(self) -> int:
        return max(self.n_obs, self.n_nwp)

    @property
    def n_hours(self) -> int:
        return self.t_enc + self.t_dec

    def header(self) -> list[str]:
        return (
            ["date_idx", "station_id", "hour_idx", "role"]
            + [f"f{k + 1}" for k in range(self.n_f)]
            + [f"t{k + 1}" for k in range(self.n_targets)]
        )

    @classmethod
    def of(cls, records: "StationRecords") -> "RecordSchema":
        return cls(
            n_obs=records.obs.shape[3],
            n_nwp=records.nwp.shape[3],
            n_targets=records.targets.shape[3],
            t_enc=records.t_enc,
            t_dec=records.t_dec,
            n_stations=records.n_stations,
        )


def obs_names(n: int) -> tuple[str, ...]:
    return tuple(f"obs.f{k + 1}" for k in range(n))


def nwp_names(n: int) -> tuple[str, ...]:
    return tuple(f"fcst.f{k + 1}" for k in range(n))


def target_names(n: int) -> tuple[str, ...]:
    return tuple(f"t{k + 1}" for k in range(n))


@dataclass
class StationRecords:
    """Per-date, per-station hourly values with NaN marking missing cells.

    Attributes:
        obs: ``(I, t_enc, S, n_obs)`` observed features over the history hours.
        nwp: ``(I, t_dec, S, n_nwp)`` NWP forecasts over the forecast hours.
        targets: ``(I, t_dec, S, n_targets)`` ground truth over the forecast hours.
        date_ids: original date labels, one per leading index.
        dropped_dates: labels removed by :func:`drop_block_missing`.
    """

    obs: np.ndarray
    nwp: np.ndarray
    targets: np.ndarray
    date_ids: np.ndarray
    dropped_dates: tuple[int, ...] = ()

    def __post_init__(self):
        i = self.obs.shape[0]
        if not (self.nwp.shape[0] == self.targets.shape[0] == len(self.date_ids) == i):
            raise DataError("records disagree on the number of dates")
        s = self.obs.shape[2]
        if self.nwp.shape[2] != s or self.targets.shape[2] != s:
            raise DataError("records disagree on the number of stations")
        if self.nwp.shape[1] != self.targets.shape[1]:
            raise DataError("nwp and targets disagree on forecast hours")

    @property
    def n_dates(self) -> int:
        return self.obs.shape[0]

    @property
    def n_stations(self) -> int:
        return self.obs.shape[2]

    @property
    def t_enc(self) -> int:
        return self.obs.shape[1]

    @property
    def t_dec(self) -> int:
        return self.targets.shape[1]

    @property
    def obs_names(self) -> tuple[str, ...]:
        return obs_names(self.obs.shape[3])

    @property
    def nwp_names(self) -> tuple[str, ...]:
        return nwp_names(self.nwp.shape[3])

    @property
    def target_names(self) -> tuple[str, ...]:
        return target_names(self.targets.shape[3])

    @property
    def is_empty(self) -> bool:
        return self.n_dates == 0

    def n_missing(self) -> int:
        return int(np.isnan(self.obs).sum() + np.isnan(self.nwp).sum() + np.isnan(self.targets).sum())

    def select_dates(self, index) -> "StationRecords":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            obs=self.obs[index],
            nwp=self.nwp[index],
            targets=self.targets[index],
            date_ids=self.date_ids[index],
        )

    def copy(self) -> "StationRecords":
        return replace(
            self,
            obs=self.obs.copy(),
            nwp=self.nwp.copy(),
            targets=self.targets.copy(),
            date_ids=self.date_ids.copy(),
        )


# ---------------------------------------------------------------------------
# CSV I/O


def save_records(path, records: StationRecords) -> None:
    """Write records in the CSV schema; NaN cells become empty fields."""
    schema = RecordSchema.of(records)
    n_i, n_s = records.n_dates, records.n_stations
    t_e, t_d = records.t_enc, records.t_dec
    n_f, n_t = schema.n_f, schema.n_targets

    # rows ordered by date, station, hour
    f_block = np.full((n_i, n_s, t_e + t_d, n_f), np.nan)
    f_block[:, :, :t_e, : schema.n_obs] = records.obs.transpose(0, 2, 1, 3)
    f_block[:, :, t_e:, : schema.n_nwp] = records.nwp.transpose(0, 2, 1, 3)
    t_block = np.full((n_i, n_s, t_e + t_d, n_t), np.nan)
    t_block[:, :, t_e:, :] = records.targets.transpose(0, 2, 1, 3)

    d_idx, s_idx, h_idx = np.meshgrid(records.date_ids, np.arange(n_s), np.arange(t_e + t_d), indexing="ij")
    frame = pd.DataFrame(
        {
            "date_idx": d_idx.reshape(-1),
            "station_id": s_idx.reshape(-1),
            "hour_idx": h_idx.reshape(-1),
            "role": np.where(h_idx.reshape(-1) < t_e, "obs", "fcst"),
        }
    )
    values = np.concatenate([f_block, t_block], axis=3).reshape(-1, n_f + n_t)
    cols = schema.header()[4:]
    frame = pd.concat([frame, pd.DataFrame(values, columns=cols)], axis=1)
    _write_text_atomic(path, frame.to_csv(index=False, na_rep="", float_format="%.17g", lineterminator="\n"))


def load_records(path, schema: RecordSchema) -> StationRecords:
    """Parse a records CSV.

    Raises:
        DataError: on a malformed row (reported with its 1-based line number),
            an unknown station id, an hour outside the grid, a role that does
            not match its hour, or a duplicated (date, station, hour) key.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    header = schema.header()
    try:
        frame = pd.read_csv(path, dtype={"role": str}, keep_default_na=False, na_values=[""], float_precision="round_trip")
    except Exception as exc:  # noqa: BLE001 - locate the row ourselves
        _scan_for_bad_row(path, header)
        raise DataError(f"{path}: unreadable CSV ({exc})") from exc
    if list(frame.columns) != header:
        raise DataError(f"{path}: header {list(frame.columns)} does not match schema {header}")
    if frame.empty:
        return _empty_records(schema)
    numeric = header[:3] + header[4:]
    for col in numeric:
        if not pd.api.types.is_numeric_dtype(frame[col]):
            _scan_for_bad_row(path, header)
    for col in header[:3]:
        if frame[col].isna().any():
            line = int(frame.index[frame[col].isna()][0]) + 2
            raise DataError(f"{path}:{line}: missing {col}")
        as_int = frame[col].to_numpy()
        if not np.array_equal(as_int, np.round(as_int)):
            line = int(np.flatnonzero(as_int != np.round(as_int))[0]) + 2
            raise DataError(f"{path}:{line}: non-integer {col}")

    date = frame["date_idx"].to_numpy().astype(np.int64)
    station = frame["station_id"].to_numpy().astype(np.int64)
    hour = frame["hour_idx"].to_numpy().astype(np.int64)
    role = frame["role"].to_numpy()

    bad = np.flatnonzero((station < 0) | (station >= schema.n_stations))
    if bad.size:
        raise DataError(f"{path}:{bad[0] + 2}: unknown station id {station[bad[0]]}")
    bad = np.flatnonzero((hour < 0) | (hour >= schema.n_hours))
    if bad.size:
        raise DataError(f"{path}:{bad[0] + 2}: hour_idx {hour[bad[0]]} outside [0, {schema.n_hours})")
    expected_role = np.where(hour < schema.t_enc, "obs", "fcst")
    bad = np.flatnonzero(role != expected_role)
    if bad.size:
        raise DataError(f"{path}:{bad[0] + 2}: role {role[bad[0]]!r} but hour_idx {hour[bad[0]]} expects {expected_role[bad[0]]!r}")

    date_ids = np.unique(date)
    d_pos = np.searchsorted(date_ids, date)
    key = (d_pos * schema.n_stations + station) * schema.n_hours + hour
    uniq, first, counts = np.unique(key, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup_key = uniq[np.argmax(counts > 1)]
        rows = np.flatnonzero(key == dup_key)
        raise DataError(f"{path}:{rows[1] + 2}: duplicate row for date {date[rows[1]]}, station {station[rows[1]]}, hour {hour[rows[1]]}")

    n_i = len(date_ids)
    fvals = frame[header[4 : 4 + schema.n_f]].to_numpy(dtype=np.float64)
    tvals = frame[header[4 + schema.n_f :]].to_numpy(dtype=np.float64)
    obs = np.full((n_i, schema.t_enc, schema.n_stations, schema.n_obs), np.nan)
    nwp = np.full((n_i, schema.t_dec, schema.n_stations, schema.n_nwp), np.nan)
    targets = np.full((n_i, schema.t_dec, schema.n_stations, schema.n_targets), np.nan)
    is_obs = hour < schema.t_enc
    o = np.flatnonzero(is_obs)
    obs[d_pos[o], hour[o], station[o]] = fvals[o, : schema.n_obs]
    f = np.flatnonzero(~is_obs)
    nwp[d_pos[f], hour[f] - schema.t_enc, station[f]] = fvals[f, : schema.n_nwp]
    targets[d_pos[f], hour[f] - schema.t_enc, station[f]] = tvals[f]
    return StationRecords(obs=obs, nwp=nwp, targets=targets, date_ids=date_ids)


def _empty_records(schema: RecordSchema) -> StationRecords:
    return StationRecords(
        obs=np.empty((0, schema.t_enc, schema.n_stations, schema.n_obs)),
        nwp=np.empty((0, schema.t_dec, schema.n_stations, schema.n_nwp)),
        targets=np.empty((0, schema.t_dec, schema.n_stations, schema.n_targets)),
        date_ids=np.empty(0, dtype=np.int64),
    )


def _scan_for_bad_row(path: Path, header: list[str]) -> None:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            for name, cell in zip(header, row):
                if name == "role" or cell == "":
                    continue
                try:
                    float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric {name} value {cell!r}") from None


def _write_text_atomic(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# missing values


def block_missing_dates(records: StationRecords) -> np.ndarray:
    """Boolean mask of dates where some station lost a whole channel for the day."""

    def whole_day_lost(arr):
        # (I, T, S, F) -> any station with every cell of the day missing
        return np.isnan(arr).all(axis=(1, 3)).any(axis=1)

    if records.is_empty:
        return np.zeros(0, dtype=bool)
    return whole_day_lost(records.obs) | whole_day_lost(records.nwp) | whole_day_lost(records.targets)


def drop_block_missing(records: StationRecords) -> StationRecords:
    """Remove every date on which any station is missing a full day of a channel.

    The date is dropped for all stations so the tensors stay rectangular.
    """
    lost = block_missing_dates(records)
    if not lost.any():
        return records
    kept = records.select_dates(np.flatnonzero(~lost))
    return replace(kept, dropped_dates=records.dropped_dates + tuple(int(d) for d in records.date_ids[lost]))


def interpolate_local_missing(series) -> np.ndarray:
    """Fill NaN gaps of a 1-D series by linear interpolation.

    Gaps at either end hold the nearest present value.

    >>> interpolate_local_missing([1.0, float("nan"), 3.0]).tolist()
    [1.0, 2.0, 3.0]
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1:
        raise ValueError("interpolate_local_missing expects a 1-D series")
    present = ~np.isnan(series)
    if not present.any():
        raise DataError("cannot interpolate an all-missing series")
    if present.all():
        return series.copy()
    x = np.arange(series.size)
    return np.interp(x, x[present], series[present])


def _interpolate_along(arr: np.ndarray, axis: int, label: str, date_ids) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1).copy()
    flat = moved.reshape(-1, moved.shape[-1])
    rows = np.flatnonzero(np.isnan(flat).any(axis=1))
    for r in rows:
        try:
            flat[r] = interpolate_local_missing(flat[r])
        except DataError:
            # (I, S, F) order after moving the hour axis last
            i = np.unravel_index(r, moved.shape[:-1])[0]
            raise DataError(f"{label}: all-missing series on date {date_ids[i]}") from None
    return np.moveaxis(moved, -1, axis)


def interpolate_records(records: StationRecords) -> StationRecords:
    """Linear interpolation along the hour axis of every (date, station, feature) series."""
    return replace(
        records,
        obs=_interpolate_along(records.obs, 1, "obs", records.date_ids),
        nwp=_interpolate_along(records.nwp, 1, "nwp", records.date_ids),
        targets=_interpolate_along(records.targets, 1, "targets", records.date_ids),
    )


def repair(records: StationRecords) -> StationRecords:
    """Drop block-missing dates, then interpolate what is left."""
    return interpolate_records(drop_block_missing(records))


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-feature (min, max) fitted on training data only.

    Constant features (``max == min``) map to 0.0 and invert to ``min``.
    """

    names: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        if np.any(self.maxs < self.mins):
            raise ValueError("normalization max below min")

    @property
    def constant(self) -> frozenset[str]:
        return frozenset(n for n, lo, hi in zip(self.names, self.mins, self.maxs) if hi == lo)

    def _index(self, names: Sequence[str]) -> np.ndarray:
        lookup = {n: k for k, n in enumerate(self.names)}
        try:
            return np.array([lookup[n] for n in names], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"feature {exc.args[0]!r} not covered by the normalization spec") from None

    def bounds(self, name: str) -> tuple[float, float]:
        k = self._index([name])[0]
        return float(self.mins[k]), float(self.maxs[k])

    def scale(self, names: Sequence[str]) -> np.ndarray:
        k = self._index(names)
        return self.maxs[k] - self.mins[k]

    def apply(self, values, names: Sequence[str]) -> np.ndarray:
        """Scale the last axis of ``values`` (one column per name); no clipping."""
        k = self._index(names)
        lo, hi = self.mins[k], self.maxs[k]
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        out = (np.asarray(values, dtype=np.float64) - lo) / safe
        return np.where(span > 0, out, 0.0)

    def invert(self, values, names: Sequence[str]) -> np.ndarray:
        k = self._index(names)
        lo, hi = self.mins[k], self.maxs[k]
        return np.asarray(values, dtype=np.float64) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mins": [float(v) for v in self.mins],
            "maxs": [float(v) for v in self.maxs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(tuple(d["names"]), np.asarray(d["mins"], dtype=np.float64), np.asarray(d["maxs"], dtype=np.float64))


def fit_normalizer(train: StationRecords) -> NormalizationSpec:
    if train.is_empty:
        raise DataError("cannot fit a normalizer on empty records")
    names, mins, maxs = [], [], []
    for arr, labels in (
        (train.obs, train.obs_names),
        (train.nwp, train.nwp_names),
        (train.targets, train.target_names),
    ):
        flat = arr.reshape(-1, arr.shape[-1])
        with np.errstate(all="ignore"):
            lo = np.nanmin(flat, axis=0) if flat.size else np.full(arr.shape[-1], np.nan)
            hi = np.nanmax(flat, axis=0) if flat.size else np.full(arr.shape[-1], np.nan)
        if np.any(np.isnan(lo)):
            bad = labels[int(np.flatnonzero(np.isnan(lo))[0])]
            raise DataError(f"feature {bad!r} has no observed training values")
        names.extend(labels)
        mins.extend(lo)
        maxs.extend(hi)
    return NormalizationSpec(tuple(names), np.asarray(mins), np.asarray(maxs))


def apply_normalizer(spec: NormalizationSpec, records: StationRecords) -> StationRecords:
    return replace(
        records,
        obs=spec.apply(records.obs, records.obs_names),
        nwp=spec.apply(records.nwp, records.nwp_names),
        targets=spec.apply(records.targets, records.target_names),
    )


def invert_normalizer(spec: NormalizationSpec, values, names: Sequence[str]) -> np.ndarray:
    return spec.invert(values, names)


def invert_records(spec: NormalizationSpec, records: StationRecords) -> StationRecords:
    return replace(
        records,
        obs=spec.invert(records.obs, records.obs_names),
        nwp=spec.invert(records.nwp, records.nwp_names),
        targets=spec.invert(records.targets, records.target_names),
    )


# ---------------------------------------------------------------------------
# tensors


@dataclass(frozen=True)
class TrainingSample:
    encoder: np.ndarray  # (T_E, N1)
    decoder: np.ndarray  # (T_D, N2)
    target: np.ndarray  # (T_D, N3)
    date_index: int
    station_index: int


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DatasetTensors:
    """The three aligned model tensors.

    ``decoder_inputs[..., 0]`` is the TimeID (decoder step offset) and
    ``decoder_inputs[..., 1]`` the StaID; NWP columns follow.
    """

    encoder_inputs: np.ndarray  # (I, T_E, S, N1)
    decoder_inputs: np.ndarray  # (I, T_D, S, N2)
    targets: np.ndarray  # (I, T_D, S, N3)
    spec: NormalizationSpec | None = None
    date_ids: np.ndarray = field(default=None)
    nwp_feature_names: tuple[str, ...] = ()
    target_feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        e, d, y = self.encoder_inputs, self.decoder_inputs, self.targets
        if e.ndim != 4 or d.ndim != 4 or y.ndim != 4:
            raise DataError("dataset tensors must be 4-D")
        if not (e.shape[0] == d.shape[0] == y.shape[0]) or not (e.shape[2] == d.shape[2] == y.shape[2]):
            raise DataError(f"tensors disagree on I or S: {e.shape}, {d.shape}, {y.shape}")
        if d.shape[1] != y.shape[1]:
            raise DataError(f"decoder inputs and targets disagree on T_D: {d.shape}, {y.shape}")
        if d.shape[3] < ID_COLUMNS:
            raise DataError("decoder inputs lack the TimeID/StaID columns")
        object.__setattr__(self, "encoder_inputs", _frozen(e))
        object.__setattr__(self, "decoder_inputs", _frozen(d))
        object.__setattr__(self, "targets", _frozen(y))
        ids = np.arange(e.shape[0], dtype=np.int64) if self.date_ids is None else np.asarray(self.date_ids, dtype=np.int64)
        ids = ids.copy()
        ids.setflags(write=False)
        object.__setattr__(self, "date_ids", ids)
        if not self.nwp_feature_names:
            object.__setattr__(self, "nwp_feature_names", nwp_names(d.shape[3] - ID_COLUMNS))
        if not self.target_feature_names:
            object.__setattr__(self, "target_feature_names", target_names(y.shape[3]))

    @property
    def n_dates(self) -> int:
        return self.encoder_inputs.shape[0]

    @property
    def n_stations(self) -> int:
        return self.encoder_inputs.shape[2]

    @property
    def t_enc(self) -> int:
        return self.encoder_inputs.shape[1]

    @property
    def t_dec(self) -> int:
        return self.decoder_inputs.shape[1]

    @property
    def n_obs(self) -> int:
        return self.encoder_inputs.shape[3]

    @property
    def n_nwp(self) -> int:
        return self.decoder_inputs.shape[3] - ID_COLUMNS

    @property
    def n_targets(self) -> int:
        return self.targets.shape[3]

    def __len__(self) -> int:
        return self.n_dates * self.n_stations

    def sample(self, i: int, s: int) -> TrainingSample:
        return TrainingSample(
            encoder=self.encoder_inputs[i, :, s],
            decoder=self.decoder_inputs[i, :, s],
            target=self.targets[i, :, s],
            date_index=int(i),
            station_index=int(s),
        )

    def gather(self, date_index, station_index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched arrays ``(B, T_E, N1)``, ``(B, T_D, N2)``, ``(B, T_D, N3)``."""
        i = np.asarray(date_index, dtype=np.int64)
        s = np.asarray(station_index, dtype=np.int64)
        return self.encoder_inputs[i, :, s], self.decoder_inputs[i, :, s], self.targets[i, :, s]

    def all_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Every (date, station) index pair in date-major order."""
        i, s = np.meshgrid(np.arange(self.n_dates), np.arange(self.n_stations), indexing="ij")
        return i.reshape(-1), s.reshape(-1)

    def select_dates(self, index) -> "DatasetTensors":
        index = np.asarray(index, dtype=np.int64)
        return replace(
            self,
            encoder_inputs=self.encoder_inputs[index],
            decoder_inputs=self.decoder_inputs[index],
            targets=self.targets[index],
            date_ids=self.date_ids[index],
        )


def build_tensors(records: StationRecords, spec: NormalizationSpec | None, t_enc: int, t_dec: int) -> DatasetTensors:
    """Assemble model tensors from repaired, normalized records.

    The most recent ``t_enc`` history hours and the first ``t_dec`` forecast
    hours are used.

    Raises:
        DataError: if a date still has missing cells, or the records are too
            short for the requested windows.
    """
    if t_enc < 1 or t_dec < 1:
        raise DataError("t_enc and t_dec must be positive")
    if t_enc > records.t_enc or t_dec > records.t_dec:
        raise DataError(
            f"records cover {records.t_enc} history / {records.t_dec} forecast hours, "
            f"asked for {t_enc} / {t_dec}"
        )
    obs = records.obs[:, records.t_enc - t_enc :]
    nwp = records.nwp[:, :t_dec]
    targets = records.targets[:, :t_dec]
    incomplete = (
        np.isnan(obs).any(axis=(1, 2, 3)) | np.isnan(nwp).any(axis=(1, 2, 3)) | np.isnan(targets).any(axis=(1, 2, 3))
    )
    if incomplete.any():
        bad = records.date_ids[np.flatnonzero(incomplete)[0]]
        raise DataError(f"date {bad} has an incomplete hour grid (missing cells remain)")

    n_i, n_s = records.n_dates, records.n_stations
    time_id = np.broadcast_to(np.arange(t_dec, dtype=np.float64)[None, :, None, None], (n_i, t_dec, n_s, 1))
    sta_id = np.broadcast_to(np.arange(n_s, dtype=np.float64)[None, None, :, None], (n_i, t_dec, n_s, 1))
    decoder = np.concatenate([time_id, sta_id, nwp], axis=3)
    return DatasetTensors(
        encoder_inputs=obs,
        decoder_inputs=decoder,
        targets=targets,
        spec=spec,
        date_ids=records.date_ids,
        nwp_feature_names=records.nwp_names,
        target_feature_names=records.target_names,
    )


def mask_channel(tensors: DatasetTensors, which: str) -> DatasetTensors:
    """Zero the NWP columns (``"nwp"``) or every observed feature (``"observations"``)."""
    if which == "nwp":
        dec = np.array(tensors.decoder_inputs)
        dec[..., ID_COLUMNS:] = 0.0
        return replace(tensors, decoder_inputs=dec)
    if which in ("observations", "obs"):
        return replace(tensors, encoder_inputs=np.zeros_like(tensors.encoder_inputs))
    raise ValueError(f"unknown channel {which!r}; expected 'nwp' or 'observations'")


def draw_indices(rng: np.random.Generator, n_dates: int, n_stations: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent uniform (date, station) draws with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    i = rng.integers(0, n_dates, size=batch_size)
    s = rng.integers(0, n_stations, size=batch_size)
    return i, s


def sample_batch(tensors: DatasetTensors, batch_size: int, rng: np.random.Generator) -> list[TrainingSample]:
    i, s = draw_indices(rng, tensors.n_dates, tensors.n_stations, batch_size)
    return [tensors.sample(a, b) for a, b in zip(i, s)]


def iter_chunks(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


# ---------------------------------------------------------------------------
# tensor files


def save_tensors(path, tensors: DatasetTensors) -> None:
    meta = {
        "kind": "dataset",
        "spec": tensors.spec.to_dict() if tensors.spec is not None else None,
        "date_ids": [int(d) for d in tensors.date_ids],
        "nwp_feature_names": list(tensors.nwp_feature_names),
        "target_feature_names": list(tensors.target_feature_names),
    }
    write_container(
        path,
        TENSOR_MAGIC,
        {
            "encoder_inputs": tensors.encoder_inputs,
            "decoder_inputs": tensors.decoder_inputs,
            "targets": tensors.targets,
        },
        meta,
    )


def load_tensors(path) -> DatasetTensors:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    arrays, meta = read_container(path, TENSOR_MAGIC)
    spec = NormalizationSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    return DatasetTensors(
        encoder_inputs=arrays["encoder_inputs"],
        decoder_inputs=arrays["decoder_inputs"],
        targets=arrays["targets"],
        spec=spec,
        date_ids=np.asarray(meta["date_ids"], dtype=np.int64),
        nwp_feature_names=tuple(meta.get("nwp_feature_names", ())),
        target_feature_names=tuple(meta.get("target_feature_names", ())),
    )

