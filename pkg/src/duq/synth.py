"""Synthetic multi-station weather data with a known heteroskedastic law.

For target ``o`` at date ``i``, station ``s`` and grid hour ``p`` (history
hours ``0..t_enc-1`` then forecast hours)::

    mu*(i,p,s,o)  = base_o + offset[s,o] + seasonal(i) + daily(p, s, o)
                    + anomaly(i,s,o) + drift(i,s,o) * ramp(p)
    sigma*(p)     = sigma_base + sigma_amp * |sin(2 pi p / 24)|
    target        = mu* + sigma* * eps,            eps ~ N(0, 1)

``anomaly`` persists across the day (AR(1) over dates), so history
observations reveal it. ``drift`` ramps in over the forecast hours only and
is seen solely by the NWP channel::

    nwp = mu* + nwp_bias + nwp_noise * eta

where ``eta`` is unit-variance noise with a day-level share
``nwp_noise_corr`` (a forecast that is biased and wrong in a persistent way,
but informative). Observed features are the realised history values of the
targets, extra columns being lagged and noisier copies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import pandas as pd

from .data import StationRecords, _write_text_atomic


@dataclass(frozen=True)
class SynthConfig:
    n_dates: int = 400
    n_stations: int = 4
    t_enc: int = 16
    t_dec: int = 12
    n_obs: int = 4
    nwp_width: int = 3
    n_targets: int = 3
    seasonal_amplitude: float = 4.0
    daily_amplitude: float = 3.0
    station_offset_scale: float = 2.0
    anomaly_scale: float = 2.0
    anomaly_persistence: float = 0.7
    drift_scale: float = 1.5
    sigma_base: float = 0.3
    sigma_amp: float = 1.2
    nwp_bias: float = 1.0
    nwp_noise: float = 1.0
    nwp_noise_corr: float = 0.8
    obs_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.sigma_base <= 0:
            raise ValueError("sigma_base must be positive")
        for name in ("n_dates", "n_stations", "t_enc", "t_dec", "n_obs", "nwp_width", "n_targets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.nwp_noise_corr <= 1.0:
            raise ValueError("nwp_noise_corr must lie in [0, 1]")
        if not -1.0 < self.anomaly_persistence < 1.0:
            raise ValueError("anomaly_persistence must lie in (-1, 1)")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class SynthTruth:
    """Generative quantities over the forecast hours.

    ``mu_star`` and ``eps`` are ``(I, t_dec, S, n_targets)``; ``sigma_star`` is
    ``(t_dec,)`` because the noise law is station-independent.
    """

    mu_star: np.ndarray
    sigma_star: np.ndarray
    eps: np.ndarray
    date_ids: np.ndarray

    @property
    def targets(self) -> np.ndarray:
        return self.mu_star + self.sigma_star[None, :, None, None] * self.eps


def sigma_law(hours, sigma_base: float, sigma_amp: float) -> np.ndarray:
    hours = np.asarray(hours, dtype=np.float64)
    return sigma_base + sigma_amp * np.abs(np.sin(2.0 * np.pi * hours / 24.0))


# physical-looking levels for the first three targets (t2m, rh2m, w10m-ish)
_BASES = (12.0, 55.0, 4.0)


def generate(config: SynthConfig) -> tuple[StationRecords, SynthTruth]:
    """Draw a dataset and its generative truth; fully determined by ``config.seed``."""
    c = config
    rng = np.random.default_rng(c.seed)
    n_i, n_s, n_o = c.n_dates, c.n_stations, c.n_targets
    n_h = c.t_enc + c.t_dec
    hours = np.arange(n_h)

    base = np.array([_BASES[o % len(_BASES)] + 10.0 * (o // len(_BASES)) for o in range(n_o)])
    offset = c.station_offset_scale * rng.standard_normal((n_s, n_o))
    station_daily = 1.0 + 0.3 * rng.standard_normal((n_s, n_o))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_o)
    seasonal = c.seasonal_amplitude * np.sin(2.0 * np.pi * np.arange(n_i) / 365.25)

    rho = c.anomaly_persistence
    shocks = rng.standard_normal((n_i, n_s, n_o))
    anomaly = np.empty((n_i, n_s, n_o))
    anomaly[0] = c.anomaly_scale * shocks[0]
    innov = c.anomaly_scale * math.sqrt(1.0 - rho * rho)
    for i in range(1, n_i):
        anomaly[i] = rho * anomaly[i - 1] + innov * shocks[i]
    drift = c.drift_scale * rng.standard_normal((n_i, n_s, n_o))

    ramp = np.clip((hours - c.t_enc + 1) / c.t_dec, 0.0, None)  # 0 over history, (k+1)/t_dec ahead
    daily = np.sin(2.0 * np.pi * (hours[:, None] - 9.0) / 24.0 + phase[None, :])  # (H, O)

    # (I, H, S, O)
    mu = (
        base[None, None, None, :]
        + offset[None, None, :, :]
        + seasonal[:, None, None, None]
        + c.daily_amplitude * station_daily[None, None, :, :] * daily[None, :, None, :]
        + anomaly[:, None, :, :]
        + drift[:, None, :, :] * ramp[None, :, None, None]
    )
    sigma = sigma_law(hours, c.sigma_base, c.sigma_amp)
    eps = rng.standard_normal((n_i, n_h, n_s, n_o))
    realised = mu + sigma[None, :, None, None] * eps

    hist = realised[:, : c.t_enc]
    obs = np.empty((n_i, c.t_enc, n_s, c.n_obs))
    for k in range(c.n_obs):
        lag = k // n_o
        src = hist[..., k % n_o]
        if lag:
            src = np.concatenate([np.repeat(src[:, :1], lag, axis=1), src[:, :-lag]], axis=1)[:, : c.t_enc]
        noise = c.obs_noise * lag * rng.standard_normal(src.shape)
        obs[..., k] = src + noise

    mu_fc = mu[:, c.t_enc :]
    nwp = np.empty((n_i, c.t_dec, n_s, c.nwp_width))
    a = math.sqrt(c.nwp_noise_corr)
    b = math.sqrt(1.0 - c.nwp_noise_corr)
    for k in range(c.nwp_width):
        day_level = rng.standard_normal((n_i, 1, n_s))
        cell = rng.standard_normal((n_i, c.t_dec, n_s))
        eta = a * day_level + b * cell
        nwp[..., k] = mu_fc[..., k % n_o] + c.nwp_bias + c.nwp_noise * eta

    date_ids = np.arange(n_i, dtype=np.int64)
    records = StationRecords(obs=obs, nwp=nwp, targets=realised[:, c.t_enc :].copy(), date_ids=date_ids)
    truth = SynthTruth(
        mu_star=mu_fc.copy(),
        sigma_star=sigma[c.t_enc :].copy(),
        eps=eps[:, c.t_enc :].copy(),
        date_ids=date_ids,
    )
    return records, truth


def inject_missing(records: StationRecords, block_rate: float, local_rate: float, seed: int) -> StationRecords:
    """Blank whole station-days (block) and isolated cells (local).

    Each date independently loses, with probability ``block_rate``, one
    random station's entire day across every channel. Each remaining cell is
    then blanked with probability ``local_rate``.
    """
    for name, rate in (("block_rate", block_rate), ("local_rate", local_rate)):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"{name} must lie in [0, 1), got {rate}")
    if block_rate == 0.0 and local_rate == 0.0:
        return records
    rng = np.random.default_rng(seed)
    out = records.copy()
    n_i, n_s = out.n_dates, out.n_stations
    blocked = rng.random(n_i) < block_rate
    which = rng.integers(0, n_s, size=n_i)
    for i in np.flatnonzero(blocked):
        s = which[i]
        out.obs[i, :, s] = np.nan
        out.nwp[i, :, s] = np.nan
        out.targets[i, :, s] = np.nan
    if local_rate > 0.0:
        for arr in (out.obs, out.nwp, out.targets):
            arr[rng.random(arr.shape) < local_rate] = np.nan
    return out


def blank_days(records: StationRecords, date_positions, station: int = 0) -> StationRecords:
    """Deterministically blank whole days for one station (fixture helper)."""
    out = records.copy()
    for i in date_positions:
        out.obs[i, :, station] = np.nan
        out.nwp[i, :, station] = np.nan
        out.targets[i, :, station] = np.nan
    return out


def truth_frame(truth: SynthTruth) -> pd.DataFrame:
    """Long table ``date_idx,station_id,step,target,mu_star,sigma_star``."""
    n_i, n_t, n_s, n_o = truth.mu_star.shape
    d, t, s, o = np.meshgrid(truth.date_ids, np.arange(n_t), np.arange(n_s), np.arange(n_o), indexing="ij")
    frame = pd.DataFrame(
        {
            "date_idx": d.reshape(-1),
            "station_id": s.reshape(-1),
            "step": t.reshape(-1),
            "target": [f"t{k + 1}" for k in o.reshape(-1)],
            "mu_star": truth.mu_star.reshape(-1),
            "sigma_star": np.broadcast_to(truth.sigma_star[None, :, None, None], truth.mu_star.shape).reshape(-1),
        }
    )
    return frame.sort_values(["date_idx", "station_id", "step", "target"], kind="stable").reset_index(drop=True)


def save_truth(path, truth: SynthTruth) -> None:
    _write_text_atomic(path, truth_frame(truth).to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def config_dict(config: SynthConfig) -> dict:
    return asdict(config)


def with_seed(config: SynthConfig, seed: int) -> SynthConfig:
    return replace(config, seed=seed)
