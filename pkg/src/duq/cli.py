"""Command-line pipeline: synth -> preprocess -> train -> predict -> evaluate.

Settings come from a flat ``key = value`` file (``--config``), then
``--set key=value`` overrides, then the dedicated flags. Every command writes
the fully resolved settings next to its outputs as ``<command>.config``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import data, infer, metrics, model, synth, train
from .container import PARAM_MAGIC, ContainerError, read_container
from .data import DataError, _write_text_atomic

log = logging.getLogger("duq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SPLITS = ("train", "val", "test")
MASKS = ("none", "nwp", "obs")


class UsageError(ValueError):
    pass


def _parse_hidden(text: str) -> tuple[int, ...]:
    parts = [p for p in str(text).replace(",", "-").split("-") if p.strip()]
    try:
        sizes = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"hidden sizes must look like 300-300, got {text!r}") from None
    if not sizes:
        raise UsageError("hidden sizes are empty")
    return sizes


def _parse_members(text: str) -> tuple[tuple[int, ...], ...]:
    # "300-300,200-200,100-100"
    return tuple(_parse_hidden(m) for m in str(text).split(",") if m.strip())


_EXTRA_DEFAULTS = {
    "block_rate": 0.0,
    "local_rate": 0.0,
    "train_frac": 0.7,
    "val_frac": 0.15,
    "hidden_sizes": (300, 300),
    "embed_dim_station": 2,
    "embed_dim_time": 2,
    "min_variance": 1e-6,
    "members": (),
    "workers": 1,
    "z": 0.1,
    "variance_rule": "mean",
    "mask": "none",
}


def default_values() -> dict:
    values = asdict(synth.SynthConfig())
    values.update(asdict(train.TrainConfig()))
    values.update(_EXTRA_DEFAULTS)
    return values


def _coerce(key: str, raw, default):
    text = str(raw).strip()
    try:
        if key == "hidden_sizes":
            return _parse_hidden(text)
        if key == "members":
            return _parse_members(text)
        if key == "clip_norm":
            return None if text.lower() in ("none", "") else float(text)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join("-".join(str(h) for h in m) for m in value)
    if isinstance(value, tuple):
        return "-".join(str(h) for h in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


@dataclass(frozen=True)
class RunConfig:
    """Resolved flat settings; see :func:`default_values` for every key."""

    values: dict

    @classmethod
    def resolve(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        defaults = default_values()
        merged = dict(defaults)
        pairs = []
        if config_path is not None:
            pairs += parse_config_text(Path(config_path).read_text(), str(config_path))
        pairs += list((overrides or {}).items())
        for key, raw in pairs:
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, raw, defaults[key])
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        for name in ("block_rate", "local_rate"):
            if not 0.0 <= v[name] < 1.0:
                raise UsageError(f"{name} must lie in [0, 1), got {v[name]}")
        if not (0 < v["train_frac"] < 1 and 0 < v["val_frac"] < 1 and v["train_frac"] + v["val_frac"] < 1):
            raise UsageError("train_frac and val_frac must be positive and sum below 1")
        if not 0.0 < v["z"] < 1.0:
            raise UsageError(f"z must lie in (0, 1), got {v['z']}")
        if v["mask"] not in MASKS:
            raise UsageError(f"mask must be one of {MASKS}")
        if v["variance_rule"] not in infer.VARIANCE_RULES:
            raise UsageError(f"variance_rule must be one of {infer.VARIANCE_RULES}")
        if v["workers"] < 1:
            raise UsageError("workers must be >= 1")
        try:
            self.synth_config()
            self.train_config()
            self.model_kwargs()
            model.ModelConfig(1, 0, 1, 1, 1, 1, **self.model_kwargs())
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def synth_config(self) -> synth.SynthConfig:
        return synth.SynthConfig(**{f.name: self.values[f.name] for f in fields(synth.SynthConfig)})

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(**{f.name: self.values[f.name] for f in fields(train.TrainConfig)})

    def model_kwargs(self) -> dict:
        keys = ("hidden_sizes", "embed_dim_station", "embed_dim_time", "min_variance", "seed")
        return {k: self.values[k] for k in keys}

    def schema(self) -> data.RecordSchema:
        v = self.values
        return data.RecordSchema(v["n_obs"], v["nwp_width"], v["n_targets"], v["t_enc"], v["t_dec"], v["n_stations"])

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def write(self, path) -> None:
        _write_text_atomic(path, self.to_text())


def parse_config_text(text: str, origin: str = "<config>") -> list[tuple[str, str]]:
    """``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


# ---------------------------------------------------------------------------
# commands


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    records, truth = synth.generate(cfg.synth_config())
    records = synth.inject_missing(records, cfg["block_rate"], cfg["local_rate"], cfg["seed"] + 1)
    out.mkdir(parents=True, exist_ok=True)
    data.save_records(out / "records.csv", records)
    synth.save_truth(out / "truth.csv", truth)
    cfg.write(out / "synth.config")
    return {"dates": records.n_dates, "stations": records.n_stations, "missing_cells": records.n_missing()}


def split_positions(n: int, train_frac: float, val_frac: float) -> dict[str, np.ndarray]:
    """Chronological train / val / test date positions."""
    n_train = int(round(n * train_frac))
    n_val = int(round(n * val_frac))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise DataError(f"{n} usable dates cannot be split into non-empty train/val/test sets")
    idx = np.arange(n)
    return {"train": idx[:n_train], "val": idx[n_train : n_train + n_val], "test": idx[n_train + n_val :]}


def cmd_preprocess(cfg: RunConfig, records_path: Path, out: Path) -> dict:
    records = data.load_records(_require(records_path), cfg.schema())
    repaired = data.repair(records)
    parts = split_positions(repaired.n_dates, cfg["train_frac"], cfg["val_frac"])
    train_records = repaired.select_dates(parts["train"])
    spec = data.fit_normalizer(train_records)
    tensors = {
        name: data.build_tensors(
            data.apply_normalizer(spec, repaired.select_dates(pos)), spec, cfg["t_enc"], cfg["t_dec"]
        )
        for name, pos in parts.items()
    }
    out.mkdir(parents=True, exist_ok=True)
    for name, t in tensors.items():
        data.save_tensors(out / f"{name}.duqt", t)
    _write_text_atomic(out / "spec.json", json.dumps(spec.to_dict(), indent=2) + "\n")
    cfg.write(out / "preprocess.config")
    return {
        "dropped_dates": list(repaired.dropped_dates),
        **{f"{name}_dates": t.n_dates for name, t in tensors.items()},
    }


def _masked(tensors: data.DatasetTensors, mask: str) -> data.DatasetTensors:
    return tensors if mask == "none" else data.mask_channel(tensors, mask)


def cmd_train(cfg: RunConfig, data_dir: Path, out: Path) -> list[str]:
    mask = cfg["mask"]
    train_set = _masked(data.load_tensors(_require(data_dir / "train.duqt")), mask)
    val_set = _masked(data.load_tensors(_require(data_dir / "val.duqt")), mask)
    tc = cfg.train_config()
    base = cfg.model_kwargs()
    members = cfg["members"] or (base["hidden_sizes"],)
    single = not cfg["members"]
    specs = [train.MemberSpec(hidden_sizes=h, seed=cfg["seed"] + k) for k, h in enumerate(members)]
    model_kwargs = {k: v for k, v in base.items() if k not in ("hidden_sizes", "seed")}
    results = train.train_members(specs, train_set, val_set, tc, workers=cfg["workers"], **model_kwargs)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, (params, history) in enumerate(results):
        stem = "model" if single else f"member{k}"
        extra = {"mask": mask, "loss_kind": tc.loss_kind, "summary": history.summary()}
        model.save_params(out / f"{stem}.duqp", params, extra=extra)
        history.write_log(out / f"{stem}_log.csv")
        lines.append(f"{stem}: {history.summary()}")
    cfg.write(out / "train.config")
    return lines


def _checkpoint_mask(path: Path) -> str:
    _, meta = read_container(path, PARAM_MAGIC)
    return meta.get("extra", {}).get("mask", "none")


def cmd_predict(cfg: RunConfig, data_dir: Path, checkpoints: list[Path], out: Path, split: str = "test") -> Path:
    if not checkpoints:
        raise UsageError("predict needs at least one checkpoint")
    members = [model.load_params(_require(p)) for p in checkpoints]
    masks = {_checkpoint_mask(p) for p in checkpoints}
    if len(masks) > 1:
        raise UsageError(f"checkpoints were trained with different masks: {sorted(masks)}")
    tensors = _masked(data.load_tensors(_require(data_dir / f"{split}.duqt")), masks.pop())
    pi = infer.predict_tensors(members, tensors, cfg["z"], cfg["variance_rule"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "forecasts.csv"
    infer.save_forecasts(path, pi, tensors.date_ids, extra={"members": [str(p) for p in checkpoints], "split": split})
    cfg.write(out / "predict.config")
    return path


def _long(array: np.ndarray, date_ids, names, column: str) -> pd.DataFrame:
    n_i, n_t, n_s, n_o = array.shape
    d, t, s, o = np.meshgrid(np.asarray(date_ids), np.arange(n_t), np.arange(n_s), np.arange(n_o), indexing="ij")
    return pd.DataFrame(
        {
            "date_idx": d.reshape(-1),
            "station_id": s.reshape(-1),
            "step": t.reshape(-1),
            "target": np.asarray(names)[o.reshape(-1)],
            column: array.reshape(-1),
        }
    )


def truth_and_nwp(tensors: data.DatasetTensors) -> tuple[pd.DataFrame, pd.DataFrame | None]:
    """Physical-unit truth and NWP reference for a split.

    The first ``n_targets`` NWP columns are taken as the NWP forecasts of the
    targets, in order.
    """
    spec = tensors.spec
    if spec is None:
        raise DataError("tensors carry no normalization spec")
    names = tensors.target_feature_names
    y = spec.invert(tensors.targets, names)
    truth = _long(y, tensors.date_ids, names, "value")
    n3 = len(names)
    if tensors.n_nwp < n3:
        log.warning("NWP width %d < %d targets; skill scores disabled", tensors.n_nwp, n3)
        return truth, None
    nwp_cols = tensors.nwp_feature_names[:n3]
    nwp = spec.invert(tensors.decoder_inputs[..., data.ID_COLUMNS : data.ID_COLUMNS + n3], nwp_cols)
    return truth, _long(nwp, tensors.date_ids, names, "value")


def oracle_forecasts(truth_path: Path, date_ids, z: float) -> pd.DataFrame:
    """Intervals from the generator's own mean and sigma."""
    frame = pd.read_csv(_require(truth_path), float_precision="round_trip")
    frame = frame[frame["date_idx"].isin(np.asarray(date_ids))].copy()
    lam = infer.lambda_from_z(z)
    frame["point"] = frame["mu_star"]
    frame["lower"] = frame["mu_star"] - lam * frame["sigma_star"]
    frame["upper"] = frame["mu_star"] + lam * frame["sigma_star"]
    frame["sigma"] = frame["sigma_star"]
    return frame[infer.FORECAST_COLUMNS].reset_index(drop=True)


def cmd_evaluate(
    cfg: RunConfig,
    data_dir: Path,
    out: Path,
    forecasts: Path | None = None,
    oracle: Path | None = None,
    compare: Path | None = None,
    split: str = "test",
) -> metrics.MetricsReport:
    if (forecasts is None) == (oracle is None):
        raise UsageError("evaluate needs exactly one of --forecasts or --oracle")
    tensors = data.load_tensors(_require(data_dir / f"{split}.duqt"))
    truth, nwp = truth_and_nwp(tensors)
    z = cfg["z"]
    if forecasts is not None:
        frame = infer.load_forecasts(_require(forecasts))
        meta_path = Path(f"{forecasts}.meta.json")
        if meta_path.exists():
            z = json.loads(meta_path.read_text()).get("z", z)
    else:
        frame = oracle_forecasts(oracle, tensors.date_ids, z)
    report = metrics.build_report(frame, truth, nwp, z=z)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.csv", out / "report.json")
    if compare is not None:
        other = metrics.build_report(infer.load_forecasts(_require(compare)), truth, nwp, z=z)
        results = {}
        for column, alternative in (("rmse_day", "less"), ("ss_day", "greater")):
            try:
                r = metrics.compare_reports(report, other, column, alternative)
                results[column] = {"t_stat": r.t_stat, "p_value": r.p_value, "df": r.df, "alternative": alternative}
            except ValueError as exc:
                results[column] = {"error": str(exc)}
        _write_text_atomic(out / "ttest.json", json.dumps(results, indent=2, sort_keys=True) + "\n")
    cfg.write(out / "evaluate.config")
    return report


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value settings file")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="duq", description="Seq2seq forecasting with Gaussian prediction intervals.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    p = sub.add_parser("preprocess", parents=[common], help="repair, split and tensorize records")
    p.add_argument("--records", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="train a model or an ensemble")
    p.add_argument("--data", type=Path, required=True, help="directory written by preprocess")
    p.add_argument("--loss", choices=("nle", "mse", "mae"))
    p.add_argument("--mask", choices=MASKS)
    p.add_argument("--hidden", help="hidden sizes, e.g. 300-300")
    p.add_argument("--members", help="ensemble member sizes, e.g. 300-300,200-200,100-100")

    p = sub.add_parser("predict", parents=[common], help="forecast with intervals")
    p.add_argument("--data", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", type=Path)
    group.add_argument("--members", type=Path, nargs="+")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--z", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="score forecasts against the truth")
    p.add_argument("--data", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--forecasts", type=Path)
    group.add_argument("--oracle", type=Path, help="truth sidecar from synth; scores the generator's own intervals")
    p.add_argument("--compare", "--ttest", dest="compare", type=Path, help="second forecast file for the paired t-test")
    p.add_argument("--split", choices=SPLITS, default="test")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    for flag, key in (("loss", "loss_kind"), ("mask", "mask"), ("hidden", "hidden_sizes"), ("z", "z")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    if args.command == "train" and args.members:
        out["members"] = args.members
    return out


def run(args) -> int:
    cfg = RunConfig.resolve(args.config, _overrides(args))
    out = args.out
    if args.command == "synth":
        info = cmd_synth(cfg, out)
        print(f"wrote {out / 'records.csv'} ({info['dates']} dates, {info['missing_cells']} missing cells)")
    elif args.command == "preprocess":
        info = cmd_preprocess(cfg, args.records, out)
        print(f"dropped {len(info['dropped_dates'])} dates; train/val/test = {info['train_dates']}/{info['val_dates']}/{info['test_dates']}")
    elif args.command == "train":
        for line in cmd_train(cfg, args.data, out):
            print(line)
    elif args.command == "predict":
        paths = [args.checkpoint] if args.checkpoint else list(args.members)
        path = cmd_predict(cfg, args.data, paths, out, args.split)
        print(f"wrote {path} (z={cfg['z']}, lambda={infer.lambda_from_z(cfg['z']):.6f})")
    elif args.command == "evaluate":
        report = cmd_evaluate(cfg, args.data, out, args.forecasts, args.oracle, args.compare, args.split)
        s = report.summary()
        print(f"rmse_avg={_show(s['rmse_avg'])} ss_avg={_show(s['ss_avg'])} picp_avg={_show(s['picp_avg'])}")
    return EXIT_OK


def _show(x) -> str:
    return "nan" if x is None else f"{x:.6f}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except UsageError as exc:
        print(f"duq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except train.TrainingDiverged as exc:
        print(f"duq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"duq: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ContainerError, ValueError, KeyError) as exc:
        print(f"duq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
