"""Metrics, naive baseline oracles, and the evaluation protocols.

``evaluate`` slides windows over a dataset's test range and scores forecasts
per horizon; the zero-shot variant additionally refuses datasets that were
part of the checkpoint's pretraining mix, and the few-shot variant tunes the
forecast heads on the most recent fraction of the training range first.
Metrics are computed in series units on denormalized outputs.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint, checkpoint_hash, to_params
from .data import DatasetSplit, MultivariateSeries, build_mixed_dataset
from .errors import ConfigError, ProtocolError, ShapeError
from .infer import _decode_batch
from .train import TrainConfig, finetune_heads


@dataclass(frozen=True)
class EvalRow:
    dataset: str
    horizon: int
    mse: float
    mae: float
    windows: int


@dataclass
class EvalReport:
    rows: list[EvalRow]
    fingerprint: str = ""


def metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(MSE, MAE) over all elements; symmetric in its arguments."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"metrics shapes disagree: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return float((diff * diff).mean()), float(np.abs(diff).mean())


def naive_baselines(
    lookback: np.ndarray, horizon: int, season_period: int
) -> tuple[np.ndarray, np.ndarray]:
    """Persistence (repeat last value) and seasonal-naive (repeat last season)."""
    lookback = np.asarray(lookback, dtype=np.float64)
    if season_period < 1:
        raise ConfigError(f"season period must be >= 1, got {season_period}")
    if season_period > lookback.shape[-1]:
        raise ConfigError(
            f"season period {season_period} exceeds lookback length "
            f"{lookback.shape[-1]}"
        )
    persistence = np.broadcast_to(
        lookback[..., -1:], lookback.shape[:-1] + (horizon,)
    ).copy()
    season = lookback[..., -season_period:]
    idx = np.arange(horizon) % season_period
    return persistence, season[..., idx]


def _window_origins(split_range, lookback_len: int, horizon: int, stride: int) -> list[int]:
    lo, hi = split_range
    return list(range(lo + lookback_len, hi - horizon + 1, stride))


def _model_forecast_fn(ckpt: Checkpoint):
    params = to_params(ckpt)

    def fn(lookbacks: np.ndarray, horizon: int) -> np.ndarray:
        preds, _, _, _ = _decode_batch(params, lookbacks, horizon)
        return preds

    return fn


def evaluate(
    ckpt: Checkpoint | None,
    series: MultivariateSeries,
    split: DatasetSplit,
    horizons: list[int],
    lookback_len: int,
    stride: int = 1,
    forecast_fn=None,
    threads: int = 1,
) -> EvalReport:
    """Score stride-spaced test windows at each horizon.

    Windows live entirely inside the test range. ``forecast_fn`` overrides the
    checkpoint model (signature: (M, L) lookbacks, horizon -> (M, horizon));
    results are deterministic and row-independent, so ``threads`` only splits
    work.
    """
    if not horizons:
        raise ConfigError("need at least one horizon")
    if forecast_fn is None:
        if ckpt is None:
            raise ConfigError("evaluate needs a checkpoint or a forecast_fn")
        forecast_fn = _model_forecast_fn(ckpt)
    lo, hi = split.test
    available = hi - lo
    needed = lookback_len + max(horizons)
    if available < needed:
        raise ConfigError(
            f"test range of {series.name} too short: need {needed} points "
            f"(lookback {lookback_len} + horizon {max(horizons)}), have {available}"
        )

    rows: list[EvalRow] = []
    for horizon in sorted(horizons):
        origins = _window_origins(split.test, lookback_len, horizon, stride)
        lookbacks = np.concatenate(
            [series.values[:, t - lookback_len:t] for t in origins], axis=0
        )
        truth = np.concatenate(
            [series.values[:, t:t + horizon] for t in origins], axis=0
        )
        if threads > 1 and lookbacks.shape[0] > 1:
            chunks = np.array_split(np.arange(lookbacks.shape[0]), threads)
            chunks = [c for c in chunks if c.size]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(
                    lambda idx: forecast_fn(lookbacks[idx], horizon), chunks
                ))
            preds = np.concatenate(parts, axis=0)
        else:
            preds = forecast_fn(lookbacks, horizon)
        mse_v, mae_v = metrics(preds, truth)
        rows.append(EvalRow(
            dataset=series.name, horizon=horizon,
            mse=mse_v, mae=mae_v, windows=len(origins),
        ))
    fingerprint = checkpoint_hash(ckpt)[:16] if ckpt is not None else "custom"
    return EvalReport(rows=rows, fingerprint=fingerprint)


def zero_shot_protocol(
    ckpt: Checkpoint,
    series: MultivariateSeries,
    split: DatasetSplit,
    horizons: list[int],
    lookback_len: int,
    stride: int = 1,
    threads: int = 1,
) -> EvalReport:
    """Evaluate directly, refusing targets that were in the pretraining mix."""
    sources = [s for s in ckpt.metadata.get("train_sources", "").split(",") if s]
    if series.name in sources:
        raise ProtocolError(
            f"zero-shot violation: {series.name} is one of the checkpoint's "
            f"pretraining sources ({', '.join(sources)})"
        )
    return evaluate(ckpt, series, split, horizons, lookback_len,
                    stride=stride, threads=threads)


def few_shot_protocol(
    ckpt: Checkpoint,
    series: MultivariateSeries,
    split: DatasetSplit,
    fraction: float,
    train_config: TrainConfig,
    horizons: list[int],
    lookback_len: int,
    stride: int = 1,
    threads: int = 1,
) -> EvalReport:
    """Tune heads on the most recent fraction of train data, score full test."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"few-shot fraction must lie in (0, 1], got {fraction}")
    a, b = split.train
    keep = int((b - a) * fraction)
    reduced = replace(split, train=(b - keep, b))
    train_mixed = build_mixed_dataset([(series, reduced)], "train")
    val_mixed = build_mixed_dataset([(series, reduced)], "validation")
    tuned, _ = finetune_heads(ckpt, train_config, train_mixed, val_mixed)
    return evaluate(tuned, series, split, horizons, lookback_len,
                    stride=stride, threads=threads)


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write(f"# fingerprint={report.fingerprint}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "horizon", "mse", "mae", "windows"])
    for row in report.rows:
        writer.writerow([row.dataset, row.horizon, repr(row.mse), repr(row.mae), row.windows])
    return buf.getvalue()


def report_from_csv(text: str) -> EvalReport:
    fingerprint = ""
    lines = []
    for line in text.splitlines():
        if line.startswith("# fingerprint="):
            fingerprint = line.split("=", 1)[1]
        elif line.strip():
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    if header != ["dataset", "horizon", "mse", "mae", "windows"]:
        raise ConfigError(f"unexpected report header: {header}")
    rows = [
        EvalRow(dataset=r[0], horizon=int(r[1]), mse=float(r[2]),
                mae=float(r[3]), windows=int(r[4]))
        for r in reader
    ]
    return EvalReport(rows=rows, fingerprint=fingerprint)


def format_table(report: EvalReport) -> str:
    header = f"{'dataset':<16} {'horizon':>7} {'mse':>12} {'mae':>12} {'windows':>8}"
    lines = [header, "-" * len(header)]
    for row in report.rows:
        lines.append(
            f"{row.dataset:<16} {row.horizon:>7} {row.mse:>12.6f} "
            f"{row.mae:>12.6f} {row.windows:>8}"
        )
    return "\n".join(lines)
