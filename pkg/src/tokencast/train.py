"""Auto-regressive training: mixed-dataset pretraining and heads-only tuning.

The objective is next-token MSE: position j of the model output predicts
token j+1, so the target is the input shifted one token plus one future
token (horizon = token length). The loss compares values mapped back to
series units; in normalized space the minimizer is the same, but series
units match the de-normalize-then-score ordering the pipeline defines.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, add, backward, mse, mul, no_grad
from .checkpoint import Checkpoint, from_params, to_params
from .data import MixedDataset, WindowPair, sample_windows
from .errors import ConfigError, NumericAbort
from .model import ModelConfig, ModelParams, init_model, model_forward
from .preprocess import DEFAULT_EPS


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stride: int = 1
    patience: int = 3
    seed: int = 0
    scope: str = "all"  # "all" or "head"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.scope not in ("all", "head"):
            raise ConfigError(f"scope must be 'all' or 'head', got {self.scope!r}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float


def ar_loss(
    y_pred: Tensor,
    input_tokens: np.ndarray,
    next_token: np.ndarray,
    mu: np.ndarray | None = None,
    scale: np.ndarray | None = None,
) -> Tensor:
    """Next-token MSE over all positions.

    input_tokens is (..., L', T) in the same (normalized) space as y_pred and
    next_token is the (..., T) future token; the target is tokens 2..L'
    followed by the future token. When mu/scale are given (broadcastable;
    scale = sigma + eps), both sides are mapped back to series units first.
    """
    input_tokens = np.asarray(input_tokens, dtype=np.float64)
    next_token = np.asarray(next_token, dtype=np.float64)
    target = np.concatenate([input_tokens[..., 1:, :], next_token[..., None, :]], axis=-2)
    if (mu is None) != (scale is None):
        raise ConfigError("ar_loss needs both mu and scale, or neither")
    if mu is not None:
        y_pred = add(mul(y_pred, scale), mu)
        target = target * scale + mu
    return mse(y_pred, target)


def _normalize_batch(lookbacks: np.ndarray, eps: float = DEFAULT_EPS):
    """Per-window standardization of a (B, L) batch; returns mu/scale too."""
    mu = lookbacks.mean(axis=-1, keepdims=True)
    scale = lookbacks.std(axis=-1, keepdims=True) + eps
    return (lookbacks - mu) / scale, mu, scale


def _batch_arrays(batch: list[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
    lb = np.stack([w.lookback for w in batch])
    tg = np.stack([w.target for w in batch])
    return lb, tg


def _batch_loss(params: ModelParams, batch: list[WindowPair],
                rng: np.random.Generator | None = None) -> Tensor:
    cfg = params.config
    lb, tg = _batch_arrays(batch)
    normed, mu, scale = _normalize_batch(lb)
    tokens = normed.reshape(len(batch), cfg.max_tokens, cfg.token_len)
    next_token = (tg - mu) / scale
    out = model_forward(params, tokens, rng=rng)
    return ar_loss(out.prediction, tokens, next_token,
                   mu=mu[..., None], scale=scale[..., None])


def _mean_window_mse(params: ModelParams, windows: list[WindowPair],
                     batch_size: int) -> float:
    """Forward-only AR loss over a window list, element-weighted."""
    if not windows:
        return float("nan")
    total, count = 0.0, 0
    with no_grad():
        for lo in range(0, len(windows), batch_size):
            batch = windows[lo:lo + batch_size]
            loss = float(_batch_loss(params, batch).values)
            total += loss * len(batch)
            count += len(batch)
    return total / count


def _sources_of(mixed: MixedDataset) -> list[str]:
    seen: list[str] = []
    for seg in mixed.segments:
        if seg.source not in seen:
            seen.append(seg.source)
    return seen


def _fit(
    params: ModelParams,
    train_config: TrainConfig,
    train_mixed: MixedDataset,
    val_mixed: MixedDataset,
) -> tuple[dict[str, np.ndarray], list[EpochStats], int, float]:
    """Adam over the configured scope with validation-best early stopping.

    Returns (best arrays, per-epoch history, best epoch, best val MSE).
    """
    cfg = params.config
    lookback_len = cfg.max_tokens * cfg.token_len
    horizon_len = cfg.token_len

    probe = sample_windows(train_mixed, lookback_len, horizon_len,
                           stride=train_config.stride, seed=0)
    if not probe:
        raise ConfigError(
            f"no training windows: need segments of at least "
            f"{lookback_len + horizon_len} points"
        )
    val_windows = sample_windows(val_mixed, lookback_len, horizon_len,
                                 stride=train_config.stride, seed=0)
    if not val_windows:
        raise ConfigError(
            f"no validation windows: need segments of at least "
            f"{lookback_len + horizon_len} points"
        )

    trainable = params.trainable(train_config.scope)
    # frozen arrays drop out of the tape entirely, which keeps head-only
    # tuning cheap and guarantees their values and grads stay untouched
    for name, t in params.arrays.items():
        t.requires_grad = name in trainable
        t.zero_grad()
    states = {
        name: AdamState.for_param(
            t, learning_rate=train_config.learning_rate,
            beta1=train_config.beta1, beta2=train_config.beta2,
            epsilon=train_config.adam_eps,
        )
        for name, t in trainable.items()
    }

    best_arrays = {n: t.values.copy() for n, t in params.arrays.items()}
    best_val = _mean_window_mse(params, val_windows, train_config.batch_size)
    best_epoch = 0
    history: list[EpochStats] = []
    stall = 0

    for epoch in range(1, train_config.epochs + 1):
        epoch_seed = train_config.seed * 1_000_003 + epoch
        windows = sample_windows(train_mixed, lookback_len, horizon_len,
                                 stride=train_config.stride, seed=epoch_seed)
        drop_rng = (np.random.default_rng(epoch_seed)
                    if cfg.dropout_rate > 0.0 else None)
        total, count = 0.0, 0
        for batch_idx, lo in enumerate(range(0, len(windows), train_config.batch_size)):
            batch = windows[lo:lo + train_config.batch_size]
            loss = _batch_loss(params, batch, rng=drop_rng)
            loss_value = float(loss.values)
            if not np.isfinite(loss_value):
                raise NumericAbort(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}, "
                    f"learning rate {train_config.learning_rate}",
                    epoch=epoch, batch=batch_idx,
                    learning_rate=train_config.learning_rate,
                )
            for t in trainable.values():
                t.zero_grad()
            backward(loss)
            for name, t in trainable.items():
                adam_step(t, states[name])
            total += loss_value * len(batch)
            count += len(batch)

        train_mse = total / count
        val_mse = _mean_window_mse(params, val_windows, train_config.batch_size)
        history.append(EpochStats(epoch=epoch, train_mse=train_mse, val_mse=val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_arrays = {n: t.values.copy() for n, t in params.arrays.items()}
            stall = 0
        else:
            stall += 1
            if stall >= train_config.patience:
                break

    return best_arrays, history, best_epoch, best_val


def pretrain(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_mixed: MixedDataset,
    val_mixed: MixedDataset,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Train all parameters from scratch on the mixed dataset.

    Returns the best-validation checkpoint plus the per-epoch loss curve.
    """
    train_config.validate()
    if train_config.scope != "all":
        raise ConfigError("pretraining updates all parameters; scope must be 'all'")
    model_config.validate()
    params = init_model(model_config)
    best_arrays, history, best_epoch, best_val = _fit(
        params, train_config, train_mixed, val_mixed
    )
    for name, t in params.arrays.items():
        t.values = best_arrays[name]
    metadata = {
        "epoch": str(best_epoch),
        "best_val_mse": repr(float(best_val)),
        "seed": str(train_config.seed),
        "scope": "all",
        "train_sources": ",".join(_sources_of(train_mixed)),
    }
    return from_params(params, metadata), history


def finetune_heads(
    ckpt: Checkpoint,
    train_config: TrainConfig,
    train_mixed: MixedDataset,
    val_mixed: MixedDataset,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Continue training from a checkpoint, updating only the configured scope.

    With scope "head" (the default here) every non-head array of the result
    is bit-identical to the source checkpoint; zero epochs returns an exact
    copy.
    """
    train_config.validate()
    params = to_params(ckpt)
    best_arrays, history, best_epoch, best_val = _fit(
        params, train_config, train_mixed, val_mixed
    )
    for name, t in params.arrays.items():
        t.values = best_arrays[name]
    metadata = dict(ckpt.metadata)
    metadata.update({
        "epoch": str(best_epoch),
        "best_val_mse": repr(float(best_val)),
        "seed": str(train_config.seed),
        "scope": train_config.scope,
        "finetuned_on": ",".join(_sources_of(train_mixed)),
    })
    return from_params(params, metadata), history


def write_loss_curve(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_mse), repr(row.val_mse)])
