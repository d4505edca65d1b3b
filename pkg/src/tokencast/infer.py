"""Sliding-window auto-regressive decoding at arbitrary horizons.

Each channel decodes independently, entirely in normalized space: the
lookback is standardized once, the model repeatedly predicts the token after
the most recent (at most max_tokens) context tokens, and the generated tokens
are concatenated, truncated to the horizon, and mapped back to series units
with the original stats. Forecasts are bit-invariant to lookback content
older than max_tokens * token_len points because both the context window and
the normalization statistics come from that suffix alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigError, DataError, InputTooShortError
from .model import ModelParams, model_forward
from .preprocess import DEFAULT_EPS, NormStats


@dataclass(frozen=True)
class ForecastRequest:
    lookback: np.ndarray  # (C, L) or (L,)
    horizon: int


@dataclass
class ForecastResult:
    predictions: np.ndarray  # (C, H) in series units
    decode_steps: int
    stats: list[NormStats]


def context_window(tokens: np.ndarray, max_tokens: int) -> np.ndarray:
    """Most recent max_tokens tokens along the token axis, order preserved."""
    n = tokens.shape[-2]
    return tokens[..., max(0, n - max_tokens):, :]


def _decode_batch(params: ModelParams, lookbacks: np.ndarray, horizon: int,
                  eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Decode a (N, L) batch of univariate lookbacks to (N, horizon).

    Rows are independent: every kernel is row-local, so batched decoding is
    bit-identical to one-at-a-time decoding.
    """
    cfg = params.config
    t_len = cfg.token_len
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    length = lookbacks.shape[-1]
    if length < t_len:
        raise InputTooShortError(
            f"lookback of {length} points is shorter than one token ({t_len})"
        )
    if not np.all(np.isfinite(lookbacks)):
        raise DataError("lookback contains non-finite values")

    # effective context: newest full tokens, at most max_tokens of them
    num_tokens = min(length // t_len, cfg.max_tokens)
    effective = lookbacks[..., length - num_tokens * t_len:]
    mu = effective.mean(axis=-1, keepdims=True)
    scale = effective.std(axis=-1, keepdims=True) + eps
    ctx = ((effective - mu) / scale).reshape(lookbacks.shape[0], num_tokens, t_len)

    steps = math.ceil(horizon / t_len)
    generated = []
    with no_grad():
        for _ in range(steps):
            window = context_window(ctx, cfg.max_tokens)
            out = model_forward(params, Tensor(window))
            next_token = out.prediction.values[..., -1:, :]
            generated.append(next_token[..., 0, :])
            ctx = np.concatenate([ctx, next_token], axis=-2)
    flat = np.concatenate(generated, axis=-1)[..., :horizon]
    return flat * scale + mu, mu[..., 0], scale[..., 0], steps


def ar_forecast(params: ModelParams, request: ForecastRequest) -> ForecastResult:
    """Forecast every channel of the request independently."""
    lookback = np.asarray(request.lookback, dtype=np.float64)
    if lookback.ndim == 1:
        lookback = lookback[None, :]
    preds, mu, scale, steps = _decode_batch(params, lookback, request.horizon)
    eps = DEFAULT_EPS
    stats = [NormStats(mu=float(m), sigma=float(s) - eps, eps=eps)
             for m, s in zip(mu, scale)]
    return ForecastResult(predictions=preds, decode_steps=steps, stats=stats)


def forecast_multivariate(params: ModelParams, values: np.ndarray, horizon: int) -> np.ndarray:
    """Per-channel forecasts concatenated in channel order, shape (C, H)."""
    return ar_forecast(params, ForecastRequest(lookback=values, horizon=horizon)).predictions
