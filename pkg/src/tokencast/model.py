"""The S-stage hierarchical decoder-only forecaster.

Each stage pools its input tokens by its own kernel, embeds them, runs a
causal pre-norm transformer stack, and emits a per-position next-token
prediction that is upsampled back to full token resolution. Stages chain
through residuals: stage i+1 receives stage i's input minus stage i's
prediction shifted right by one token (zero first token), so the value
subtracted at position j is the prediction OF token j made at position j-1.
The model output is the sum of all stage predictions.

Parameters are plain named float64 arrays. The per-stage forecast head is
tagged scope "head"; everything else is "non-head" and frozen during
parameter-efficient tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Tensor,
    add,
    dropout,
    gelu,
    layer_norm,
    linear_interp_upsample,
    matmul,
    max_pool_within_token,
    mul,
    reshape,
    shift_right,
    slice_rows,
    softmax_lastdim,
    sub,
    swap_axes,
)
from .errors import ConfigError

SCOPE_HEAD = "head"
SCOPE_NON_HEAD = "non-head"


@dataclass(frozen=True)
class ModelConfig:
    num_stages: int = 2
    pool_kernels: tuple[int, ...] = (4, 1)
    token_len: int = 24
    max_tokens: int = 7
    model_width: int = 64
    layers_per_stage: int = 2
    attention_heads: int = 4
    feedforward_width: int = 128
    dropout_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if len(self.pool_kernels) != self.num_stages:
            raise ConfigError(
                f"expected {self.num_stages} pool kernels, got {self.pool_kernels}"
            )
        for k in self.pool_kernels:
            if k < 1 or self.token_len % k != 0:
                raise ConfigError(
                    f"pool kernel {k} must divide token length {self.token_len}"
                )
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.model_width % self.attention_heads != 0:
            raise ConfigError(
                f"width {self.model_width} not divisible by "
                f"{self.attention_heads} attention heads"
            )
        if self.layers_per_stage < 1:
            raise ConfigError("layers_per_stage must be >= 1")
        if self.feedforward_width < 1:
            raise ConfigError("feedforward_width must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def paper_preset(**overrides) -> ModelConfig:
    """Reference 4-stage configuration: T=48, 7-token context, kernels 8/4/2/1,
    three layers per stage. Width and head count stay whatever the caller sets.
    """
    base = ModelConfig(
        num_stages=4,
        pool_kernels=(8, 4, 2, 1),
        token_len=48,
        max_tokens=7,
        layers_per_stage=3,
    )
    return replace(base, **overrides)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, Tensor]
    scopes: dict[str, str]

    def trainable(self, scope: str = "all") -> dict[str, Tensor]:
        if scope == "all":
            return dict(self.arrays)
        return {n: t for n, t in self.arrays.items() if self.scopes[n] == scope}


@dataclass
class StageActivation:
    """Intermediates of one stage for inspection and structural tests."""

    stage_input: Tensor       # (..., L', T) tokens the stage received
    pooled: Tensor            # (..., L', T/k)
    hidden_in: Tensor         # (..., L', d) after embed + position
    hidden_out: Tensor        # (..., L', d) after the transformer stack
    prediction: Tensor        # (..., L', T): position j predicts token j+1


@dataclass
class ModelOutput:
    prediction: Tensor                 # sum of stage predictions, (..., L', T)
    stages: list[StageActivation] = field(default_factory=list)
    final_residual: Tensor = None      # type: ignore[assignment]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig) -> ModelParams:
    """Allocate and initialize all stage parameters, deterministic from seed.

    Weights use scaled-uniform init (bound 1/sqrt(fan_in)), biases start at
    zero, position tables at normal(0, 0.02).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.model_width
    f = config.feedforward_width
    arrays: dict[str, Tensor] = {}
    scopes: dict[str, str] = {}

    def put(name: str, values: np.ndarray, scope: str = SCOPE_NON_HEAD) -> None:
        arrays[name] = Tensor(values, requires_grad=True)
        scopes[name] = scope

    for i, k in enumerate(config.pool_kernels):
        pooled_len = config.token_len // k
        pre = f"stage{i}."
        put(pre + "embed.weight", _uniform(rng, pooled_len, (pooled_len, d)))
        put(pre + "embed.bias", np.zeros(d))
        put(pre + "pos_table", rng.normal(0.0, 0.02, size=(config.max_tokens, d)))
        for l in range(config.layers_per_stage):
            lp = f"{pre}layer{l}."
            put(lp + "ln1.gain", np.ones(d))
            put(lp + "ln1.bias", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                put(lp + f"attn.{proj}", _uniform(rng, d, (d, d)))
            for b in ("bq", "bk", "bv", "bo"):
                put(lp + f"attn.{b}", np.zeros(d))
            put(lp + "ln2.gain", np.ones(d))
            put(lp + "ln2.bias", np.zeros(d))
            put(lp + "ff.w1", _uniform(rng, d, (d, f)))
            put(lp + "ff.b1", np.zeros(f))
            put(lp + "ff.w2", _uniform(rng, f, (f, d)))
            put(lp + "ff.b2", np.zeros(d))
        put(pre + "final_ln.gain", np.ones(d))
        put(pre + "final_ln.bias", np.zeros(d))
        put(pre + "head.weight", _uniform(rng, d, (d, pooled_len)), SCOPE_HEAD)
        put(pre + "head.bias", np.zeros(pooled_len), SCOPE_HEAD)

    return ModelParams(config=config, arrays=arrays, scopes=scopes)


def params_from_arrays(
    config: ModelConfig, raw: dict[str, np.ndarray], scopes: dict[str, str]
) -> ModelParams:
    """Rebuild live parameters from plain arrays (checkpoint loading)."""
    arrays = {n: Tensor(v.copy(), requires_grad=True) for n, v in raw.items()}
    return ModelParams(config=config, arrays=arrays, scopes=dict(scopes))


def count_parameters(params: ModelParams, scope: str = "all") -> int:
    """Exact scalar count over arrays of the given scope."""
    if scope not in ("all", SCOPE_HEAD, SCOPE_NON_HEAD):
        raise ConfigError(f"unknown scope {scope!r}")
    total = 0
    for name, t in params.arrays.items():
        if scope == "all" or params.scopes[name] == scope:
            total += t.size
    return total


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    m = _MASK_CACHE.get(n)
    if m is None:
        m = np.triu(np.ones((n, n), dtype=bool), k=1)
        _MASK_CACHE[n] = m
    return m


def causal_self_attention(h: Tensor, weights: dict[str, Tensor], num_heads: int) -> Tensor:
    """Multi-head self-attention where position p attends only to <= p.

    h is (..., L', d); masked scores are forced to exact-zero attention
    weight, which makes the no-peek guarantee bit-exact, not approximate.
    """
    d = h.shape[-1]
    n = h.shape[-2]
    head_dim = d // num_heads
    lead = h.shape[:-2]

    q = add(matmul(h, weights["wq"]), weights["bq"])
    k = add(matmul(h, weights["wk"]), weights["bk"])
    v = add(matmul(h, weights["wv"]), weights["bv"])

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, lead + (n, num_heads, head_dim))
        return swap_axes(t, -3, -2)  # (..., heads, L', head_dim)

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = mul(matmul(qh, swap_axes(kh, -1, -2)), 1.0 / math.sqrt(head_dim))
    attn = softmax_lastdim(scores, mask=_causal_mask(n))
    ctx = matmul(attn, vh)                      # (..., heads, L', head_dim)
    ctx = reshape(swap_axes(ctx, -3, -2), lead + (n, d))
    return add(matmul(ctx, weights["wo"]), weights["bo"])


def _transformer_layer(
    h: Tensor,
    params: ModelParams,
    prefix: str,
    rng: np.random.Generator | None,
) -> Tensor:
    a = params.arrays
    cfg = params.config
    normed = layer_norm(h, a[prefix + "ln1.gain"], a[prefix + "ln1.bias"])
    attn_w = {k: a[prefix + "attn." + k] for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
    attended = causal_self_attention(normed, attn_w, cfg.attention_heads)
    if rng is not None and cfg.dropout_rate > 0.0:
        attended = dropout(attended, cfg.dropout_rate, rng)
    h = add(h, attended)
    normed = layer_norm(h, a[prefix + "ln2.gain"], a[prefix + "ln2.bias"])
    ff = matmul(gelu(add(matmul(normed, a[prefix + "ff.w1"]), a[prefix + "ff.b1"])),
                a[prefix + "ff.w2"])
    ff = add(ff, a[prefix + "ff.b2"])
    if rng is not None and cfg.dropout_rate > 0.0:
        ff = dropout(ff, cfg.dropout_rate, rng)
    return add(h, ff)


def stage_forward(
    params: ModelParams,
    stage: int,
    tokens: Tensor,
    rng: np.random.Generator | None = None,
) -> StageActivation:
    """One stage: pool -> embed + position -> causal stack -> head -> upsample.

    tokens is (..., L', T) with L' <= max_tokens (callers window first).
    """
    cfg = params.config
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    n = tokens.shape[-2]
    if n > cfg.max_tokens:
        raise ConfigError(
            f"{n} tokens exceed the model's max context of {cfg.max_tokens}; "
            "window the input first"
        )
    a = params.arrays
    pre = f"stage{stage}."
    k = cfg.pool_kernels[stage]

    pooled = max_pool_within_token(tokens, k)
    embedded = add(matmul(pooled, a[pre + "embed.weight"]), a[pre + "embed.bias"])
    h_in = add(embedded, slice_rows(a[pre + "pos_table"], n))
    h = h_in
    for l in range(cfg.layers_per_stage):
        h = _transformer_layer(h, params, f"{pre}layer{l}.", rng)
    h_out = layer_norm(h, a[pre + "final_ln.gain"], a[pre + "final_ln.bias"])
    small = add(matmul(h_out, a[pre + "head.weight"]), a[pre + "head.bias"])
    prediction = linear_interp_upsample(small, cfg.token_len)
    return StageActivation(
        stage_input=tokens, pooled=pooled, hidden_in=h_in,
        hidden_out=h_out, prediction=prediction,
    )


def model_forward(
    params: ModelParams,
    tokens,
    rng: np.random.Generator | None = None,
) -> ModelOutput:
    """Full forward pass: run every stage on its residual input and sum.

    Position j of the returned prediction is the model's forecast of token
    j+1. The residual chain keeps the first token of every stage input equal
    to the original first token (the shifted stage output is zero there).
    """
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    x_in = tokens
    total: Tensor | None = None
    stages: list[StageActivation] = []
    for i in range(params.config.num_stages):
        act = stage_forward(params, i, x_in, rng)
        stages.append(act)
        total = act.prediction if total is None else add(total, act.prediction)
        x_in = sub(x_in, shift_right(act.prediction))
    return ModelOutput(prediction=total, stages=stages, final_residual=x_in)
