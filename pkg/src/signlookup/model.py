"""The spotting network: embed, encode, decode, classify.

Both feature streams are projected into a shared embedding space. The query
side (M stride levels, no positional encoding) is self-attended by the
encoder into a bank of temporal-scale states. The target side (sinusoidal
positional encoding added) runs through a decoder whose cross-attention
queries that bank; a five-layer MLP head turns each decoded frame state into
a binary appear/not-appear probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .features import AdaptiveQueryFeatures, TargetFeatureSequence, window_spans
from .numerics import (
    AttentionParams,
    FeedForwardParams,
    Tensor,
    add,
    cols,
    dropout,
    feed_forward,
    layer_norm,
    leaky_relu,
    linear,
    multi_head_attention,
    no_grad,
    parameter,
    reshape,
    softmax,
    tensor,
    xavier_init,
    _as_generator,
)

DEFAULT_BATCH_SIZE = 8


def default_mlp_dims(d_model: int) -> list[int]:
    """Head widths shrinking by halves down to the 2 output logits."""
    return [d_model, d_model, max(2, d_model // 2), max(2, d_model // 4), max(2, d_model // 8), 2]


@dataclass
class ModelConfig:
    d_feat: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 128
    m_levels: int = 4
    dropout_rate: float = 0.3
    mlp_dims: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.mlp_dims:
            self.mlp_dims = default_mlp_dims(self.d_model)
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for positional encoding, got {self.d_model}")
        if self.mlp_dims[-1] != 2:
            raise ConfigError(f"mlp must end in 2 logits, got {self.mlp_dims}")
        if self.mlp_dims[0] != self.d_model:
            raise ConfigError(f"mlp input width {self.mlp_dims[0]} != d_model {self.d_model}")
        if self.m_levels < 1:
            raise ConfigError(f"need at least one query stride level, got {self.m_levels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_config() -> ModelConfig:
    """Ablation optima: 4 heads, 4 layers, dropout 0.3, 4 stride levels."""
    return ModelConfig(n_heads=4, n_layers=4, dropout_rate=0.3, m_levels=4)


class SignLookupModel:
    """All learned parameters, addressable by stable names in a fixed order."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng) -> "SignLookupModel":
        """Construct with xavier weights, zero biases, unit norm gains."""
        gen = _as_generator(rng)
        d, d_ff = config.d_model, config.d_ff
        params: dict[str, Tensor] = {}

        def linear(name: str, fan_in: int, fan_out: int):
            params[f"{name}.w"] = parameter(xavier_init(fan_in, fan_out, gen))
            params[f"{name}.b"] = parameter(np.zeros(fan_out, dtype=np.float32))

        def attention(name: str):
            for side in ("q", "k", "v", "o"):
                params[f"{name}.w{side}"] = parameter(xavier_init(d, d, gen))
                params[f"{name}.b{side}"] = parameter(np.zeros(d, dtype=np.float32))

        def norm(name: str):
            params[f"{name}.g"] = parameter(np.ones(d, dtype=np.float32))
            params[f"{name}.b"] = parameter(np.zeros(d, dtype=np.float32))

        linear("query_embed", config.d_feat, d)
        linear("target_embed", config.d_feat, d)
        for i in range(config.n_layers):
            attention(f"enc.{i}.self")
            norm(f"enc.{i}.norm1")
            linear(f"enc.{i}.ff.1", d, d_ff)
            linear(f"enc.{i}.ff.2", d_ff, d)
            norm(f"enc.{i}.norm2")
        for i in range(config.n_layers):
            attention(f"dec.{i}.self")
            norm(f"dec.{i}.norm1")
            attention(f"dec.{i}.cross")
            norm(f"dec.{i}.norm2")
            linear(f"dec.{i}.ff.1", d, d_ff)
            linear(f"dec.{i}.ff.2", d_ff, d)
            norm(f"dec.{i}.norm3")
        for j in range(len(config.mlp_dims) - 1):
            linear(f"mlp.{j}", config.mlp_dims[j], config.mlp_dims[j + 1])
        return cls(config, params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def attention_params(self, prefix: str) -> AttentionParams:
        p = self.params
        return AttentionParams(
            p[f"{prefix}.wq"], p[f"{prefix}.bq"],
            p[f"{prefix}.wk"], p[f"{prefix}.bk"],
            p[f"{prefix}.wv"], p[f"{prefix}.bv"],
            p[f"{prefix}.wo"], p[f"{prefix}.bo"],
        )

    def ff_params(self, prefix: str) -> FeedForwardParams:
        p = self.params
        return FeedForwardParams(
            p[f"{prefix}.1.w"], p[f"{prefix}.1.b"],
            p[f"{prefix}.2.w"], p[f"{prefix}.2.b"],
        )

    def copy(self) -> "SignLookupModel":
        return SignLookupModel(
            self.config,
            {name: parameter(p.data.copy()) for name, p in self.params.items()},
        )

    @property
    def dtype(self):
        return self.params["query_embed.w"].dtype


@dataclass
class ForwardActivations:
    """Intermediate states of one forward pass, kept for inspection."""

    query_embeds: Tensor      # M x d_model, pre-encoder
    target_embeds: Tensor     # T x d_model, positional encoding included
    encoded_query: Tensor     # M x d_model temporal-scale bank
    decoded_target: Tensor    # T x d_model
    probs: Tensor             # T probabilities of the query appearing


def positional_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal position vector: sin at even slots, cos at odd slots."""
    if d_model % 2 != 0:
        raise ConfigError(f"d_model must be even, got {d_model}")
    if t < 0:
        raise ConfigError(f"position must be >= 0, got {t}")
    return _pe_table(t + 1, d_model)[t]


@lru_cache(maxsize=32)
def _pe_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    table = np.empty((n_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.setflags(write=False)
    return table


def _feature_matrix(x, expected_dim: int, what: str) -> np.ndarray:
    if isinstance(x, AdaptiveQueryFeatures):
        x = x.x
    elif isinstance(x, TargetFeatureSequence):
        x = x.y
    elif isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != expected_dim:
        raise ShapeError(f"{what} features must be n x {expected_dim}, got {x.shape}")
    return x


def embed(x_query, y_target, model: SignLookupModel, positional: bool = True) -> tuple[Tensor, Tensor]:
    """Project both streams into the model space; targets get positions added."""
    cfg = model.config
    xq = _feature_matrix(x_query, cfg.d_feat, "query")
    yt = _feature_matrix(y_target, cfg.d_feat, "target")
    p = model.params
    f = linear(tensor(xq, dtype=model.dtype), p["query_embed.w"], p["query_embed.b"])
    g = linear(tensor(yt, dtype=model.dtype), p["target_embed.w"], p["target_embed.b"])
    if positional:
        pe = _pe_table(yt.shape[0], cfg.d_model).astype(model.dtype)
        g = add(g, tensor(pe, dtype=model.dtype))
    return f, g


def _sublayer(x: Tensor, sub_out: Tensor, norm_prefix: str, model: SignLookupModel,
              rng, training: bool) -> Tensor:
    """dropout -> residual -> layer norm around one sublayer output."""
    out = dropout(sub_out, model.config.dropout_rate, rng, training)
    p = model.params
    return layer_norm(add(x, out), p[f"{norm_prefix}.g"], p[f"{norm_prefix}.b"])


def encode(query_embeds, model: SignLookupModel, rng=None, training: bool = False) -> Tensor:
    """Self-attend the M stride embeddings into a continuous scale bank."""
    cfg = model.config
    gen = _as_generator(rng) if training else None
    x = query_embeds if isinstance(query_embeds, Tensor) else tensor(query_embeds, dtype=model.dtype)
    for i in range(cfg.n_layers):
        attn = multi_head_attention(x, x, model.attention_params(f"enc.{i}.self"), cfg.n_heads)
        x = _sublayer(x, attn, f"enc.{i}.norm1", model, gen, training)
        ff = feed_forward(x, model.ff_params(f"enc.{i}.ff"))
        x = _sublayer(x, ff, f"enc.{i}.norm2", model, gen, training)
    return x


def decode(target_embeds, scale_bank, model: SignLookupModel, rng=None, training: bool = False) -> Tensor:
    """Target self-attention plus cross-attention into the query scale bank.

    No causal mask anywhere: spotting sees the whole window bidirectionally.
    """
    cfg = model.config
    gen = _as_generator(rng) if training else None
    x = target_embeds if isinstance(target_embeds, Tensor) else tensor(target_embeds, dtype=model.dtype)
    z = scale_bank if isinstance(scale_bank, Tensor) else tensor(scale_bank, dtype=model.dtype)
    for i in range(cfg.n_layers):
        self_attn = multi_head_attention(x, x, model.attention_params(f"dec.{i}.self"), cfg.n_heads)
        x = _sublayer(x, self_attn, f"dec.{i}.norm1", model, gen, training)
        cross = multi_head_attention(x, z, model.attention_params(f"dec.{i}.cross"), cfg.n_heads)
        x = _sublayer(x, cross, f"dec.{i}.norm2", model, gen, training)
        ff = feed_forward(x, model.ff_params(f"dec.{i}.ff"))
        x = _sublayer(x, ff, f"dec.{i}.norm3", model, gen, training)
    return x


def classify(decoded_target, model: SignLookupModel, rng=None, training: bool = False) -> Tensor:
    """Five-layer MLP head: residual first layer, leaky ReLU and dropout between."""
    cfg = model.config
    gen = _as_generator(rng) if training else None
    x = decoded_target if isinstance(decoded_target, Tensor) else tensor(decoded_target, dtype=model.dtype)
    if x.data.shape[1] != cfg.mlp_dims[0]:
        raise ConfigError(f"head expects width {cfg.mlp_dims[0]}, got {x.data.shape[1]}")
    p = model.params
    x = add(x, linear(x, p["mlp.0.w"], p["mlp.0.b"]))
    n_layers = len(cfg.mlp_dims) - 1
    for j in range(1, n_layers):
        x = leaky_relu(x)
        x = dropout(x, cfg.dropout_rate, gen, training)
        x = linear(x, p[f"mlp.{j}.w"], p[f"mlp.{j}.b"])
    probs = softmax(x, axis=-1)
    return reshape(cols(probs, 1, 2), (-1,))


def forward(x_query, y_target, model: SignLookupModel, rng=None,
            training: bool = False, positional: bool = True) -> ForwardActivations:
    """Full pass: embed -> encode -> decode -> classify."""
    gen = _as_generator(rng) if training else None
    f, g = embed(x_query, y_target, model, positional=positional)
    z = encode(f, model, gen, training)
    h = decode(g, z, model, gen, training)
    probs = classify(h, model, gen, training)
    return ForwardActivations(f, g, z, h, probs)


def spot_probabilities(x_query, y_target, model: SignLookupModel,
                       window: int = 64, stride: int = 32) -> np.ndarray:
    """Per-frame probabilities over a full target sequence.

    The target runs through ``window``-frame slices at ``stride``; frames
    covered by several windows get the arithmetic mean of their predictions.
    """
    yt = _feature_matrix(y_target, model.config.d_feat, "target")
    sums = np.zeros(yt.shape[0], dtype=np.float64)
    counts = np.zeros(yt.shape[0], dtype=np.int64)
    with no_grad():
        for start, end in window_spans(yt.shape[0], window, stride):
            acts = forward(x_query, yt[start:end], model)
            sums[start:end] += acts.probs.data
            counts[start:end] += 1
    return sums / counts
