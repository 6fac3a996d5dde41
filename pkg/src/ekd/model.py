"""Encoder-decoder transformer built on the gradient tape.

Pre-norm residual blocks, fixed sinusoidal position encodings, and a single
embedding matrix shared by the encoder input, decoder input, and the output
projection.  Matrices are initialized Xavier-uniform, biases zero, layer
norm gains one, so two builds from the same seed are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, LengthError, ShapeError, VocabError
from .tensor import (
    Tensor,
    add,
    embedding_rows,
    layer_norm_rows,
    matmul,
    mul,
    relu,
    reshape,
    softmax_rows,
    transpose,
)

__all__ = [
    "ModelConfig",
    "TransformerModel",
    "parameter_shapes",
    "build",
    "count_params",
    "attention",
    "forward",
    "forward_batch",
    "sinusoid_table",
]

MASKED_SCORE = -1e9

# Vocabulary sizes up to this bound scatter embedding gradients through a
# one-hot matmul, which is far faster than np.add.at for small vocabularies.
_SCATTER_MATMUL_MAX_VOCAB = 2048


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every capacity tier uses this shape."""

    vocab_size: int
    embed_dim: int = 128
    ffn_dim: int = 1024
    heads: int = 4
    layers: int = 6
    max_positions: int = 512
    dropout: float = 0.3

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be at least 4 (specials), got {self.vocab_size}")
        if self.embed_dim <= 0 or self.ffn_dim <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_positions < 2:
            raise ConfigError("max_positions must be at least 2")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "ffn_dim": self.ffn_dim,
            "heads": self.heads,
            "layers": self.layers,
            "max_positions": self.max_positions,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        cfg = cls(**{k: d[k] for k in (
            "vocab_size", "embed_dim", "ffn_dim", "heads", "layers", "max_positions", "dropout",
        )})
        cfg.validate()
        return cfg


def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for name in ("wq", "wk", "wv", "wo"):
        shapes.append((f"{prefix}.{name}", (d, d)))
    for name in ("bq", "bk", "bv", "bo"):
        shapes.append((f"{prefix}.{name}", (d,)))
    return shapes


def _ln_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in creation order."""
    d, f = config.embed_dim, config.ffn_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (config.vocab_size, d))]
    for i in range(config.layers):
        shapes += _ln_shapes(f"enc.{i}.ln1", d)
        shapes += _attn_shapes(f"enc.{i}.attn", d)
        shapes += _ln_shapes(f"enc.{i}.ln2", d)
        shapes += [
            (f"enc.{i}.ffn.w1", (d, f)),
            (f"enc.{i}.ffn.b1", (f,)),
            (f"enc.{i}.ffn.w2", (f, d)),
            (f"enc.{i}.ffn.b2", (d,)),
        ]
    for i in range(config.layers):
        shapes += _ln_shapes(f"dec.{i}.ln1", d)
        shapes += _attn_shapes(f"dec.{i}.self", d)
        shapes += _ln_shapes(f"dec.{i}.ln2", d)
        shapes += _attn_shapes(f"dec.{i}.cross", d)
        shapes += _ln_shapes(f"dec.{i}.ln3", d)
        shapes += [
            (f"dec.{i}.ffn.w1", (d, f)),
            (f"dec.{i}.ffn.b1", (f,)),
            (f"dec.{i}.ffn.w2", (f, d)),
            (f"dec.{i}.ffn.b2", (d,)),
        ]
    shapes += _ln_shapes("enc.final_ln", d)
    shapes += _ln_shapes("dec.final_ln", d)
    return dict(shapes)


def count_params(config: ModelConfig) -> int:
    """Total trainable scalar count for a configuration."""
    config.validate()
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def sinusoid_table(max_positions: int, dim: int) -> np.ndarray:
    """Fixed position encodings: sin on even dims, cos on odd dims."""
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


class TransformerModel:
    """Parameters plus mode flags; all math lives in module functions."""

    def __init__(self, config: ModelConfig, parameters: dict[str, Tensor]):
        self.config = config
        self.parameters = parameters
        self.training = False
        self.vocab_hash: str | None = None
        self._dropout_rng: np.random.Generator | None = None
        self.pos_table = sinusoid_table(config.max_positions, config.embed_dim)

    def train(self) -> "TransformerModel":
        self.training = True
        return self

    def eval(self) -> "TransformerModel":
        self.training = False
        return self

    def reseed_dropout(self, entropy) -> None:
        """Fix the dropout stream; identical entropy gives identical masks."""
        self._dropout_rng = np.random.default_rng(entropy)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters.values())

    def param_bytes(self) -> bytes:
        """Concatenated little-endian float32 parameter payload, sorted by name."""
        chunks = []
        for name in sorted(self.parameters):
            chunks.append(np.ascontiguousarray(self.parameters[name].data, dtype="<f4").tobytes())
        return b"".join(chunks)


def build(config: ModelConfig, seed: int) -> TransformerModel:
    """Create a model with seed-determined Xavier-uniform weights."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in, fan_out = shape[0], shape[1]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-a, a, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return TransformerModel(config, params)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    scale: float | None = None,
) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean, True where a query must not look at a key, and must
    broadcast against the score shape.  Blocked positions get a -1e9 score
    offset, which underflows to an exactly zero weight after the softmax.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key depth mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, _swap_last(k.data.ndim)))
    if scale != 1.0:
        scores = mul(scores, Tensor(np.asarray(scale, dtype=scores.dtype)))
    if mask is not None:
        bias = np.where(mask, np.asarray(MASKED_SCORE, dtype=scores.dtype), 0).astype(scores.dtype)
        scores = add(scores, Tensor(bias))
    weights = softmax_rows(scores)
    return matmul(weights, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _linear(params, prefix: str, x: Tensor, w: str, b: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.{w}"]), params[f"{prefix}.{b}"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _mha(params, prefix: str, x_q: Tensor, x_kv: Tensor, mask, heads: int) -> Tensor:
    q = _split_heads(_linear(params, prefix, x_q, "wq", "bq"), heads)
    k = _split_heads(_linear(params, prefix, x_kv, "wk", "bk"), heads)
    v = _split_heads(_linear(params, prefix, x_kv, "wv", "bv"), heads)
    ctx = _merge_heads(attention(q, k, v, mask))
    return _linear(params, prefix, ctx, "wo", "bo")


def _ln(params, prefix: str, x: Tensor) -> Tensor:
    return layer_norm_rows(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _ffn(params, prefix: str, x: Tensor) -> Tensor:
    h = relu(add(matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return add(matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _dropout(model: TransformerModel, x: Tensor) -> Tensor:
    p = model.config.dropout
    if not model.training or p <= 0.0:
        return x
    if model._dropout_rng is None:
        raise ContractError("training-mode forward needs reseed_dropout() first")
    keep = (model._dropout_rng.random(x.shape) >= p).astype(x.data.dtype)
    keep /= np.asarray(1.0 - p, dtype=x.data.dtype)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _embed(model: TransformerModel, ids: np.ndarray) -> Tensor:
    d = model.config.embed_dim
    x = embedding_rows(model.parameters["embed"], ids)
    x = mul(x, Tensor(np.asarray(math.sqrt(d), dtype=x.dtype)))
    pos = model.pos_table[: ids.shape[-1]].astype(x.dtype, copy=False)
    x = add(x, Tensor(pos))
    return _dropout(model, x)


def encode(model: TransformerModel, src_ids: np.ndarray, src_pad: np.ndarray | None) -> Tensor:
    """Run the encoder stack; returns [batch, src_len, embed_dim]."""
    p, cfg = model.parameters, model.config
    key_mask = None
    if src_pad is not None and src_pad.any():
        key_mask = src_pad[:, None, None, :]
    h = _embed(model, src_ids)
    for i in range(cfg.layers):
        u = _ln(p, f"enc.{i}.ln1", h)
        a = _mha(p, f"enc.{i}.attn", u, u, key_mask, cfg.heads)
        h = add(h, _dropout(model, a))
        f = _ffn(p, f"enc.{i}.ffn", _ln(p, f"enc.{i}.ln2", h))
        h = add(h, _dropout(model, f))
    return _ln(p, "enc.final_ln", h)


def decode_logits(
    model: TransformerModel,
    enc_out: Tensor,
    src_pad: np.ndarray | None,
    tgt_in: np.ndarray,
) -> Tensor:
    """Run the decoder stack over a full prefix; returns [batch, tgt_len, vocab]."""
    p, cfg = model.parameters, model.config
    t = tgt_in.shape[-1]
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    cross_mask = None
    if src_pad is not None and src_pad.any():
        cross_mask = src_pad[:, None, None, :]
    h = _embed(model, tgt_in)
    for i in range(cfg.layers):
        u = _ln(p, f"dec.{i}.ln1", h)
        a = _mha(p, f"dec.{i}.self", u, u, causal, cfg.heads)
        h = add(h, _dropout(model, a))
        u = _ln(p, f"dec.{i}.ln2", h)
        c = _mha(p, f"dec.{i}.cross", u, enc_out, cross_mask, cfg.heads)
        h = add(h, _dropout(model, c))
        f = _ffn(p, f"dec.{i}.ffn", _ln(p, f"dec.{i}.ln3", h))
        h = add(h, _dropout(model, f))
    h = _ln(p, "dec.final_ln", h)
    emb_t = transpose(p["embed"], (1, 0))
    return matmul(h, emb_t)


def forward_batch(
    model: TransformerModel,
    src_ids: np.ndarray,
    tgt_in: np.ndarray,
    src_pad: np.ndarray | None = None,
) -> Tensor:
    """Teacher-forced logits for a batch: [batch, tgt_len, vocab]."""
    enc_out = encode(model, src_ids, src_pad)
    return decode_logits(model, enc_out, src_pad, tgt_in)


def _validate_ids(name: str, ids: np.ndarray, vocab_size: int, max_positions: int) -> None:
    if ids.shape[-1] == 0:
        raise ContractError(f"{name} must be non-empty")
    if ids.shape[-1] > max_positions:
        raise LengthError(
            f"{name} length {ids.shape[-1]} exceeds max_positions {max_positions}"
        )
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise VocabError(
            f"{name} contains token id outside [0, {vocab_size}): "
            f"min {int(ids.min())}, max {int(ids.max())}"
        )


def forward(model: TransformerModel, src_tokens: Sequence[int], tgt_prefix: Sequence[int]) -> Tensor:
    """Next-token logits for one sentence pair.

    Row ``t`` of the result scores the token that would follow
    ``tgt_prefix[: t + 1]`` given the full source.
    """
    cfg = model.config
    src = np.asarray(list(src_tokens), dtype=np.int64)
    tgt = np.asarray(list(tgt_prefix), dtype=np.int64)
    _validate_ids("src_tokens", src, cfg.vocab_size, cfg.max_positions)
    _validate_ids("tgt_prefix", tgt, cfg.vocab_size, cfg.max_positions)
    logits = forward_batch(model, src[None, :], tgt[None, :], None)
    return reshape(logits, (tgt.shape[0], cfg.vocab_size))
