"""Reference text encoder: hashed character n-gram features through a small MLP.

Stands in for a large pretrained encoder at desk scale while exercising the
same contract: a linearisation goes in, a dense vector f(d) of fixed width n
comes out, and exact analytic parameter gradients are available for training.
Anything honouring (encode, encode_grad, output width) can replace it without
touching the fusion or head modules.

The forward map is

    x  = mean over gram instances of embedding[bucket(gram)]
    h  = tanh(W1 x + b1)
    f  = W2 h + b2

with bucket(gram) = hash64(gram) mod hash_buckets. Dropout (inverted, so
inference needs no rescaling) is applied before each linear layer only when
masks are supplied; plain calls are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabverify.linearizer import Linearisation
from tabverify.retriever import IndexConfig, Unit, hash_gram, tokenize


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes and featurization of the reference encoder."""

    hash_buckets: int = 2**15
    embed_dim: int = 64
    hidden_dim: int = 128
    out_dim: int = 64
    gram_orders: tuple[int, ...] = (2, 3)

    def __post_init__(self) -> None:
        if min(self.hash_buckets, self.embed_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("encoder dimensions must be positive")
        object.__setattr__(self, "gram_orders", tuple(sorted(set(self.gram_orders))))


@dataclass
class EncoderParams:
    """Trainable arrays of the reference encoder (all float64)."""

    config: EncoderConfig
    embedding: np.ndarray  # (hash_buckets, embed_dim)
    w1: np.ndarray  # (hidden_dim, embed_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (out_dim, hidden_dim)
    b2: np.ndarray  # (out_dim,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
        }


@dataclass(frozen=True)
class EncodedTable:
    """Dense evidence representation f(d) for one linearised table."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("encoded vector has non-finite entries")


@dataclass(frozen=True)
class DropoutMasks:
    """Pre-sampled inverted-dropout masks (already scaled by 1/(1-p))."""

    input_mask: np.ndarray  # (embed_dim,)
    hidden_mask: np.ndarray  # (hidden_dim,)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, float64."""

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float64)

    return EncoderParams(
        config=config,
        embedding=uniform((config.hash_buckets, config.embed_dim), config.embed_dim),
        w1=uniform((config.hidden_dim, config.embed_dim), config.embed_dim),
        b1=np.zeros(config.hidden_dim, dtype=np.float64),
        w2=uniform((config.out_dim, config.hidden_dim), config.hidden_dim),
        b2=np.zeros(config.out_dim, dtype=np.float64),
    )


def sample_dropout(
    config: EncoderConfig, rate: float, rng: np.random.Generator
) -> DropoutMasks:
    """Inverted-dropout masks at drop probability ``rate``."""
    keep = 1.0 - rate
    return DropoutMasks(
        input_mask=(rng.random(config.embed_dim) < keep) / keep,
        hidden_mask=(rng.random(config.hidden_dim) < keep) / keep,
    )


def text_features(text: str, config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Hashed-gram feature counts of ``text``: (bucket ids, counts).

    Buckets are hash64(gram) mod hash_buckets over the character n-grams of
    the configured orders; counts carry gram multiplicity. Empty text yields
    empty arrays.
    """
    grams = tokenize(
        text, IndexConfig(gram_orders=config.gram_orders, unit=Unit.CHAR_GRAM)
    )
    counts: dict[int, int] = {}
    for gram in grams:
        bucket = hash_gram(gram) % config.hash_buckets
        counts[bucket] = counts.get(bucket, 0) + 1
    if not counts:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    buckets = np.array(sorted(counts), dtype=np.int64)
    return buckets, np.array([counts[int(b)] for b in buckets], dtype=np.float64)


def _pool(
    buckets: np.ndarray, counts: np.ndarray, params: EncoderParams
) -> np.ndarray:
    if len(buckets) == 0:
        return np.zeros(params.config.embed_dim, dtype=np.float64)
    return counts @ params.embedding[buckets] / counts.sum()


def encode_features(
    buckets: np.ndarray,
    counts: np.ndarray,
    params: EncoderParams,
    dropout: DropoutMasks | None = None,
) -> np.ndarray:
    """Forward pass from pre-hashed features; the training-loop entry point."""
    x = _pool(buckets, counts, params)
    if dropout is not None:
        x = x * dropout.input_mask
    h = np.tanh(params.w1 @ x + params.b1)
    hd = h * dropout.hidden_mask if dropout is not None else h
    return params.w2 @ hd + params.b2


def encode(
    lin: Linearisation,
    params: EncoderParams,
    dropout: DropoutMasks | None = None,
) -> EncodedTable:
    """Encode one linearisation to f(d); deterministic without dropout."""
    buckets, counts = text_features(lin.text, params.config)
    return EncodedTable(vector=encode_features(buckets, counts, params, dropout))


@dataclass
class EncoderGrads:
    """Parameter gradients of one encode call.

    The embedding gradient is sparse: ``embedding_rows[i]`` is the gradient
    of row ``embedding_buckets[i]``; all other rows are zero. Scatter-add
    with ``np.add.at`` to accumulate, or use ``dense_embedding`` in tests.
    """

    embedding_buckets: np.ndarray  # (B,)
    embedding_rows: np.ndarray  # (B, embed_dim)
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def dense_embedding(self, hash_buckets: int) -> np.ndarray:
        dense = np.zeros((hash_buckets, self.embedding_rows.shape[1]))
        np.add.at(dense, self.embedding_buckets, self.embedding_rows)
        return dense


def encode_grad_features(
    buckets: np.ndarray,
    counts: np.ndarray,
    params: EncoderParams,
    upstream: np.ndarray,
    dropout: DropoutMasks | None = None,
) -> EncoderGrads:
    """Analytic gradients of ``encode_features`` w.r.t. every parameter."""
    if upstream.shape != (params.config.out_dim,):
        raise ValueError(
            f"upstream gradient has shape {upstream.shape}, "
            f"expected ({params.config.out_dim},)"
        )
    x_raw = _pool(buckets, counts, params)
    x = x_raw * dropout.input_mask if dropout is not None else x_raw
    h = np.tanh(params.w1 @ x + params.b1)
    hd = h * dropout.hidden_mask if dropout is not None else h

    d_w2 = np.outer(upstream, hd)
    d_b2 = upstream.copy()
    d_hd = params.w2.T @ upstream
    d_h = d_hd * dropout.hidden_mask if dropout is not None else d_hd
    d_z1 = d_h * (1.0 - h * h)
    d_w1 = np.outer(d_z1, x)
    d_b1 = d_z1
    d_x = params.w1.T @ d_z1
    if dropout is not None:
        d_x = d_x * dropout.input_mask
    if len(buckets):
        rows = np.outer(counts / counts.sum(), d_x)
    else:
        rows = np.zeros((0, params.config.embed_dim), dtype=np.float64)
    return EncoderGrads(
        embedding_buckets=buckets,
        embedding_rows=rows,
        w1=d_w1,
        b1=d_b1,
        w2=d_w2,
        b2=d_b2,
    )


def encode_grad(
    lin: Linearisation,
    params: EncoderParams,
    upstream: np.ndarray,
    dropout: DropoutMasks | None = None,
) -> EncoderGrads:
    """Gradients of ``encode`` w.r.t. every parameter, given d(loss)/d(f)."""
    buckets, counts = text_features(lin.text, params.config)
    return encode_grad_features(buckets, counts, params, upstream, dropout)
