"""Paired encoders: patch-grid image encoder, hashed bag-of-words text encoder,
and single-head cross-attention pooling of patch rows under sentence queries.

Every encoder exists in two forms that share one code path: a graph builder
returning engine nodes (used by the trainer, so gradients flow through), and a
numpy wrapper that evaluates the same graph on concrete arrays (used by the
evaluation harness). Global embeddings are unit rows; patch rows and pooled
rows are left unnormalized, similarity computations normalize on use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .caption_schema import TokenSequence


class EmptySequence(ValueError):
    """Text with no tokens cannot be encoded."""


def _uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ImageEncoderParams:
    """Linear maps from raw patch features to the shared embedding space."""

    patch_projection: np.ndarray  # F x D, applied per patch row
    global_projection: np.ndarray  # F x D, applied to the mean patch feature

    def __post_init__(self):
        self.patch_projection = np.asarray(self.patch_projection, dtype=np.float64)
        self.global_projection = np.asarray(self.global_projection, dtype=np.float64)
        if self.patch_projection.ndim != 2 or self.global_projection.ndim != 2:
            raise ValueError("projections must be 2-d")
        if self.patch_projection.shape != self.global_projection.shape:
            raise ValueError("patch and global projections must share shape")


@dataclass
class TextEncoderParams:
    """Token embedding table and output projection for mean-pooled text."""

    embedding_table: np.ndarray  # V x E
    output_projection: np.ndarray  # E x D

    def __post_init__(self):
        self.embedding_table = np.asarray(self.embedding_table, dtype=np.float64)
        self.output_projection = np.asarray(self.output_projection, dtype=np.float64)
        if self.embedding_table.ndim != 2 or self.output_projection.ndim != 2:
            raise ValueError("text parameters must be 2-d")
        if self.embedding_table.shape[1] != self.output_projection.shape[0]:
            raise ValueError("embedding width must match projection input")

    @property
    def vocab_size(self) -> int:
        return self.embedding_table.shape[0]


@dataclass
class CrossAttentionParams:
    """Single-head attention maps, all D x D, no biases."""

    query: np.ndarray
    key: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64)
        self.key = np.asarray(self.key, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        shapes = {self.query.shape, self.key.shape, self.value.shape}
        if len(shapes) != 1 or self.query.ndim != 2 or self.query.shape[0] != self.query.shape[1]:
            raise ValueError("attention maps must be square and share one shape")


def init_image_encoder(feature_dim: int, embed_dim: int, rng: np.random.Generator) -> ImageEncoderParams:
    if feature_dim < 1 or embed_dim < 1:
        raise ValueError("dims must be positive")
    return ImageEncoderParams(
        patch_projection=_uniform_init(rng, feature_dim, (feature_dim, embed_dim)),
        global_projection=_uniform_init(rng, feature_dim, (feature_dim, embed_dim)),
    )


def init_text_encoder(
    vocab_size: int, text_embed_dim: int, embed_dim: int, rng: np.random.Generator
) -> TextEncoderParams:
    if vocab_size < 1 or text_embed_dim < 1 or embed_dim < 1:
        raise ValueError("dims must be positive")
    return TextEncoderParams(
        embedding_table=_uniform_init(rng, vocab_size, (vocab_size, text_embed_dim)),
        output_projection=_uniform_init(rng, text_embed_dim, (text_embed_dim, embed_dim)),
    )


def init_cross_attention(embed_dim: int, rng: np.random.Generator) -> CrossAttentionParams:
    if embed_dim < 1:
        raise ValueError("dims must be positive")
    return CrossAttentionParams(
        query=_uniform_init(rng, embed_dim, (embed_dim, embed_dim)),
        key=_uniform_init(rng, embed_dim, (embed_dim, embed_dim)),
        value=_uniform_init(rng, embed_dim, (embed_dim, embed_dim)),
    )


# ---------------------------------------------------------------- graph form


def image_global_graph(patches: nx.Node, global_projection: nx.Node) -> nx.Node:
    """Unit-norm 1 x D global image embedding from a P x F patch grid."""
    pooled = nx.mean_rows(patches)
    return nx.l2norm_rows(nx.matmul(pooled, global_projection))


def image_patch_graph(patches: nx.Node, patch_projection: nx.Node) -> nx.Node:
    """Raw projected patch rows, P x D."""
    return nx.matmul(patches, patch_projection)


def text_graph(
    tokens: TokenSequence, embedding_table: nx.Node, output_projection: nx.Node
) -> nx.Node:
    """Unit-norm 1 x D text embedding: mean of token rows, projected."""
    if len(tokens) == 0:
        raise EmptySequence("cannot encode text with no tokens")
    rows = nx.gather_rows(embedding_table, list(tokens.ids))
    return nx.l2norm_rows(nx.matmul(nx.mean_rows(rows), output_projection))


def cross_attention_graph(
    queries: nx.Node,
    source: nx.Node,
    query_map: nx.Node,
    key_map: nx.Node,
    value_map: nx.Node,
    embed_dim: int,
) -> nx.Node:
    """Attention-pool source rows under each query row, output M x D (raw).

    Logits are scaled by 1/sqrt(D). Each output row is a convex combination of
    the value-projected source rows.
    """
    q = nx.matmul(queries, query_map)
    k = nx.matmul(source, key_map)
    v = nx.matmul(source, value_map)
    logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(embed_dim))
    return nx.matmul(nx.row_softmax(logits), v)


# ---------------------------------------------------------------- numpy form


def _eval(node: nx.Node) -> np.ndarray:
    return nx.Session({}).value(node)


def encode_image(patches: np.ndarray, params: ImageEncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Returns (global embedding of shape (D,), projected patch rows P x D)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != params.global_projection.shape[0]:
        raise ValueError(
            f"patches must be P x {params.global_projection.shape[0]}, got {patches.shape}"
        )
    p = nx.const(patches)
    g = _eval(image_global_graph(p, nx.const(params.global_projection)))
    rows = _eval(image_patch_graph(p, nx.const(params.patch_projection)))
    return g[0], rows


def encode_text(tokens: TokenSequence, params: TextEncoderParams) -> np.ndarray:
    """Returns the unit-norm text embedding of shape (D,)."""
    if tokens.vocab_size != params.vocab_size:
        raise ValueError(
            f"token vocabulary {tokens.vocab_size} does not match table {params.vocab_size}"
        )
    node = text_graph(tokens, nx.const(params.embedding_table), nx.const(params.output_projection))
    return _eval(node)[0]


def cross_attention_pool(
    queries: np.ndarray, source: np.ndarray, params: CrossAttentionParams
) -> np.ndarray:
    """Returns pooled rows, one per query row, shape M x D."""
    queries = np.asarray(queries, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    d = params.query.shape[0]
    if queries.ndim != 2 or source.ndim != 2 or queries.shape[1] != d or source.shape[1] != d:
        raise ValueError(f"queries and source must have {d} columns")
    node = cross_attention_graph(
        nx.const(queries),
        nx.const(source),
        nx.const(params.query),
        nx.const(params.key),
        nx.const(params.value),
        embed_dim=d,
    )
    return _eval(node)
