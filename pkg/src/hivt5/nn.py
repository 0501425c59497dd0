"""T5-style building blocks: layout-aware embeddings, relative position bias,
multi-head attention and pre-norm encoder/decoder stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NEG_INF, ShapeError, Tensor, embedding, matmul, parameter, rms_norm, softmax


class Module:
    """Parameter container. Attributes holding Tensors, Modules or lists of
    Modules are discovered by :meth:`named_parameters` in declaration order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.update(m.named_parameters(f"{name}.{i}."))
        return out


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False):
        self.w = _normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return y if self.b is None else y + self.b


# -- layout-aware input embedding ------------------------------------------------


def bucketize(coord, n_buckets: int) -> np.ndarray:
    """Map normalized coordinates in [0, 1] to ``floor(c * B)`` clamped to [0, B-1]."""
    c = np.asarray(coord, dtype=np.float64)
    return np.clip(np.floor(c * n_buckets), 0, n_buckets - 1).astype(np.int64)


class SpatialEmbedder(Module):
    """Token table plus shared x/y coordinate tables.

    A token with box (x0, y0, x1, y1) embeds as
    ``E_tok[t] + E_x[x0] + E_y[y0] + E_x[x1] + E_y[y1]``; both x coordinates
    index the same table, as do both y coordinates. Row ``B`` of each
    coordinate table is reserved for tokens that have no box (questions).
    """

    def __init__(self, vocab_size: int, d_model: int, n_x: int, n_y: int,
                 rng: np.random.Generator, coord_std: float = 0.1, token_std: float = 0.5):
        # token_std 0.5 keeps tied output logits near uniform at initialization
        self.token_table = _normal(rng, (vocab_size, d_model), token_std)
        self.x_table = _normal(rng, (n_x + 1, d_model), coord_std)
        self.y_table = _normal(rng, (n_y + 1, d_model), coord_std)
        self._n_x, self._n_y = n_x, n_y

    @property
    def no_box_x(self) -> int:
        return self._n_x

    @property
    def no_box_y(self) -> int:
        return self._n_y

    def coordinate_ids(self, boxes, has_box=None) -> tuple[np.ndarray, ...]:
        boxes = np.asarray(boxes, dtype=np.float64)
        bx0, by0 = bucketize(boxes[..., 0], self._n_x), bucketize(boxes[..., 1], self._n_y)
        bx1, by1 = bucketize(boxes[..., 2], self._n_x), bucketize(boxes[..., 3], self._n_y)
        if has_box is not None:
            has_box = np.asarray(has_box, dtype=bool)
            bx0, bx1 = np.where(has_box, bx0, self._n_x), np.where(has_box, bx1, self._n_x)
            by0, by1 = np.where(has_box, by0, self._n_y), np.where(has_box, by1, self._n_y)
        return bx0, by0, bx1, by1

    def __call__(self, token_ids, boxes, has_box=None, token_table: Tensor | None = None) -> Tensor:
        """Embed arrays of token ids (shape ``S``) with boxes (shape ``S + (4,)``)."""
        boxes = np.asarray(boxes, dtype=np.float64)
        if boxes.size and (boxes.min() < 0.0 or boxes.max() > 1.0):
            raise ValueError("box coordinates must lie in [0, 1]")
        bx0, by0, bx1, by1 = self.coordinate_ids(boxes, has_box)
        table = self.token_table if token_table is None else token_table
        return (
            embedding(table, token_ids)
            + embedding(self.x_table, bx0)
            + embedding(self.y_table, by0)
            + embedding(self.x_table, bx1)
            + embedding(self.y_table, by1)
        )


def spatial_embed(embedder: SpatialEmbedder, token_id: int, box) -> Tensor:
    """Single-token embedding of ``token_id`` at a normalized ``box``."""
    x0, y0, x1, y1 = (float(c) for c in box)
    if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
        raise ValueError(f"box must satisfy 0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1, got {tuple(box)}")
    if not 0 <= token_id < embedder.token_table.shape[0]:
        raise IndexError(f"token id {token_id} outside vocabulary")
    return embedder(np.array([token_id]), np.array([[x0, y0, x1, y1]])).reshape(-1)


# -- relative position bias ------------------------------------------------------


def relative_bucket(relative_position, n_buckets: int = 32, max_distance: int = 128,
                    bidirectional: bool = True) -> np.ndarray:
    """T5 relative-position bucketing of ``key_pos - query_pos``.

    Half of the buckets (per direction, if bidirectional) cover exact small
    distances; the rest are log-spaced up to ``max_distance`` and clamp beyond.
    """
    if n_buckets % 2:
        raise ValueError("n_buckets must be even")
    rel = np.asarray(relative_position, dtype=np.int64)
    out = np.zeros_like(rel)
    if bidirectional:
        n_buckets //= 2
        out += (rel > 0).astype(np.int64) * n_buckets
        rel = np.abs(rel)
    else:
        rel = -np.minimum(rel, 0)
    max_exact = n_buckets // 2
    is_small = rel < max_exact
    with np.errstate(divide="ignore"):
        scaled = np.log(np.maximum(rel, 1) / max_exact) / math.log(max_distance / max_exact)
    large = max_exact + (scaled * (n_buckets - max_exact)).astype(np.int64)
    large = np.minimum(large, n_buckets - 1)
    return out + np.where(is_small, rel, large)


class RelativeBias(Module):
    """Learned per-head scalar bias indexed by relative-position bucket."""

    def __init__(self, n_heads: int, n_buckets: int, max_distance: int, bidirectional: bool,
                 rng: np.random.Generator):
        self.table = _normal(rng, (n_buckets, n_heads), 0.1)
        self._n_buckets, self._max_distance, self._bidirectional = n_buckets, max_distance, bidirectional

    def __call__(self, q_len: int, k_len: int) -> Tensor:
        rel = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
        buckets = relative_bucket(rel, self._n_buckets, self._max_distance, self._bidirectional)
        return embedding(self.table, buckets).transpose(2, 0, 1)  # (H, Tq, Tk)


# -- attention and blocks ----------------------------------------------------------


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int
    n_heads: int
    n_buckets: int = 32
    max_distance: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class Attention(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)


def multi_head_attention(attn: Attention, queries: Tensor, keys: Tensor, n_heads: int,
                         additive_mask=None, position_bias: Tensor | None = None,
                         weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``queries`` is (B, Tq, d), ``keys`` (B, Tk, d) and serves as values too.
    ``additive_mask`` broadcasts against (B, H, Tq, Tk) with 0 for visible and
    a large negative number for hidden keys. ``position_bias`` is (H, Tq, Tk).
    """
    b, tq, d = queries.shape
    tk = keys.shape[1]
    if d % n_heads or keys.shape[-1] != d:
        raise ShapeError(f"cannot split model width {d} (keys {keys.shape[-1]}) into {n_heads} heads")
    dh = d // n_heads
    q = attn.q(queries).reshape(b, tq, n_heads, dh).transpose(0, 2, 1, 3)
    k = attn.k(keys).reshape(b, tk, n_heads, dh).transpose(0, 2, 3, 1)
    v = attn.v(keys).reshape(b, tk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(q, k) * (1.0 / math.sqrt(dh))
    if position_bias is not None:
        scores = scores + position_bias
    if additive_mask is not None:
        scores = scores + additive_mask
    weights = softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(weights.data)
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return attn.o(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.wi = Linear(d_model, d_ff, rng)
        self.wo = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.wo(self.wi(x).relu())


class EncoderLayer(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.attn_norm = parameter(np.ones(d_model))
        self.attn = Attention(d_model, rng)
        self.ff_norm = parameter(np.ones(d_model))
        self.ff = FeedForward(d_model, d_ff, rng)


class DecoderLayer(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.self_norm = parameter(np.ones(d_model))
        self.self_attn = Attention(d_model, rng)
        self.cross_norm = parameter(np.ones(d_model))
        self.cross_attn = Attention(d_model, rng)
        self.ff_norm = parameter(np.ones(d_model))
        self.ff = FeedForward(d_model, d_ff, rng)


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) boolean visibility -> additive (B, 1, 1, T) mask."""
    return np.where(np.asarray(valid, dtype=bool), 0.0, NEG_INF)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)


def encoder_forward(layers: list[EncoderLayer], x: Tensor, final_norm: Tensor, n_heads: int,
                    mask=None, position_bias: Tensor | None = None, eps: float = 1e-6,
                    attention_out: list | None = None) -> Tensor:
    """Pre-norm residual encoder stack over ``x`` of shape (B, T, d)."""
    if x.shape[1] == 0:
        raise ValueError("encoder input sequence is empty")
    for layer in layers:
        h = rms_norm(x, layer.attn_norm, eps)
        weights = [] if attention_out is not None else None
        x = x + multi_head_attention(layer.attn, h, h, n_heads, mask, position_bias, weights)
        if attention_out is not None:
            attention_out.append(weights[0])
        x = x + layer.ff(rms_norm(x, layer.ff_norm, eps))
    return rms_norm(x, final_norm, eps)


def decoder_forward(layers: list[DecoderLayer], y: Tensor, memory: Tensor, final_norm: Tensor,
                    n_heads: int, memory_mask=None, position_bias: Tensor | None = None,
                    eps: float = 1e-6) -> Tensor:
    """Pre-norm decoder stack: causal self-attention, cross-attention to ``memory``."""
    t = y.shape[1]
    if t == 0:
        raise ValueError("decoder input sequence is empty")
    self_mask = causal_mask(t)
    for layer in layers:
        h = rms_norm(y, layer.self_norm, eps)
        y = y + multi_head_attention(layer.self_attn, h, h, n_heads, self_mask, position_bias)
        h = rms_norm(y, layer.cross_norm, eps)
        y = y + multi_head_attention(layer.cross_attn, h, memory, n_heads, memory_mask)
        y = y + layer.ff(rms_norm(y, layer.ff_norm, eps))
    return rms_norm(y, final_norm, eps)
