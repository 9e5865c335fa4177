"""Attention math: scaled dot-product, multi-head, and the dual-source
variants where each head sums a text branch and a visual branch.

The dual-source ("enhanced") ops take the text keys/values and the visual
keys/values side by side; the two branch outputs are added with no averaging
or gating, and the visual branch is never masked (image cells carry no
padding and no order). Either branch may be omitted by passing None for its
key/value pair, in which case the other branch is the whole result; this is
how absent modalities contribute exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat_last,
    matmul,
    mul,
    softmax_rows,
    transpose,
)

# Additive mask value: large enough that softmax zeroes the entry, small
# enough to stay far from float64 overflow when logits are ~1e4.
MASK_FILL = -1e9


class AttentionMask:
    """Boolean allowed/forbidden matrix over (query position, key position).

    ``allowed`` may carry a leading batch axis and broadcasts against the
    score matrix. Every query row must keep at least one allowed key.
    """

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim < 2:
            raise ShapeError(f"mask must be at least 2-d, got shape {allowed.shape}")
        if not allowed.any(axis=-1).all():
            raise ValueError("mask forbids every key for at least one query row")
        self.allowed = allowed

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(self.allowed & other.allowed)

    def bias(self):
        """Additive score offset: 0 where allowed, MASK_FILL where not."""
        return np.where(self.allowed, 0.0, MASK_FILL)

    def __repr__(self):
        return f"AttentionMask(shape={self.allowed.shape})"


def make_causal_mask(n: int) -> AttentionMask:
    """Allow position i to see keys j <= i only."""
    if n < 1:
        raise ValueError(f"causal mask needs n >= 1, got {n}")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


def make_padding_mask(key_lengths, n_k: int) -> AttentionMask:
    """Forbid keys beyond each sequence's true length, for all queries.

    Scalar length -> [1, n_k]; a sequence of B lengths -> [B, 1, n_k]; both
    broadcast over the query axis.
    """
    lengths = np.asarray(key_lengths, dtype=np.int64)
    scalar = lengths.ndim == 0
    lengths = np.atleast_1d(lengths)
    if (lengths < 1).any():
        raise ValueError("zero-length sequence has no attendable keys")
    if (lengths > n_k).any():
        raise ValueError(f"sequence length exceeds padded length {n_k}")
    allowed = np.arange(n_k) < lengths[:, None]
    if scalar:
        return AttentionMask(allowed)
    return AttentionMask(allowed[:, None, :])


@dataclass
class MultiHeadParams:
    """Per-head projections for single-source attention.

    w_q/w_k/w_v are h matrices [d_model x d_k] / [d_model x d_k] /
    [d_model x d_v]; w_o is [h*d_v x d_model].
    """

    w_q: list
    w_k: list
    w_v: list
    w_o: object

    def __post_init__(self):
        h = len(self.w_q)
        if h < 1 or len(self.w_k) != h or len(self.w_v) != h:
            raise ShapeError("head projection lists must be equal and non-empty")
        d_k = self.w_q[0].shape[1]
        d_v = self.w_v[0].shape[1]
        for wq, wk, wv in zip(self.w_q, self.w_k, self.w_v):
            if wq.shape[1] != d_k or wk.shape[1] != d_k or wv.shape[1] != d_v:
                raise ShapeError("all heads must share d_k and d_v")
        if self.w_o.shape[0] != h * d_v:
            raise ShapeError(
                f"w_o expects {h * d_v} input extents, got {self.w_o.shape[0]}"
            )

    @property
    def n_heads(self):
        return len(self.w_q)


@dataclass
class EnhancedMultiHeadParams:
    """Per-head projections for dual-source attention: one query map plus
    separate key/value maps for the text and visual branches."""

    w_q: list
    w_kt: list
    w_vt: list
    w_kv: list
    w_vv: list
    w_o: object

    def __post_init__(self):
        h = len(self.w_q)
        lists = (self.w_kt, self.w_vt, self.w_kv, self.w_vv)
        if h < 1 or any(len(l) != h for l in lists):
            raise ShapeError("head projection lists must be equal and non-empty")
        d_k = self.w_q[0].shape[1]
        d_v = self.w_vt[0].shape[1]
        for i in range(h):
            if (
                self.w_q[i].shape[1] != d_k
                or self.w_kt[i].shape[1] != d_k
                or self.w_kv[i].shape[1] != d_k
            ):
                raise ShapeError("all key projections must share d_k")
            if self.w_vt[i].shape[1] != d_v or self.w_vv[i].shape[1] != d_v:
                raise ShapeError("all value projections must share d_v")
        if self.w_o.shape[0] != h * d_v:
            raise ShapeError(
                f"w_o expects {h * d_v} input extents, got {self.w_o.shape[0]}"
            )

    @property
    def n_heads(self):
        return len(self.w_q)


@dataclass
class AttentionRecord:
    """Post-softmax weights captured for one (layer, head, branch)."""

    layer: int
    head: int
    branch: str  # "self" | "text" | "visual"
    weights: np.ndarray  # queries x keys


def _check_mask(mask: AttentionMask, n_q: int, n_k: int):
    mq, mk = mask.allowed.shape[-2:]
    if mk != n_k or mq not in (1, n_q):
        raise ShapeError(
            f"mask shape {mask.allowed.shape} incompatible with scores "
            f"({n_q} queries x {n_k} keys)"
        )


def scaled_dot_product_attention(q, k, v, mask: AttentionMask | None = None):
    """softmax(Q K^T / sqrt(d_k)) V. Returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"query width {q.shape} and key width {k.shape} must share d_k"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape} and value rows {v.shape} must match")
    d_k = q.shape[-1]
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        _check_mask(mask, scores.shape[-2], scores.shape[-1])
        scores = add(scores, Tensor(mask.bias()))
    weights = softmax_rows(scores)
    return matmul(weights, v), weights


def enhanced_scaled_dot_product_attention(
    q,
    k_t,
    v_t,
    k_v,
    v_v,
    text_mask: AttentionMask | None = None,
):
    """Sum of a (maskable) text attention and an unmasked visual attention.

    Returns (output, text_weights, visual_weights); a branch passed as None
    is omitted and its weights come back as None.
    """
    if (k_t is None) != (v_t is None) or (k_v is None) != (v_v is None):
        raise ValueError("keys and values of a branch must be given together")
    if k_t is None and k_v is None:
        raise ValueError("at least one of the text/visual branches is required")
    if k_t is None:
        out_v, w_v = scaled_dot_product_attention(q, k_v, v_v)
        return out_v, None, w_v
    out_t, w_t = scaled_dot_product_attention(q, k_t, v_t, text_mask)
    if k_v is None:
        return out_t, w_t, None
    out_v, w_v = scaled_dot_product_attention(q, k_v, v_v)
    return add(out_t, out_v), w_t, w_v


def multi_head_attention(
    p: MultiHeadParams,
    q,
    k,
    v,
    mask: AttentionMask | None = None,
    weights_out: list | None = None,
):
    """Concat over heads of per-head scaled dot-product attention, then W^O."""
    heads = []
    for i in range(p.n_heads):
        out_i, w_i = scaled_dot_product_attention(
            matmul(q, p.w_q[i]), matmul(k, p.w_k[i]), matmul(v, p.w_v[i]), mask
        )
        heads.append(out_i)
        if weights_out is not None:
            weights_out.append(w_i)
    return matmul(concat_last(heads), p.w_o)


def enhanced_multi_head_attention(
    p: EnhancedMultiHeadParams,
    q,
    k_t,
    v_t,
    k_v,
    v_v,
    text_mask: AttentionMask | None = None,
    text_weights_out: list | None = None,
    visual_weights_out: list | None = None,
):
    """Multi-head wrapper around the dual-source attention; absent branches
    (None) are skipped so their parameters never enter the computation."""
    if (k_t is None) != (v_t is None) or (k_v is None) != (v_v is None):
        raise ValueError("keys and values of a branch must be given together")
    if k_t is None and k_v is None:
        raise ValueError("at least one of the text/visual branches is required")
    heads = []
    for i in range(p.n_heads):
        q_i = matmul(q, p.w_q[i])
        kt_i = matmul(k_t, p.w_kt[i]) if k_t is not None else None
        vt_i = matmul(v_t, p.w_vt[i]) if v_t is not None else None
        kv_i = matmul(k_v, p.w_kv[i]) if k_v is not None else None
        vv_i = matmul(v_v, p.w_vv[i]) if v_v is not None else None
        out_i, w_t, w_v = enhanced_scaled_dot_product_attention(
            q_i, kt_i, vt_i, kv_i, vv_i, text_mask
        )
        heads.append(out_i)
        if text_weights_out is not None and w_t is not None:
            text_weights_out.append(w_t)
        if visual_weights_out is not None and w_v is not None:
            visual_weights_out.append(w_v)
    return matmul(concat_last(heads), p.w_o)
