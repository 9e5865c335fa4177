"""Model assembly: embeddings, sinusoidal positions, the encoder stack, the
dual-source decoder stack, visual projection, and greedy decoding.

Every decoder layer's cross-attention is the dual-source variant with
K_t = V_t = encoder output and K_v = V_v = projected visual grid. When a
modality is absent its branch is omitted entirely, so a text-only pass is
the plain transformer decoder over the same text-branch weights, and a
caption-only pass attends to the grid alone. Parameters are kept as a flat
name -> float64 array mapping; shapes derive from :class:`ModelConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionMask,
    AttentionRecord,
    EnhancedMultiHeadParams,
    MultiHeadParams,
    enhanced_multi_head_attention,
    make_causal_mask,
    multi_head_attention,
)
from .autodiff import DTYPE, Tape, Tensor

BOS_ID = 1
EOS_ID = 2


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are desk-scale; the reference
    base size would be n_layers=6, d_model=512."""

    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    src_vocab: int = 8
    tgt_vocab: int = 8
    grid_len: int = 8
    d_feat: int = 16
    d_k: int = 0  # 0 -> d_model // n_heads
    d_v: int = 0
    p_drop_visual: float = 0.5
    p_drop_residual: float = 0.0
    max_len: int = 100

    def __post_init__(self):
        if self.d_k == 0:
            if self.d_model % self.n_heads:
                raise ValueError("d_model must divide by n_heads when d_k is defaulted")
            self.d_k = self.d_model // self.n_heads
        if self.d_v == 0:
            if self.d_model % self.n_heads:
                raise ValueError("d_model must divide by n_heads when d_v is defaulted")
            self.d_v = self.d_model // self.n_heads
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("p_drop"):
                if not 0.0 <= v < 1.0:
                    raise ValueError(f"{f.name} must be in [0, 1), got {v}")
            elif f.name != "n_layers" and v < 1:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")


class ModelParams:
    """Flat mapping of parameter name -> float64 ndarray, in a fixed order."""

    def __init__(self, arrays: dict):
        self.arrays = {k: np.asarray(v, dtype=DTYPE) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def equals(self, other: "ModelParams") -> bool:
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())


def _glorot(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every learnable array, in canonical order."""
    d, dk, dv, h = cfg.d_model, cfg.d_k, cfg.d_v, cfg.n_heads
    shapes = {
        "src_embed": (cfg.src_vocab, d),
        "tgt_embed": (cfg.tgt_vocab, d),
    }

    def attn_block(prefix, dual):
        for j in range(h):
            shapes[f"{prefix}.q{j}"] = (d, dk)
            if dual:
                shapes[f"{prefix}.kt{j}"] = (d, dk)
                shapes[f"{prefix}.vt{j}"] = (d, dv)
                shapes[f"{prefix}.kv{j}"] = (d, dk)
                shapes[f"{prefix}.vv{j}"] = (d, dv)
            else:
                shapes[f"{prefix}.k{j}"] = (d, dk)
                shapes[f"{prefix}.v{j}"] = (d, dv)
        shapes[f"{prefix}.out"] = (h * dv, d)

    def ff_and_norms(prefix, n_norms):
        shapes[f"{prefix}.ff.w1"] = (d, cfg.d_ff)
        shapes[f"{prefix}.ff.b1"] = (cfg.d_ff,)
        shapes[f"{prefix}.ff.w2"] = (cfg.d_ff, d)
        shapes[f"{prefix}.ff.b2"] = (d,)
        for n in range(1, n_norms + 1):
            shapes[f"{prefix}.ln{n}.g"] = (d,)
            shapes[f"{prefix}.ln{n}.b"] = (d,)

    for i in range(cfg.n_layers):
        attn_block(f"enc{i}.self", dual=False)
        ff_and_norms(f"enc{i}", 2)
    for i in range(cfg.n_layers):
        attn_block(f"dec{i}.self", dual=False)
        attn_block(f"dec{i}.cross", dual=True)
        ff_and_norms(f"dec{i}", 3)
    shapes["vis_proj.w"] = (cfg.d_feat, d)
    shapes["vis_proj.b"] = (d,)
    shapes["out_proj"] = (d, cfg.tgt_vocab)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded init: uniform +-sqrt(6/(fan_in+fan_out)) matrices, zero biases,
    unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 2:
            arrays[name] = _glorot(rng, *shape)
        elif name.endswith(".g"):
            arrays[name] = np.ones(shape, dtype=DTYPE)
        else:
            arrays[name] = np.zeros(shape, dtype=DTYPE)
    return ModelParams(arrays)


def bind_params(params: ModelParams, tape: Tape | None) -> dict:
    """Wrap every array as a Tensor; on a tape they become recorded leaves."""
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.parameter(v) for k, v in params.items()}


def _mha(pt, prefix, h):
    return MultiHeadParams(
        w_q=[pt[f"{prefix}.q{j}"] for j in range(h)],
        w_k=[pt[f"{prefix}.k{j}"] for j in range(h)],
        w_v=[pt[f"{prefix}.v{j}"] for j in range(h)],
        w_o=pt[f"{prefix}.out"],
    )


def _emha(pt, prefix, h):
    return EnhancedMultiHeadParams(
        w_q=[pt[f"{prefix}.q{j}"] for j in range(h)],
        w_kt=[pt[f"{prefix}.kt{j}"] for j in range(h)],
        w_vt=[pt[f"{prefix}.vt{j}"] for j in range(h)],
        w_kv=[pt[f"{prefix}.kv{j}"] for j in range(h)],
        w_vv=[pt[f"{prefix}.vv{j}"] for j in range(h)],
        w_o=pt[f"{prefix}.out"],
    )


@lru_cache(maxsize=8)
def _position_table(max_len: int, d_model: int):
    pos = np.arange(max_len, dtype=DTYPE)[:, None]
    dims = np.arange(0, d_model, 2, dtype=DTYPE)
    angles = pos / np.power(10000.0, dims / d_model)
    table = np.zeros((max_len, d_model), dtype=DTYPE)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    table.setflags(write=False)
    return table


def positional_encoding(n: int, d_model: int):
    """Fixed sinusoidal position rows [n x d_model]."""
    cap = max(64, 1 << max(n - 1, 0).bit_length())  # pow2 sizes keep the cache warm
    return _position_table(cap, d_model)[:n]


def embed_with_positions(table: Tensor, ids, d_model: int) -> Tensor:
    """Embedding rows scaled by sqrt(d_model) plus the position term."""
    ids = np.asarray(ids, dtype=np.int64)
    emb = ad.mul(ad.embedding(table, ids), np.sqrt(float(d_model)))
    return ad.add(emb, Tensor(positional_encoding(ids.shape[-1], d_model)))


def _sublayer(x, sub_out, pt, ln_name, cfg, mode, rng):
    """LayerNorm(x + Dropout(SubLayer(x)))."""
    y = ad.dropout(sub_out, cfg.p_drop_residual, mode, rng)
    return ad.layer_norm(ad.add(x, y), pt[f"{ln_name}.g"], pt[f"{ln_name}.b"])


def _feed_forward(pt, prefix, x):
    hidden = ad.relu(ad.add(ad.matmul(x, pt[f"{prefix}.w1"]), pt[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, pt[f"{prefix}.w2"]), pt[f"{prefix}.b2"])


def encoder_forward(
    pt,
    cfg: ModelConfig,
    src_ids,
    src_mask: AttentionMask | None = None,
    mode: str = "infer",
    rng=None,
) -> Tensor:
    """N layers of {self-attention, feed-forward}, each residual + LayerNorm.
    With n_layers == 0 this is just the embedded input."""
    x = embed_with_positions(pt["src_embed"], src_ids, cfg.d_model)
    for i in range(cfg.n_layers):
        attn = multi_head_attention(_mha(pt, f"enc{i}.self", cfg.n_heads), x, x, x, src_mask)
        x = _sublayer(x, attn, pt, f"enc{i}.ln1", cfg, mode, rng)
        x = _sublayer(x, _feed_forward(pt, f"enc{i}.ff", x), pt, f"enc{i}.ln2", cfg, mode, rng)
    return x


def project_visual(pt, cfg: ModelConfig, grid, mode: str = "infer", rng=None) -> Tensor:
    """Grid rows mapped to d_model: A W_vis + b, with dropout in train mode."""
    arr = np.asarray(getattr(grid, "a", grid), dtype=DTYPE)
    if arr.shape[-1] != cfg.d_feat:
        raise ad.ShapeError(
            f"visual grid width {arr.shape[-1]} != configured d_feat {cfg.d_feat}"
        )
    out = ad.add(ad.matmul(Tensor(arr), pt["vis_proj.w"]), pt["vis_proj.b"])
    return ad.dropout(out, cfg.p_drop_visual, mode, rng)


def decoder_forward(
    pt,
    cfg: ModelConfig,
    tgt_ids,
    enc_out: Tensor | None = None,
    visual: Tensor | None = None,
    self_mask: AttentionMask | None = None,
    cross_mask: AttentionMask | None = None,
    mode: str = "infer",
    rng=None,
    capture: bool = False,
):
    """Masked self-attention, dual-source cross-attention, feed-forward per
    layer; returns (logits over the target vocabulary, attention records).

    ``enc_out`` and/or ``visual`` must be present; a missing one's branch is
    omitted. ``cross_mask`` applies to the text branch only.
    """
    if enc_out is None and visual is None:
        raise ValueError("decoder needs at least one source (text or visual)")
    tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
    m = tgt_ids.shape[-1]
    if self_mask is None:
        self_mask = make_causal_mask(m)
    records: list[AttentionRecord] = []
    x = embed_with_positions(pt["tgt_embed"], tgt_ids, cfg.d_model)
    for i in range(cfg.n_layers):
        self_w = [] if capture else None
        attn = multi_head_attention(
            _mha(pt, f"dec{i}.self", cfg.n_heads), x, x, x, self_mask, weights_out=self_w
        )
        x = _sublayer(x, attn, pt, f"dec{i}.ln1", cfg, mode, rng)

        text_w = [] if capture else None
        vis_w = [] if capture else None
        cross = enhanced_multi_head_attention(
            _emha(pt, f"dec{i}.cross", cfg.n_heads),
            x,
            enc_out,
            enc_out,
            visual,
            visual,
            text_mask=cross_mask,
            text_weights_out=text_w,
            visual_weights_out=vis_w,
        )
        x = _sublayer(x, cross, pt, f"dec{i}.ln2", cfg, mode, rng)
        x = _sublayer(x, _feed_forward(pt, f"dec{i}.ff", x), pt, f"dec{i}.ln3", cfg, mode, rng)

        if capture:
            for j, w in enumerate(self_w):
                records.append(AttentionRecord(i, j, "self", w.data.copy()))
            for j, w in enumerate(text_w or []):
                records.append(AttentionRecord(i, j, "text", w.data.copy()))
            for j, w in enumerate(vis_w or []):
                records.append(AttentionRecord(i, j, "visual", w.data.copy()))
    return ad.matmul(x, pt["out_proj"]), records


def translation_forward(
    pt,
    cfg: ModelConfig,
    tgt_in,
    src_ids=None,
    grid=None,
    src_mask: AttentionMask | None = None,
    self_mask: AttentionMask | None = None,
    cross_mask: AttentionMask | None = None,
    mode: str = "infer",
    rng=None,
    capture: bool = False,
):
    """End-to-end teacher-forced pass over whichever sources are present."""
    enc = None
    if src_ids is not None:
        enc = encoder_forward(pt, cfg, src_ids, src_mask, mode, rng)
    vis = None
    if grid is not None:
        vis = project_visual(pt, cfg, grid, mode, rng)
    return decoder_forward(
        pt, cfg, tgt_in, enc, vis, self_mask, cross_mask, mode, rng, capture
    )


def greedy_decode(
    params: ModelParams,
    cfg: ModelConfig,
    src_ids=None,
    grid=None,
    max_len: int | None = None,
    capture: bool = False,
):
    """Deterministic decoding: start at BOS, append the argmax token (ties
    break toward the lowest id), stop at EOS or after max_len tokens.

    Returns (tokens without BOS/EOS, attention records from the final pass).
    """
    if src_ids is None and grid is None:
        raise ValueError("greedy decode needs at least one source")
    if max_len is None:
        max_len = cfg.max_len
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    pt = bind_params(params, None)
    enc = None
    if src_ids is not None:
        src_ids = np.asarray(src_ids, dtype=np.int64)
        enc = encoder_forward(pt, cfg, src_ids)
    vis = project_visual(pt, cfg, grid) if grid is not None else None

    prefix = [BOS_ID]
    records: list[AttentionRecord] = []
    for _ in range(max_len):
        logits, records = decoder_forward(
            pt, cfg, np.asarray(prefix), enc, vis, capture=capture
        )
        nxt = int(np.argmax(logits.data[-1]))
        prefix.append(nxt)
        if nxt == EOS_ID:
            break
    out = prefix[1:]
    if out and out[-1] == EOS_ID:
        out = out[:-1]
    return out, records
