"""Attention dump export: a parseable text record of every captured weight
matrix, plus grayscale heatmaps of the visual weights.

Dump schema (one file, UTF-8, whitespace separated):

    ATTN 1
    instance <id>
    src <n> <token> ... <token>
    gen <m> <token> ... <token>
    grid <L>                      # 0 when no visual source
    records <count>
    record <layer> <head> <branch> <rows> <cols>
    <cols floats>                 # one line per row, %.17g
    ...

Heatmaps are portable graymaps (ASCII "P2"), one per generated token, written
only when the grid length is a perfect square g*g; each map is that token's
visual attention row reshaped to g x g and scaled to 0..255 by its maximum.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .attention import AttentionRecord
from .data import Vocabulary
from .model import EOS_ID, ModelConfig, ModelParams, greedy_decode


@dataclass
class AttentionDump:
    instance_id: str
    src_tokens: list
    gen_tokens: list
    records: list
    grid_len: int  # 0 = no visual source

    @property
    def grid_side(self):
        """g when grid_len is a perfect square g*g, else None."""
        if self.grid_len <= 0:
            return None
        g = math.isqrt(self.grid_len)
        return g if g * g == self.grid_len else None


def write_dump(dump: AttentionDump, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("ATTN 1\n")
        f.write(f"instance {dump.instance_id}\n")
        f.write(f"src {len(dump.src_tokens)} " + " ".join(dump.src_tokens) + "\n")
        f.write(f"gen {len(dump.gen_tokens)} " + " ".join(dump.gen_tokens) + "\n")
        f.write(f"grid {dump.grid_len}\n")
        f.write(f"records {len(dump.records)}\n")
        for rec in dump.records:
            w = np.asarray(rec.weights)
            f.write(f"record {rec.layer} {rec.head} {rec.branch} {w.shape[0]} {w.shape[1]}\n")
            for row in w:
                f.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_dump(path) -> AttentionDump:
    """Parses a dump back; inverse of write_dump up to float formatting."""
    with open(path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f]
    it = iter(lines)

    def expect(tag):
        parts = next(it).split()
        if not parts or parts[0] != tag:
            raise ValueError(f"{path}: expected {tag!r} line, got {parts[:1]}")
        return parts[1:]

    if next(it).split() != ["ATTN", "1"]:
        raise ValueError(f"{path}: not an attention dump")
    instance_id = expect("instance")[0]
    src = expect("src")
    src_tokens = src[1 : 1 + int(src[0])]
    gen = expect("gen")
    gen_tokens = gen[1 : 1 + int(gen[0])]
    grid_len = int(expect("grid")[0])
    count = int(expect("records")[0])
    records = []
    for _ in range(count):
        layer, head, branch, rows, cols = expect("record")
        w = np.array(
            [[float(x) for x in next(it).split()] for _ in range(int(rows))]
        ).reshape(int(rows), int(cols))
        records.append(AttentionRecord(int(layer), int(head), branch, w))
    return AttentionDump(instance_id, src_tokens, gen_tokens, records, grid_len)


def write_pgm(path, values):
    """ASCII portable graymap of a 2-d array already scaled to 0..255."""
    values = np.asarray(values, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as f:
        f.write("P2\n")
        f.write(f"{values.shape[1]} {values.shape[0]}\n255\n")
        for row in values:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def read_pgm(path):
    with open(path, encoding="utf-8") as f:
        tokens = f.read().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4 : 4 + w * h]]).reshape(h, w)
    if maxval != 255 or data.size != w * h:
        raise ValueError(f"{path}: malformed graymap")
    return data


def heatmap_rows(dump: AttentionDump, layer: int | None = None, head: int | None = None):
    """Per-generated-token visual weight vectors, averaged over the selected
    layer's heads (default: top layer, all heads)."""
    visual = [r for r in dump.records if r.branch == "visual"]
    if not visual:
        return None
    layers = sorted({r.layer for r in visual})
    layer = layers[-1] if layer is None else layer
    chosen = [
        r for r in visual if r.layer == layer and (head is None or r.head == head)
    ]
    if not chosen:
        raise ValueError(f"no visual records for layer {layer}, head {head}")
    return np.mean([r.weights for r in chosen], axis=0)


def export_attention(
    cfg: ModelConfig,
    params: ModelParams,
    out_dir,
    src_ids=None,
    grid=None,
    src_tokens=None,
    tgt_vocab: Vocabulary | None = None,
    layer: int | None = None,
    head: int | None = None,
    instance_id: str = "0",
    max_len: int | None = None,
):
    """Greedy-decodes one instance with weight capture and writes the dump
    plus per-token visual heatmaps. Returns (AttentionDump, written paths)."""
    os.makedirs(out_dir, exist_ok=True)
    out, records = greedy_decode(
        params, cfg, src_ids=src_ids, grid=grid, max_len=max_len, capture=True
    )
    n_rows = records[0].weights.shape[0] if records else len(out)
    gen_ids = list(out) + [EOS_ID] * (n_rows - len(out))  # EOS completes the last row
    if tgt_vocab is not None:
        gen_tokens = [tgt_vocab.token_of(i) for i in gen_ids]
    else:
        gen_tokens = [str(i) for i in gen_ids]
    if src_tokens is None:
        src_tokens = [str(i) for i in (src_ids if src_ids is not None else [])]

    grid_len = 0 if grid is None else np.asarray(getattr(grid, "a", grid)).shape[0]
    dump = AttentionDump(instance_id, list(src_tokens), gen_tokens, records, grid_len)

    paths = []
    dump_path = os.path.join(out_dir, f"attention_{instance_id}.txt")
    write_dump(dump, dump_path)
    paths.append(dump_path)

    g = dump.grid_side
    rows = heatmap_rows(dump, layer, head) if g else None
    if rows is not None:
        for j, row in enumerate(rows):
            peak = row.max()
            img = np.round(255.0 * row.reshape(g, g) / peak) if peak > 0 else row.reshape(g, g)
            p = os.path.join(out_dir, f"visual_{instance_id}_t{j:03d}.pgm")
            write_pgm(p, img)
            paths.append(p)
    return dump, paths
