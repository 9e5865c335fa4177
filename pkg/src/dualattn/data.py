"""Vocabulary, corpus and visual-feature ingestion, and minibatching.

External formats handled here:

* Parallel corpus: two aligned UTF-8 text files, one sentence per line.
* Visual features ("VFEA"): binary, little-endian --
  magic "VFEA", u32 version=1, u32 count, u32 L, u32 d_feat, then
  count*L*d_feat float32 values, row-major per grid, grids in corpus line
  order.
* Instance manifest: one line per corpus line, ``<kind> <feature-index|->``
  with kind in {multimodal, text_pair, caption}.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .attention import make_causal_mask, make_padding_mask

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
KINDS = ("multimodal", "text_pair", "caption")

VFEA_MAGIC = b"VFEA"
VFEA_VERSION = 1


class FeatureFileError(ValueError):
    """Base error for malformed visual-feature files."""


class FeatureMagicError(FeatureFileError):
    pass


class FeatureExtentError(FeatureFileError):
    pass


class FeatureTruncatedError(FeatureFileError):
    pass


class SequenceTooLong(ValueError):
    pass


class Vocabulary:
    """Bijective token <-> id map with the four reserved ids 0..3."""

    def __init__(self, tokens):
        self.tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token):
        return self.index.get(token, UNK_ID)

    def token_of(self, tid):
        return self.tokens[tid]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens[len(RESERVED) :]:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Whitespace tokens with frequency >= min_count, ordered by frequency
    descending then lexicographic; the four reserved tokens come first."""
    counts = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(line.split())
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode(
    sentence: str,
    vocab: Vocabulary,
    add_bos_eos: bool = False,
    max_len: int | None = None,
    too_long: str = "error",
):
    """Whitespace tokenize to ids; unknown tokens become UNK.

    ``max_len`` counts real tokens (before BOS/EOS framing); overlong input
    raises SequenceTooLong or is truncated, per ``too_long``.
    """
    ids = [vocab.id_of(t) for t in sentence.split()]
    if max_len is not None and len(ids) > max_len:
        if too_long == "truncate":
            ids = ids[:max_len]
        elif too_long == "error":
            raise SequenceTooLong(f"{len(ids)} tokens exceeds max_len {max_len}")
        else:
            raise ValueError(f"too_long must be 'error' or 'truncate', got {too_long!r}")
    if add_bos_eos:
        ids = [BOS_ID] + ids + [EOS_ID]
    return ids


def decode(ids, vocab: Vocabulary) -> str:
    """Ids back to a sentence; PAD/BOS/EOS are dropped."""
    keep = (PAD_ID, BOS_ID, EOS_ID)
    return " ".join(vocab.token_of(i) for i in ids if i not in keep)


# ---------------------------------------------------------------------------
# visual features


@dataclass
class VisualFeatureGrid:
    """One image as L rows of d_feat spatial features."""

    a: np.ndarray  # [L x d_feat] float32

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float32)
        if self.a.ndim != 2:
            raise ValueError(f"grid must be 2-d, got shape {self.a.shape}")
        if not np.isfinite(self.a).all():
            raise ValueError("grid contains non-finite values")


class FeatureSet:
    """All grids of one corpus as a [count x L x d_feat] float32 block."""

    def __init__(self, grids: np.ndarray):
        grids = np.asarray(grids, dtype=np.float32)
        if grids.ndim != 3:
            raise ValueError(f"feature block must be 3-d, got shape {grids.shape}")
        self.grids = grids

    def __len__(self):
        return self.grids.shape[0]

    def __getitem__(self, i) -> VisualFeatureGrid:
        return VisualFeatureGrid(self.grids[i])

    @property
    def grid_len(self):
        return self.grids.shape[1]

    @property
    def d_feat(self):
        return self.grids.shape[2]


def save_visual_features(path, grids):
    grids = np.asarray(grids, dtype="<f4")
    if grids.ndim != 3:
        raise ValueError(f"expected [count x L x d_feat], got shape {grids.shape}")
    count, l, d = grids.shape
    with open(path, "wb") as f:
        f.write(VFEA_MAGIC)
        f.write(struct.pack("<4I", VFEA_VERSION, count, l, d))
        f.write(np.ascontiguousarray(grids).tobytes())


def load_visual_features(path) -> FeatureSet:
    """Reads a VFEA file; grids come back in file (= corpus line) order."""
    with open(path, "rb") as f:
        head = f.read(4)
        if head != VFEA_MAGIC:
            raise FeatureMagicError(f"{path}: bad magic {head!r}")
        raw = f.read(16)
        if len(raw) != 16:
            raise FeatureTruncatedError(f"{path}: truncated header")
        version, count, l, d = struct.unpack("<4I", raw)
        if version != VFEA_VERSION:
            raise FeatureMagicError(f"{path}: unsupported version {version}")
        if count and (l == 0 or d == 0):
            raise FeatureExtentError(f"{path}: zero grid extents ({l} x {d})")
        payload = f.read()
    expected = 4 * count * l * d
    if len(payload) < expected:
        raise FeatureTruncatedError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    if len(payload) > expected:
        raise FeatureExtentError(
            f"{path}: {len(payload) - expected} trailing bytes beyond declared extents"
        )
    grids = np.frombuffer(payload, dtype="<f4").reshape(count, l, d)
    return FeatureSet(grids.copy())


# ---------------------------------------------------------------------------
# instances, manifests, batching


@dataclass
class TrainingInstance:
    """One example: a multimodal triple, a text pair, or a caption pair.
    ``image`` is an index into the corpus feature set."""

    kind: str
    tgt: list
    src: list | None = None
    image: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown instance kind {self.kind!r}")
        need_src = self.kind in ("multimodal", "text_pair")
        if need_src != (self.src is not None):
            raise ValueError(f"{self.kind} instance src mismatch")
        need_img = self.kind in ("multimodal", "caption")
        if need_img != (self.image is not None):
            raise ValueError(f"{self.kind} instance image mismatch")
        if not self.tgt:
            raise ValueError("instance must have a target sequence")


def parse_manifest(path):
    """Yields (kind, feature index or None) per line."""
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[0] not in KINDS:
                raise ValueError(f"{path}:{lineno}: bad manifest line {line.rstrip()!r}")
            idx = None if parts[1] == "-" else int(parts[1])
            entries.append((parts[0], idx))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for kind, idx in entries:
            f.write(f"{kind} {'-' if idx is None else idx}\n")


def load_dataset(
    tgt_path,
    tgt_vocab: Vocabulary,
    src_path=None,
    src_vocab: Vocabulary | None = None,
    manifest_path=None,
    features: FeatureSet | None = None,
    max_len: int = 100,
):
    """Builds TrainingInstances from aligned files.

    Without a manifest every line is multimodal when features are given,
    else a text pair. Overlength lines (per the max_len filter) are dropped.
    Targets get BOS/EOS framing; sources stay bare.
    """
    tgt_lines = _read_lines(tgt_path)
    src_lines = _read_lines(src_path) if src_path else None
    if src_lines is not None and len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"corpus misaligned: {len(src_lines)} source vs {len(tgt_lines)} target lines"
        )
    if manifest_path:
        entries = parse_manifest(manifest_path)
        if len(entries) != len(tgt_lines):
            raise ValueError(
                f"manifest has {len(entries)} lines for {len(tgt_lines)} corpus lines"
            )
    else:
        if features is not None:
            default = "multimodal" if src_lines is not None else "caption"
        else:
            default = "text_pair"
        entries = [(default, i if features is not None else None) for i in range(len(tgt_lines))]

    instances = []
    for i, (kind, feat_idx) in enumerate(entries):
        try:
            tgt = encode(tgt_lines[i], tgt_vocab, add_bos_eos=True, max_len=max_len)
            src = None
            if kind in ("multimodal", "text_pair"):
                if src_lines is None:
                    raise ValueError(f"line {i + 1}: {kind} instance but no source file")
                src = encode(src_lines[i], src_vocab, max_len=max_len)
                if not src:
                    continue
            if feat_idx is not None:
                if features is None:
                    raise ValueError(f"line {i + 1}: manifest references features, none loaded")
                if not 0 <= feat_idx < len(features):
                    raise ValueError(
                        f"line {i + 1}: feature index {feat_idx} outside 0..{len(features) - 1}"
                    )
        except SequenceTooLong:
            continue
        instances.append(TrainingInstance(kind=kind, tgt=tgt, src=src, image=feat_idx))
    return instances


def _read_lines(path):
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


@dataclass
class Batch:
    """Up to B same-kind instances padded to common lengths."""

    kind: str
    tgt_ids: np.ndarray  # [B x n_t] int64, BOS ... EOS then PAD
    tgt_len: np.ndarray  # [B]
    src_ids: np.ndarray | None = None  # [B x n_s]
    src_len: np.ndarray | None = None
    grids: np.ndarray | None = None  # [B x L x d_feat] float32

    @property
    def size(self):
        return self.tgt_ids.shape[0]

    @property
    def src_pad_mask(self):
        """True exactly at padded source positions."""
        if self.src_ids is None:
            return None
        return np.arange(self.src_ids.shape[1]) >= self.src_len[:, None]

    @property
    def tgt_pad_mask(self):
        return np.arange(self.tgt_ids.shape[1]) >= self.tgt_len[:, None]

    @property
    def decoder_in(self):
        return self.tgt_ids[:, :-1]

    @property
    def targets(self):
        return self.tgt_ids[:, 1:]


def batch_masks(batch: "Batch"):
    """(src self mask, decoder self mask, cross text mask) for one batch.

    Decoder-input true lengths are tgt_len - 1 (the final EOS is a target,
    never an attendable key)."""
    src_mask = cross_mask = None
    if batch.src_ids is not None:
        src_mask = make_padding_mask(batch.src_len, batch.src_ids.shape[1])
        cross_mask = src_mask
    m = batch.tgt_ids.shape[1] - 1
    self_mask = make_causal_mask(m) & make_padding_mask(batch.tgt_len - 1, m)
    return src_mask, self_mask, cross_mask


def _pad_block(seqs):
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    lens = np.empty(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        lens[i] = len(s)
    return out, lens


def make_batches(instances, batch_size: int, seed: int, features: FeatureSet | None = None):
    """Seeded shuffle, then kind-homogeneous batches covering every instance
    exactly once; batch order is shuffled too so an epoch interleaves kinds."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(instances))
    by_kind = {}
    for idx in order:
        by_kind.setdefault(instances[idx].kind, []).append(instances[idx])

    groups = []
    for kind in KINDS:
        pool = by_kind.get(kind, [])
        for i in range(0, len(pool), batch_size):
            groups.append(pool[i : i + batch_size])
    rng.shuffle(groups)

    batches = []
    for group in groups:
        kind = group[0].kind
        tgt_ids, tgt_len = _pad_block([g.tgt for g in group])
        src_ids = src_len = grids = None
        if kind in ("multimodal", "text_pair"):
            src_ids, src_len = _pad_block([g.src for g in group])
        if kind in ("multimodal", "caption"):
            if features is None:
                raise ValueError(f"{kind} batch needs a feature set")
            for g in group:
                if g.image >= len(features):
                    raise ValueError(
                        f"feature index {g.image} outside feature file of {len(features)} grids"
                    )
            grids = np.stack([features.grids[g.image] for g in group])
        batches.append(
            Batch(kind=kind, tgt_ids=tgt_ids, tgt_len=tgt_len, src_ids=src_ids,
                  src_len=src_len, grids=grids)
        )
    return batches
