"""Synthetic disambiguation task: translation is only solvable with the image.

Each instance pairs a source sentence containing the ambiguous placeholder
token with a visual grid in which exactly one cell carries the one-hot(+noise)
signature of an object; the target is the source with the placeholder
replaced by that object's name. The object is drawn independently of the
text, so no text-only model can beat 1/n_objects on the placeholder slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from .model import ModelConfig, ModelParams, greedy_decode

PLACEHOLDER = "thing"
CONTEXT_WORDS = (
    "a", "the", "small", "big", "old", "near", "by", "holds", "sees", "one",
)


def object_name(i: int) -> str:
    return f"obj{i}"


@dataclass
class SyntheticInstance:
    uid: int
    src: list  # source tokens (contain PLACEHOLDER)
    tgt: list  # source with PLACEHOLDER -> object name
    grid: np.ndarray  # [L x d_feat] float32
    object_index: int
    placeholder_pos: int
    signature_cell: int


@dataclass
class SyntheticTask:
    train: list
    test: list
    n_objects: int
    grid_len: int
    d_feat: int
    noise: float
    seed: int

    @property
    def object_names(self):
        return [object_name(i) for i in range(self.n_objects)]


def _make_instance(rng, uid, n_objects, grid_len, d_feat, noise):
    n_ctx = int(rng.integers(3, 7))
    words = [CONTEXT_WORDS[int(k)] for k in rng.integers(0, len(CONTEXT_WORDS), n_ctx)]
    pos = int(rng.integers(0, n_ctx + 1))
    obj = int(rng.integers(0, n_objects))
    cell = int(rng.integers(0, grid_len))

    src = words[:pos] + [PLACEHOLDER] + words[pos:]
    tgt = words[:pos] + [object_name(obj)] + words[pos:]
    grid = (noise * rng.standard_normal((grid_len, d_feat))).astype(np.float32)
    grid[cell, obj] += 1.0
    return SyntheticInstance(uid, src, tgt, grid, obj, pos, cell)


def generate_synthetic_task(
    seed: int,
    n_train: int,
    n_test: int,
    n_objects: int = 8,
    grid_len: int = 8,
    d_feat: int = 16,
    noise: float = 0.1,
) -> SyntheticTask:
    """Instances get unique ids; train and test splits are disjoint by id."""
    if n_objects < 2:
        raise ValueError(f"need at least 2 objects, got {n_objects}")
    if d_feat < n_objects:
        raise ValueError(f"d_feat {d_feat} too narrow for {n_objects} object signatures")
    rng = np.random.Generator(np.random.PCG64(seed))
    train = [_make_instance(rng, i, n_objects, grid_len, d_feat, noise) for i in range(n_train)]
    test = [
        _make_instance(rng, n_train + i, n_objects, grid_len, d_feat, noise)
        for i in range(n_test)
    ]
    return SyntheticTask(train, test, n_objects, grid_len, d_feat, noise, seed)


def grid_lookup_oracle(grid: np.ndarray, n_objects: int) -> int:
    """Non-learned reference: the object whose signature dimension carries
    the strongest cell activation anywhere in the grid."""
    block = np.asarray(grid)[:, :n_objects]
    return int(np.unravel_index(np.argmax(block), block.shape)[1])


def write_split(instances, prefix):
    """Writes <prefix>.src/.tgt/.manifest/.vfea for one split."""
    with open(f"{prefix}.src", "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(" ".join(inst.src) + "\n")
    with open(f"{prefix}.tgt", "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(" ".join(inst.tgt) + "\n")
    D.write_manifest(f"{prefix}.manifest", [("multimodal", i) for i in range(len(instances))])
    D.save_visual_features(f"{prefix}.vfea", np.stack([inst.grid for inst in instances]))


def task_vocabularies(task: SyntheticTask):
    """Closed vocabularies covering both splits (frequency then lexicographic)."""
    src_lines = [" ".join(i.src) for i in task.train + task.test]
    tgt_lines = [" ".join(i.tgt) for i in task.train + task.test]
    # object names may be arbitrarily rare in a small split; force them in
    tgt_lines += [" ".join(task.object_names)]
    return D.build_vocab(src_lines), D.build_vocab(tgt_lines)


def to_training_instances(instances, src_vocab, tgt_vocab, with_image=True):
    """Synthetic instances as multimodal (or text-only) TrainingInstances,
    paired with a FeatureSet in matching order."""
    out = []
    grids = []
    for n, inst in enumerate(instances):
        src = D.encode(" ".join(inst.src), src_vocab)
        tgt = D.encode(" ".join(inst.tgt), tgt_vocab, add_bos_eos=True)
        if with_image:
            out.append(D.TrainingInstance(kind="multimodal", tgt=tgt, src=src, image=n))
            grids.append(inst.grid)
        else:
            out.append(D.TrainingInstance(kind="text_pair", tgt=tgt, src=src))
    features = D.FeatureSet(np.stack(grids)) if grids else None
    return out, features


def placeholder_accuracy(
    cfg: ModelConfig,
    params: ModelParams,
    instances,
    src_vocab,
    tgt_vocab,
    use_image: bool = True,
    max_len: int | None = None,
) -> float:
    """Fraction of instances whose greedy translation names the right object
    at the placeholder slot."""
    if not instances:
        raise ValueError("no instances to score")
    hits = 0
    for inst in instances:
        src = D.encode(" ".join(inst.src), src_vocab)
        grid = inst.grid if use_image else None
        out, _ = greedy_decode(params, cfg, src_ids=src, grid=grid, max_len=max_len)
        want = tgt_vocab.id_of(object_name(inst.object_index))
        if inst.placeholder_pos < len(out) and out[inst.placeholder_pos] == want:
            hits += 1
    return hits / len(instances)
