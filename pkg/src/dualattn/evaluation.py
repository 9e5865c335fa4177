"""Corpus BLEU4 and teacher-forced perplexity."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import BOS_ID, EOS_ID, PAD_ID, FeatureSet, batch_masks, make_batches
from .model import (
    ModelConfig,
    ModelParams,
    bind_params,
    greedy_decode,
    translation_forward,
)


@dataclass
class BleuReport:
    bleu4: float  # in [0, 1]
    precisions: tuple  # modified p_1..p_4
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses, references) -> BleuReport:
    """Corpus-level unsmoothed BLEU4: clipped modified n-gram precisions for
    n = 1..4, geometric mean, brevity penalty exp(1 - r/c) when c < r.

    Any zero precision makes the score 0. An order with no n-grams anywhere
    in the hypothesis corpus is vacuously perfect (nothing attempted, nothing
    wrong), so identity always scores 1 however short the sentences."""
    if len(hypotheses) == 0:
        raise ValueError("bleu4 needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    matched = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _tokens(hyp), _tokens(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    precisions = tuple(m / t if t else 1.0 for m, t in zip(matched, total))
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / max(hyp_len, 1)))
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = bp * float(np.exp(np.mean([np.log(p) for p in precisions])))
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def sentence_bleu4_smoothed(hypothesis, reference) -> float:
    """Add-one smoothed sentence BLEU4. Diagnostics only; model selection
    uses the unsmoothed corpus score."""
    hyp, ref = _tokens(hypothesis), _tokens(reference)
    logs = []
    for n in range(1, 5):
        counts = _ngrams(hyp, n)
        ref_counts = _ngrams(ref, n)
        m = sum(min(c, ref_counts[g]) for g, c in counts.items())
        t = max(len(hyp) - n + 1, 0)
        logs.append(np.log((m + 1.0) / (t + 1.0)))
    bp = 1.0 if len(hyp) >= len(ref) else float(np.exp(1.0 - len(ref) / max(len(hyp), 1)))
    return bp * float(np.exp(np.mean(logs)))


def perplexity(
    cfg: ModelConfig,
    params: ModelParams,
    instances,
    features: FeatureSet | None = None,
    batch_size: int = 32,
) -> float:
    """exp(mean NLL per non-PAD target token) under teacher forcing."""
    if not instances:
        raise ValueError("perplexity needs a nonempty corpus")
    pt = bind_params(params, None)
    total = 0.0
    count = 0
    for batch in make_batches(instances, batch_size, seed=0, features=features):
        src_mask, self_mask, cross_mask = batch_masks(batch)
        logits, _ = translation_forward(
            pt,
            cfg,
            batch.decoder_in,
            src_ids=batch.src_ids,
            grid=batch.grids,
            src_mask=src_mask,
            self_mask=self_mask,
            cross_mask=cross_mask,
        )
        flat = np.ascontiguousarray(
            logits.data.reshape(-1, logits.data.shape[-1])
        )
        targets = np.ascontiguousarray(batch.targets.reshape(-1))
        active = np.ascontiguousarray(targets != PAD_ID)
        nll, _ = kernels.cross_entropy_fwd(flat, targets, active, 0.0)
        if not np.isfinite(nll).all():
            raise FloatingPointError("non-finite log-probability during perplexity")
        total += float(nll.sum())
        count += int(active.sum())
    return float(np.exp(total / count))


def strip_framing(ids):
    return [i for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]


def decode_instances(cfg, params, instances, features=None, max_len: int = 100):
    """Greedy translations plus stripped references, as id sequences."""
    hyps, refs = [], []
    for inst in instances:
        grid = None
        if inst.image is not None:
            grid = features.grids[inst.image]
        out, _ = greedy_decode(params, cfg, src_ids=inst.src, grid=grid, max_len=max_len)
        hyps.append(out)
        refs.append(strip_framing(inst.tgt))
    return hyps, refs
