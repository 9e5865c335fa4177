"""Training: smoothed cross entropy, warmup schedule, Adam, and the loop
with kind-homogeneous batches, periodic validation, and best-checkpoint
retention.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import evaluation, kernels
from .checkpoint import save_checkpoint
from .data import PAD_ID, Batch, FeatureSet, batch_masks, make_batches
from .model import ModelConfig, ModelParams, bind_params, translation_forward


class TrainingDiverged(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss ({value}) at optimizer step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    warmup_steps: int = 4000  # finetuning after text-only pretraining: 8000
    label_smoothing: float = 0.1
    selection_metric: str = "bleu4"  # or "perplexity"
    seed: int = 0
    checkpoint_every: int = 1  # epochs between validation/checkpoint points
    grad_clip: float | None = 5.0  # global-norm guard; None disables
    decode_max_len: int = 100

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.selection_metric not in ("bleu4", "perplexity"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


def cross_entropy_loss(logits, targets, pad_id: int = PAD_ID, smoothing: float = 0.0):
    """Mean over non-PAD positions of the label-smoothed NLL:
    (1-eps)*NLL(target) + eps*mean-NLL over the vocabulary."""
    targets = np.asarray(targets, dtype=np.int64)
    active = targets != pad_id
    if not active.any():
        raise ValueError("cross entropy over an all-PAD target")
    return ad.smoothed_cross_entropy(logits, targets, active, smoothing)


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5): linear ramp to the
    peak at step == warmup, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"schedule is defined for step >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class OptimizerState:
    """Per-parameter Adam moments plus the global step counter."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def adam_step(
    params: ModelParams,
    grads: dict,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        kernels.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g.reshape(-1)),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            state.step,
            lr,
            beta1,
            beta2,
            eps,
        )
    return params, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scales all gradients so the global norm is at most max_norm; returns
    the pre-clip norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def batch_loss(pt, cfg: ModelConfig, batch: Batch, smoothing: float, mode="infer", rng=None):
    """Teacher-forced loss of one batch under whichever sources it carries."""
    src_mask, self_mask, cross_mask = batch_masks(batch)
    logits, _ = translation_forward(
        pt,
        cfg,
        batch.decoder_in,
        src_ids=batch.src_ids if batch.kind in ("multimodal", "text_pair") else None,
        grid=batch.grids if batch.kind in ("multimodal", "caption") else None,
        src_mask=src_mask,
        self_mask=self_mask,
        cross_mask=cross_mask,
        mode=mode,
        rng=rng,
    )
    return cross_entropy_loss(logits, batch.targets, PAD_ID, smoothing)


@dataclass
class TrainResult:
    params: ModelParams  # final parameters (mutated in place during training)
    best_params: ModelParams  # snapshot with the best validation metric
    history: list = field(default_factory=list)
    best_metric: float | None = None
    steps: int = 0


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 2654435769, epoch]).generate_state(1)[0])


def _metric_better(name, new, old):
    if old is None:
        return True
    return new > old if name == "bleu4" else new < old


def train(
    cfg: ModelConfig,
    params: ModelParams,
    instances,
    tc: TrainConfig,
    features: FeatureSet | None = None,
    val_instances=None,
    val_features: FeatureSet | None = None,
    out_dir=None,
) -> TrainResult:
    """Runs tc.epochs over seeded kind-homogeneous batches; validates every
    checkpoint_every epochs and keeps the best-metric parameter snapshot.

    With no validation set the "best" snapshot tracks the latest validation
    point. Aborts with TrainingDiverged on a non-finite loss.
    """
    state = OptimizerState(params)
    result = TrainResult(params=params, best_params=params.copy())
    drop_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([tc.seed, 13])))
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "metrics.log"), "a", encoding="utf-8")

    def validate(epoch, mean_loss):
        metric = None
        if val_instances:
            if tc.selection_metric == "perplexity":
                metric = evaluation.perplexity(cfg, result.params, val_instances, val_features)
            else:
                hyps, refs = evaluation.decode_instances(
                    cfg, result.params, val_instances, val_features, tc.decode_max_len
                )
                metric = evaluation.bleu4(hyps, refs).bleu4
            if _metric_better(tc.selection_metric, metric, result.best_metric):
                result.best_metric = metric
                result.best_params = result.params.copy()
        else:
            result.best_params = result.params.copy()
        lr = lr_schedule(max(state.step, 1), cfg.d_model, tc.warmup_steps)
        rec = {
            "step": state.step,
            "epoch": epoch,
            "loss": mean_loss,
            tc.selection_metric: metric,
            "lr": lr,
        }
        result.history.append(rec)
        if log_f is not None:
            fields = " ".join(
                f"{k}={v if v is not None else 'nan'}" for k, v in rec.items()
            )
            log_f.write(fields + "\n")
            log_f.flush()
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "model.dat"), cfg, result.best_params)

    try:
        if tc.epochs == 0:
            validate(0, float("nan"))
        for epoch in range(tc.epochs):
            batches = make_batches(
                instances, tc.batch_size, _epoch_seed(tc.seed, epoch), features
            )
            losses = []
            for batch in batches:
                tape = ad.Tape()
                pt = bind_params(result.params, tape)
                loss = batch_loss(pt, cfg, batch, tc.label_smoothing, "train", drop_rng)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(state.step + 1, value)
                losses.append(value)
                gmap = ad.backward(loss, tape)
                grads = {name: gmap[pt[name].node_id].data for name in result.params}
                if tc.grad_clip:
                    clip_gradients(grads, tc.grad_clip)
                lr = lr_schedule(state.step + 1, cfg.d_model, tc.warmup_steps)
                adam_step(result.params, grads, state, lr)
            if (epoch + 1) % tc.checkpoint_every == 0 or epoch == tc.epochs - 1:
                validate(epoch + 1, float(np.mean(losses)) if losses else float("nan"))
    finally:
        if log_f is not None:
            log_f.close()
    result.steps = state.step
    return result
