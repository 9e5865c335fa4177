"""Dual-attention multimodal translation, from scratch on numpy.

A small transformer whose decoder cross-attention sums a source-text branch
and a visual-grid branch, with reverse-mode autodiff, mixed-modality
training, BLEU/perplexity evaluation, and attention-map export. Hot kernels
run on numba when available (see ``dualattn.kernels``).
"""

__version__ = "0.1.0"
