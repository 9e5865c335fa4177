"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: every operation on tensors attached to a :class:`Tape`
appends one entry (input node ids + a backward closure) to that tape, so the
entry list is topologically ordered by construction and the backward sweep
is a single reversed pass that visits each node exactly once.

All arithmetic is float64 (``DTYPE``); gradient-check tolerances elsewhere
assume that. Row-wise inner loops (softmax, layer norm, cross entropy) are
delegated to :mod:`dualattn.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class Tape:
    """Computation record: ordered operations plus registered parameters."""

    def __init__(self):
        self._entries = []  # (out_id, input_ids tuple, backward closure)
        self._n_nodes = 0
        self._params = {}  # node id -> parameter array

    def _new_node(self):
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def parameter(self, array) -> "Tensor":
        """Register a learnable leaf. The array is referenced, not copied,
        and must not be mutated until backward() has run."""
        array = np.asarray(array, dtype=DTYPE)
        t = Tensor(array, tape=self, node_id=self._new_node())
        self._params[t.node_id] = array
        return t

    @property
    def parameters(self):
        return dict(self._params)

    def __len__(self):
        return len(self._entries)


class Tensor:
    """A dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward) -> Tensor:
    """Wrap an op result, recording it when any input lives on a tape.

    ``backward(grad_out)`` must return one gradient (ndarray or None) per
    input, in order; gradients for constant inputs are ignored.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape=tape, node_id=tape._new_node())
    ids = tuple(t.node_id if t.tape is not None else -1 for t in inputs)
    tape._entries.append((out.node_id, ids, backward))
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _result(data, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")

    def backward(g):
        return (g.swapaxes(-1, -2),)

    return _result(x.data.swapaxes(-1, -2), (x,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; either side may carry one leading batch axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul supports rank 2-3, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        da = np.matmul(g, b.data.swapaxes(-1, -2))
        db = np.matmul(a.data.swapaxes(-1, -2), g)
        if da.ndim > a.ndim:
            da = da.sum(axis=0)
        if db.ndim > b.ndim:
            db = db.sum(axis=0)
        return da, db

    return _result(data, (a, b), backward)


def concat_last(parts) -> Tensor:
    """Concatenate along the last axis (multi-head join)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_last needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def backward(g):
        grads, off = [], 0
        for w in widths:
            grads.append(g[..., off : off + w])
            off += w
        return tuple(grads)

    return _result(data, tuple(parts), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(np.asarray(x.data.mean()), (x,), backward)


# ---------------------------------------------------------------------------
# row-wise ops (kernel-backed)


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"softmax_rows needs rank >= 2, got shape {x.shape}")
    y2 = kernels.softmax_fwd(_rows(x.data))
    data = y2.reshape(x.shape)

    def backward(g):
        dx = kernels.softmax_bwd(y2, _rows(g))
        return (dx.reshape(x.shape),)

    return _result(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalisation over the last axis, then affine gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    y2, xhat, inv_std = kernels.layernorm_fwd(_rows(x.data), gain.data, bias.data, eps)
    data = y2.reshape(x.shape)

    def backward(g):
        dx, dgain, dbias = kernels.layernorm_bwd(_rows(g), xhat, inv_std, gain.data)
        return dx.reshape(x.shape), dgain, dbias

    return _result(data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with prob p and scales by 1/(1-p);
    infer mode is the identity."""
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if mode == "infer" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :] with scatter-add backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {vocab}")
    data = table.data[ids]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result(data, (table,), backward)


def smoothed_cross_entropy(logits: Tensor, targets, active=None, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed NLL over active rows: the training loss primitive.

    ``logits`` is [..., V]; ``targets``/``active`` match the leading shape.
    """
    logits = _as_tensor(logits)
    vocab = logits.shape[-1]
    l2 = _rows(logits.data)
    tgt = np.ascontiguousarray(np.asarray(targets, dtype=np.int64).reshape(-1))
    if tgt.shape[0] != l2.shape[0]:
        raise ShapeError(
            f"targets {tgt.shape[0]} rows vs logits {l2.shape[0]} rows"
        )
    if active is None:
        act = np.ones(tgt.shape[0], dtype=np.bool_)
    else:
        act = np.ascontiguousarray(np.asarray(active, dtype=np.bool_).reshape(-1))
    n_active = int(act.sum())
    if n_active == 0:
        raise ValueError("cross entropy over zero active positions")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise ValueError("target id outside vocabulary")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    nll, probs = kernels.cross_entropy_fwd(l2, tgt, act, smoothing)
    data = np.asarray(nll.sum() / n_active)

    def backward(g):
        dl = kernels.cross_entropy_bwd(probs, tgt, act, smoothing, float(g) / n_active)
        return (dl.reshape(logits.shape),)

    return _result(data, (logits,), backward)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor, tape: Tape | None = None) -> dict:
    """Gradients of a recorded scalar w.r.t. every registered parameter.

    Returns the gradient map {parameter node id -> Tensor}; parameters the
    loss does not reach get zero gradients.
    """
    if loss.tape is None:
        raise ValueError("loss is not attached to a computation record")
    if tape is not None and tape is not loss.tape:
        raise ValueError("loss was recorded on a different tape")
    tape = loss.tape
    if loss.data.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    grads = {loss.node_id: np.ones((), dtype=DTYPE)}
    for out_id, input_ids, bwd in reversed(tape._entries):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for nid, gi in zip(input_ids, bwd(g)):
            if nid < 0 or gi is None:
                continue
            acc = grads.get(nid)
            grads[nid] = gi if acc is None else acc + gi

    out = {}
    for nid, arr in tape._params.items():
        g = grads.get(nid)
        out[nid] = Tensor(np.zeros_like(arr) if g is None else g)
    return out
