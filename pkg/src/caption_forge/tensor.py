"""Dense tensors with reverse-mode automatic differentiation.

Every numeric value in the toolkit is a ``Tensor``: a float64 numpy array
plus an optional gradient buffer. Operations executed while a ``Tape`` is
active record a backward rule; ``backward(loss, tape)`` replays the rules in
reverse to populate ``grad`` on every reachable tensor that requires it.
With no active tape the same functions run forward-only, which is the
inference path.

Forward outputs are checked for non-finite values: NaN/inf never propagates
silently. Masked softmax applies its mask internally, so intermediate
tensors stay finite even when attention positions are forbidden.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, VocabularyError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-6

_ACTIVE_TAPE: Optional["Tape"] = None


def new_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64: documented, fixed algorithm, replays across runs)."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """Dense n-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __sub__(self, other) -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other) -> "Tensor":
        return multiply(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager; ops executed inside record their backward
    rules. A tape serves exactly one ``backward`` call and is then cleared.
    """

    def __init__(self):
        self._rules: list[Callable[[], None]] = []
        self._consumed = False
        self._outer: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        self._outer = None

    def _record(self, rule: Callable[[], None]) -> None:
        self._rules.append(rule)

    def __len__(self) -> int:
        return len(self._rules)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``."""
    if loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise ConfigError("tape already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise ConfigError("loss was not recorded on a tape (requires_grad is False)")
    loss.grad = np.ones_like(loss.data)
    for rule in reversed(tape._rules):
        rule()
    tape._rules.clear()
    tape._consumed = True


def _finite_check(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor],
          rule_factory: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    """Wrap a forward result; record the backward rule if a tape is active."""
    data = np.asarray(data, dtype=DTYPE)
    _finite_check(data, op)
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(rule_factory(out))
    return out


def _as_constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (only scalar-vs-tensor broadcast occurs)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else g


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors; backward accumulates g@b.T and a.T@g."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        return rule

    return _make(data, "matmul", (a, b), factory)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")

    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad.T)
        return rule

    return _make(a.data.T, "transpose", (a,), factory)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad.reshape(a.shape))
        return rule

    return _make(a.data.reshape(shape), "reshape", (a,), factory)


# ---------------------------------------------------------------------------
# elementwise suite


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
                             "(only identical shapes or tensor-vs-scalar)")


def add(a: Tensor, b) -> Tensor:
    b = _as_constant(b)
    _check_elementwise(a, b, "add")

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g, b.shape))
        return rule

    return _make(a.data + b.data, "add", (a, b), factory)


def subtract(a: Tensor, b) -> Tensor:
    b = _as_constant(b)
    _check_elementwise(a, b, "subtract")

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(-g, b.shape))
        return rule

    return _make(a.data - b.data, "subtract", (a, b), factory)


def multiply(a: Tensor, b) -> Tensor:
    b = _as_constant(b)
    _check_elementwise(a, b, "multiply")

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a._accumulate(_reduce_to(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g * a.data, b.shape))
        return rule

    return _make(a.data * b.data, "multiply", (a, b), factory)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad * s)
        return rule

    return _make(a.data * s, "scale", (a,), factory)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every slice along the last axis (bias-style add)."""
    if v.ndim != 1 or m.shape[-1] != v.shape[0]:
        raise DimensionError(f"add_rowvec: {m.shape} + {v.shape}")

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            if m.requires_grad:
                m._accumulate(g)
            if v.requires_grad:
                v._accumulate(g.reshape(-1, v.shape[0]).sum(axis=0))
        return rule

    return _make(m.data + v.data, "add_rowvec", (m, v), factory)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad * (1.0 - out.data * out.data))
        return rule

    return _make(data, "tanh", (a,), factory)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad * (a.data > 0.0))
        return rule

    return _make(data, "relu", (a,), factory)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad * out.data * (1.0 - out.data))
        return rule

    return _make(data, "sigmoid", (a,), factory)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.full_like(a.data, float(g)))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
        return rule

    return _make(data, "sum", (a,), factory)


def tensor_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty extent")
    return scale(tensor_sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(
                t.shape[i] != base[i] for i in range(len(base)) if i != axis):
            raise DimensionError(
                f"concat: non-concat extents differ ({base} vs {t.shape} on axis {axis})")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            offset = 0
            for t, ext in zip(tensors, extents):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + ext)
                    t._accumulate(g[tuple(idx)])
                offset += ext
        return rule

    return _make(data, "concat", tuple(tensors), factory)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)
        return rule

    return _make(a.data[idx].copy(), "slice", (a,), factory)


# ---------------------------------------------------------------------------
# embedding


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds into it."""
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    ids = np.asarray(list(ids), dtype=np.int64)
    vocab = table.shape[0]
    for i in ids:
        if i < 0 or i >= vocab:
            raise VocabularyError(f"token id {int(i)} outside vocabulary of size {vocab}")
    data = table.data[ids] if ids.size else np.zeros((0, table.shape[1]), dtype=DTYPE)

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None or not table.requires_grad:
                return
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)
        return rule

    return _make(data, "embedding_lookup", (table,), factory)


# ---------------------------------------------------------------------------
# softmax / normalization


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    ``mask`` (boolean, True = allowed) is applied before exponentiation, so
    forbidden positions get exactly zero weight and never surface as -inf in
    any tensor. A slice with every position forbidden is undefined and raises.
    """
    x = a.data
    if mask is not None:
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != {x.shape}")
        if not np.all(mask.any(axis=axis)):
            raise NumericError("softmax slice with every position masked is undefined")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None or not a.requires_grad:
                return
            s = (g * out.data).sum(axis=axis, keepdims=True)
            a._accumulate((g - s) * out.data)
        return rule

    return _make(y, "softmax", (a,), factory)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log-softmax on a plain array (inference-side scoring helper)."""
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                             f"do not match last extent {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None:
                return
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, d).sum(axis=0))
            if gain.requires_grad:
                gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                gx = g * gain.data
                a._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        return rule

    return _make(y, "layer_norm", (a, gain, bias), factory)


def dropout(a: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def factory(out: Tensor):
        def rule():
            if out.grad is not None and a.requires_grad:
                a._accumulate(out.grad * keep)
        return rule

    return _make(a.data * keep, "dropout", (a,), factory)


# ---------------------------------------------------------------------------
# convolution


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Causal 1-D convolution over time: output t reads inputs <= t only.

    x: [T, e], kernel: [w, e, c], bias: [c] -> [T, c]. The input is
    left-padded with w-1 zero frames.
    """
    if kernel.ndim != 3:
        raise DimensionError(f"conv kernel must be [w, e, c], got {kernel.shape}")
    w, e, c = kernel.shape
    if w < 1:
        raise ConfigError(f"kernel width must be >= 1, got {w}")
    if x.ndim != 2 or x.shape[1] != e:
        raise DimensionError(f"conv input {x.shape} does not match kernel {kernel.shape}")
    if bias.shape != (c,):
        raise DimensionError(f"conv bias {bias.shape} does not match {c} channels")
    t_len = x.shape[0]
    xpad = np.vstack([np.zeros((w - 1, e), dtype=DTYPE), x.data])
    out = np.tile(bias.data, (t_len, 1))
    for i in range(w):
        out += xpad[i:i + t_len] @ kernel.data[i]

    def factory(outt: Tensor):
        def rule():
            g = outt.grad
            if g is None:
                return
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
            if kernel.requires_grad:
                dk = np.empty_like(kernel.data)
                for i in range(w):
                    dk[i] = xpad[i:i + t_len].T @ g
                kernel._accumulate(dk)
            if x.requires_grad:
                dxpad = np.zeros_like(xpad)
                for i in range(w):
                    dxpad[i:i + t_len] += g @ kernel.data[i].T
                x._accumulate(dxpad[w - 1:])
        return rule

    return _make(out, "conv1d_causal", (x, kernel, bias), factory)


# ---------------------------------------------------------------------------
# loss


def nll_sum(logits: Tensor, targets: Sequence[int], pad_id: int) -> tuple[Tensor, int]:
    """Summed negative log-likelihood over non-pad positions, plus their count."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [T, |V|], got {logits.shape}")
    t_len, vocab = logits.shape
    targets = np.asarray(list(targets), dtype=np.int64)
    if targets.shape[0] != t_len:
        raise DimensionError(f"{targets.shape[0]} targets for {t_len} logit rows")
    live = targets != pad_id
    n = int(live.sum())
    if n == 0:
        raise DataError("cross-entropy over an all-pad target is undefined")
    for i in targets[live]:
        if i < 0 or i >= vocab:
            raise VocabularyError(f"target id {int(i)} outside vocabulary of size {vocab}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))).reshape(-1)
    safe = np.where(live, targets, 0)
    nll = lse - x[np.arange(t_len), safe]
    total = np.where(live, nll, 0.0).sum()

    def factory(out: Tensor):
        def rule():
            g = out.grad
            if g is None or not logits.requires_grad:
                return
            probs = np.exp(x - m)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(t_len), safe] -= 1.0
            probs[~live] = 0.0
            logits._accumulate(float(g) * probs)
        return rule

    return _make(np.asarray(total), "nll_sum", (logits,), factory), n


def cross_entropy(logits: Tensor, targets: Sequence[int], pad_id: int) -> Tensor:
    """Mean over non-pad positions of -log softmax(logits)[t, target_t]."""
    total, n = nll_sum(logits, targets, pad_id)
    return scale(total, 1.0 / n)


# ---------------------------------------------------------------------------
# weight normalization


def weight_norm_matrix(v: Tensor, g: Tensor) -> Tensor:
    """Effective matrix W = diag(g / ||v||_row) @ v with exact backward."""
    if v.ndim != 2 or g.shape != (v.shape[0],):
        raise DimensionError(f"weight_norm_matrix: v {v.shape}, g {g.shape}")
    norms = np.sqrt((v.data * v.data).sum(axis=1))
    if np.any(norms == 0.0):
        raise NumericError("weight-norm direction matrix has a zero-norm row")
    unit = v.data / norms[:, None]
    w = unit * g.data[:, None]

    def factory(out: Tensor):
        def rule():
            grad = out.grad
            if grad is None:
                return
            along = (grad * unit).sum(axis=1)
            if g.requires_grad:
                g._accumulate(along)
            if v.requires_grad:
                v._accumulate((g.data / norms)[:, None] * (grad - along[:, None] * unit))
        return rule

    return _make(w, "weight_norm_matrix", (v, g), factory)
