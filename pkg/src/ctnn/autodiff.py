"""Dense float64 tensors with a define-by-run reverse-mode tape.

Shapes never broadcast implicitly. The only mixed-shape arithmetic allowed is
tensor-with-scalar (a Python number or a 0-d tensor). Anything else has to be
reshaped or expanded with :func:`broadcast_to` first.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DetachedTensor, NonFiniteValue, NotScalarLoss, ShapeMismatch

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable ops. Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.freed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        if s and s[-1] is self:
            s.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def free(self):
        for n in self.nodes:
            n.out._node = None
        self.nodes = []
        self.freed = True


class Tensor:
    """A float64 array, optionally a trainable leaf or the output of a recorded op."""

    __slots__ = ("data", "trainable", "grad", "_node", "_tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.trainable = trainable
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: Tape | None = None
        self.name = name

    # hashing by identity so tensors can key gradient maps
    __hash__ = object.__hash__

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.trainable or self._node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        if isinstance(o, (int, float, np.floating, np.integer)):
            return mul(self, 1.0 / float(o))
        return mul(self, reciprocal(as_tensor(o)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        node = _Node(out, tuple(parents), vjp)
        out._node = node
        out._tape = tape
        tape.nodes.append(node)
    return out


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.ndim == 0
    return np.ndim(x) == 0


def _unscalar(g, shape):
    """Reduce a gradient to ``shape`` when the operand was a 0-d scalar."""
    if shape == ():
        return np.asarray(g.sum())
    return g


# elementwise arithmetic


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _record(ad * bd, (a, b), lambda g: (_unscalar(g * bd, sa), _unscalar(g * ad, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    r = 1.0 / a.data
    return _record(r, (a,), lambda g: (-g * r * r,))


def square(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return _record(d * d, (a,), lambda g: (2.0 * g * d,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _record(r, (a,), lambda g: (g * 0.5 / r,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _record(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


# nonlinearities


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return _record(np.log(d), (a,), lambda g: (g / d,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``. ``mask`` (bool, same shape) marks admissible entries.

    Entries outside the mask get probability 0; a slice with no admissible
    entry is all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeMismatch(f"softmax mask shape {mask.shape} != {x.shape}")
        x = np.where(mask, x, -np.inf)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(x - mx)
    z = e.sum(axis=axis, keepdims=True)
    s = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), vjp)


# linear algebra


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)``, ``(n, k) @ (..., k, m)``, or equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim >= 2, got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {A.shape} @ {B.shape}")
    if not (B.ndim == 2 or A.ndim == 2 or A.shape[:-2] == B.shape[:-2]):
        raise ShapeMismatch(f"matmul batch dims differ: {A.shape} @ {B.shape}")
    out = A @ B

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if A.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *A.shape).sum(axis=0)
        if B.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *B.shape).sum(axis=0)
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatch(f"transpose needs ndim >= 2, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def outer(a, b) -> Tensor:
    """``(..., m)`` and ``(..., n)`` with equal leading dims to ``(..., m, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"outer: incompatible shapes {a.shape}, {b.shape}")
    A, B = a.data, b.data
    out = A[..., :, None] * B[..., None, :]
    return _record(out, (a, b), lambda g: ((g * B[..., None, :]).sum(-1), (g * A[..., :, None]).sum(-2)))


# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"cannot reshape {old} to {shape}") from e
    return _record(out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast following numpy rules; the gradient sums back."""
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeMismatch(f"cannot broadcast {old} to {shape}") from e
    lead = len(shape) - len(old)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _record(out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ex = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(ex, axis=axis)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out), (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros(shape)
        ax = axis % len(shape)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        gm = gm.reshape((-1,) + gm.shape[idx.ndim:])
        np.add.at(np.moveaxis(full, ax, 0), idx.reshape(-1), gm)
        return (full,)

    return _record(out, (a,), vjp)


def segment_sum(a, segments, num_segments: int) -> Tensor:
    """Sum rows of ``a`` (axis 0) into ``num_segments`` buckets, in row order."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise ShapeMismatch(f"segment ids {seg.shape} do not match rows {a.shape[0]}")
    out = np.zeros((num_segments,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return _record(out, (a,), lambda g: (g[seg],))


# losses


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _record(np.asarray((diff * diff).sum() / n), (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``(B, C)`` logits against integer labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, labels {y.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    B = len(y)
    loss = (lse - z[np.arange(B), y]).mean()
    p = np.exp(z - lse[:, None])

    def vjp(g):
        d = p.copy()
        d[np.arange(B), y] -= 1.0
        return (g * d / B,)

    return _record(np.asarray(loss), (logits,), vjp)


# backward and gradient checking


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate from a scalar ``loss``; returns ``{trainable leaf: gradient}``.

    Gradients are also stored on each leaf's ``.grad`` (overwritten, not
    accumulated). The tape is freed afterwards.
    """
    if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim != 0:
        raise NotScalarLoss(f"loss must be a 0-d tensor, got shape {getattr(loss, 'shape', None)}")
    if tape.freed or loss._node is None or loss._tape is not tape:
        raise DetachedTensor("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pg = node.vjp(g)
        for p, gp in zip(node.parents, pg):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = np.asarray(gp, dtype=np.float64)
            if p._node is None and p.trainable:
                leaves[k] = p
    out = {}
    for k, t in leaves.items():
        t.grad = grads[k]
        out[t] = grads[k]
    tape.free()
    return out


def grad_of(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn()`` on a fresh tape; return the loss value and gradients for ``params``."""
    with Tape() as tape:
        loss = fn()
    gm = backward(tape, loss)
    return float(loss.data), [gm.get(p, np.zeros(p.shape)) for p in params]


def gradcheck(fn: Callable, point, epsilon: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients with central differences.

    ``point`` is a tensor or a sequence of tensors; ``fn(point)`` must return
    a scalar tensor. Coordinates are perturbed in place and restored, so
    closures over the same tensors are fine. Returns the max over coordinates
    of ``|ad - fd| / max(1, |ad|, |fd|)``.
    """
    pts = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.trainable for p in pts]
    for p in pts:
        p.trainable = True
    try:
        with Tape() as tape:
            loss = fn(point)
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteValue("function value is not finite")
        gm = backward(tape, loss)
        ads = [gm.get(p, np.zeros(p.shape)) for p in pts]
        coords = [(i, j) for i, p in enumerate(pts) for j in range(p.size)]
        if max_coords is not None and len(coords) > max_coords:
            pick = np.random.Generator(np.random.Philox(seed)).choice(len(coords), max_coords, replace=False)
            coords = [coords[c] for c in sorted(pick)]
        worst = 0.0
        for i, j in coords:
            flat = pts[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = float(fn(point).data)
            flat[j] = orig - epsilon
            fm = float(fn(point).data)
            flat[j] = orig
            fd = (fp - fm) / (2 * epsilon)
            ad = float(ads[i].reshape(-1)[j])
            if not (np.isfinite(fd) and np.isfinite(ad)):
                raise NonFiniteValue(f"non-finite gradient at coordinate {j} of input {i}")
            worst = max(worst, abs(ad - fd) / max(1.0, abs(ad), abs(fd)))
        return worst
    finally:
        for p, s in zip(pts, saved):
            p.trainable = s
