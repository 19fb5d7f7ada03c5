"""Dense float64 tensors with taped reverse-mode differentiation.

Rank <= 3 arrays and a small set of explicit ops (no implicit
broadcasting beyond what each op documents), recorded on a Wengert-list
tape that is replayed exactly once in reverse.  Everything is 64-bit
and single-threaded-deterministic so gradients can be checked against
central finite differences and reproduced bit-for-bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_NODE_IDS = itertools.count()
_TAPE_STACK: list["Tape"] = []

# Finite-value check after every forward op; cheap at desk scale.
CHECK_FINITE = True

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class InfeasibleMaskError(ValueError):
    """A softmax row with every entry masked out."""


class GradientError(FloatingPointError):
    """Non-finite value met during forward, backward, or an update."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported rank 3 (shape {arr.shape})")
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.ravel()

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class TapeEntry:
    """One recorded op: kind, operand/result node ids, saved activations."""

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    saved: tuple
    backward: Callable


class Tape:
    """Ordered computation record, replayed once in reverse by backward()."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._watched: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d loss / d leaf into every watched leaf's .grad."""
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output_id, None)
            if g is None:
                continue
            for nid, ig in zip(entry.input_ids, entry.backward(g, *entry.saved)):
                if ig is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = ig if acc is None else acc + ig
        for nid, leaf in self._watched.items():
            g = grads.get(nid)
            if g is not None:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, saved: tuple, backward: Callable) -> Tensor:
    # a non-finite entry anywhere poisons the sum, so one reduction suffices
    if CHECK_FINITE and not np.isfinite(out_data.sum()):
        raise GradientError(f"op {op!r} produced a non-finite value")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        for t in inputs:
            if t.requires_grad and t.node_id not in tape._produced:
                tape._watched.setdefault(t.node_id, t)
        tape._produced.add(out.node_id)
        tape.entries.append(TapeEntry(op, tuple(t.node_id for t in inputs), out.node_id, saved, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, (), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, (), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make("mul", (a, b), a.data * b.data, (a.data, b.data),
                 lambda g, ad, bd: (g * bd, g * ad))


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant scalar or same-shape array (no gradient into c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 0 and c.shape != a.data.shape:
        raise ShapeError(f"add_const: constant shape {c.shape} vs tensor {a.data.shape}")
    return _make("add_const", (a,), a.data + c, (), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or same-shape array (no gradient into c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 0 and c.shape != a.data.shape:
        raise ShapeError(f"mul_const: constant shape {c.shape} vs tensor {a.data.shape}")
    return _make("mul_const", (a,), a.data * c, (c,), lambda g, cd: (g * cd,))


def neg(a: Tensor) -> Tensor:
    return mul_const(a, -1.0)


def relu(a: Tensor) -> Tensor:
    return _make("relu", (a,), np.maximum(a.data, 0.0), (a.data,),
                 lambda g, ad: (g * (ad > 0.0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", (a,), y, (y,), lambda g, yd: (g * (1.0 - yd * yd),))


def log(a: Tensor) -> Tensor:
    return _make("log", (a,), np.log(a.data), (a.data,), lambda g, ad: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (np.sign(0) == 0)
    return _make("absolute", (a,), np.abs(a.data), (a.data,),
                 lambda g, ad: (g * np.sign(ad),))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _make("reshape", (a,), out.copy(), (a.data.shape,),
                 lambda g, orig: (g.reshape(orig),))


def transpose_last(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last needs rank >= 2, got {a.data.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _make("transpose_last", (a,), out, (),
                 lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one part")
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in parts], axis=axis)

    def back(g, offs, ax):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offs, axis=ax))

    return _make("concat", tuple(parts), out, (offsets, axis), back)


def slice2d(a: Tensor, rows: tuple[int, int], cols: tuple[int, int]) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice2d needs rank 2, got {a.data.shape}")
    r0, r1 = rows
    c0, c1 = cols
    out = a.data[r0:r1, c0:c1].copy()

    def back(g, shape, r0, r1, c0, c1):
        z = np.zeros(shape, dtype=np.float64)
        z[r0:r1, c0:c1] = g
        return (z,)

    return _make("slice2d", (a,), out, (a.data.shape, r0, r1, c0, c1), back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(a.data[..., start:stop])

    def back(g, shape, start, stop):
        z = np.zeros(shape, dtype=np.float64)
        z[..., start:stop] = g
        return (z,)

    return _make("slice_last", (a,), out, (a.data.shape, start, stop), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (2d,2d), batched (3d,3d), and (3d,2d) operands."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {ad.shape} x {bd.shape}")
    if ad.ndim == 2 and bd.ndim == 2:
        return _make("matmul", (a, b), ad @ bd, (ad, bd),
                     lambda g, x, y: (g @ y.T, x.T @ g))
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: batch dimensions disagree for {ad.shape} x {bd.shape}")
        return _make("matmul", (a, b), ad @ bd, (ad, bd),
                     lambda g, x, y: (g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g))
    if ad.ndim == 3 and bd.ndim == 2:
        return _make("matmul", (a, b), ad @ bd, (ad, bd),
                     lambda g, x, y: (g @ y.T, np.tensordot(x, g, axes=([0, 1], [0, 1]))))
    raise ShapeError(f"matmul: unsupported ranks {ad.shape} x {bd.shape}")


def rowdot(q: Tensor, keys: Tensor) -> Tensor:
    """Per-row dot products: (B,d) x (B,n,d) -> (B,n)."""
    if q.data.ndim != 2 or keys.data.ndim != 3 or q.data.shape != (keys.data.shape[0], keys.data.shape[2]):
        raise ShapeError(f"rowdot: incompatible shapes {q.data.shape} x {keys.data.shape}")
    out = np.einsum("bd,bnd->bn", q.data, keys.data)

    def back(g, qd, kd):
        return (np.einsum("bn,bnd->bd", g, kd), g[:, :, None] * qd[:, None, :])

    return _make("rowdot", (q, keys), out, (q.data, keys.data), back)


def rowmix(w: Tensor, values: Tensor) -> Tensor:
    """Per-row convex mixes: (B,n) weights over (B,n,d) values -> (B,d)."""
    if w.data.ndim != 2 or values.data.ndim != 3 or w.data.shape != values.data.shape[:2]:
        raise ShapeError(f"rowmix: incompatible shapes {w.data.shape} x {values.data.shape}")
    out = np.einsum("bn,bnd->bd", w.data, values.data)

    def back(g, wd, vd):
        return (np.einsum("bd,bnd->bn", g, vd), wd[:, :, None] * g[:, None, :])

    return _make("rowmix", (w, values), out, (w.data, values.data), back)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of x (last axis d)."""
    if v.data.ndim != 1 or x.data.shape[-1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: {x.data.shape} + {v.data.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make("add_rowvec", (x, v), x.data + v.data, (axes,),
                 lambda g, ax: (g, g.sum(axis=ax)))


def add_shared_matrix(x: Tensor, m: Tensor) -> Tensor:
    """Add one (n,n) matrix to every batch slice of a (B,n,n) tensor."""
    if x.data.ndim != 3 or m.data.ndim != 2 or x.data.shape[1:] != m.data.shape:
        raise ShapeError(f"add_shared_matrix: {x.data.shape} + {m.data.shape}")
    return _make("add_shared_matrix", (x, m), x.data + m.data[None], (),
                 lambda g: (g, g.sum(axis=0)))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select one row per batch: (B,n,d)[b, idx[b]] -> (B,d)."""
    if a.data.ndim != 3:
        raise ShapeError(f"gather_rows needs rank 3, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    batch = np.arange(a.data.shape[0])
    out = a.data[batch, idx]

    def back(g, shape, idx, batch):
        # one target row per batch entry, so plain assignment suffices
        z = np.zeros(shape, dtype=np.float64)
        z[batch, idx] = g
        return (z,)

    return _make("gather_rows", (a,), out, (a.data.shape, idx, batch), back)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select one entry per row: (B,n)[b, idx[b]] -> (B,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_last needs rank 2, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    batch = np.arange(a.data.shape[0])
    out = a.data[batch, idx]

    def back(g, shape, idx, batch):
        z = np.zeros(shape, dtype=np.float64)
        z[batch, idx] = g
        return (z,)

    return _make("gather_last", (a,), out, (a.data.shape, idx, batch), back)


def expand_rows(a: Tensor, repeats: int) -> Tensor:
    """Repeat every batch slice of (B,n,d) `repeats` times -> (B*repeats,n,d)."""
    if a.data.ndim != 3:
        raise ShapeError(f"expand_rows needs rank 3, got {a.data.shape}")
    out = np.repeat(a.data, repeats, axis=0)
    b, n, d = a.data.shape
    return _make("expand_rows", (a,), out, (b, repeats, n, d),
                 lambda g, b, r, n, d: (g.reshape(b, r, n, d).sum(axis=1),))


def mean_axis1(a: Tensor) -> Tensor:
    """Mean over the middle axis: (B,n,d) -> (B,d)."""
    if a.data.ndim != 3:
        raise ShapeError(f"mean_axis1 needs rank 3, got {a.data.shape}")
    n = a.data.shape[1]
    out = a.data.mean(axis=1)
    return _make("mean_axis1", (a,), out, (n,),
                 lambda g, n: (np.repeat(g[:, None, :] / n, n, axis=1),))


def repeat_mid(a: Tensor, n: int) -> Tensor:
    """Repeat the middle axis: (B,1,d) -> (B,n,d)."""
    if a.data.ndim != 3 or a.data.shape[1] != 1:
        raise ShapeError(f"repeat_mid needs shape (B,1,d), got {a.data.shape}")
    out = np.repeat(a.data, n, axis=1)
    return _make("repeat_mid", (a,), out, (),
                 lambda g: (g.sum(axis=1, keepdims=True),))


def sum_last(a: Tensor) -> Tensor:
    """Reduce the last axis."""
    out = a.data.sum(axis=-1)
    last = a.data.shape[-1]
    return _make("sum_last", (a,), out, (last,),
                 lambda g, last: (np.repeat(g[..., None], last, axis=-1),))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return _make("sum_all", (a,), out, (a.data.shape,),
                 lambda g, shape: (np.full(shape, g, dtype=np.float64),))


# ---------------------------------------------------------------------------
# normalization and attention pieces
# ---------------------------------------------------------------------------

def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where mask is True get exactly 0.

    `mask` marks *excluded* positions.  Every row must keep at least one
    unmasked entry, otherwise the row has no feasible outcome.
    """
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"masked_softmax: mask shape {mask.shape} vs logits {x.shape}")
        if mask.all(axis=-1).any():
            raise InfeasibleMaskError("masked_softmax: a row has every entry masked")
        x = np.where(mask, -np.inf, x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g, yd):
        dot = (g * yd).sum(axis=-1, keepdims=True)
        return (yd * (g - dot),)

    return _make("masked_softmax", (logits,), y, (y,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.data.shape}/{bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def back(g, xhat, inv, gaind, lead):
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gaind
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return _make("layer_norm", (x, gain, bias), out, (xhat, inv, gain.data, lead), back)


# ---------------------------------------------------------------------------
# optimizer and gradient checking
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 1e-6,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One update; moment buffers advance, gradients are left untouched."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise GradientError(f"parameter {name!r} has no gradient")
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               *, samples: int = 20, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of taped gradients vs central differences.

    `fn` must rebuild the same scalar loss from the current parameter
    values on every call.  Error per sampled coordinate is
    |analytic - numeric| / max(1e-8, |numeric|).
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = {t.node_id: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for t in tensors}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        flat = t.data.ravel()
        count = min(samples, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False) if count < flat.size \
            else np.arange(flat.size)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            hi = float(fn().data)
            flat[idx] = orig - h
            lo = float(fn().data)
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic[t.node_id].ravel()[idx]
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(numeric)))
    return worst
