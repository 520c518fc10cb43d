"""Minimal reverse-mode autodiff over dense float64 arrays.

A Tape records operations in insertion order (which is a valid topological
order, since operands must exist before the op that consumes them), and
plays backward closures in reverse to accumulate gradients.  Tensors not
attached to a tape are constants: ops on constants skip recording entirely,
so the same numeric code path serves both sampling (no grad) and training.

Tapes are rebuilt per rollout / update step and are single-threaded.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Operand values lie outside the op's domain (e.g. log of x <= 0)."""


class FullyMaskedError(ValueError):
    """A softmax row had every entry masked; no distribution exists."""


MASK_SENTINEL = -1e9  # additive large-negative logit; never literal infinity


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tape:
    """Append-only op record; node ids index into parallel lists."""

    __slots__ = ("_parents", "_backs")

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._backs: list = []

    def __len__(self) -> int:
        return len(self._parents)

    def _record(self, parents: tuple[int, ...], back) -> int:
        self._parents.append(parents)
        self._backs.append(back)
        return len(self._parents) - 1

    def watch(self, t: "Tensor") -> "Tensor":
        """Attach a tensor to this tape as a differentiable leaf.

        Re-watching a tensor already on this tape is a no-op; watching a
        tensor bound to another tape rebinds it (parameters persist across
        steps while tapes do not).
        """
        if t.tape is self and t.node is not None:
            return t
        t.tape = self
        t.node = self._record((), None)
        return t

    def gradients(self, loss: "Tensor", sources: Sequence["Tensor"]) -> list[np.ndarray]:
        """Total derivative of a scalar loss wrt each source tensor.

        Sources that the loss does not reach (or that were never watched)
        get zero gradients of their own shape.  Accumulation is plain
        float64 addition in reverse insertion order, so repeated runs are
        bit-identical.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        grads: list = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(loss.data)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            back = self._backs[nid]
            if back is None:  # leaf
                continue
            for pid, pg in zip(self._parents[nid], back(g)):
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
            grads[nid] = None  # free as we go
        out = []
        for s in sources:
            if s.tape is self and s.node is not None and s.node <= loss.node and grads[s.node] is not None:
                out.append(grads[s.node])
            else:
                out.append(np.zeros_like(s.data))
        return out


class Tensor:
    """Dense float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None) -> None:
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f" node={self.node}"
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; constants auto-wrap
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tp = None
    for t in ts:
        if t.tape is not None and t.node is not None:
            if tp is None:
                tp = t.tape
            elif tp is not t.tape:
                raise ValueError("operands are recorded on different tapes")
    return tp


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, da, db) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"shapes {a.data.shape} and {b.data.shape}: {e}") from None
    tp = _tape_of(a, b)
    if tp is None:
        return Tensor(out)
    parents = []
    backs = []
    if a.node is not None and a.tape is tp:
        parents.append(a.node)
        backs.append(("a", a.data.shape))
    if b.node is not None and b.tape is tp:
        parents.append(b.node)
        backs.append(("b", b.data.shape))
    ad, bd = a.data, b.data

    def back(g):
        outs = []
        for which, shp in backs:
            if which == "a":
                outs.append(_unbroadcast(da(g, ad, bd), shp))
            else:
                outs.append(_unbroadcast(db(g, ad, bd), shp))
        return outs

    return Tensor(out, tp, tp._record(tuple(parents), back))


def add(a, b) -> Tensor:
    """Elementwise a + b with numpy broadcasting."""
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    """Elementwise a - b with numpy broadcasting."""
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    """Elementwise a * b with numpy broadcasting."""
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    """Elementwise a / b with numpy broadcasting."""
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def _unary(a, out, dback) -> Tensor:
    tp = _tape_of(a)
    if tp is None:
        return Tensor(out)
    return Tensor(out, tp, tp._record((a.node,), dback))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _unary(a, -a.data, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    s = float(s)
    return _unary(a, a.data * s, lambda g: (g * s,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive entries")
    out = np.log(a.data)
    ad = a.data
    return _unary(a, out, lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    pos = a.data > 0.0
    return _unary(a, out, lambda g: (g * pos,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative entries")
    out = np.sqrt(a.data)
    return _unary(a, out, lambda g: (g * (0.5 / out),))


def matmul(a, b) -> Tensor:
    """Matrix product with broadcast batch dims: (..., m, k) @ (..., k, n)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    tp = _tape_of(a, b)
    if tp is None:
        return Tensor(out)
    parents = []
    which = []
    if a.node is not None and a.tape is tp:
        parents.append(a.node)
        which.append("a")
    if b.node is not None and b.tape is tp:
        parents.append(b.node)
        which.append("b")
    ad, bd = a.data, b.data

    def back(g):
        outs = []
        for w in which:
            if w == "a":
                ga = g @ np.swapaxes(bd, -1, -2)
                outs.append(_unbroadcast(ga, ad.shape))
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
                outs.append(_unbroadcast(gb, bd.shape))
        return outs

    return Tensor(out, tp, tp._record(tuple(parents), back))


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)
    return _unary(a, out, lambda g: (np.transpose(g, inv),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)
    return _unary(a, out, lambda g: (g.reshape(old),))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axes."""
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shp = a.data.shape
    return _unary(a, out, lambda g: (_expand_reduced(g, shp, axis, keepdims).copy(),))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over the given axes."""
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shp = a.data.shape
    denom = a.data.size / out.size
    return _unary(
        a, out, lambda g: (_expand_reduced(g, shp, axis, keepdims) / denom,)
    )


def _scatter_rows(shape, rows: np.ndarray, g2: np.ndarray) -> np.ndarray:
    # segment-sum via bincount: rows (R,), g2 (R, D) -> (rows_total, D)
    n_rows, d = shape
    offs = rows[:, None] * d + np.arange(d, dtype=np.int64)[None, :]
    flat = np.bincount(offs.ravel(), weights=g2.ravel(), minlength=n_rows * d)
    return flat.reshape(n_rows, d)


def take_along(a, indices, axis: int) -> Tensor:
    """np.take_along_axis as a differentiable gather; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_along indices must be integers")
    if idx.ndim != a.data.ndim:
        raise ShapeError(
            f"indices ndim {idx.ndim} must match operand ndim {a.data.ndim}"
        )
    out = np.take_along_axis(a.data, idx, axis=axis)
    tp = _tape_of(a)
    if tp is None:
        return Tensor(out)
    a_shape = a.data.shape
    ax = axis % a.data.ndim

    def back(g):
        ga = np.zeros(a_shape)
        # fast path: 3d gather of full rows along axis 1 (the hot case)
        if (
            ga.ndim == 3
            and ax == 1
            and idx.shape[-1] == 1
            and idx.shape[0] == a_shape[0]
            and g.shape[-1] == a_shape[-1]
        ):
            b, n, d = a_shape
            rows = (idx[:, :, 0] + np.arange(b, dtype=np.int64)[:, None] * n).ravel()
            ga2 = _scatter_rows((b * n, d), rows, g.reshape(-1, d))
            return (ga2.reshape(a_shape),)
        grids = list(np.ogrid[tuple(slice(s) for s in g.shape)])
        grids[ax] = np.broadcast_to(idx, g.shape)
        np.add.at(ga, tuple(grids), g)
        return (ga,)

    return Tensor(out, tp, tp._record((a.node,), back))


def softmax_temp(u, temperature: float, mask=None, axis: int = -1) -> Tensor:
    """Temperature softmax with optional boolean mask (True = excluded).

    Masked entries receive an additive -1e9 logit before exponentiation and
    come out exactly 0; each row of the result sums to 1.  Stabilised by
    max subtraction.
    """
    u = _as_tensor(u)
    t = float(temperature)
    if not t > 0.0:
        raise DomainError(f"temperature must be positive, got {t}")
    m = None
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        m = np.broadcast_to(m, u.data.shape)
        if np.any(m.all(axis=axis)):
            raise FullyMaskedError("softmax row has every entry masked")
        v = (u.data + MASK_SENTINEL * m) / t
    else:
        v = u.data / t
    v = v - v.max(axis=axis, keepdims=True)
    e = np.exp(v)
    if m is not None:
        e = np.where(m, 0.0, e)
    p = e / e.sum(axis=axis, keepdims=True)
    tp = _tape_of(u)
    if tp is None:
        return Tensor(p)

    def back(g):
        inner = (p * g).sum(axis=axis, keepdims=True)
        return ((p * (g - inner)) / t,)

    return Tensor(p, tp, tp._record((u.node,), back))


class Adam(object):
    """Adam on a fixed parameter list; step() applies a descent update in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} grads, got {len(grads)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# named-tensor container: flat binary checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = b"SADT"
_VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a name -> float64 array mapping as a flat binary container."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<q", d))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors; validates magic and version."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError("not a tensor container (bad magic)")
    if blob[4] != _VERSION:
        raise ValueError(f"unsupported container version {blob[4]}")
    try:
        (count,) = struct.unpack_from("<I", blob, 5)
        off = 9
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            ndim = blob[off]
            off += 1
            shape = struct.unpack_from(f"<{ndim}q", blob, off) if ndim else ()
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            out[name] = arr.copy()
        if off != len(blob):
            raise ValueError("trailing bytes after last tensor")
    except (struct.error, IndexError) as e:
        raise ValueError(f"malformed tensor container: {e}") from None
    return out


def checksum(tensors: Mapping[str, np.ndarray]) -> str:
    """Order-independent fingerprint of a named-tensor mapping."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
