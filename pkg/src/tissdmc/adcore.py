"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive appends exactly one node to the tape of its inputs. A tensor
without a tape is a constant; operations on constants only compute values,
which is how the no-recording forward passes run.

Gradient convention for complex leaves: for a real loss ``L`` and a complex
leaf ``z`` the stored gradient is ``dL/dRe(z) + 1j * dL/dIm(z)``, i.e. twice
the Wirtinger derivative with respect to ``conj(z)``. A gradient step is then
simply ``z - lr * g`` whatever the dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SINGULAR_FLOOR = 1e-12

_op_count = 0


class TapeError(RuntimeError):
    """Raised on malformed tapes, seeds or cross-tape operations."""


def op_count() -> int:
    """Number of primitives evaluated so far, recorded or not."""
    return _op_count


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored as ``(kind, parents, vjp, metas)``; ``parents`` holds the
    node index of each input (``None`` for constants), so parents always
    precede children.
    """

    def __init__(self):
        self.nodes: list[tuple] = []
        self.retained_bytes = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        arr = np.array(value, copy=True)
        self.nodes.append((name or "leaf", (), None, ()))
        self.retained_bytes += arr.nbytes
        return Tensor(arr, self, len(self.nodes) - 1)

    def leaves(self, values: dict) -> dict:
        return {k: self.leaf(v, k) for k, v in values.items()}

    def kinds(self) -> list[str]:
        return [node[0] for node in self.nodes]

    def backward(self, seeds, wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Propagate ``seeds`` (tensor -> output gradient) back to ``wrt``.

        Returns one gradient per requested tensor, zeros where no path exists.
        """
        if not isinstance(seeds, dict):
            seeds = dict(seeds)
        grads: list = [None] * len(self.nodes)
        for t, g in seeds.items():
            if not isinstance(t, Tensor) or t.tape is not self:
                raise TapeError("seed tensor is not an output of this tape")
            g = _fit(np.asarray(g), t.data.shape, np.iscomplexobj(t.data))
            grads[t.index] = g if grads[t.index] is None else grads[t.index] + g
        keep = set()
        for t in wrt:
            if t.tape is not self:
                raise TapeError("requested gradient for a tensor on another tape")
            keep.add(t.index)

        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            if g is None:
                continue
            kind, parents, vjp, metas = self.nodes[i]
            if vjp is None:
                continue
            if i not in keep:
                grads[i] = None
            need = tuple(p is not None for p in parents)
            in_grads = vjp(g, need)
            for p, gi, meta, nd in zip(parents, in_grads, metas, need):
                if not nd or gi is None:
                    continue
                if p >= i:
                    raise TapeError(f"dangling node: parent {p} of node {i}")
                gi = _fit(gi, *meta)
                grads[p] = gi if grads[p] is None else grads[p] + gi

        out = []
        for t in wrt:
            g = grads[t.index]
            if g is None:
                g = np.zeros_like(t.data)
            elif np.iscomplexobj(t.data) and not np.iscomplexobj(g):
                g = g.astype(t.data.dtype)
            out.append(g)
        return out


class Tensor:
    """Immutable array value, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "index")
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None, index: int | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.tape = tape
        self.index = index

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        where = f"node {self.index}" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, {where})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def conj(self):
        return conj(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def value(x) -> np.ndarray:
    """Underlying array of a tensor, or the argument itself."""
    return np.asarray(_data(x))


def const(x) -> Tensor:
    """Detached copy of ``x`` (no tape)."""
    return Tensor(np.asarray(_data(x)))


def _fit(g, shape, is_complex):
    g = np.asarray(g)
    if g.shape != tuple(shape):
        while g.ndim > len(shape):
            g = g.sum(axis=0)
        axes = tuple(ax for ax, n in enumerate(shape) if n == 1 and g.shape[ax] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        if g.shape != tuple(shape):
            raise TapeError(f"gradient shape {g.shape} does not match {shape}")
    if not is_complex and np.iscomplexobj(g):
        g = g.real
    return g


def record(kind: str, inputs: Sequence, out: np.ndarray, vjp: Callable, saved=()) -> Tensor:
    """Wrap a forward value and, when any input is taped, append its node.

    ``vjp(g, need)`` must return one gradient (or ``None``) per input in the
    descent convention; broadcasting and dtype reduction are handled here.
    """
    global _op_count
    _op_count += 1
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError(f"{kind}: inputs live on different tapes")
    out = np.asarray(out)
    if tape is None:
        return Tensor(out)
    parents = tuple(x.index if isinstance(x, Tensor) and x.tape is tape else None for x in inputs)
    metas = tuple((np.shape(_data(x)), np.iscomplexobj(_data(x))) for x in inputs)
    tape.nodes.append((kind, parents, vjp, metas))
    tape.retained_bytes += out.nbytes + int(np.sum([np.asarray(s).nbytes for s in saved]))
    return Tensor(out, tape, len(tape.nodes) - 1)


def _shape_check(kind, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ValueError(f"{kind}: shape mismatch {np.shape(a)} vs {np.shape(b)}") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    _shape_check("add", x, y)
    return record("add", (a, b), x + y, lambda g, need: (g, g))


def sub(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    _shape_check("sub", x, y)
    return record("sub", (a, b), x - y, lambda g, need: (g, -g))


def neg(a) -> Tensor:
    return record("neg", (a,), -_data(a), lambda g, need: (-g,))


def mul(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    _shape_check("mul", x, y)

    def vjp(g, need):
        return (g * np.conj(y) if need[0] else None, g * np.conj(x) if need[1] else None)

    return record("mul", (a, b), x * y, vjp)


def div(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    _shape_check("div", x, y)
    out = x / y

    def vjp(g, need):
        ga = g / np.conj(y) if need[0] else None
        gb = -g * np.conj(out / y) if need[1] else None
        return ga, gb

    return record("div", (a, b), out, vjp)


def conj(a) -> Tensor:
    x = _data(a)
    if not np.iscomplexobj(x):
        return record("conj", (a,), x, lambda g, need: (g,))
    return record("conj", (a,), np.conj(x), lambda g, need: (np.conj(g),))


def _clamp_magnitude(x):
    if np.iscomplexobj(x):
        mag = np.abs(x)
        small = mag < SINGULAR_FLOOR
        if not small.any():
            return x
        return np.where(small, SINGULAR_FLOOR, x)
    small = np.abs(x) < SINGULAR_FLOOR
    if not small.any():
        return x
    return np.where(small, np.where(x < 0, -SINGULAR_FLOOR, SINGULAR_FLOOR), x)


def reciprocal(a) -> Tensor:
    """``1/a`` with ``|a|`` clamped to at least ``SINGULAR_FLOOR``."""
    out = 1.0 / _clamp_magnitude(_data(a))
    return record("reciprocal", (a,), out, lambda g, need: (-g * np.conj(out * out),))


def sqrt(a) -> Tensor:
    """Square root of a non-negative real tensor."""
    x = _data(a)
    if np.iscomplexobj(x):
        raise TypeError("sqrt: complex input not supported")
    out = np.sqrt(np.maximum(x, 0.0))

    def vjp(g, need):
        return (0.5 * g / np.maximum(out, SINGULAR_FLOOR),)

    return record("sqrt", (a,), out, vjp)


def rsqrt(a) -> Tensor:
    """``a ** -0.5`` for real input, clamped to ``a >= SINGULAR_FLOOR``."""
    x = _data(a)
    if np.iscomplexobj(x):
        raise TypeError("rsqrt: complex input not supported")
    out = 1.0 / np.sqrt(np.maximum(x, SINGULAR_FLOOR))
    return record("rsqrt", (a,), out, lambda g, need: (-0.5 * g * out**3,))


def abs2(a) -> Tensor:
    """Squared magnitude, always real."""
    x = _data(a)
    if np.iscomplexobj(x):
        out = x.real**2 + x.imag**2
    else:
        out = x * x
    return record("abs2", (a,), out, lambda g, need: (2.0 * x * g,))


def real(a) -> Tensor:
    x = _data(a)
    return record("real", (a,), np.real(x).copy(), lambda g, need: (g,))


def imag(a) -> Tensor:
    x = _data(a)
    return record("imag", (a,), np.imag(x).copy(), lambda g, need: (1j * g,))


def make_complex(re, im) -> Tensor:
    x, y = _data(re), _data(im)
    if np.iscomplexobj(x) or np.iscomplexobj(y):
        raise TypeError("make_complex: parts must be real")
    _shape_check("make_complex", x, y)
    return record("complex", (re, im), x + 1j * y, lambda g, need: (np.real(g), np.imag(g)))


def sigmoid(a) -> Tensor:
    x = _data(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return record("sigmoid", (a,), out, lambda g, need: (g * out * (1.0 - out),))


def maximum(a, floor) -> Tensor:
    """Elementwise ``max(a, floor)`` with a constant floor (flooring)."""
    x = _data(a)
    c = value(floor)
    if isinstance(floor, Tensor) and floor.tape is not None:
        raise TapeError("maximum: floor must be a constant")
    keep = x >= c
    return record("maximum", (a,), np.where(keep, x, c), lambda g, need: (g * keep,))


def floored(a, floor) -> Tensor:
    """``max(a, floor)`` where the floor may itself depend on recorded values.

    Built as ``max(a - floor, 0) + floor`` so the gradient also reaches the
    floor wherever it is active. Inputs that never fall below the floor are
    returned unchanged.
    """
    if not np.any(_data(a) < value(floor)):
        return a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    return add(maximum(sub(a, floor), 0.0), floor)


def log(a) -> Tensor:
    x = _data(a)
    return record("log", (a,), np.log(x), lambda g, need: (g / np.conj(x),))


def log10(a) -> Tensor:
    x = _data(a)
    return record("log10", (a,), np.log10(x), lambda g, need: (g / (np.conj(x) * np.log(10.0)),))


def log1p(a) -> Tensor:
    x = _data(a)
    return record("log1p", (a,), np.log1p(x), lambda g, need: (g / (1.0 + np.conj(x)),))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return record("exp", (a,), out, lambda g, need: (g * np.conj(out),))


# ----------------------------------------------------------------------------
# reductions and structure


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _data(a)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def vjp(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record("sum", (a,), x.sum(axis=axes, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    x = _data(a)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    shape = x.shape

    def vjp(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return record("mean", (a,), x.mean(axis=axes, keepdims=keepdims), vjp)


def _is_basic(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in items)


def index(a, key) -> Tensor:
    x = _data(a)
    out = x[key]
    basic = _is_basic(key)

    def vjp(g, need):
        full = np.zeros(x.shape, dtype=np.result_type(x.dtype, g.dtype))
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return record("index", (a,), np.array(out, copy=True) if basic else out, vjp)


def transpose(a, axes=None) -> Tensor:
    x = _data(a)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), x.transpose(axes), lambda g, need: (g.transpose(inv),))


def reshape(a, shape) -> Tensor:
    x = _data(a)
    return record("reshape", (a,), x.reshape(shape), lambda g, need: (np.reshape(g, x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [np.asarray(_data(t)) for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def vjp(g, need):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(tensors), out, vjp)


def matmul(a, b) -> Tensor:
    x, y = _data(a), _data(b)
    if x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
        raise ValueError(f"matmul: shape mismatch {x.shape} @ {y.shape}")

    def vjp(g, need):
        ga = g @ np.conj(np.swapaxes(y, -1, -2)) if need[0] else None
        gb = np.conj(np.swapaxes(x, -1, -2)) @ g if need[1] else None
        return ga, gb

    return record("matmul", (a, b), x @ y, vjp)


def inv(a) -> Tensor:
    """Batched matrix inverse over the last two axes."""
    x = _data(a)
    out = np.linalg.inv(x)

    def vjp(g, need):
        oh = np.conj(np.swapaxes(out, -1, -2))
        return (-(oh @ g @ oh),)

    return record("inv", (a,), out, vjp)


def conv1d(x, w, b=None) -> Tensor:
    """'Same'-padded, stride-1 convolution along the last axis.

    ``x``: (batch, in, time), ``w``: (out, in, k) with odd k, ``b``: (out,).
    """
    xd, wd = _data(x), _data(w)
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv1d: shape mismatch {xd.shape} vs {wd.shape}")
    k = wd.shape[2]
    pad = k // 2
    n_time = xd.shape[2]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    # cols: (batch, time, in*k)
    cols = np.stack([xp[:, :, j : j + n_time] for j in range(k)], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(xd.shape[0], n_time, -1)
    wmat = wd.reshape(wd.shape[0], -1)
    out = (cols @ wmat.T).transpose(0, 2, 1)
    inputs = (x, w)
    if b is not None:
        out = out + _data(b)[None, :, None]
        inputs = (x, w, b)

    def vjp(g, need):
        gt = g.transpose(0, 2, 1)  # (batch, time, out)
        gx = gw = gb = None
        if need[0]:
            gcols = (gt @ wmat).reshape(xd.shape[0], n_time, xd.shape[1], k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[:, :, j : j + n_time] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, pad : pad + n_time]
        if need[1]:
            gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(wd.shape)
        if len(need) > 2 and need[2]:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if len(need) > 2 else (gx, gw)

    return record("conv1d", inputs, out, vjp, saved=(cols,))


def conv_transpose1d(x, w, b=None) -> Tensor:
    """Stride-1 transposed convolution, ``w``: (in, out, k), output length = input length."""
    wd = _data(w)
    if wd.ndim != 3:
        raise ValueError("conv_transpose1d: weight must be 3-d")
    flipped = transpose(index(w, (slice(None), slice(None), slice(None, None, -1))), (1, 0, 2))
    return conv1d(x, flipped, b)


# ----------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: list[float] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def grad_check(fn: Callable, leaves: Sequence[np.ndarray], tolerance: float = 1e-6,
               step: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central finite differences.

    ``fn`` takes one tensor per leaf and returns a real scalar tensor. The
    error for a leaf is ``max|g_tape - g_fd| / max(|g_fd|, |g_tape|)`` taken
    over all real and imaginary components.
    """
    leaves = [np.array(v, dtype=np.result_type(v, np.float64)) for v in leaves]
    tape = Tape()
    tensors = [tape.leaf(v) for v in leaves]
    out = fn(*tensors)
    if not isinstance(out, Tensor):
        out = Tensor(np.asarray(out))
    if out.data.size != 1 or np.iscomplexobj(out.data):
        raise ValueError("grad_check: fn must return a real scalar")
    if out.tape is tape:
        grads = tape.backward({out: np.ones_like(out.data)}, tensors)
    else:
        grads = [np.zeros_like(v) for v in leaves]

    def evaluate(vals):
        return float(np.real(value(fn(*[Tensor(v) for v in vals]))).ravel()[0])

    report = GradCheckReport(tolerance=tolerance)
    for k, leaf in enumerate(leaves):
        fd = np.zeros_like(leaf)
        parts = (1.0, 1j) if np.iscomplexobj(leaf) else (1.0,)
        for i in range(leaf.size):
            for part in parts:
                plus = [v.copy() for v in leaves]
                minus = [v.copy() for v in leaves]
                plus[k].flat[i] += step * part
                minus[k].flat[i] -= step * part
                d = (evaluate(plus) - evaluate(minus)) / (2 * step)
                fd.flat[i] += d * part
        diff = np.max(np.abs(grads[k] - fd), initial=0.0)
        scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(grads[k]), initial=0.0))
        report.errors.append(0.0 if diff == 0.0 else diff / max(scale, SINGULAR_FLOOR))
    return report
