"""Dense 2-D arrays with a reverse-mode tape.

Every value is a matrix (rows x cols); the primitive set is closed:

    matmul, add, sub, mul, scale, transpose, softmax_rows, sigmoid, relu,
    conv2d, rows, concat, mse, smooth_l1

``add``/``sub``/``mul`` accept a row vector (1 x m) or column vector
(n x 1) as the second operand; no other broadcasting is performed.

Operations are only recorded while a :class:`Tape` is active, so inference
code pays nothing for differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised before a primitive runs when its operand shapes do not conform."""


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


_MAC_COUNTERS: list["MacCounter"] = []


class MacCounter:
    """Counts multiply-accumulates of forward matmuls and convolutions while active."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "MacCounter":
        _MAC_COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _MAC_COUNTERS.remove(self)


def count_macs(n: int) -> None:
    for c in _MAC_COUNTERS:
        c.total += n


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A learnable matrix; always requires grad."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64, copy=True), True, name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitives executed inside ``with Tape():`` and replays them backward.

    Recording order is a topological order, so one reverse pass visits every
    node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def record(self, op, out, inputs, vjp) -> None:
        if self._consumed:
            # a new forward after backward starts a fresh recording
            self.nodes.clear()
            self._consumed = False
        self.nodes.append(_Node(op, out, tuple(inputs), vjp))

    def backward(self, output: Tensor, seed=None, wrt: Sequence[Tensor] | None = None):
        """Return ``{tensor: gradient}`` for every tensor in ``wrt``.

        ``wrt`` defaults to all parameters seen on the tape.  Tensors that the
        output does not depend on get an exact zero gradient.
        """
        if self._consumed:
            raise TapeError("backward already called on this tape; run a new forward first")
        if not self.nodes:
            raise TapeError("tape is empty; nothing was recorded")
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=np.float64).reshape(output.shape)

        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._consumed = True

        if wrt is None:
            wrt = self.parameters()
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for node in self.nodes:
            for inp in node.inputs:
                if isinstance(inp, Parameter):
                    seen.setdefault(id(inp), inp)
        return list(seen.values())


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.record(op, out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# primitives
#
# Each primitive is a class with ``forward`` (returns value plus a context)
# and ``backward`` (maps the output cotangent to input cotangents).  Keeping
# them as classes lets tests swap a backward rule for a negative control.


class Function:
    name = "function"

    @staticmethod
    def forward(*args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g):
        raise NotImplementedError

    @classmethod
    def apply(cls, inputs: Sequence[Tensor], **kwargs) -> Tensor:
        value, ctx = cls.forward(*[t.data for t in inputs], **kwargs)
        return _emit(cls.name, value, inputs, lambda g: cls.backward(ctx, g))


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and shape[0] == g.shape[0]:
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if b.shape == (1, a.shape[1]) or b.shape == (a.shape[0], 1):
        return
    raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not conform")


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(a, b):
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        if _MAC_COUNTERS:
            count_macs(a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return g @ b.T, a.T @ g


class Add(Function):
    name = "add"

    @staticmethod
    def forward(a, b):
        _check_broadcast("add", a, b)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return g, _reduce_to(g, sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(a, b):
        _check_broadcast("sub", a, b)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return g, -_reduce_to(g, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(a, b):
        _check_broadcast("mul", a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return g * b, _reduce_to(g * a, b.shape)


class Scale(Function):
    name = "scale"

    @staticmethod
    def forward(a, c):
        return a * c, c

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(a):
        return a.T.copy(), None

    @staticmethod
    def backward(ctx, g):
        return (g.T,)


class SoftmaxRows(Function):
    """Row-wise softmax; ``mask`` (length cols, True = keep) sends logits to -inf."""

    name = "softmax_rows"

    @staticmethod
    def forward(a, mask=None):
        z = a
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(-1)
            if mask.shape[0] != a.shape[1]:
                raise ShapeError(f"softmax_rows: mask length {mask.shape[0]} != cols {a.shape[1]}")
            if not mask.any():
                raise ShapeError("softmax_rows: mask excludes every column")
            z = np.where(mask[None, :], a, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    @staticmethod
    def backward(ctx, g):
        p = ctx
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(a):
        # split by sign to avoid overflow in exp
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out, out

    @staticmethod
    def backward(ctx, g):
        s = ctx
        return (g * s * (1.0 - s),)


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(a):
        keep = a > 0
        return a * keep, keep

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


class Rows(Function):
    """Row gather (slice or integer index list)."""

    name = "rows"

    @staticmethod
    def forward(a, index=None):
        idx = np.arange(a.shape[0])[index]
        if idx.ndim != 1:
            raise ShapeError("rows: index must select a 1-D set of rows")
        return a[idx], (a.shape, idx)

    @staticmethod
    def backward(ctx, g):
        shape, idx = ctx
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(*arrays, axis=0):
        other = 1 - axis
        sizes = {a.shape[other] for a in arrays}
        if len(sizes) != 1:
            raise ShapeError(f"concat: mismatched extents along axis {other}: {sorted(sizes)}")
        splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis), (axis, splits)

    @staticmethod
    def backward(ctx, g):
        axis, splits = ctx
        return np.split(g, splits, axis=axis)


class MSE(Function):
    name = "mse"

    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
        d = a - b
        return np.array([[np.mean(d * d)]]), d

    @staticmethod
    def backward(ctx, g):
        d = ctx
        ga = g[0, 0] * 2.0 * d / d.size
        return ga, -ga


class SmoothL1(Function):
    name = "smooth_l1"

    @staticmethod
    def forward(a, b, beta=1.0):
        if a.shape != b.shape:
            raise ShapeError(f"smooth_l1: shapes {a.shape} and {b.shape} differ")
        d = a - b
        ad = np.abs(d)
        val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
        return np.array([[val.mean()]]), (d, beta)

    @staticmethod
    def backward(ctx, g):
        d, beta = ctx
        ga = g[0, 0] * np.where(np.abs(d) < beta, d / beta, np.sign(d)) / d.size
        return ga, -ga


class Conv2d(Function):
    """Grouped 2-D convolution, stride 1, 'same' zero padding.

    The image travels as an (H*W) x C_in matrix in row-major cell order; the
    weight is C_out x (C_in/groups * k * k) with column order (c_in, ky, kx);
    the bias is 1 x C_out.
    """

    name = "conv2d"

    @staticmethod
    def forward(x, w, b, H=0, W=0, groups=1, k=3):
        hw, cin = x.shape
        cout = w.shape[0]
        if hw != H * W:
            raise ShapeError(f"conv2d: input has {hw} cells, expected {H}x{W}")
        if cin % groups or cout % groups:
            raise ShapeError(f"conv2d: channels {cin}->{cout} not divisible by groups={groups}")
        cig, cog = cin // groups, cout // groups
        if w.shape[1] != cig * k * k:
            raise ShapeError(f"conv2d: weight has {w.shape[1]} columns, expected {cig * k * k}")
        if b.shape != (1, cout):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected (1, {cout})")
        p = k // 2
        img = np.pad(x.reshape(H, W, cin), ((p, p), (p, p), (0, 0)))
        # cols[h*w, (c, ky, kx)]: each group's block matches the weight's column order
        win = np.lib.stride_tricks.sliding_window_view(img, (k, k), axis=(0, 1))
        cols = win.reshape(hw, cin * k * k)
        n = cig * k * k
        if _MAC_COUNTERS:
            count_macs(hw * cout * n)
        out = np.empty((hw, cout))
        for gi in range(groups):
            out[:, gi * cog : (gi + 1) * cog] = cols[:, gi * n : (gi + 1) * n] @ w[gi * cog : (gi + 1) * cog].T
        out += b
        return out, (cols, w, H, W, groups, k)

    @staticmethod
    def backward(ctx, g):
        cols, w, H, W, groups, k = ctx
        cout = w.shape[0]
        cog = cout // groups
        n = w.shape[1]
        cin = groups * n // (k * k)
        gw = np.empty_like(w)
        gcols = np.empty_like(cols)
        for gi in range(groups):
            gg = g[:, gi * cog : (gi + 1) * cog]
            gw[gi * cog : (gi + 1) * cog] = gg.T @ cols[:, gi * n : (gi + 1) * n]
            gcols[:, gi * n : (gi + 1) * n] = gg @ w[gi * cog : (gi + 1) * cog]
        gcols = gcols.reshape(H, W, cin, k, k)
        p = k // 2
        gimg = np.zeros((H + 2 * p, W + 2 * p, cin))
        for ky in range(k):
            for kx in range(k):
                gimg[ky : ky + H, kx : kx + W, :] += gcols[:, :, :, ky, kx]
        gx = gimg[p : p + H, p : p + W, :].reshape(H * W, cin)
        return gx, gw, g.sum(axis=0, keepdims=True)


# functional surface ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply((a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply((a, _wrap(b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply((a, _wrap(b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply((a, _wrap(b)))


def scale(a: Tensor, c: float) -> Tensor:
    return Scale.apply((a,), c=float(c))


def transpose(a: Tensor) -> Tensor:
    return Transpose.apply((a,))


def softmax_rows(a: Tensor, mask=None) -> Tensor:
    return SoftmaxRows.apply((a,), mask=mask)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply((a,))


def relu(a: Tensor) -> Tensor:
    return ReLU.apply((a,))


def rows(a: Tensor, index) -> Tensor:
    return Rows.apply((a,), index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError("concat: axis must be 0 or 1")
    return Concat.apply(tuple(tensors), axis=axis)


def mse(a: Tensor, b) -> Tensor:
    return MSE.apply((a, _wrap(b)))


def smooth_l1(a: Tensor, b, beta: float = 1.0) -> Tensor:
    return SmoothL1.apply((a, _wrap(b)), beta=beta)


def conv2d(x: Tensor, w: Tensor, b: Tensor, H: int, W: int, groups: int = 1, k: int = 3) -> Tensor:
    return Conv2d.apply((x, w, b), H=H, W=W, groups=groups, k=k)


def init_uniform(rng: np.random.Generator, rows_: int, cols_: int, fan_in: int, name: str) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=(rows_, cols_)), name=name)
