"""Small reverse-mode differentiation core on top of numpy.

Only the operators needed by the cascade are provided: affine maps,
strided 2-D cross-correlation, elementwise activations, a two-operand
einsum and a few reductions. Every operator records a closure on the
tape that maps the output gradient to the input gradients; `grad` walks
the tape in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward value or a gradient."""


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data, parents, backward, op) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self) -> "Tensor":
        if not self.is_finite():
            raise NonFiniteError(f"non-finite value produced by op {self.op!r}")
        return self

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_coerce(self, other)[1]))

    def __rsub__(self, other):
        return add(_coerce(other, self)[0], neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return tsum(self) * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        grads = _backprop(self)
        for node, g in grads.values():
            if node._backward is None and node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {root.shape}")
    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(root): (root, np.ones_like(root.data))
    }
    for node in reversed(_topo(root)):
        if node._backward is None or id(node) not in grads:
            continue
        g_out = grads[id(node)][1]
        parent_grads = node._backward(g_out)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in backward of op {node.op!r}")
            key = id(parent)
            if key in grads:
                grads[key] = (parent, grads[key][1] + g)
            else:
                grads[key] = (parent, g)
    return grads


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Exact gradients of a scalar ``loss`` with respect to ``params``.

    Parameters the loss does not depend on get a zero gradient.
    """
    grads = _backprop(loss)
    out = []
    for p in params:
        entry = grads.get(id(p))
        out.append(np.zeros_like(p.data) if entry is None else entry[1].astype(p.dtype, copy=False))
    return out


# elementwise ----------------------------------------------------------------


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers take the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else np.float64))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axis), (a,), backward, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function evaluated without overflow for large |z|."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = softmax_array(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(p, (x,), backward, "softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply ``relu``, ``sigmoid`` or ``softmax`` (over the last axis)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


# linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for x of shape (batch, in), w (in, out), b (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match weight shape {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return Tensor._from_op(xd @ wd + b.data, (x, w, b), backward, "affine")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum.

    Every index of each operand must also appear in the other operand or in
    the output, which keeps the adjoint another two-operand einsum.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for mine, other in ((ia, ib), (ib, ia)):
        stray = set(mine) - set(other) - set(out_idx)
        if stray:
            raise ValueError(f"einsum {spec!r}: index {sorted(stray)} only appears once")
    ad, bd = a.data, b.data
    try:
        out = np.einsum(spec, ad, bd, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: shapes {a.shape} and {b.shape}: {exc}") from None

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, ad, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "einsum")


# convolution ------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        return (n - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv2d(x, k, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Strided 2-D cross-correlation with zero padding.

    x: (batch, cin, h, w); k: (cout, cin, kh, kw); bias: (cout,) or None.
    With ``padding="same"`` the output extent is ceil(h / stride).
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input shape {x.shape} has {cin} channels, kernel shape {k.shape} expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {k.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(h, kh, stride), _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    # (n, cin, oh, ow, kh, kw) view of every receptive field
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    kd = k.data
    out = np.tensordot(cols, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, k]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {k.shape}")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            # (n, oh, ow, cin, kh, kw)
            gcols = np.tensordot(g, kd, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt : pt + h, pl : pl + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, parents, backward, "conv2d")


# losses -------------------------------------------------------------------------


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every entry."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred.data - target
    scale = 2.0 / diff.size
    return Tensor._from_op(
        np.asarray(np.mean(diff * diff), dtype=pred.dtype),
        (pred,),
        lambda g: (g * scale * diff,),
        "mse",
    )


# initialisation -------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# optimiser ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam_step: parameter shape {p.shape} vs gradient shape {g.shape}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
