"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Operators come
from a fixed catalog (no general broadcasting: shapes are explicit
everywhere), and each op records its inputs and a backward closure whenever
any input participates in gradients. backward() replays the chain rule from
a scalar root; leaf gradients accumulate additively until cleared, so two
forward passes sharing parameters contribute to the same buffers.

Differentiable arguments are Tensors; integer ids and boolean masks are
plain numpy arrays (they carry no gradient). Every op checks its output for
non-finite values and raises NumericalError instead of propagating NaN.
"""

from __future__ import annotations

import numpy as np

NEG_FILL = -1e9  # additive-mask fill; exp(-1e9) underflows to exactly 0.0


class ShapeError(ValueError):
    """Operands do not conform to the operator's shape contract."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or infinity from finite inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small conveniences; the module-level functions are the real catalog.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # isfinite(sum) is a cheap whole-array probe: any NaN/inf poisons the sum.
    if not np.isfinite(arr.sum()):
        raise NumericalError(f"{op}: non-finite values in result")


def _node(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _ensure_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# operator catalog
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D@2D, batch-stacked 3D@3D, or 3D@2D (shared rhs)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def backward(g):
            k, m = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            return g @ bd.T, gb

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    return _node(out, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward(g):
        return g, g

    return _node(out, "add", (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"multiply: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _node(out, "multiply", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s,)

    return _node(out, "scale", (a,), backward)


def transpose(a: Tensor, ax1: int = -2, ax2: int = -1) -> Tensor:
    """Swap two axes (defaults to the last two)."""
    nd = a.data.ndim
    if nd < 2:
        raise ShapeError(f"transpose: rank {nd} unsupported")
    ax1, ax2 = ax1 % nd, ax2 % nd
    if ax1 == ax2:
        raise ShapeError(f"transpose: axes {ax1} and {ax2} must differ")
    out = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _node(out, "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        rest = int(np.prod([s for s in shape if s != -1]))
        if rest == 0 or a.data.size % rest != 0:
            raise ShapeError(f"reshape: {a.data.shape} -> {shape}")
        shape = tuple(a.data.size // rest if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: {a.data.shape} -> {shape}")
    out = a.data.reshape(shape)
    in_shape = a.data.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _node(out, "reshape", (a,), backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    datas = [p.data for p in parts]
    nd = datas[0].ndim
    axis = axis % nd
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if d.ndim != nd or other[:axis] != base[:axis] or other[axis + 1:] != base[axis + 1:]:
            raise ShapeError(f"concat: shapes {[d.shape for d in datas]} along axis {axis}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def backward(g):
        grads = []
        off = 0
        for s in sizes:
            sl = [slice(None)] * nd
            sl[axis] = slice(off, off + s)
            grads.append(g[tuple(sl)])
            off += s
        return tuple(grads)

    return _node(out, "concat", tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = a.data.ndim
    axis = axis % nd
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] on axis {axis} of {a.data.shape}")
    sl = [slice(None)] * nd
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl].copy()
    in_shape = a.data.shape

    def backward(g):
        ga = np.zeros(in_shape)
        ga[sl] = g
        return (ga,)

    return _node(out, "slice", (a,), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table [V, d], integer ids of rank 1 or 2."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table rank {table.data.ndim}")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embedding_lookup: id out of range [0, {v})")
    out = table.data[ids]
    tshape = table.data.shape

    def backward(g):
        gt = np.zeros(tshape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (gt,)

    return _node(out, "embedding_lookup", (table,), backward)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """1-D convolution over time: x [T, Cin] or [B, T, Cin], w [K, Cin, Cout]."""
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: x {x.data.shape}, w {w.data.shape}")
    nb, t, cin = xd.shape
    k, wcin, cout = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: {cin} input channels vs weight {wcin}")
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {t} too short for kernel {k} stride {stride}")
    xp = np.zeros((nb, t + 2 * padding, cin))
    xp[:, padding:padding + t, :] = xd
    gather = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    win = xp[:, gather, :]  # [B, T_out, K, Cin]
    win2 = win.reshape(nb, t_out, k * cin)
    w2 = w.data.reshape(k * cin, cout)
    out = win2 @ w2
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv1d: bias {bias.data.shape} vs {cout} channels")
        out = out + bias.data
    if squeeze:
        out = out[0]

    def backward(g):
        g3 = g[None] if squeeze else g
        gw = win2.reshape(-1, k * cin).T @ g3.reshape(-1, cout)
        gwin = (g3 @ w2.T).reshape(nb, t_out, k, cin)
        gxp = np.zeros((nb, t + 2 * padding, cin))
        for kk in range(k):
            gxp[:, kk:kk + stride * t_out:stride, :] += gwin[:, :, kk, :]
        gx = gxp[:, padding:padding + t, :]
        if squeeze:
            gx = gx[0]
        grads = (gx, gw.reshape(k, cin, cout))
        if bias is not None:
            grads = grads + (g3.sum(axis=(0, 1)),)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, "conv1d", parents, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.data.shape} bias {bias.data.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gh = g * gd
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _node(out, "layer_norm", (x, gain, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _node(out, "relu", (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = x.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, "log_softmax", (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by a constant."""
    if mask.shape != x.data.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs {x.data.shape}")
    out = np.where(mask, value, x.data)
    keep = ~mask

    def backward(g):
        return (g * keep,)

    return _node(out, "masked_fill", (x,), backward)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, in_shape),)

    return _node(np.asarray(out, dtype=np.float64), "reduce_sum", (x,), backward)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)
    in_shape = x.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, in_shape),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, in_shape),)

    return _node(np.asarray(out, dtype=np.float64), "reduce_mean", (x,), backward)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient routes to the first argmax."""
    out = x.data.max(axis=axis)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    in_shape = x.data.shape

    def backward(g):
        gx = np.zeros(in_shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis)
        return (gx,)

    return _node(out, "max_over_axis", (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: p={p} outside [0, 1)")
    if p == 0.0:
        return x
    keep = rng.random(x.data.shape) >= p
    factor = 1.0 / (1.0 - p)
    out = x.data * keep * factor

    def backward(g):
        return (g * keep * factor,)

    return _node(out, "dropout", (x,), backward)


# ---------------------------------------------------------------------------
# reverse-mode sweep
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.

    root must be scalar. Gradients add across repeated calls; clear leaf
    .grad buffers between optimization steps.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root has shape {root.data.shape}, expected scalar")
    if not root.requires_grad:
        return

    # Iterative post-order topological sort (graphs are deeper than the
    # default recursion limit).
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # Leaf: persistent accumulation. Assignment (not +=) keeps
            # aliased pass-through gradients safe.
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
