"""Dense tensors with reverse-mode differentiation over a recorded tape.

Every differentiable operation returns a new :class:`Tensor` whose ``_ctx``
holds ``(op_name, parents, backward_fn)``.  :func:`backward` linearises the
graph reachable from a scalar loss into a :class:`Tape` (topological order,
inputs before outputs) and walks it once in reverse.

Arrays are row-major numpy arrays. The working precision is float32 unless a
:func:`default_dtype` block selects float64 (used by the gradient checks).

Ops report their arithmetic to an optional recorder (see
:mod:`lsformer.metrics`) so FLOPs and spike rates can be attributed to
named layers without any global mutable state.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ConfigError",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "make_op",
    "no_grad",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "matmul",
    "einsum",
    "conv2d",
    "depthwise_conv2d",
    "batchnorm",
    "max_pool2d",
    "avg_pool2d",
    "concat",
    "slice_channels",
    "concat_channels",
    "cross_entropy",
    "recording",
    "scope",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """Hyper-parameters violate a structural constraint."""


_DTYPE: contextvars.ContextVar = contextvars.ContextVar("lsformer_dtype", default=np.float32)
_GRAD_ENABLED: contextvars.ContextVar = contextvars.ContextVar("lsformer_grad", default=True)
_RECORDER: contextvars.ContextVar = contextvars.ContextVar("lsformer_recorder", default=None)
_SCOPE: contextvars.ContextVar = contextvars.ContextVar("lsformer_scope", default=())


def get_default_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype):
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


@contextlib.contextmanager
def recording(recorder):
    """Route op-level arithmetic reports to ``recorder.add(scope, kind, flops, operand)``."""
    token = _RECORDER.set(recorder)
    try:
        yield recorder
    finally:
        _RECORDER.reset(token)


@contextlib.contextmanager
def scope(name: str):
    token = _SCOPE.set(_SCOPE.get() + (name,))
    try:
        yield
    finally:
        _SCOPE.reset(token)


def _report(kind: str, flops: float, operand: np.ndarray | None = None) -> None:
    rec = _RECORDER.get()
    if rec is not None:
        rec.add(".".join(_SCOPE.get()), kind, float(flops), operand)


class Tensor:
    """An n-d array that may participate in the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype.type is not _DTYPE.get():
            arr = arr.astype(_DTYPE.get())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._ctx = None
        t.name = None
        return t

    # -- basic attributes ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_DTYPE.get()))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result; ``backward_fn(g)`` returns one gradient (or None) per parent."""
    out = Tensor._wrap(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = (op, tuple(parents), backward_fn)
    return out


# ---------------------------------------------------------------------------
# tape + backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx[1]:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n._ctx[0] if n._ctx is not None else "leaf" for n in self.nodes]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every taped leaf.

    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient. Returns the tape that was walked.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        _, parents, fn = node._ctx
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"gradient shape {pg.shape} != operand shape {p.shape} in {node._ctx[0]}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return tape


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data
    _report("elementwise", out.size)
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data
    _report("elementwise", out.size)
    sa, sb = a.shape, b.shape
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    _report("elementwise", out.size)

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), bw, "mul")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    _report("elementwise", out.size)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(out, (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return make_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = x.data.transpose(axes)
    return make_op(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_op(np.ascontiguousarray(out), (x,), bw, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def slice_channels(x: Tensor, m: int, n_groups: int, axis: int = 1) -> Tensor:
    """Channel slice of group ``m`` (0-based) out of ``n_groups`` equal groups."""
    c = x.shape[axis]
    if n_groups < 1 or c % n_groups:
        raise ConfigError(f"{c} channels cannot be split into {n_groups} groups")
    if not 0 <= m < n_groups:
        raise ConfigError(f"group index {m} outside 0..{n_groups - 1}")
    w = c // n_groups
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(m * w, (m + 1) * w)
    return getitem(x, tuple(idx))


def concat_channels(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return concat(tensors, axis=axis)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    m, k, p = a.shape[-2], a.shape[-1], b.shape[-1]
    _report("matmul", 2 * math.prod(batch) * m * k * p, _spike_operand(ad, bd))

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "matmul")


def _spike_operand(*arrays: np.ndarray) -> np.ndarray | None:
    """The first operand that is exactly binary (drives synaptic-op accounting)."""
    rec = _RECORDER.get()
    if rec is None:
        return None
    for arr in arrays:
        if _is_binary(arr):
            return arr
    return arrays[0]


def _is_binary(arr: np.ndarray) -> bool:
    return bool(np.all((arr == 0) | (arr == 1)))


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum, taped. Each index may appear at most once per operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for ix, t in ((ia, a), (ib, b)):
        if len(set(ix)) != len(ix):
            raise ShapeError(f"einsum: repeated index in {ix!r}")
        if len(ix) != t.ndim:
            raise ShapeError(f"einsum: {ix!r} does not match operand rank {t.ndim}")
    sizes: dict[str, int] = {}
    for ix, t in ((ia, a), (ib, b)):
        for ch, n in zip(ix, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum: index {ch!r} has extents {sizes[ch]} and {n}")
    ad, bd = a.data, b.data
    out = np.einsum(spec, ad, bd, optimize=True)
    _report("matmul", 2 * math.prod(sizes.values()), _spike_operand(ad, bd))

    def grad_for(target_idx, other_idx, other, target_shape, g):
        keep = "".join(ch for ch in target_idx if ch in out_idx or ch in other_idx)
        r = np.einsum(f"{out_idx},{other_idx}->{keep}", g, other, optimize=True)
        if keep != target_idx:
            for pos, ch in enumerate(target_idx):
                if ch not in keep:
                    r = np.expand_dims(r, pos)
            r = np.broadcast_to(r, target_shape).copy()
        return r

    def bw(g):
        ga = grad_for(ia, ib, bd, ad.shape, g) if a.requires_grad else None
        gb = grad_for(ib, ia, ad, bd.shape, g) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "einsum")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _scatter_windows(dv: np.ndarray, xp_shape, kh, kw, stride, dilation, dtype) -> np.ndarray:
    """Adjoint of :func:`_windows`: dv is [N,C,Ho,Wo,kh,kw]."""
    dxp = np.zeros(xp_shape, dtype=dtype)
    ho, wo = dv.shape[2], dv.shape[3]
    for a in range(kh):
        for b in range(kw):
            r0, c0 = a * dilation, b * dilation
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dv[..., a, b]
    return dxp


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-d cross-correlation of x [N,C_in,H,W] with weight [C_out, C_in/groups, kh, kw]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or c % groups or cout % groups:
        raise ConfigError(f"channels ({c} in, {cout} out) not divisible by groups={groups}")
    if cin_g != c // groups:
        raise ShapeError(f"conv2d: weight expects {cin_g * groups} input channels, input has {c}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding})")
    xd, wd = x.data, weight.data
    xp = _pad(xd, padding)
    win = _windows(xp, kh, kw, stride, dilation, ho, wo)  # [N,C,Ho,Wo,kh,kw]
    depthwise = groups == c == cout and groups > 1
    if depthwise:
        wdw = wd[:, 0]
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for a in range(kh):
            for b in range(kw):
                out += win[..., a, b] * wdw[:, a, b].reshape(1, c, 1, 1)
    elif groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        w2 = wd.reshape(cout, -1)
        out = (cols @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    else:
        og = cout // groups
        wg = win.reshape(n, groups, cin_g, ho, wo, kh, kw)
        out = np.einsum("ngchwab,gocab->ngohw", wg, wd.reshape(groups, og, cin_g, kh, kw), optimize=True)
        out = out.reshape(n, cout, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
    _report("conv", 2 * n * cout * cin_g * kh * kw * ho * wo, _spike_operand(xd))

    def bw(g):
        gx = gw = gb = None
        if depthwise:
            if weight.requires_grad:
                gw = np.empty_like(wd)
                for a in range(kh):
                    for b in range(kw):
                        gw[:, 0, a, b] = (win[..., a, b] * g).sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxp = np.zeros(xp.shape, dtype=xd.dtype)
                for a in range(kh):
                    for b in range(kw):
                        r0, c0 = a * dilation, b * dilation
                        dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += (
                            g * wdw[:, a, b].reshape(1, c, 1, 1)
                        )
                gx = dxp
        elif groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(wd.shape)
            if x.requires_grad:
                dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                gx = _scatter_windows(dcols, xp.shape, kh, kw, stride, dilation, xd.dtype)
        else:
            og = cout // groups
            gg = g.reshape(n, groups, og, ho, wo)
            if weight.requires_grad:
                wg = win.reshape(n, groups, cin_g, ho, wo, kh, kw)
                gw = np.einsum("ngohw,ngchwab->gocab", gg, wg, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                dv = np.einsum("ngohw,gocab->ngchwab", gg, wd.reshape(groups, og, cin_g, kh, kw), optimize=True)
                gx = _scatter_windows(dv.reshape(n, c, ho, wo, kh, kw), xp.shape, kh, kw, stride, dilation, xd.dtype)
        if gx is not None and padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, bw, "conv2d")


def depthwise_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    c = x.shape[1]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ConfigError(f"depthwise conv needs weight [{c},1,k,k], got {weight.shape}")
    return conv2d(x, weight, bias, stride=stride, padding=padding, dilation=dilation, groups=c)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over axes (0, 2, 3) of x [N,C,H,W].

    In training mode the running buffers are updated in place (unbiased
    variance, as is conventional).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        if m == 1:
            raise ShapeError("batch variance undefined: training-mode batchnorm needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    gd = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * gd + beta.data.reshape(1, -1, 1, 1)
    out = out.astype(xd.dtype, copy=False)
    _report("bn", 2 * out.size)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv.reshape(1, -1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(1, -1, 1, 1)
            gx = gx.astype(xd.dtype, copy=False)
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def _pool_geometry(x: Tensor, k: int, stride: int, padding: int):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects [N,C,H,W], got {x.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"invalid pooling window k={k} s={stride} p={padding}")
    h, w = x.shape[2], x.shape[3]
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"pool window {k} larger than padded input {h}x{w} (padding {padding})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return ho, wo


def max_pool2d(x, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max over k x k windows; padding contributes zeros (spike absence)."""
    x = _as_tensor(x)
    ho, wo = _pool_geometry(x, k, stride, padding)
    xd = x.data
    xp = _pad(xd, padding)
    win = _windows(xp, k, k, stride, 1, ho, wo)
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    _report("pool", out.size * k * k)

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for a in range(k):
            for b in range(k):
                sel = arg == a * k + b
                dxp[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += g * sel
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return (dxp,)

    return make_op(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def avg_pool2d(x, k: int, stride: int, padding: int = 0) -> Tensor:
    """Mean over k x k windows, dividing by k*k including padded zeros."""
    x = _as_tensor(x)
    ho, wo = _pool_geometry(x, k, stride, padding)
    xd = x.data
    xp = _pad(xd, padding)
    win = _windows(xp, k, k, stride, 1, ho, wo)
    out = win.sum(axis=(-2, -1)) * (1.0 / (k * k))
    out = out.astype(xd.dtype, copy=False)
    _report("pool", out.size * k * k)

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        gs = g * (1.0 / (k * k))
        for a in range(k):
            for b in range(k):
                dxp[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += gs
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return (dxp,)

    return make_op(np.ascontiguousarray(out), (x,), bw, "avg_pool2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of logits [B,K] against integer labels [B]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return ((g * p / b).astype(logits.dtype, copy=False),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")

