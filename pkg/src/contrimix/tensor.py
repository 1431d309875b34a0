"""Reverse-mode automatic differentiation over numpy arrays.

Tensors are float32 by default. Every differentiable operation records a tape
node holding its parents and a closure that maps the output gradient to
parent gradients; :meth:`Tensor.backward` sweeps the tape in reverse
topological order. Layout is row-major NHWC throughout.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NonFiniteError, ShapeError, UsageError

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "debug": os.environ.get("CONTRIMIX_DEBUG", "") not in ("", "0"),
    "branches": None,  # list collecting the active branch of each kinked op, when recording
}


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks after every forward op."""
    _state["debug"] = bool(flag)


def _note_branch(mask: np.ndarray) -> None:
    log = _state["branches"]
    if log is not None:
        log.append(mask)


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect which side of its kink every abs/leaky_relu/clip_min element falls on."""
    old = _state["branches"]
    log: list = []
    _state["branches"] = log
    try:
        yield log
    finally:
        _state["branches"] = old


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axes, keepdims)

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that is not part of any tape")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # release the tape as we go
            node._parents = ()
            node._backward = None


def _fail_item(t: Tensor) -> float:
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _state["dtype"] else data.astype(_state["dtype"])
    out.grad = None
    out.op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise --------------------------------------------------------------

def binary_elementwise(a, b, kind: str) -> Tensor:
    """Apply ``a <kind> b`` with numpy-style trailing-dimension broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape} for {kind}") from None
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if kind == "add":
        return _make(ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")
    if kind == "sub":
        return _make(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")
    if kind == "mul":
        return _make(
            ad * bd,
            (a, b),
            lambda g: (
                _unbroadcast(g * bd, sa) if a.requires_grad else None,
                _unbroadcast(g * ad, sb) if b.requires_grad else None,
            ),
            "mul",
        )
    if kind == "div":
        zero = np.argwhere(bd == 0)
        if zero.size:
            raise DomainError(f"division by zero at divisor index {tuple(int(i) for i in zero[0])}")
        out = ad / bd
        return _make(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g / bd, sa) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, sb) if b.requires_grad else None,
            ),
            "div",
        )
    raise UsageError(f"unknown binary op {kind!r}")


def add(a, b) -> Tensor:
    return binary_elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return binary_elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    return binary_elementwise(a, b, "mul")


def div(a, b) -> Tensor:
    return binary_elementwise(a, b, "div")


def unary_elementwise(a: Tensor, kind: str, alpha: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if kind == "exp":
        out = np.exp(x)
        return _make(out, (a,), lambda g: (g * out,), "exp")
    if kind == "log":
        bad = np.argwhere(x <= 0)
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"log of non-positive value {x[idx]!r} at index {idx}")
        return _make(np.log(x), (a,), lambda g: (g / x,), "log")
    if kind == "abs":
        # subgradient at 0 is 0
        _note_branch(np.sign(x))
        return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")
    if kind == "leaky_relu":
        positive = x > 0
        _note_branch(positive)
        slope = positive.astype(x.dtype)
        slope *= 1.0 - alpha
        slope += alpha
        return _make(x * slope, (a,), lambda g: (g * slope,), "leaky_relu")
    if kind == "neg":
        return _make(-x, (a,), lambda g: (-g,), "neg")
    raise UsageError(f"unknown unary op {kind!r}")


def exp(a: Tensor) -> Tensor:
    return unary_elementwise(a, "exp")


def log(a: Tensor) -> Tensor:
    return unary_elementwise(a, "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return unary_elementwise(a, "abs")


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    return unary_elementwise(a, "leaky_relu", alpha=alpha)


def neg(a: Tensor) -> Tensor:
    return unary_elementwise(a, "neg")


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    x = a.data
    keep = x > floor
    _note_branch(keep)
    return _make(np.where(keep, x, floor), (a,), lambda g: (g * keep,), "clip_min")


# -- contractions -------------------------------------------------------------

def tensordot_lc(zc: Tensor, za: Tensor) -> Tensor:
    """Contract the last axis of ``zc`` (L) with the first non-batch axis of ``za``.

    ``zc`` is H×W×L with ``za`` L×C, or N×H×W×L with ``za`` N×L×C (sample n
    paired with sample n). Returns ...×H×W×C.
    """
    if zc.ndim == 3 and za.ndim == 2:
        batched = False
        zcd, zad = zc.data[None], za.data[None]
    elif zc.ndim == 4 and za.ndim == 3:
        batched = True
        zcd, zad = zc.data, za.data
        if zcd.shape[0] != zad.shape[0]:
            raise ShapeError(f"batch size mismatch: content {zc.shape} vs attribute {za.shape}")
    else:
        raise ShapeError(f"tensordot_lc expects (H,W,L)x(L,C) or (N,H,W,L)x(N,L,C), got {zc.shape} and {za.shape}")
    n, h, w, l = zcd.shape
    if zad.shape[1] != l:
        raise ShapeError(f"contraction dimension mismatch: content L={l}, attribute L={zad.shape[1]}")
    c = zad.shape[2]
    flat = zcd.reshape(n, h * w, l)
    out = np.matmul(flat, zad).reshape(n, h, w, c)

    def backward(g):
        g2 = g.reshape(n, h * w, c)
        gzc = np.matmul(g2, zad.transpose(0, 2, 1)).reshape(n, h, w, l) if zc.requires_grad else None
        gza = np.matmul(flat.transpose(0, 2, 1), g2) if za.requires_grad else None
        if not batched:
            gzc = None if gzc is None else gzc[0]
            gza = None if gza is None else gza[0]
        return gzc, gza

    return _make(out if batched else out[0], (zc, za), backward, "tensordot_lc")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)x(k,m), got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None),
        "matmul",
    )


def _pad_amount(k: int, padding: str) -> int:
    if padding == "same":
        return k // 2
    if padding == "valid":
        return 0
    raise UsageError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p:p + h, p:p + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, hp, wp, c = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c), ho, wo


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an N×H×W×Cin batch with a K×K×Cin×Cout kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and KKIO kernel, got {x.shape} and {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {w.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    p = _pad_amount(k, padding)
    n, h, wd, _ = x.shape
    hp, wp = h + 2 * p, wd + 2 * p
    if k > hp or k > wp:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {hp}x{wp}")
    cols, ho, wo = _im2col(_pad_hw(x.data, p), k, stride)
    w2 = w.data.reshape(k * k * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g = np.ascontiguousarray(g)
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # input gradient = correlation of the output gradient with the flipped kernel
                wf = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(k * k * cout, cin)
                gcols, _, _ = _im2col(_pad_hw(g, k - 1 - p), k, 1)
                gx = (gcols @ wf).reshape(n, h, wd, cin)
            else:
                dcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
                gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d")


def _spatial_sum(a3: np.ndarray) -> np.ndarray:
    """Sum an N×S×C array over S with a BLAS ones-vector product; returns N×1×C."""
    ones = np.ones((1, a3.shape[1]), dtype=a3.dtype)
    return np.matmul(ones, a3)


def _group_mean(a3: np.ndarray, groups: int, count: int) -> np.ndarray:
    n, _, c = a3.shape
    s = _spatial_sum(a3)
    if groups != c:
        s = np.repeat(s.reshape(n, 1, groups, c // groups).sum(axis=3), c // groups, axis=2)
    return s / a3.dtype.type(count)


def group_norm(
    x: Tensor,
    groups: int,
    eps: float = 1e-5,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Normalize each sample's channel groups to zero mean, unit variance; then affine."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if groups < 1 or c % groups:
        from .errors import ConfigError

        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    count = h * w * cg
    dt = x.data.dtype
    x3 = x.data.reshape(n, h * w, c)
    mean = _group_mean(x3, groups, count)
    centered = x3 - mean
    inv = 1.0 / np.sqrt(_group_mean(centered * centered, groups, count) + dt.type(eps))
    xhat = centered * inv
    out = xhat.reshape(n, h, w, c)
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g3 = g.reshape(n, h * w, c)
        gw = _spatial_sum(g3 * xhat).sum(axis=0).reshape(c) if weight is not None and weight.requires_grad else None
        gb = _spatial_sum(g3).sum(axis=0).reshape(c) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g3 * weight.data if weight is not None else g3
            m1 = _group_mean(gh, groups, count)
            m2 = _group_mean(gh * xhat, groups, count)
            gx = (inv * (gh - m1 - xhat * m2)).reshape(n, h, w, c)
        return gx, gw, gb

    parents = [x]
    parents.append(weight if weight is not None else Tensor(0.0))
    parents.append(bias if bias is not None else Tensor(0.0))
    return _make(out, parents, backward, "group_norm")


# -- reductions and shape ops ---------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = [axes]
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise UsageError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise UsageError(f"repeated axis in {list(axes)}")
    return tuple(sorted(norm))


def reduce(x: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None); accumulates in float64."""
    ax = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    acc = x.data.astype(np.float64).sum(axis=ax, keepdims=True)
    if kind == "mean":
        acc = acc / count
        scale = 1.0 / count
    elif kind == "sum":
        scale = 1.0
    else:
        raise UsageError(f"unknown reduction {kind!r}")
    out = acc if keepdims else acc.reshape([s for i, s in enumerate(x.shape) if i not in ax])
    in_shape = x.shape
    kept_shape = acc.shape

    def backward(g):
        g = np.asarray(g).reshape(kept_shape)
        return (np.broadcast_to(g * scale, in_shape).astype(x.data.dtype),)

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), backward, kind)


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {in_shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of ``x`` along axis 0."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of N×K logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x K logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match logits {logits.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    per = -logp[np.arange(n), y]
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    if reduction == "none":
        def backward(g):
            return (((probs - onehot) * np.asarray(g, dtype=np.float64)[:, None]).astype(logits.data.dtype),)
        return _make(per.astype(logits.data.dtype), (logits,), backward, "cross_entropy")
    if reduction == "mean":
        def backward(g):
            return (((probs - onehot) * (float(g) / n)).astype(logits.data.dtype),)
        return _make(np.asarray(per.mean(), dtype=logits.data.dtype), (logits,), backward, "cross_entropy")
    raise UsageError(f"unknown reduction {reduction!r}")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    rtol: float
    worst: tuple[int, int] | None = None  # (input index, flat element index)
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err <= self.rtol


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    rtol: float = 1e-3,
    max_elements: int | None = None,
    seed: int = 0,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Runs in float64. The relative error of an element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-4 * scale)`` where
    ``scale`` is the largest numeric gradient magnitude; the floor keeps
    near-zero coordinates from dominating. ``max_elements`` caps how many
    coordinates per input are perturbed (sampled with ``seed``).

    With ``skip_kinks`` a coordinate is dropped when some abs, leaky_relu or
    clip_min element sits on different sides of its kink at ``x + h`` and
    ``x - h``: the central difference is not a derivative estimate there.
    Dropped coordinates are counted in ``n_skipped``.
    """
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        base = [Tensor(x.data.astype(np.float64), requires_grad=True) for x in xs]
        out = f(*base)
        if out.data.size != 1:
            raise UsageError(f"gradient_check needs a scalar function, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise NonFiniteError(f"f(x) = {out.data!r} is not finite; gradient check aborted")
        out.backward()
        analytic = [np.zeros_like(b.data) if b.grad is None else b.grad for b in base]

        numeric = []
        picks = []
        skipped = 0
        for xi, b in enumerate(base):
            flat_n = b.data.size
            if max_elements is not None and flat_n > max_elements:
                pick = np.sort(rng.choice(flat_n, size=max_elements, replace=False))
            else:
                pick = np.arange(flat_n)
            picks.append(pick)
            vals = np.empty(len(pick))
            smooth = np.ones(len(pick), dtype=bool)
            with no_grad():
                for j, e in enumerate(pick):
                    arrs = [bb.data.copy() for bb in base]
                    flat = arrs[xi].reshape(-1)
                    flat[e] += h
                    with record_branches() as br_p:
                        fp = float(f(*[Tensor(a) for a in arrs]).data)
                    flat[e] -= 2 * h
                    with record_branches() as br_m:
                        fm = float(f(*[Tensor(a) for a in arrs]).data)
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NonFiniteError(f"non-finite value near input {xi} element {e}")
                    vals[j] = (fp - fm) / (2 * h)
                    if skip_kinks:
                        smooth[j] = _same_branches(br_p, br_m)
            numeric.append(vals[smooth])
            picks[-1] = pick[smooth]
            skipped += int((~smooth).sum())

    scale = max((np.abs(v).max() if v.size else 0.0) for v in numeric)
    floor = max(1e-4 * scale, 1e-12)
    max_rel = 0.0
    max_abs = 0.0
    worst = None
    count = 0
    for xi, (a, nv, pick) in enumerate(zip(analytic, numeric, picks)):
        av = a.reshape(-1)[pick]
        diff = np.abs(av - nv)
        denom = np.maximum(np.maximum(np.abs(av), np.abs(nv)), floor)
        rel = diff / denom
        count += len(pick)
        if rel.size and rel.max() > max_rel:
            max_rel = float(rel.max())
            worst = (xi, int(pick[int(rel.argmax())]))
        if diff.size:
            max_abs = max(max_abs, float(diff.max()))
    return GradCheckReport(max_rel_err=max_rel, max_abs_err=max_abs, n_checked=count, rtol=rtol, worst=worst, n_skipped=skipped)
