"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation remembers its parents and a closure
mapping the output gradient to one gradient per parent.  ``backward`` walks
the graph in reverse topological order; ``grad`` does the same but returns
the gradients instead of accumulating them, which lets callers run several
independent backward passes over one forward graph.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation received an out-of-range configuration value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    # -- introspection ------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation ----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        for leaf, g in _backprop(self, grad).items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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


def _backprop(root: Tensor, seed=None) -> dict[Tensor, np.ndarray]:
    if not root.requires_grad:
        return {}
    if seed is None:
        seed = np.ones_like(root.data)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def grad(root: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. each of ``wrt`` without touching ``.grad``.

    Leaves the graph is independent of get a zero array.
    """
    leaves = _backprop(root, seed)
    return [leaves[t] if t in leaves else np.zeros_like(t.data) for t in wrt]


@dataclass
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputeGraph:
    """Operation records of the graph feeding ``root``, in topological order."""

    nodes: list[GraphNode] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        return cls([GraphNode(t._op, tuple(id(p) for p in t._parents), id(t))
                    for t in _topo_order(root)])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what}: non-finite input")


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                            _unbroadcast(g, sb) if b.requires_grad else None), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _make(ad * bd, (a, b), back, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def dropout(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with a caller-supplied keep mask (1 = keep)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    scale = np.asarray(mask, dtype=np.float64) / (1.0 - rate)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# -- shape ops ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    fancy = _is_fancy(idx)

    def back(g):
        out = np.zeros(src)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)
    return _make(x.data[idx], (x,), back, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    rows = table.shape

    def back(g):
        out = np.zeros(rows)
        np.add.at(out, ids, g)
        return (out,)
    return _make(table.data[ids], (table,), back, "embedding")


# -- reductions -----------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (np.array(_expand(g, src, axis, keepdims)),), "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    n = x.size if axis is None else np.prod([src[a] for a in np.atleast_1d(axis)])
    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand(g, src, axis, keepdims) / n,), "mean")


def var(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Population variance."""
    xd = x.data
    n = xd.size if axis is None else np.prod([xd.shape[a] for a in np.atleast_1d(axis)])
    centered = xd - xd.mean(axis=axis, keepdims=True)
    return _make(np.mean(centered ** 2, axis=axis, keepdims=keepdims), (x,),
                 lambda g: (2.0 * centered * _expand(g, xd.shape, axis, keepdims) / n,), "var")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over leading axes (``a[..., M, K] @ b[..., K, N]``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation --------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax_rows: NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gw = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gw, gb
    return _make(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


# -- convolution ----------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """B×C×H×W -> B×H×W×(C·9) neighbourhoods under zero padding of width 1."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, h, w, c, 9))
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[..., k] = xp[:, :, dy:dy + h, dx:dx + w].transpose(0, 2, 3, 1)
    return cols.reshape(b, h, w, c * 9)


def _col2im3(cols: np.ndarray, c: int) -> np.ndarray:
    b, h, w, _ = cols.shape
    cols = np.ascontiguousarray(cols.reshape(b, h, w, c, 9).transpose(4, 0, 3, 1, 2))
    xp = np.zeros((b, c, h + 2, w + 2))
    for k in range(9):
        dy, dx = divmod(k, 3)
        xp[:, :, dy:dy + h, dx:dx + w] += cols[k]
    return xp[:, :, 1:-1, 1:-1]


def cdc_conv(x: Tensor, w: Tensor, theta: float = 0.7) -> Tensor:
    """Central difference 3×3 convolution, stride 1, zero padding 1.

    ``y(p0) = sum_n w(pn) x(p0 + pn) - theta * x(p0) * sum_n w(pn)``, which is a
    vanilla convolution whose centre tap is reduced by ``theta * sum(w)``.
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"cdc theta must lie in [0, 1], got {theta}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise DimensionError(f"cdc_conv shape mismatch: input {x.shape}, kernel {w.shape}")
    o, c = w.shape[:2]
    w_eff = w.data.reshape(o, c, 9).copy()
    w_eff[:, :, 4] -= theta * w_eff.sum(axis=2)
    kmat = w_eff.reshape(o, c * 9).T
    cols = _im2col3(x.data)
    y = (cols @ kmat).transpose(0, 3, 1, 2)

    def back(g):
        gx = gw = None
        gl = g.transpose(0, 2, 3, 1)
        if x.requires_grad:
            gx = _col2im3(gl @ kmat.T, c)
        if w.requires_grad:
            d_eff = (gl.reshape(-1, o).T @ cols.reshape(-1, c * 9)).reshape(o, c, 9)
            gw = (d_eff - theta * d_eff[:, :, 4:5]).reshape(o, c, 3, 3)
        return gx, gw
    return _make(np.ascontiguousarray(y), (x, w), back, "cdc_conv")


# -- losses -----------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows of ``logits`` (N×K)."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    logp = log_softmax_rows(logits)
    n = labels.shape[0]
    picked = getitem(logp, (np.arange(n), labels))
    return mul(tsum(picked), -1.0 / n)


def pairwise_distance(a: Tensor, b) -> Tensor:
    """Euclidean distances between rows of ``a`` (N×C) and ``b`` (K×C) -> N×K.

    The gradient at zero distance is taken as zero.
    """
    b = as_tensor(b)
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(d > 0, d, 1.0)

    def back(g):
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0) * g[..., None]
        return (unit.sum(axis=1) if a.requires_grad else None,
                -unit.sum(axis=0) if b.requires_grad else None)
    return _make(d, (a, b), back, "pairwise_distance")


# -- gradient checking ------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], p: Tensor, step: float = 1e-5,
                      components: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` recomputes a scalar from the current contents of ``p.data``.
    ``components`` restricts the comparison to a subset of flat indices.
    """
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("finite_diff_check: non-finite loss")
    analytic = grad(out, [p])[0].reshape(-1)
    flat = p.data.reshape(-1)
    idx = range(flat.size) if components is None else components
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("finite_diff_check: non-finite loss")
        numeric = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1e-12, abs(numeric)))
    return worst
