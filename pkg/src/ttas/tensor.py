"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Only the handful of operations the segmentation network and its losses need
are provided. Every op records a node carrying a monotonically increasing id,
so the construction order of any graph can be recovered and ``backward``
walks it in exactly the reverse order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

EPS = 1e-7

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class EmptyReductionError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.node_id = next(_node_ids)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            for p, pg in zip(parents, backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64)
                else:
                    p.grad = p.grad + pg

        out._backward = _bw
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent == 2:
        return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))
    return _make(a.data ** exponent, (a,), "pow",
                 lambda g: (exponent * a.data ** (exponent - 1) * g,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu`` or ``sigmoid``.

    The sigmoid is clamped to ``[EPS, 1 - EPS]`` so downstream logarithms stay
    finite; the gradient is zero where the clamp is active.
    """
    x = as_tensor(x)
    if kind == "relu":
        keep = x.data > 0
        return _make(np.where(keep, x.data, 0.0), (x,), "relu", lambda g: (g * keep,))
    if kind == "sigmoid":
        # split by sign so exp never overflows
        z = x.data
        ez = np.exp(-np.abs(z))
        s = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
        clamped = np.clip(s, EPS, 1.0 - EPS)
        active = clamped == s
        return _make(clamped, (x,), "sigmoid", lambda g: (g * s * (1.0 - s) * active,))
    raise ValueError(f"unknown activation kind {kind!r}")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), "clamp", lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# reductions ------------------------------------------------------------------

def reduce(x: Tensor, kind: str = "sum", mask=None) -> Tensor:
    """Sum or mean to a scalar; entries where ``mask`` is False are dropped.

    The masked result is computed over ``x[mask]`` itself, so it is bit-equal
    to reducing the filtered sequence directly.
    """
    x = as_tensor(x)
    if mask is None:
        sel = x.data.reshape(-1)
        mask_arr = None
    else:
        mask_arr = np.asarray(mask, dtype=bool)
        if mask_arr.shape != x.shape:
            raise ShapeError(f"mask shape {mask_arr.shape} does not match input shape {x.shape}")
        sel = x.data[mask_arr]
    count = sel.size
    total = np.sum(sel)

    def spread(scale: float) -> Callable[[np.ndarray], tuple[np.ndarray]]:
        def fn(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.full(x.shape, float(g) * scale)
            if mask_arr is not None:
                full = np.where(mask_arr, full, 0.0)
            return (full,)
        return fn

    if kind == "sum":
        return _make(np.asarray(total, dtype=np.float64), (x,), "sum", spread(1.0))
    if kind == "mean":
        if count == 0:
            raise EmptyReductionError("mean over zero unmasked entries")
        return _make(np.asarray(total / count, dtype=np.float64), (x,), "mean", spread(1.0 / count))
    raise ValueError(f"unknown reduction kind {kind!r}")


def sum_(x: Tensor, mask=None) -> Tensor:
    return reduce(x, "sum", mask)


def mean(x: Tensor, mask=None) -> Tensor:
    return reduce(x, "mean", mask)


# convolution -----------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 2D cross-correlation, NCHW input and KCkhkw kernel.

    ``padding`` is ``"same"`` (zero padding, odd kernels only) or ``"valid"``.
    Internally works channels-last with an im2col matrix so a single matmul
    does each pass.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if bias.shape != (k,):
        raise ShapeError(f"bias shape {bias.shape} does not match {k} output channels")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding needs odd kernel dimensions")
        ph, pw = kh // 2, kw // 2
        oh, ow = h, w
    elif padding == "valid":
        ph = pw = 0
        oh, ow = h - kh + 1, w - kw + 1
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xl = x.data.transpose(0, 2, 3, 1)
    if ph or pw:
        xl = np.pad(xl, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate([xl[:, i:i + oh, j:j + ow, :] for i, j in offsets], axis=-1)
    cols = cols.reshape(-1, kh * kw * c)
    # (K, C, kh, kw) -> (kh*kw*C, K), matching the column layout above
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, k)
    out = cols @ wmat
    out += bias.data
    out_nchw = out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2)

    def bw(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh * kw * c)
            gxl = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
            for t, (i, j) in enumerate(offsets):
                gxl[:, i:i + oh, j:j + ow, :] += gcols[..., t * c:(t + 1) * c]
            gx = gxl[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _make(np.ascontiguousarray(out_nchw), (x, kernel, bias), "conv2d", bw)


# graph -----------------------------------------------------------------------

@dataclass
class ComputationGraph:
    """Nodes reachable from a root, in construction order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> ComputationGraph:
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``root``.

    Gradients accumulate into existing ``.grad`` slots on leaves.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    graph = ComputationGraph.from_root(root)
    # intermediate grads must start clean; leaves keep accumulating
    for node in graph.nodes:
        if node._parents and node is not root:
            node.grad = None
    graph.backward(root)


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    failed: list[str]
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failed


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    # 0-vs-0 reports 0
    return np.where(diff == 0, 0.0, diff / denom)


def grad_check(builder: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients of ``builder(params)`` with central differences.

    ``params`` is any name -> Tensor mapping (a ParameterSet works). Values are
    perturbed in place and restored afterwards.
    """
    if step <= 0 or tol <= 0:
        raise ValueError("step and tol must be positive")
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = builder(params)
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    per_param: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                up = builder(params).item()
                flat[idx] = orig - step
                down = builder(params).item()
                flat[idx] = orig
                numeric[idx] = (up - down) / (2.0 * step)
            err = relative_error(analytic[name].reshape(-1), numeric)
            per_param[name] = float(err.max()) if err.size else 0.0
    for p in params.values():
        p.grad = None
    failed = [name for name, e in per_param.items() if e > tol]
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, failed, tol)
