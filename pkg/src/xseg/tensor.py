"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations a U-Net needs are provided. Every op is a plain function
returning a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        # zeros rather than None: a parameter the next graph never reaches
        # then reads as having zero gradient
        self.grad = np.zeros_like(self.data)

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Node:
    op: str | None
    inputs: list[int]
    tensor: Tensor = field(repr=False)


@dataclass
class ComputeGraph:
    nodes: list[Node]
    outputs: list[int]

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        # iterative post-order DFS; recursion blows up on deep graphs
        order: list[Tensor] = []
        index: dict[int, int] = {}
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in index:
                continue
            if expanded:
                index[id(t)] = len(order)
                order.append(t)
                continue
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in index:
                    stack.append((p, False))
        nodes = [
            Node(t.op, [index[id(p)] for p in t._parents if id(p) in index], t)
            for t in order
        ]
        return cls(nodes, [index[id(output)]])


def backward(output: Tensor, seed=None) -> ComputeGraph:
    """Populate ``.grad`` on every leaf reachable from ``output``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if output._backward is None:
        raise GraphError(
            "backward() called on a tensor that was not produced by a recorded "
            "forward pass"
        )
    if seed is None:
        if output.data.size != 1:
            raise ShapeError("seed gradient required for non-scalar output")
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")

    graph = ComputeGraph.trace(output)
    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return graph


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return _result(
        np.array(x.data.sum()), "sum", (x,), lambda g: (np.full(x.shape, float(g)),)
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


# --------------------------------------------------------------------------
# convolution family


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(N, C, H+k-1, W+k-1) padded input -> (N*H*W, k*k*C) patch matrix, channels last."""
    n, c = xp.shape[:2]
    xt = xp.transpose(0, 2, 3, 1)
    if k == 1:
        return np.ascontiguousarray(xt).reshape(n * h * w, c)
    xt = np.ascontiguousarray(xt)
    cols = np.empty((n, h, w, k, k, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xt[:, i : i + h, j : j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1:
        return cols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    p = k // 2
    cols = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out[:, i : i + h, j : j + w, :] += cols[:, :, :, i, j, :]
    return out[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' cross-correlation with an odd square kernel (3x3 or 1x1)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {kernel.shape} must be 4-D")
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c or kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    k, p = kh, kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, w)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (
            (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
            if kernel.requires_grad
            else None
        )
        gx = _col2im(g2 @ wmat, x.shape, k) if x.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), "conv2d", parents, bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 stride-2 transposed convolution; kernel is (Cin, Cout, 2, 2)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError(
            f"conv_transpose2d: input {x.shape} and kernel {kernel.shape} invalid"
        )
    n, c, h, w = x.shape
    cin, cout = kernel.shape[:2]
    if cin != c:
        raise ShapeError(
            f"conv_transpose2d: input channels {c} != kernel in-channels {cin} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = kernel.data.reshape(cin, cout * 4)
    out = (xm @ wmat).reshape(n, h, w, cout, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gx = (gm @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gk = (xm.T @ gm).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), "conv_transpose2d", parents, bw)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial extent {h}x{w} must be even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(blocks.shape)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _result(out, "maxpool2d", (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} differ outside channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer; ``None`` means uninitialized."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), **kw)


def batchnorm2d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool
) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta {gamma.shape} vs input {x.shape}")
    if state.eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]

    if not train:
        if state.mean is None or state.var is None:
            raise GraphError("batchnorm2d: eval mode with uninitialized running statistics")
        inv = 1.0 / np.sqrt(state.var + state.eps)
        xhat = (x.data - state.mean[None, :, None, None]) * inv[None, :, None, None]

        def bw_eval(g):
            return (
                g * g_ * inv[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _result(xhat * g_ + b_, "batchnorm2d", (x, gamma, beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise ShapeError("batchnorm2d: training needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mean[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv[None, :, None, None]

    mom = state.momentum
    run_mean = np.zeros(c) if state.mean is None else state.mean
    run_var = np.ones(c) if state.var is None else state.var
    state.mean = (1 - mom) * run_mean + mom * mean
    state.var = (1 - mom) * run_var + mom * var * (m / (m - 1))

    def bw(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * g_
        dx = (
            inv[None, :, None, None]
            / m
            * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        )
        return dx, dgamma, dbeta

    return _result(xhat * g_ + b_, "batchnorm2d", (x, gamma, beta), bw)
