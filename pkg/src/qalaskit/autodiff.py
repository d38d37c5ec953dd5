"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` owns an ordered list of nodes; creating a node appends it, so
the list is always topologically sorted and :func:`backward` is a single
reverse sweep with fixed-order gradient accumulation (bit-deterministic).
Shapes are strict: elementwise ops require equal shapes, except that 0-d
constants broadcast (general broadcasting is out of scope).

The QALAS forward model joins the graph as a custom-gradient node backed by
its analytic parameter Jacobian instead of being traced block by block; the
tape stays small and the derivatives are exact.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError
from .signal_model import SequenceTiming, TissueParams, simulate_with_jacobian

__all__ = [
    "Node",
    "Tape",
    "backward",
    "sigmoid_forward",
    "instance_norm_forward",
    "conv3x3_forward",
]


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))  # stable for large |x|
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def instance_norm_forward(x: np.ndarray, eps: float):
    """Returns (y, xc, inv); normalizes each channel over all later axes."""
    if x.ndim < 2:
        raise ShapeError("instance_norm expects (C, ...) with at least one voxel axis")
    if int(np.prod(x.shape[1:])) < 2:
        raise NumericError("instance_norm over a single voxel has degenerate variance")
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, xc, inv


def conv3x3_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray):
    """Zero-padded per-slice 3x3 convolution; returns (out, padded input)."""
    if w.ndim != 4 or w.shape[2:] != (3, 3) or x.ndim != 4:
        raise ShapeError("conv3x3 expects w (Co,Ci,3,3) and x (Ci,S,H,W)")
    co, ci = w.shape[:2]
    if x.shape[0] != ci or b.shape != (co,):
        raise ShapeError("conv3x3: incompatible channel counts")
    _, s, h, wd = x.shape
    xp = np.zeros((ci, s, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((co, s, h, wd))
    for dy in range(3):
        for dx in range(3):
            out += np.tensordot(w[:, :, dy, dx], xp[:, :, dy : dy + h, dx : dx + wd], axes=(1, 0))
    out += b[:, None, None, None]
    return out, xp


class Node:
    __slots__ = ("id", "op", "value", "parents", "grad", "trainable", "_backward", "name")

    def __init__(self, id, op, value, parents, backward, trainable=False, name=None):
        self.id = id
        self.op = op
        self.value = value
        self.parents = parents
        self.grad = None
        self.trainable = trainable
        self._backward = backward
        self.name = name

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={np.shape(self.value)})"


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _same_shape(a: Node, b: Node, op: str) -> None:
    sa, sb = np.shape(a.value), np.shape(b.value)
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


def _unbroadcast(node: Node, g: np.ndarray) -> np.ndarray:
    # only 0-d leaves broadcast; their gradient is the full sum
    if np.shape(node.value) == () and np.shape(g) != ():
        return np.sum(g)
    return g


class Tape:
    """Graph builder; every method records one node and returns it."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _emit(self, op, value, parents, backward, trainable=False, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), op, value, parents, backward, trainable, name)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def leaf(self, value, trainable=False, name=None) -> Node:
        return self._emit("leaf", np.array(value, dtype=np.float64), (), None, trainable, name)

    def constant(self, value, name=None) -> Node:
        return self.leaf(value, trainable=False, name=name)

    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    # -- elementwise binary -------------------------------------------------

    def add(self, x: Node, y: Node) -> Node:
        _same_shape(x, y, "add")
        def bwd(node, g):
            _accumulate(x, _unbroadcast(x, g))
            _accumulate(y, _unbroadcast(y, g))
        return self._emit("add", x.value + y.value, (x, y), bwd)

    def sub(self, x: Node, y: Node) -> Node:
        _same_shape(x, y, "sub")
        def bwd(node, g):
            _accumulate(x, _unbroadcast(x, g))
            _accumulate(y, _unbroadcast(y, -g))
        return self._emit("sub", x.value - y.value, (x, y), bwd)

    def mul(self, x: Node, y: Node) -> Node:
        _same_shape(x, y, "mul")
        def bwd(node, g):
            _accumulate(x, _unbroadcast(x, g * y.value))
            _accumulate(y, _unbroadcast(y, g * x.value))
        return self._emit("mul", x.value * y.value, (x, y), bwd)

    def div(self, x: Node, y: Node) -> Node:
        _same_shape(x, y, "div")
        def bwd(node, g):
            _accumulate(x, _unbroadcast(x, g / y.value))
            _accumulate(y, _unbroadcast(y, -g * x.value / y.value**2))
        return self._emit("div", x.value / y.value, (x, y), bwd)

    # -- elementwise unary -------------------------------------------------

    def neg(self, x: Node) -> Node:
        def bwd(node, g):
            _accumulate(x, -g)
        return self._emit("neg", -x.value, (x,), bwd)

    def exp(self, x: Node) -> Node:
        def bwd(node, g):
            _accumulate(x, g * node.value)
        return self._emit("exp", np.exp(x.value), (x,), bwd)

    def square(self, x: Node) -> Node:
        def bwd(node, g):
            _accumulate(x, g * 2.0 * x.value)
        return self._emit("square", x.value**2, (x,), bwd)

    def power(self, x: Node, p: float) -> Node:
        def bwd(node, g):
            _accumulate(x, g * p * x.value ** (p - 1.0))
        return self._emit("power", x.value**p, (x,), bwd)

    def sin_const(self, x: Node, k: float) -> Node:
        def bwd(node, g):
            _accumulate(x, g * k * np.cos(k * x.value))
        return self._emit("sin_const", np.sin(k * x.value), (x,), bwd)

    def cos_const(self, x: Node, k: float) -> Node:
        def bwd(node, g):
            _accumulate(x, -g * k * np.sin(k * x.value))
        return self._emit("cos_const", np.cos(k * x.value), (x,), bwd)

    def leaky_relu(self, x: Node, slope: float = 0.01) -> Node:
        def bwd(node, g):
            _accumulate(x, g * np.where(x.value > 0, 1.0, slope))
        return self._emit("leaky_relu", np.where(x.value > 0, x.value, slope * x.value), (x,), bwd)

    def sigmoid(self, x: Node) -> Node:
        def bwd(node, g):
            _accumulate(x, g * node.value * (1.0 - node.value))
        return self._emit("sigmoid", sigmoid_forward(x.value), (x,), bwd)

    def abs_smoothless(self, x: Node) -> Node:
        """|x| with subgradient sign(x), zero at the kink."""
        def bwd(node, g):
            _accumulate(x, g * np.sign(x.value))
        return self._emit("abs", np.abs(x.value), (x,), bwd)

    def clip(self, x: Node, lo: float, hi: float) -> Node:
        """Clamp to [lo, hi]; gradient passes through inside, zero outside."""
        def bwd(node, g):
            _accumulate(x, g * ((x.value >= lo) & (x.value <= hi)))
        return self._emit("clip", np.clip(x.value, lo, hi), (x,), bwd)

    # -- structure ----------------------------------------------------------

    def reshape(self, x: Node, shape) -> Node:
        def bwd(node, g):
            _accumulate(x, g.reshape(np.shape(x.value)))
        return self._emit("reshape", x.value.reshape(shape), (x,), bwd)

    def take_row(self, x: Node, i: int) -> Node:
        if x.value.ndim < 1 or not 0 <= i < x.value.shape[0]:
            raise ShapeError(f"take_row: index {i} out of range for shape {x.value.shape}")
        def bwd(node, g):
            full = np.zeros_like(x.value)
            full[i] = g
            _accumulate(x, full)
        return self._emit("take_row", x.value[i].copy(), (x,), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, x: Node) -> Node:
        def bwd(node, g):
            _accumulate(x, np.full_like(x.value, float(g)))
        return self._emit("sum", np.sum(x.value), (x,), bwd)

    def mean(self, x: Node) -> Node:
        n = x.value.size
        def bwd(node, g):
            _accumulate(x, np.full_like(x.value, float(g) / n))
        return self._emit("mean", np.mean(x.value), (x,), bwd)

    # -- network layers -------------------------------------------------------

    def matmul_channels(self, w: Node, b: Node, x: Node) -> Node:
        """Per-voxel channel mixing: (C_out, C_in) @ (C_in, V) + bias."""
        if w.value.ndim != 2 or x.value.ndim != 2 or b.value.ndim != 1:
            raise ShapeError("matmul_channels expects w (Co,Ci), b (Co,), x (Ci,V)")
        co, ci = w.value.shape
        if x.value.shape[0] != ci or b.value.shape[0] != co:
            raise ShapeError(
                f"matmul_channels: incompatible shapes w{w.value.shape} b{b.value.shape} x{x.value.shape}"
            )
        def bwd(node, g):
            _accumulate(w, g @ x.value.T)
            _accumulate(b, g.sum(axis=1))
            _accumulate(x, w.value.T @ g)
        return self._emit("matmul_channels", w.value @ x.value + b.value[:, None], (w, b, x), bwd)

    def conv3x3(self, w: Node, b: Node, x: Node) -> Node:
        """2-D 3x3 convolution per slice, zero padded: x is (C_in, S, H, W)."""
        out, xp = conv3x3_forward(w.value, b.value, x.value)
        _, h, wd = x.value.shape[1:]

        def bwd(node, g):
            gw = np.zeros_like(w.value)
            gxp = np.zeros_like(xp)
            for dy in range(3):
                for dx in range(3):
                    patch = xp[:, :, dy : dy + h, dx : dx + wd]
                    gw[:, :, dy, dx] = np.tensordot(g, patch, axes=([1, 2, 3], [1, 2, 3]))
                    gxp[:, :, dy : dy + h, dx : dx + wd] += np.tensordot(w.value[:, :, dy, dx].T, g, axes=(1, 0))
            _accumulate(w, gw)
            _accumulate(b, g.sum(axis=(1, 2, 3)))
            _accumulate(x, gxp[:, :, 1:-1, 1:-1])

        return self._emit("conv3x3", out, (w, b, x), bwd)

    def instance_norm(self, x: Node, eps: float = 1e-5) -> Node:
        """Normalize each channel over all remaining axes to zero mean, unit
        variance (+eps); one call is one instance."""
        y, _, inv = instance_norm_forward(x.value, eps)
        axes = tuple(range(1, x.value.ndim))

        def bwd(node, g):
            g_mean = g.mean(axis=axes, keepdims=True)
            gy_dot = (g * y).mean(axis=axes, keepdims=True)
            _accumulate(x, inv * (g - g_mean - y * gy_dot))

        return self._emit("instance_norm", y, (x,), bwd)

    # -- regularizers -----------------------------------------------------------

    def tv_aniso(self, x: Node) -> Node:
        """Mean absolute in-plane forward difference of a (S, H, W) map."""
        if x.value.ndim != 3:
            raise ShapeError(f"tv_aniso expects (S, H, W), got {x.value.shape}")
        s, h, w = x.value.shape
        dy = x.value[:, 1:, :] - x.value[:, :-1, :]
        dx = x.value[:, :, 1:] - x.value[:, :, :-1]
        count = dy.size + dx.size
        if count == 0:
            raise ShapeError("tv_aniso needs at least one in-plane difference")
        val = (np.abs(dy).sum() + np.abs(dx).sum()) / count

        def bwd(node, g):
            gx = np.zeros_like(x.value)
            sy = np.sign(dy) * (float(g) / count)
            sx = np.sign(dx) * (float(g) / count)
            gx[:, 1:, :] += sy
            gx[:, :-1, :] -= sy
            gx[:, :, 1:] += sx
            gx[:, :, :-1] -= sx
            _accumulate(x, gx)

        return self._emit("tv_aniso", val, (x,), bwd)

    # -- physics ---------------------------------------------------------------

    def signal_model(self, t1: Node, t2: Node, pd: Node, ie: Node, b1: np.ndarray,
                     timing: SequenceTiming) -> Node:
        """Forward QALAS signals (5, V); backward applies the analytic Jacobian."""
        for n_, nm in ((t1, "t1"), (t2, "t2"), (pd, "pd"), (ie, "ie")):
            if n_.value.ndim != 1:
                raise ShapeError(f"signal_model: {nm} must be 1-D, got {n_.value.shape}")
        sig, jac = simulate_with_jacobian(
            timing, TissueParams(t1.value, t2.value, pd.value, ie.value), b1
        )

        def bwd(node, g):
            _accumulate(t1, np.einsum("kv,kv->v", g, jac[:, 0]))
            _accumulate(t2, np.einsum("kv,kv->v", g, jac[:, 1]))
            _accumulate(pd, np.einsum("kv,kv->v", g, jac[:, 2]))
            _accumulate(ie, np.einsum("kv,kv->v", g, jac[:, 3]))

        return self._emit("signal_model", sig, (t1, t2, pd, ie), bwd)


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns {node id: grad} for all
    trainable leaves (grads are also left on the nodes)."""
    if np.shape(loss.value) != ():
        raise NumericError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    for n in tape.nodes:
        n.grad = None
    loss.grad = np.array(1.0)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node, node.grad)
    return {n.id: n.grad for n in tape.nodes if n.trainable and n.grad is not None}
