"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every value in the library is a rows-by-cols numpy array of 64-bit floats.
`Node` wraps one such array together with the parents that produced it and a
vector-Jacobian closure, so that `backward` on a 1x1 scalar root yields
gradients for every ancestor by the chain rule.

Graphs are acyclic and write-once: a node's value never changes after
construction, which makes values safe to share across threads read-only.
Trainable leaves carry ``requires_grad=True``; constants do not, and backward
never descends into constant-only subgraphs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

# Log-space masks use a large finite negative instead of -inf so that every
# array stays finite and logaddexp gradients never produce inf - inf.
NEG_INF = -1e30

_LN_EPS = 1e-5  # layer-norm variance epsilon


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, int]):
        self.op = op
        self.shapes = shapes
        pretty = " vs ".join(f"{r}x{c}" for r, c in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


def _as_value(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"values must be 2-D, got shape {arr.shape}")
    return arr


class Node:
    """One vertex of the computation graph: a value plus its backward rule."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None,
    ):
        self.value = _as_value(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.requires_grad and not self.parents else "node")
        return f"Node({tag}, shape={self.value.shape})"


def constant(value, name: Optional[str] = None) -> Node:
    return Node(value, requires_grad=False, name=name)


def parameter(value, name: Optional[str] = None) -> Node:
    return Node(value, requires_grad=True, name=name)


class GradientMap:
    """Gradients keyed by node; nodes off the path to the root get zeros."""

    def __init__(self, grads: dict[Node, np.ndarray]):
        self._grads = grads

    def of(self, node: Node) -> np.ndarray:
        g = self._grads.get(node)
        if g is None:
            return np.zeros_like(node.value)
        return g

    def __contains__(self, node: Node) -> bool:
        return node in self._grads

    def nodes(self):
        return self._grads.keys()


def backward(root: Node) -> GradientMap:
    """Propagate d(root)/d(node) to every ancestor that requires a gradient."""
    if root.value.shape != (1, 1):
        raise ValueError(f"backward needs a 1x1 scalar root, got {root.value.shape}")

    # Iterative post-order over grad-requiring ancestors (graphs can be long
    # chains, e.g. per-frame DP recursions, so no recursion here).
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[Node, np.ndarray] = {root: np.ones((1, 1))}
    for node in reversed(topo):
        g = grads.get(node)
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p)
            if acc is None:
                grads[p] = pg
            else:
                grads[p] = acc + pg
    if not root.requires_grad:
        # A constant root still reports its own unit gradient.
        pass
    return GradientMap(grads)


# ---------------------------------------------------------------------------
# op suite
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError("matmul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value

    def vjp(g):
        return (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None,
        )

    return Node(av @ bv, (a, b), vjp)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError("add", a.value.shape, b.value.shape)

    def vjp(g):
        return (g, g)

    return Node(a.value + b.value, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError("mul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value

    def vjp(g):
        return (g * bv, g * av)

    return Node(av * bv, (a, b), vjp)


def scale(x: Node, k: float) -> Node:
    k = float(k)

    def vjp(g):
        return (g * k,)

    return Node(x.value * k, (x,), vjp)


def offset(x: Node, c: float) -> Node:
    c = float(c)

    def vjp(g):
        return (g,)

    return Node(x.value + c, (x,), vjp)


def add_rowvec(x: Node, r: Node) -> Node:
    """Add a 1xD row vector to every row of an NxD array."""
    if r.value.shape[0] != 1 or r.value.shape[1] != x.value.shape[1]:
        raise ShapeError("add_rowvec", x.value.shape, r.value.shape)

    def vjp(g):
        return (g, g.sum(axis=0, keepdims=True))

    return Node(x.value + r.value, (x, r), vjp)


def mul_rowvec(x: Node, r: Node) -> Node:
    """Multiply every row of an NxD array elementwise by a 1xD row vector."""
    if r.value.shape[0] != 1 or r.value.shape[1] != x.value.shape[1]:
        raise ShapeError("mul_rowvec", x.value.shape, r.value.shape)
    xv, rv = x.value, r.value

    def vjp(g):
        return (g * rv, (g * xv).sum(axis=0, keepdims=True))

    return Node(xv * rv, (x, r), vjp)


def relu(x: Node) -> Node:
    xv = x.value

    def vjp(g):
        return (g * (xv > 0.0),)

    return Node(np.maximum(xv, 0.0), (x,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: Node) -> Node:
    xv = x.value
    sig = _sigmoid(xv)

    def vjp(g):
        return (g * (sig + xv * sig * (1.0 - sig)),)

    return Node(xv * sig, (x,), vjp)


def sqrt(x: Node) -> Node:
    out = np.sqrt(x.value)

    def vjp(g):
        return (g * 0.5 / out,)

    return Node(out, (x,), vjp)


def reciprocal(x: Node) -> Node:
    xv = x.value

    def vjp(g):
        return (-g / (xv * xv),)

    return Node(1.0 / xv, (x,), vjp)


def logaddexp(a: Node, b: Node) -> Node:
    """Elementwise log(exp(a) + exp(b)), max-subtracted for stability."""
    if a.value.shape != b.value.shape:
        raise ShapeError("logaddexp", a.value.shape, b.value.shape)
    out = np.logaddexp(a.value, b.value)
    wa = np.exp(a.value - out)
    wb = np.exp(b.value - out)

    def vjp(g):
        return (g * wa, g * wb)

    return Node(out, (a, b), vjp)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x: Node) -> Node:
    y = _softmax_rows(x.value)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Node(y, (x,), vjp)


def log_softmax(x: Node) -> Node:
    xv = x.value
    shifted = xv - xv.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Node(out, (x,), vjp)


def layer_norm(x: Node, gain: Node, bias: Node) -> Node:
    """Per-row normalization with learned 1xD gain and bias."""
    d = x.value.shape[1]
    for r, nm in ((gain, "gain"), (bias, "bias")):
        if r.value.shape != (1, d):
            raise ShapeError(f"layer_norm({nm})", x.value.shape, r.value.shape)
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (xv - mu) * inv
    gv = gain.value

    def vjp(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (
            dx,
            (g * xhat).sum(axis=0, keepdims=True),
            g.sum(axis=0, keepdims=True),
        )

    return Node(xhat * gv + bias.value, (x, gain, bias), vjp)


def transpose(x: Node) -> Node:
    def vjp(g):
        return (g.T,)

    return Node(x.value.T, (x,), vjp)


def row_slice(x: Node, start: int, stop: int) -> Node:
    n = x.value.shape[0]
    if not (0 <= start < stop <= n):
        raise ValueError(f"row_slice: bad range [{start}, {stop}) for {n} rows")

    def vjp(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return (full,)

    return Node(x.value[start:stop].copy(), (x,), vjp)


def concat_rows(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeError("concat_rows", a.value.shape, b.value.shape)
    na = a.value.shape[0]

    def vjp(g):
        return (g[:na], g[na:])

    return Node(np.vstack([a.value, b.value]), (a, b), vjp)


def reduce_sum(x: Node) -> Node:
    def vjp(g):
        return (np.full_like(x.value, g[0, 0]),)

    return Node([[x.value.sum()]], (x,), vjp)


def reduce_mean(x: Node) -> Node:
    n = x.value.size

    def vjp(g):
        return (np.full_like(x.value, g[0, 0] / n),)

    return Node([[x.value.mean()]], (x,), vjp)


def sum_rows(x: Node) -> Node:
    """Per-row sum, NxD -> Nx1."""
    d = x.value.shape[1]

    def vjp(g):
        return (np.repeat(g, d, axis=1),)

    return Node(x.value.sum(axis=1, keepdims=True), (x,), vjp)
