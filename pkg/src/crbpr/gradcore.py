"""Dense math, a small reverse-mode tape, Adam, and a finite-difference checker.

The tape only knows the handful of ops the CR-BPR graph needs.  Values on the
tape are float64; parameters live in float32 and gradients are accumulated in
float64 before being written back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FS_EPS = 1e-12


class NumericError(FloatingPointError):
    """A loss, gradient or update became non-finite."""


class ShapeError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def affine_sigmoid(x, W, b):
    """sigmoid(W @ x + b) for column-stacked inputs ``x`` of shape (d_in, l)."""
    x = np.asarray(x)
    W = np.asarray(W)
    b = np.asarray(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"expected x 2-D, W 2-D, b 1-D; got {x.shape}, {W.shape}, {b.shape}")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"shape mismatch: W {W.shape}, x {x.shape}, b {b.shape}")
    z = W.astype(np.float64) @ x.astype(np.float64) + b.astype(np.float64)[:, None]
    return sigmoid(z)


def batch_feature_scale(V, eps: float = FS_EPS):
    """Divide every row of ``V`` (d, l) by max(||row||_2, eps).

    Rows index feature dimensions and columns index batch members, so each
    dimension is rescaled across the batch.  All-zero rows stay zero.
    """
    V = np.asarray(V, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", V, V))
    return V / np.maximum(norms, eps)[:, None]


# ---------------------------------------------------------------------------
# parameters and tape
# ---------------------------------------------------------------------------


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros(self.value.shape, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


class Node:
    """One value on the tape, with the closure that pushes its gradient back."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "param")

    def __init__(self, value, parents=(), backward_fn=None, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param

    @property
    def requires_grad(self):
        return self.param is not None or bool(self.parents)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def const(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def leaf(p: Param) -> Node:
    return Node(p.value.astype(np.float64), param=p)


def _op(value, parents, backward_fn) -> Node:
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Node(value)
    return Node(value, parents, backward_fn)


def gather(table: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return _op(table.value[idx], (table,), back)


def dense_sigmoid(x: Node, W: Node, b: Node) -> Node:
    """Row-layout layer: sigmoid(x @ W.T + b) with x of shape (l, d_in)."""
    out = affine_sigmoid(x.value.T, W.value, b.value).T

    def back(g):
        dz = g * out * (1.0 - out)
        if W.requires_grad:
            W._accumulate(dz.T @ x.value)
        if b.requires_grad:
            b._accumulate(dz.sum(axis=0))
        if x.requires_grad:
            x._accumulate(dz @ W.value)

    return _op(out, (x, W, b), back)


def scale_rows_of_batch(x: Node, eps: float = FS_EPS) -> Node:
    """Batch feature scaling on row-layout data (l, d): each column is rescaled."""
    norms = np.sqrt(np.einsum("ij,ij->j", x.value, x.value))
    denom = np.maximum(norms, eps)
    out = x.value / denom
    active = norms > eps

    def back(g):
        proj = np.einsum("ij,ij->j", g, out)
        dx = (g - out * np.where(active, proj, 0.0)) / denom
        x._accumulate(dx)

    return _op(out, (x,), back)


def divide_by(x: Node, denom) -> Node:
    """Divide columns by fixed per-dimension norms (corpus statistics)."""
    denom = np.asarray(denom, dtype=np.float64)

    def back(g):
        x._accumulate(g / denom)

    return _op(x.value / denom, (x,), back)


def add_feature_delta(x: Node, delta: Node) -> Node:
    def back(g):
        if x.requires_grad:
            x._accumulate(g)
        delta._accumulate(g)

    return _op(x.value + delta.value, (x, delta), back)


def rowdot(a: Node, b: Node) -> Node:
    out = np.einsum("ij,ij->i", a.value, b.value)

    def back(g):
        if a.requires_grad:
            a._accumulate(g[:, None] * b.value)
        if b.requires_grad:
            b._accumulate(g[:, None] * a.value)

    return _op(out, (a, b), back)


def group_mean(x: Node, n_groups: int, group_size: int) -> Node:
    """Mean over consecutive blocks of ``group_size`` rows."""
    d = x.value.shape[1]
    out = x.value.reshape(n_groups, group_size, d).mean(axis=1)

    def back(g):
        x._accumulate(np.repeat(g / group_size, group_size, axis=0))

    return _op(out, (x,), back)


def squeeze_col(x: Node) -> Node:
    def back(g):
        x._accumulate(g[:, None])

    return _op(x.value[:, 0], (x,), back)


def broadcast_scalar(x: Node, n: int) -> Node:
    def back(g):
        x._accumulate(np.array([g.sum()]))

    return _op(np.full(n, x.value[0]), (x,), back)


def weighted_sum(terms: Sequence[tuple[float, Node]]) -> Node:
    """sum_i w_i * node_i over same-shape nodes; empty input is not allowed."""
    value = sum(w * n.value for w, n in terms)

    def back(g):
        for w, n in terms:
            if n.requires_grad:
                n._accumulate(w * g)

    return _op(np.asarray(value, dtype=np.float64), [n for _, n in terms], back)


def split_rows(x: Node, k: int) -> tuple[Node, Node]:
    """(x[:k], x[k:]) sharing one parent."""
    n = x.value.shape[0]

    def head_back(g):
        full = np.zeros(n)
        full[:k] = g
        x._accumulate(full)

    def tail_back(g):
        full = np.zeros(n)
        full[k:] = g
        x._accumulate(full)

    return _op(x.value[:k], (x,), head_back), _op(x.value[k:], (x,), tail_back)


def bpr_sum(diff: Node) -> Node:
    """sum of -ln sigmoid(diff)."""
    value = np.array(softplus(-diff.value).sum())

    def back(g):
        diff._accumulate(-g * sigmoid(-diff.value))

    return _op(value, (diff,), back)


def half_sq_norm(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    value = np.array(0.5 * sum(float(np.sum(n.value * n.value)) for n in nodes))

    def back(g):
        for n in nodes:
            n._accumulate(g * n.value)

    return _op(value, nodes, back)


def backward(root: Node) -> None:
    """Reverse pass from a scalar root; parameter gradients are added to Param.grad."""
    order: list[Node] = []
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value, dtype=np.float64)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.backward_fn is not None:
            node.backward_fn(node.grad)
        if node.param is not None:
            node.param.grad += node.grad


def check_finite_grads(params: Iterable[Param]) -> None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Param], state: AdamState, learning_rate: float) -> None:
    """Bias-corrected Adam update in place.  Gradients are left for the caller to zero."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updates = {}
    for p in params:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros(p.shape, dtype=np.float64)
            state.second_moment[p.name] = np.zeros(p.shape, dtype=np.float64)
        v = state.second_moment[p.name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        with np.errstate(invalid="ignore", over="ignore"):
            step = learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps_adam)
        if not np.all(np.isfinite(step)):
            raise NumericError(f"non-finite Adam update for parameter {p.name!r}")
        updates[p.name] = step
    for p in params:
        p.value -= updates[p.name].astype(p.value.dtype)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def finite_diff_check(
    params: Sequence[Param],
    loss_fn: Callable[[], float],
    step: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between ``Param.grad`` and central differences of ``loss_fn``.

    ``params`` must already carry the analytic gradient at the current point.
    Perturbed values are evaluated in float64 so float32 storage does not
    swamp the difference quotient.  With ``max_coords`` set, that many
    coordinates per parameter are sampled, otherwise all are checked.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        original = p.value
        work = original.astype(np.float64)
        flat = work.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = p.grad.reshape(-1)
        try:
            p.value = work
            for i in coords:
                saved = flat[i]
                flat[i] = saved + step
                up = float(loss_fn())
                flat[i] = saved - step
                down = float(loss_fn())
                flat[i] = saved
                numeric = (up - down) / (2.0 * step)
                worst = max(worst, float(relative_error(analytic[i], numeric, floor)))
        finally:
            p.value = original
    return worst
