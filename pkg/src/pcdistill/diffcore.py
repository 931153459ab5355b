"""Minimal reverse-mode differentiation over 2-D float64 arrays.

Only the operations the distillation pipeline needs are provided. Each op
builds a fresh graph node; ``backward`` walks the graph once in reverse
topological order. Leaf nodes accumulate into ``.grad`` across calls until
zeroed, interior nodes have ``.grad`` overwritten on every pass.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError, StateError


class Node:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "touched")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.parents = parents
        self.backward_fn = backward_fn
        self.touched = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a node of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)
        self.touched = False

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def const(data) -> Node:
    return data if isinstance(data, Node) else Node(data)


def param(data) -> Node:
    return Node(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward_fn) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(data, True, tuple(parents), backward_fn)
    return Node(data)


def _check_same(a: Node, b: Node, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- graph traversal ---------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, seed=None) -> None:
    if not root.requires_grad:
        return
    if seed is None:
        if root.data.size != 1:
            raise ShapeError("backward without a seed needs a scalar root")
        seed = np.ones_like(root.data)
    grads = {id(root): np.asarray(seed, dtype=np.float64).reshape(root.shape)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = node.grad + g
            node.touched = True
            continue
        node.grad = g
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# --- operations --------------------------------------------------------------


def linear(x: Node, W: Node, b: Node | None = None) -> Node:
    """Row-wise affine map ``x @ W + b`` (a 1x1 convolution over points)."""
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: x is {x.shape}, W is {W.shape}")
    out = x.data @ W.data
    parents = [x, W]
    if b is not None:
        if b.shape != (1, W.shape[1]):
            raise ShapeError(f"linear: bias {b.shape} does not match W {W.shape}")
        out = out + b.data
        parents.append(b)

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0, keepdims=True)

    return _make(out, parents, bw)


pointwise_linear = linear


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts {a.shape[0]} and {b.shape[0]}")
    split = a.shape[1]
    return _make(
        np.hstack([a.data, b.data]), [a, b], lambda g: (g[:, :split], g[:, split:])
    )


def slice_cols(x: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), [x], bw)


def add(a: Node, b: Node) -> Node:
    _check_same(a, b, "add")
    return _make(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, [a, b], lambda g: (g, -g))


def hadamard(a: Node, b: Node) -> Node:
    _check_same(a, b, "hadamard")
    return _make(a.data * b.data, [a, b], lambda g: (g * b.data, g * a.data))


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return _make(x.data * c, [x], lambda g: (g * c,))


def colscale(x: Node, g_col: Node) -> Node:
    """Multiply each row of ``x`` by the matching entry of an n x 1 column."""
    if g_col.shape != (x.shape[0], 1):
        raise ShapeError(f"colscale: gate {g_col.shape} for x {x.shape}")

    def bw(g):
        return g * g_col.data, (g * x.data).sum(axis=1, keepdims=True)

    return _make(x.data * g_col.data, [x, g_col], bw)


def sigmoid(x: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, [x], lambda g: (g * s * (1.0 - s),))


def relu(x: Node) -> Node:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), [x], lambda g: (g * mask,))


def reduce_max_rows(x: Node) -> Node:
    """Column-wise max; the gradient goes to the first argmax row."""
    if x.shape[0] < 1:
        raise ShapeError("reduce_max_rows on an empty node")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])

    def bw(g):
        full = np.zeros_like(x.data)
        full[arg, cols] = g[0]
        return (full,)

    return _make(x.data[arg, cols][None, :], [x], bw)


def group_max(x: Node, group: int) -> Node:
    """Max over consecutive blocks of ``group`` rows: (n*group, d) -> (n, d)."""
    rows, d = x.shape
    if group < 1 or rows % group:
        raise ShapeError(f"group_max: {rows} rows not divisible by {group}")
    n = rows // group
    blocks = x.data.reshape(n, group, d)
    arg = np.argmax(blocks, axis=1)
    out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        full = np.zeros((n, group, d))
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(rows, d),)

    return _make(out, [x], bw)


def gather_rows(x: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64).ravel()

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], [x], bw)


def weighted_gather(x: Node, idx, w) -> Node:
    """Row i of the result is ``sum_k w[i, k] * x[idx[i, k]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    if idx.shape != w.shape or idx.ndim != 2:
        raise ShapeError(f"weighted_gather: idx {idx.shape} vs weights {w.shape}")
    out = np.einsum("nk,nkd->nd", w, x.data[idx])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx.ravel(), (w[:, :, None] * g[:, None, :]).reshape(-1, x.shape[1]))
        return (full,)

    return _make(out, [x], bw)


def sum_all(x: Node) -> Node:
    return _make(np.array([[x.data.sum()]]), [x], lambda g: (np.full_like(x.data, g[0, 0]),))


def sum_squares(x: Node) -> Node:
    return _make(
        np.array([[np.sum(x.data * x.data)]]), [x], lambda g: (2.0 * g[0, 0] * x.data,)
    )


def row_norms(x: Node) -> Node:
    """Euclidean norm of each row as an n x 1 column; zero rows get zero gradient."""
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))

    def bw(g):
        safe = np.where(norms > 0, norms, 1.0)
        return (np.where(norms > 0, g * x.data / safe, 0.0),)

    return _make(norms, [x], bw)


def maximum(a: Node, b: Node) -> Node:
    """Max of two scalars; the gradient follows the larger, ``a`` on ties."""
    if a.shape != (1, 1) or b.shape != (1, 1):
        raise ShapeError("maximum expects two scalars")
    take_a = a.data[0, 0] >= b.data[0, 0]
    out = a.data if take_a else b.data
    return _make(
        out.copy(), [a, b], lambda g: (g if take_a else None, None if take_a else g)
    )


def softmax_cross_entropy(logits: Node, label: int) -> Node:
    """``-log softmax(logits)[label]`` for a single 1 x C row."""
    if logits.shape[0] != 1 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_cross_entropy expects 1 x C logits, got {logits.shape}")
    C = logits.shape[1]
    if not 0 <= int(label) < C:
        raise ValueError(f"label {label} out of range for {C} classes")
    z = logits.data[0] - logits.data[0].max()
    logsum = np.log(np.exp(z).sum())
    loss = logsum - z[label]
    prob = np.exp(z - logsum)

    def bw(g):
        d = prob.copy()
        d[label] -= 1.0
        return (g[0, 0] * d[None, :],)

    return _make(np.array([[loss]]), [logits], bw)


# --- verification ------------------------------------------------------------


def grad_check(f, params, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` rebuilds the graph from ``params`` on each call and returns a scalar
    node. Parameter gradients are zeroed before and after.
    """
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite function value")
    backward(out)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            if not (np.isfinite(fd) and np.isfinite(ga[i])):
                raise NumericError("non-finite gradient")
            err = abs(ga[i] - fd) / (abs(ga[i]) + abs(fd) + 1e-12)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# --- parameters and optimizers ----------------------------------------------


class ParamStore:
    """Named parameters plus per-parameter optimizer state."""

    def __init__(self):
        self.params: dict[str, Node] = {}
        self.state: dict[str, dict] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = param(value)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def freeze(self):
        """Turn every parameter into a constant (no graph, no gradient)."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.data.copy())
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def _require_grads(self):
        if not any(p.touched for p in self.params.values()):
            raise StateError("optimizer step without a preceding backward pass")


def sgd_step(store: ParamStore, lr: float) -> ParamStore:
    store._require_grads()
    for p in store.params.values():
        p.data -= lr * p.grad
    store.step_count += 1
    store.zero_grad()
    return store


def adam_step(
    store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> ParamStore:
    store._require_grads()
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        st = store.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        g = p.grad
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1**t)
        v_hat = st["v"] / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()
    return store


# --- checkpoints -------------------------------------------------------------

PDKP_MAGIC = b"PDKP"


def encode_params(store: ParamStore) -> bytes:
    chunks = [PDKP_MAGIC, struct.pack("<I", len(store))]
    for name, p in store:
        raw = name.encode("utf-8")
        rows, cols = p.shape
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rows, cols))
        chunks.append(p.data.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def decode_params(buf: bytes) -> ParamStore:
    if buf[:4] != PDKP_MAGIC:
        raise ValueError("not a PDKP checkpoint")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        nbytes = 8 * rows * cols
        data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off)
        off += nbytes
        store.add(name, data.reshape(rows, cols).astype(np.float64))
    if off != len(buf):
        raise ValueError("trailing bytes in PDKP checkpoint")
    return store


def save_params(store: ParamStore, path) -> None:
    Path(path).write_bytes(encode_params(store))


def load_params(path) -> ParamStore:
    return decode_params(Path(path).read_bytes())
