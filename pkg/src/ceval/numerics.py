"""Static computation graphs with reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Graph`
is built once by declaring named inputs and chaining ops; the resulting nodes
are already in topological order, so :meth:`Graph.forward` is a single pass
and :meth:`Graph.backward` walks the same list in reverse.

A leading ``None`` in a declared input shape marks a free batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "GraphStateError",
    "as_tensor",
    "finite_diff_check",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a tensor shape does not match a node's declared shape."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested before a forward pass."""


def as_tensor(value) -> np.ndarray:
    """Return ``value`` as a C-contiguous float64 array."""
    return np.asarray(value, dtype=DTYPE, order="C")


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[Any, ...]
    name: str
    attrs: dict = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"Node({self.name!r}, op={self.op}, shape={self.shape})"


def _shape_str(shape) -> str:
    return "(" + ", ".join("?" if s is None else str(s) for s in shape) + ")"


def _dims_match(declared, actual) -> bool:
    if len(declared) != len(actual):
        return False
    return all(d is None or d == a for d, a in zip(declared, actual))


def _broadcast_shape(a, b, node_name):
    """Static broadcast with ``None`` acting as an unknown extent."""
    out = []
    la, lb = len(a), len(b)
    n = max(la, lb)
    pa = (1,) * (n - la) + tuple(a)
    pb = (1,) * (n - lb) + tuple(b)
    for da, db in zip(pa, pb):
        if da == 1:
            out.append(db)
        elif db == 1:
            out.append(da)
        elif da is None or db is None:
            out.append(da if db is None else db)
        elif da == db:
            out.append(da)
        else:
            raise ShapeError(
                f"node {node_name!r}: cannot broadcast {_shape_str(a)} with {_shape_str(b)}"
            )
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """A fixed-op computation graph.

    Example
    -------
    >>> g = Graph()
    >>> x = g.input("x", (None, 2))
    >>> W = g.input("W", (2, 3))
    >>> y = g.relu(g.matmul(x, W))
    >>> out = g.forward({"x": np.ones((4, 2)), "W": np.ones((2, 3))})
    >>> out.shape
    (4, 3)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_nodes: dict[str, Node] = {}
        self.output: Node | None = None
        self._values: dict[int, np.ndarray] | None = None
        self._forward_output: Node | None = None
        self._aux: dict[int, Any] = {}

    # ------------------------------------------------------------------ build
    def _add(self, op, inputs, shape, name=None, **attrs) -> Node:
        node_id = len(self.nodes)
        node = Node(node_id, op, tuple(n.id for n in inputs), tuple(shape),
                    name or f"{op}_{node_id}", attrs)
        self.nodes.append(node)
        self.output = node
        return node

    def input(self, name: str, shape) -> Node:
        if name in self.input_nodes:
            raise ValueError(f"duplicate input name {name!r}")
        node = self._add("input", (), tuple(shape), name=name)
        self.input_nodes[name] = node
        return node

    def matmul(self, a: Node, b: Node, name=None) -> Node:
        sa, sb = a.shape, b.shape
        label = name or f"matmul_{len(self.nodes)}"
        if not (1 <= len(sa) <= 2 and 1 <= len(sb) <= 2):
            raise ShapeError(f"node {label!r}: matmul supports 1-D and 2-D operands")
        inner_a = sa[-1]
        inner_b = sb[0]
        if inner_a is not None and inner_b is not None and inner_a != inner_b:
            raise ShapeError(
                f"node {label!r}: inner dimensions differ, {_shape_str(sa)} @ {_shape_str(sb)}"
            )
        shape = tuple(sa[:-1]) + tuple(sb[1:])
        return self._add("matmul", (a, b), shape, name)

    def add(self, a: Node, b: Node, name=None) -> Node:
        label = name or f"add_{len(self.nodes)}"
        return self._add("add", (a, b), _broadcast_shape(a.shape, b.shape, label), name)

    def mul(self, a: Node, b: Node, name=None) -> Node:
        label = name or f"mul_{len(self.nodes)}"
        return self._add("mul", (a, b), _broadcast_shape(a.shape, b.shape, label), name)

    def relu(self, a: Node, name=None) -> Node:
        return self._add("relu", (a,), a.shape, name)

    def tanh(self, a: Node, name=None) -> Node:
        return self._add("tanh", (a,), a.shape, name)

    def conv2d(self, x: Node, w: Node, padding: str = "valid", name=None) -> Node:
        """Stride-1 cross-correlation of ``(B, C, H, W)`` with ``(F, C, kh, kw)``."""
        label = name or f"conv2d_{len(self.nodes)}"
        if padding not in ("valid", "same"):
            raise ValueError(f"node {label!r}: padding must be 'valid' or 'same'")
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeError(f"node {label!r}: conv2d expects 4-D input and kernel")
        _, c, h, wd = x.shape
        f, cw, kh, kw = w.shape
        if c is not None and cw is not None and c != cw:
            raise ShapeError(f"node {label!r}: input has {c} channels, kernel expects {cw}")
        if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError(f"node {label!r}: 'same' padding needs odd kernel sizes")
        if padding == "valid":
            ho = None if h is None else h - kh + 1
            wo = None if wd is None else wd - kw + 1
            if (ho is not None and ho < 1) or (wo is not None and wo < 1):
                raise ShapeError(f"node {label!r}: kernel larger than input")
        else:
            ho, wo = h, wd
        return self._add("conv2d", (x, w), (x.shape[0], f, ho, wo), name, padding=padding)

    def maxpool2(self, a: Node, name=None) -> Node:
        label = name or f"maxpool2_{len(self.nodes)}"
        if len(a.shape) != 4:
            raise ShapeError(f"node {label!r}: maxpool2 expects (B, C, H, W)")
        b, c, h, w = a.shape
        for extent in (h, w):
            if extent is not None and extent % 2:
                raise ShapeError(f"node {label!r}: spatial extents must be even, got {_shape_str(a.shape)}")
        return self._add("maxpool2", (a,), (b, c, h // 2, w // 2), name)

    def flatten(self, a: Node, name=None) -> Node:
        rest = a.shape[1:]
        size = None if any(s is None for s in rest) else int(np.prod(rest, dtype=np.int64))
        return self._add("flatten", (a,), (a.shape[0], size), name)

    def softmax(self, a: Node, name=None) -> Node:
        return self._add("softmax", (a,), a.shape, name)

    def cross_entropy(self, logits: Node, target: Node, reduction: str = "mean",
                      name=None) -> Node:
        """Cross-entropy of ``softmax(logits)`` against a probability target.

        Computed with log-sum-exp so saturated logits stay finite.
        ``reduction`` is ``"mean"`` or ``"sum"`` over rows, or ``"none"``.
        """
        label = name or f"cross_entropy_{len(self.nodes)}"
        if reduction not in ("mean", "sum", "none"):
            raise ValueError(f"node {label!r}: unknown reduction {reduction!r}")
        _broadcast_shape(logits.shape, target.shape, label)
        shape = logits.shape[:-1] if reduction == "none" else ()
        return self._add("cross_entropy", (logits, target), shape, name, reduction=reduction)

    # --------------------------------------------------------------- evaluate
    def _ancestors(self, out: Node) -> list[Node]:
        needed = {out.id}
        for node in reversed(self.nodes[: out.id + 1]):
            if node.id in needed:
                needed.update(node.inputs)
        return [n for n in self.nodes[: out.id + 1] if n.id in needed]

    def forward(self, inputs: dict, output: Node | None = None) -> np.ndarray:
        """Evaluate ``output`` (default: the last node added)."""
        out = output if output is not None else self.output
        if out is None:
            raise GraphStateError("graph has no nodes")
        values: dict[int, np.ndarray] = {}
        self._aux = {}
        for node in self._ancestors(out):
            if node.op == "input":
                if node.name not in inputs:
                    raise ShapeError(f"node {node.name!r}: missing input")
                value = as_tensor(inputs[node.name])
                if not _dims_match(node.shape, value.shape):
                    raise ShapeError(
                        f"node {node.name!r}: expected shape {_shape_str(node.shape)}, "
                        f"got {_shape_str(value.shape)}"
                    )
                values[node.id] = value
                continue
            args = [values[i] for i in node.inputs]
            try:
                values[node.id] = self._eval(node, args)
            except ValueError as exc:
                if isinstance(exc, ShapeError):
                    raise
                raise ShapeError(f"node {node.name!r}: {exc}") from exc
        self._values = values
        self._forward_output = out
        return values[out.id]

    def value(self, node: Node) -> np.ndarray:
        if self._values is None or node.id not in self._values:
            raise GraphStateError(f"node {node.name!r} has no cached value")
        return self._values[node.id]

    def _eval(self, node: Node, args: list[np.ndarray]) -> np.ndarray:
        op = node.op
        if op == "matmul":
            return np.matmul(args[0], args[1])
        if op == "add":
            return args[0] + args[1]
        if op == "mul":
            return args[0] * args[1]
        if op == "relu":
            return np.maximum(args[0], 0.0)
        if op == "tanh":
            return np.tanh(args[0])
        if op == "conv2d":
            x, w = args
            if x.shape[1] != w.shape[1]:
                raise ShapeError(
                    f"node {node.name!r}: input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
                )
            if node.attrs["padding"] == "same":
                ph, pw = w.shape[2] // 2, w.shape[3] // 2
                x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            self._aux[node.id] = x
            windows = sliding_window_view(x, w.shape[2:], axis=(2, 3))
            # windows: (B, C, Ho, Wo, kh, kw)
            return np.ascontiguousarray(np.einsum("bchwij,fcij->bfhw", windows, w, optimize=True))
        if op == "maxpool2":
            x = args[0]
            b, c, h, w = x.shape
            if h % 2 or w % 2:
                raise ShapeError(f"node {node.name!r}: spatial extents must be even, got {x.shape}")
            blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
            arg = blocks.argmax(axis=-1)
            self._aux[node.id] = arg
            return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        if op == "flatten":
            return args[0].reshape(args[0].shape[0], -1)
        if op == "softmax":
            z = args[0] - args[0].max(axis=-1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=-1, keepdims=True)
        if op == "cross_entropy":
            logits, target = args
            z = logits - logits.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
            log_p = z - lse
            self._aux[node.id] = np.exp(log_p)
            per_row = -(target * log_p).sum(axis=-1)
            reduction = node.attrs["reduction"]
            if reduction == "none":
                return per_row
            total = per_row.sum()
            if reduction == "mean":
                total = total / max(1, per_row.size)
            return np.asarray(total, dtype=DTYPE)
        raise NotImplementedError(op)

    # -------------------------------------------------------------- gradients
    def backward(self, seed=None) -> dict[str, np.ndarray]:
        """Propagate ``seed`` (d loss / d output) back to every named input.

        Returns a dict mapping input names to gradient arrays. Inputs that do
        not influence the output get zero gradients.
        """
        if self._values is None or self._forward_output is None:
            raise GraphStateError("backward called before forward")
        out = self._forward_output
        out_value = self._values[out.id]
        if seed is None:
            if out_value.size != 1:
                raise ShapeError(f"node {out.name!r}: seed required for non-scalar output")
            seed = np.ones_like(out_value)
        seed = as_tensor(seed)
        if seed.shape != out_value.shape:
            raise ShapeError(
                f"node {out.name!r}: seed shape {seed.shape} does not match output {out_value.shape}"
            )
        grads: dict[int, np.ndarray] = {out.id: seed}
        for node in reversed(self._ancestors(out)):
            g = grads.get(node.id)
            if g is None or node.op == "input":
                continue
            args = [self._values[i] for i in node.inputs]
            for input_id, gi in zip(node.inputs, self._grad(node, args, g)):
                if gi is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + gi
                else:
                    grads[input_id] = gi
        result = {}
        for name, node in self.input_nodes.items():
            if node.id in self._values:
                g = grads.get(node.id)
                result[name] = np.zeros_like(self._values[node.id]) if g is None else g
        return result

    def _grad(self, node: Node, args, g):
        op = node.op
        if op == "matmul":
            a, b = args
            a2 = a if a.ndim == 2 else a[None, :]
            b2 = b if b.ndim == 2 else b[:, None]
            g2 = g.reshape(a2.shape[0], b2.shape[1])
            ga = (g2 @ b2.T).reshape(a.shape)
            gb = (a2.T @ g2).reshape(b.shape)
            return ga, gb
        if op == "add":
            return _unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)
        if op == "mul":
            a, b = args
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        if op == "relu":
            return (g * (args[0] > 0),)
        if op == "tanh":
            t = self._values[node.id]
            return (g * (1.0 - t * t),)
        if op == "conv2d":
            x_padded = self._aux[node.id]
            w = args[1]
            kh, kw = w.shape[2:]
            ho, wo = g.shape[2:]
            windows = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
            gw = np.einsum("bchwij,bfhw->fcij", windows, g, optimize=True)
            gx = np.zeros_like(x_padded)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += np.einsum("bfhw,fc->bchw", g, w[:, :, i, j], optimize=True)
            if node.attrs["padding"] == "same":
                ph, pw = kh // 2, kw // 2
                gx = gx[:, :, ph:gx.shape[2] - ph, pw:gx.shape[3] - pw]
            return np.ascontiguousarray(gx), gw
        if op == "maxpool2":
            x = args[0]
            b, c, h, w = x.shape
            arg = self._aux[node.id]
            blocks = np.zeros((b, c, h // 2, w // 2, 4), dtype=DTYPE)
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            gx = blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            return (np.ascontiguousarray(gx.reshape(b, c, h, w)),)
        if op == "flatten":
            return (g.reshape(args[0].shape),)
        if op == "softmax":
            p = self._values[node.id]
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
        if op == "cross_entropy":
            logits, target = args
            p = self._aux[node.id]
            reduction = node.attrs["reduction"]
            rows = p.shape[:-1]
            if reduction == "none":
                scale = g[..., None]
            elif reduction == "sum":
                scale = g
            else:
                scale = g / max(1, int(np.prod(rows, dtype=np.int64)))
            tsum = np.broadcast_to(target, p.shape).sum(axis=-1, keepdims=True)
            glogits = scale * (p * tsum - np.broadcast_to(target, p.shape))
            log_p = np.log(np.maximum(p, np.finfo(DTYPE).tiny))
            gtarget = _unbroadcast(-scale * np.broadcast_to(log_p, p.shape), target.shape)
            return glogits, gtarget
        raise NotImplementedError(op)


def finite_diff_check(graph: Graph, point, h: float = 1e-5, *, wrt: str | None = None,
                      inputs: dict | None = None, projection=None) -> float:
    """Compare ``backward`` against central differences.

    The scalar being differentiated is ``sum(projection * output)``; by default
    ``projection`` is a fixed pseudo-random array so that every output entry
    contributes. Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1e-12, |analytic|)``.
    """
    if not h > 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    if wrt is None:
        wrt = next(iter(graph.input_nodes))
    feed = dict(inputs or {})
    point = as_tensor(point)
    feed[wrt] = point
    out = graph.forward(feed)
    if projection is None:
        projection = np.random.default_rng(0).uniform(0.5, 1.5, size=out.shape)
    projection = as_tensor(projection)
    analytic = graph.backward(projection)[wrt]

    declared = graph.input_nodes[wrt].shape
    batched = (
        len(declared) > 0 and declared[0] is None and point.shape[0] == 1
        and out.ndim >= 1 and out.shape[0] == 1
    )
    flat = point.reshape(-1)
    numeric = np.empty(flat.size, dtype=DTYPE)
    if batched:
        # evaluate all 2n perturbed copies as one batch
        n = flat.size
        eye = np.eye(n, dtype=DTYPE) * h
        chunk = max(1, 4096 // max(1, out.size))
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            steps = eye[start:stop]
            plus = (flat[None, :] + steps).reshape((stop - start,) + point.shape[1:])
            minus = (flat[None, :] - steps).reshape((stop - start,) + point.shape[1:])
            feed[wrt] = np.concatenate([plus, minus], axis=0)
            vals = graph.forward(feed)
            vals = (vals * projection).reshape(vals.shape[0], -1).sum(axis=1)
            numeric[start:stop] = (vals[: stop - start] - vals[stop - start:]) / (2 * h)
    else:
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += h
            feed[wrt] = bumped.reshape(point.shape)
            f_plus = float((graph.forward(feed) * projection).sum())
            bumped[i] -= 2 * h
            feed[wrt] = bumped.reshape(point.shape)
            f_minus = float((graph.forward(feed) * projection).sum())
            numeric[i] = (f_plus - f_minus) / (2 * h)
    # leave the graph holding the unperturbed pass
    feed[wrt] = point
    graph.forward(feed)
    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1e-12, np.abs(a))
    return float(err.max()) if err.size else 0.0
