"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is deliberately small and closed: every piece of model
math downstream is expressed through `apply_primitive`, which keeps the
backward pass auditable against one vjp table.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

PRIMITIVE_KINDS = frozenset({
    "matmul", "add", "sub", "mul_elem", "scale", "tanh", "exp", "log",
    "softmax_lastdim", "mean_lastdim", "sum", "concat_lastdim",
    "gather_rows", "dot", "masked_fill", "reshape",
})


class ShapeMismatchError(ValueError):
    """Input extents do not conform to the primitive being applied."""

    def __init__(self, kind: str, shapes) -> None:
        super().__init__(f"{kind}: incompatible shapes {list(shapes)}")
        self.kind = kind
        self.shapes = list(shapes)


class DomainError(ValueError):
    """Input values fall outside a primitive's documented domain."""


def tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _promote_matmul(a, b, ta, tb):
    """Apply transpose flags and lift 1-D operands to 2-D, numpy style."""
    if ta:
        if a.ndim < 2:
            raise ShapeMismatchError("matmul", [a.shape, b.shape])
        a = np.swapaxes(a, -1, -2)
    if tb:
        if b.ndim < 2:
            raise ShapeMismatchError("matmul", [a.shape, b.shape])
        b = np.swapaxes(b, -1, -2)
    a_vec = a.ndim == 1
    b_vec = b.ndim == 1
    a2 = a[None, :] if a_vec else a
    b2 = b[:, None] if b_vec else b
    return a2, b2, a_vec, b_vec


def _softmax_lastdim(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def apply_primitive(kind: str, inputs: Sequence[np.ndarray], attrs: dict | None = None) -> np.ndarray:
    """Evaluate one primitive on plain arrays (no recording)."""
    attrs = attrs or {}
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]

    if kind == "matmul":
        a, b = xs
        ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
        a2, b2, a_vec, b_vec = _promote_matmul(a, b, ta, tb)
        if a2.shape[-1] != b2.shape[-2]:
            raise ShapeMismatchError("matmul", [a.shape, b.shape])
        out = np.matmul(a2, b2)
        if a_vec:
            out = out[..., 0, :]
        if b_vec:
            out = out[..., 0]
        return out
    if kind in ("add", "sub", "mul_elem"):
        a, b = xs
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeMismatchError(kind, [a.shape, b.shape]) from None
        return {"add": np.add, "sub": np.subtract, "mul_elem": np.multiply}[kind](a, b)
    if kind == "scale":
        return xs[0] * float(attrs["factor"])
    if kind == "tanh":
        return np.tanh(xs[0])
    if kind == "exp":
        return np.exp(xs[0])
    if kind == "log":
        if np.any(xs[0] <= 0.0):
            raise DomainError("log: input must be strictly positive")
        return np.log(xs[0])
    if kind == "softmax_lastdim":
        return _softmax_lastdim(xs[0])
    if kind == "mean_lastdim":
        return xs[0].mean(axis=-1, keepdims=attrs.get("keepdims", False))
    if kind == "sum":
        axis = attrs.get("axis")
        return xs[0].sum(axis=axis, keepdims=attrs.get("keepdims", False))
    if kind == "concat_lastdim":
        base = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != base:
                raise ShapeMismatchError("concat_lastdim", [x.shape for x in xs])
        return np.concatenate(xs, axis=-1)
    if kind == "gather_rows":
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        x = xs[0]
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeMismatchError("gather_rows", [x.shape, ("index", int(idx.min()), int(idx.max()))])
        return x[idx]
    if kind == "dot":
        a, b = xs
        if a.ndim != 1 or a.shape != b.shape:
            raise ShapeMismatchError("dot", [a.shape, b.shape])
        return np.asarray(a @ b)
    if kind == "masked_fill":
        x, mask = xs
        try:
            np.broadcast_shapes(x.shape, mask.shape)
        except ValueError:
            raise ShapeMismatchError("masked_fill", [x.shape, mask.shape]) from None
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise DomainError("masked_fill: mask entries must be 0 or 1")
        return x * (1.0 - mask) + float(attrs["fill"]) * mask
    if kind == "reshape":
        return xs[0].reshape(attrs["shape"])
    raise ValueError(f"unknown primitive kind: {kind!r}")


def _vjp(kind: str, attrs: dict, inputs: list[np.ndarray], out: np.ndarray, g: np.ndarray) -> list[np.ndarray | None]:
    """Gradients of one primitive w.r.t. each input."""
    if kind == "matmul":
        a, b = inputs
        ta, tb = attrs.get("transpose_a", False), attrs.get("transpose_b", False)
        a2, b2, a_vec, b_vec = _promote_matmul(a, b, ta, tb)
        g2 = g
        if b_vec:
            g2 = g2[..., None]
        if a_vec:
            g2 = g2[..., None, :]
        da2 = np.matmul(g2, np.swapaxes(b2, -1, -2))
        db2 = np.matmul(np.swapaxes(a2, -1, -2), g2)
        da2 = _unbroadcast(da2, a2.shape)
        db2 = _unbroadcast(db2, b2.shape)
        da = da2[0] if a_vec else da2
        db = db2[:, 0] if b_vec else db2
        if ta:
            da = np.swapaxes(da, -1, -2)
        if tb:
            db = np.swapaxes(db, -1, -2)
        return [da, db]
    if kind == "add":
        a, b = inputs
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]
    if kind == "sub":
        a, b = inputs
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]
    if kind == "mul_elem":
        a, b = inputs
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if kind == "scale":
        return [g * float(attrs["factor"])]
    if kind == "tanh":
        return [g * (1.0 - out * out)]
    if kind == "exp":
        return [g * out]
    if kind == "log":
        return [g / inputs[0]]
    if kind == "softmax_lastdim":
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [out * (g - inner)]
    if kind == "mean_lastdim":
        x = inputs[0]
        n = x.shape[-1]
        gk = g if attrs.get("keepdims", False) else g[..., None]
        return [np.broadcast_to(gk / n, x.shape).copy()]
    if kind == "sum":
        x = inputs[0]
        axis = attrs.get("axis")
        if axis is None:
            return [np.broadcast_to(g, x.shape).copy()]
        gk = g if attrs.get("keepdims", False) else np.expand_dims(g, axis)
        return [np.broadcast_to(gk, x.shape).copy()]
    if kind == "concat_lastdim":
        grads = []
        offset = 0
        for x in inputs:
            w = x.shape[-1]
            grads.append(g[..., offset:offset + w])
            offset += w
        return grads
    if kind == "gather_rows":
        x = inputs[0]
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        gx = np.zeros_like(x)
        np.add.at(gx, idx, g)
        return [gx]
    if kind == "dot":
        a, b = inputs
        return [g * b, g * a]
    if kind == "masked_fill":
        x, mask = inputs
        return [_unbroadcast(g * (1.0 - mask), x.shape), None]
    if kind == "reshape":
        return [g.reshape(inputs[0].shape)]
    raise ValueError(f"unknown primitive kind: {kind!r}")


class Node:
    __slots__ = ("kind", "inputs", "attrs", "value", "param", "name")

    def __init__(self, kind, inputs, attrs, value, param=False, name=None):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.param = param
        self.name = name


class Ref:
    """Handle to a node on a tape; carries convenience builders."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int) -> None:
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _ap(self, kind, others=(), **attrs) -> "Ref":
        return self.tape.apply(kind, [self, *others], **attrs)

    def matmul(self, other, transpose_a=False, transpose_b=False):
        return self._ap("matmul", [other], transpose_a=transpose_a, transpose_b=transpose_b)

    def __add__(self, other):
        return self._ap("add", [other])

    def __sub__(self, other):
        return self._ap("sub", [other])

    def mul(self, other):
        return self._ap("mul_elem", [other])

    def scale(self, factor: float):
        return self._ap("scale", factor=float(factor))

    def tanh(self):
        return self._ap("tanh")

    def exp(self):
        return self._ap("exp")

    def log(self):
        return self._ap("log")

    def softmax(self):
        return self._ap("softmax_lastdim")

    def mean_last(self, keepdims=False):
        return self._ap("mean_lastdim", keepdims=keepdims)

    def sum(self, axis=None, keepdims=False):
        return self._ap("sum", axis=axis, keepdims=keepdims)

    def gather_rows(self, indices):
        return self._ap("gather_rows", indices=np.asarray(indices, dtype=np.int64))

    def dot(self, other):
        return self._ap("dot", [other])

    def masked_fill(self, mask, fill: float):
        return self._ap("masked_fill", [mask], fill=float(fill))

    def reshape(self, shape):
        return self._ap("reshape", shape=tuple(int(s) for s in shape))


class Tape:
    """Append-only record of primitive applications.

    Node inputs always precede the node itself, so a single reverse sweep
    over `nodes` performs backpropagation.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value, *, param: bool = False, name: str | None = None) -> Ref:
        self.nodes.append(Node("leaf", (), {}, tensor(value), param=param, name=name))
        return Ref(self, len(self.nodes) - 1)

    def apply(self, kind: str, inputs: Sequence[Ref], **attrs) -> Ref:
        if kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind: {kind!r}")
        ids = tuple(r.idx for r in inputs)
        value = apply_primitive(kind, [self.nodes[i].value for i in ids], attrs)
        self.nodes.append(Node(kind, ids, attrs, value))
        return Ref(self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's value from the leaves, in order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
            else:
                values.append(apply_primitive(node.kind, [values[i] for i in node.inputs], node.attrs))
        return values


def backward(tape: Tape, loss: Ref) -> dict[int, np.ndarray]:
    """dLoss/dParam for every parameter leaf on the tape.

    Parameters not reachable from the loss map to zero tensors.
    """
    loss_node = tape.nodes[loss.idx]
    if loss_node.value.shape != ():
        raise ShapeMismatchError("backward", [loss_node.value.shape])
    grads: dict[int, np.ndarray] = {loss.idx: np.ones(())}
    for idx in range(loss.idx, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.kind == "leaf":
            continue
        ins = [tape.nodes[i].value for i in node.inputs]
        for src, gi in zip(node.inputs, _vjp(node.kind, node.attrs, ins, node.value, g)):
            if gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    out: dict[int, np.ndarray] = {}
    for idx, node in enumerate(tape.nodes):
        if node.kind == "leaf" and node.param:
            out[idx] = grads.get(idx, np.zeros_like(node.value))
    return out


GradFn = Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]]


def finite_diff_check(f: GradFn, params: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must return (scalar loss, analytic gradients) and be deterministic
    given its parameters: any stochastic draws must be frozen by the caller.
    """
    params = [tensor(p) for p in params]
    base, grads = f(params)
    if not np.isfinite(base):
        return float("inf")
    worst = 0.0
    for p_idx, p in enumerate(params):
        flat = p.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up, _ = f(params)
            flat[k] = orig - step
            down, _ = f(params)
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return float("inf")
            numeric = (up - down) / (2.0 * step)
            analytic = float(grads[p_idx].ravel()[k])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
