"""Static computation graphs over float64 arrays with reverse-mode differentiation.

A :class:`Graph` is built once (placeholders, constants and op nodes) and then
evaluated any number of times with different bound inputs. Node ids are plain
integers assigned in construction order, so every node only references earlier
ones and the node list is already topologically sorted.

Tensors are ``numpy.ndarray`` values. Integer placeholders (class labels) are
allowed as ``gather`` indices; everything else is widened to float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

OP_KINDS = (
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2",
    "global_avg_pool",
    "dot",
    "l2_norm",
    "scalar_div",
    "log_softmax",
    "gather",
    "sum",
    "scale",
)
LEAF_KINDS = ("placeholder", "constant")


class GraphError(Exception):
    pass


class ShapeMismatchError(GraphError, ValueError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    pass


class NonScalarLossError(GraphError, ValueError):
    pass


class UnboundInputError(GraphError, KeyError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None

    def label(self) -> str:
        return f"node {self.id} ({self.op}{' ' + self.name if self.name else ''})"


# ---------------------------------------------------------------------------
# forward / backward kernels
#
# Each forward kernel returns (value, cache). Each backward kernel receives the
# upstream gradient, the input values, the output value and the cache, and
# returns one gradient per input (None for non-differentiable inputs).


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(node, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{node.label()}: cannot broadcast {a.shape} with {b.shape}") from None


def _fwd_add(node, a, b):
    _check_broadcast(node, a, b)
    return a + b, None


def _bwd_add(node, g, ins, out, cache):
    a, b = ins
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _fwd_sub(node, a, b):
    _check_broadcast(node, a, b)
    return a - b, None


def _bwd_sub(node, g, ins, out, cache):
    a, b = ins
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _fwd_mul(node, a, b):
    _check_broadcast(node, a, b)
    return a * b, None


def _bwd_mul(node, g, ins, out, cache):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_matmul(node, a, b):
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"{node.label()}: matmul of {a.shape} and {b.shape}")
    return a @ b, None


def _bwd_matmul(node, g, ins, out, cache):
    a, b = ins
    if a.ndim == 1:
        return g @ b.T, np.outer(a, g)
    return g @ b.T, a.T @ g


def _same_padding(k: int) -> tuple:
    return (k - 1) // 2, k // 2


def _correlate(xp: np.ndarray, w: np.ndarray):
    """Valid cross-correlation of padded NHWC input with a (kh, kw, cin, cout) kernel."""
    kh, kw = w.shape[:2]
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    out = np.tensordot(windows, w, axes=([3, 4, 5], [2, 0, 1]))
    return out, windows


def _fwd_conv2d(node, x, w):
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeMismatchError(f"{node.label()}: conv2d of input {x.shape} with kernel {w.shape}")
    kh, kw = w.shape[:2]
    if node.attrs["padding"] == "same":
        pads = (_same_padding(kh), _same_padding(kw))
    else:
        pads = ((0, 0), (0, 0))
    if x.shape[1] + sum(pads[0]) < kh or x.shape[2] + sum(pads[1]) < kw:
        raise ShapeMismatchError(f"{node.label()}: kernel {w.shape[:2]} larger than input {x.shape[1:3]}")
    xp = np.pad(x, ((0, 0), pads[0], pads[1], (0, 0))) if any(sum(p) for p in pads) else x
    out, windows = _correlate(xp, w)
    return out, (pads, windows)


def _bwd_conv2d(node, g, ins, out, cache):
    x, w = ins
    pads, windows = cache
    kh, kw = w.shape[:2]
    gw = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2]))  # C, kh, kw, O
    gw = gw.transpose(1, 2, 0, 3)
    # full correlation of the output gradient with the flipped, channel-swapped kernel
    gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    wf = w[::-1, ::-1].transpose(0, 1, 3, 2)
    gxp, _ = _correlate(gp, wf)
    (pt, _), (pl, _) = pads
    gx = gxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2], :]
    return np.ascontiguousarray(gx), gw


def _fwd_relu(node, x):
    return np.maximum(x, 0.0), None


def _bwd_relu(node, g, ins, out, cache):
    (x,) = ins
    # subgradient at exactly 0 is 0
    return (g * (x > 0),)


def _fwd_maxpool2(node, x):
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeMismatchError(f"{node.label()}: maxpool2 needs NHWC with even H, W; got {x.shape}")
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximum: ties go to the smallest flat index in the 2x2 window
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _bwd_maxpool2(node, g, ins, out, cache):
    (x,) = ins
    idx = cache
    n, h, w, c = x.shape
    blocks = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    gx = blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    return (gx,)


def _fwd_global_avg_pool(node, x):
    if x.ndim != 4:
        raise ShapeMismatchError(f"{node.label()}: global_avg_pool needs NHWC, got {x.shape}")
    return x.mean(axis=(1, 2)), None


def _bwd_global_avg_pool(node, g, ins, out, cache):
    (x,) = ins
    n, h, w, c = x.shape
    return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)


def _fwd_dot(node, a, b):
    if a.shape != b.shape or a.ndim == 0:
        raise ShapeMismatchError(f"{node.label()}: dot of {a.shape} and {b.shape}")
    return (a * b).sum(axis=-1), None


def _bwd_dot(node, g, ins, out, cache):
    a, b = ins
    g = np.asarray(g)[..., None]
    return g * b, g * a


def _fwd_l2_norm(node, x):
    if x.ndim == 0:
        raise ShapeMismatchError(f"{node.label()}: l2_norm of a scalar")
    norm = np.sqrt((x * x).sum(axis=-1))
    return np.maximum(norm, node.attrs["eps"]), norm


def _bwd_l2_norm(node, g, ins, out, cache):
    (x,) = ins
    norm = cache
    active = norm > node.attrs["eps"]
    safe = np.where(active, norm, 1.0)
    scale = np.where(active, np.asarray(g) / safe, 0.0)
    return (x * np.asarray(scale)[..., None],)


def _fwd_scalar_div(node, a, b):
    _check_broadcast(node, a, b)
    return a / b, None


def _bwd_scalar_div(node, g, ins, out, cache):
    a, b = ins
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _fwd_log_softmax(node, x):
    if x.ndim == 0:
        raise ShapeMismatchError(f"{node.label()}: log_softmax of a scalar")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)), None


def _bwd_log_softmax(node, g, ins, out, cache):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _fwd_gather(node, x, idx):
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        if not np.all(idx == np.round(idx)):
            raise ShapeMismatchError(f"{node.label()}: gather indices must be integers")
        idx = idx.astype(np.int64)
    if x.shape[:-1] != idx.shape:
        raise ShapeMismatchError(f"{node.label()}: gather of {idx.shape} indices from {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise IndexError(f"{node.label()}: gather index out of range for last axis {x.shape[-1]}")
    return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0], idx


def _bwd_gather(node, g, ins, out, cache):
    x, _ = ins
    gx = np.zeros_like(x)
    np.put_along_axis(gx, cache[..., None], np.asarray(g)[..., None], axis=-1)
    return gx, None


def _fwd_sum(node, x):
    return np.asarray(x.sum()), None


def _bwd_sum(node, g, ins, out, cache):
    (x,) = ins
    return (np.full(x.shape, float(g)),)


def _fwd_scale(node, x):
    return x * node.attrs["factor"], None


def _bwd_scale(node, g, ins, out, cache):
    return (g * node.attrs["factor"],)


_KERNELS: Dict[str, tuple] = {
    kind: (globals()[f"_fwd_{kind}"], globals()[f"_bwd_{kind}"]) for kind in OP_KINDS
}


def _kink_signature(node: Node, ins: Sequence[np.ndarray], cache: Any) -> Optional[np.ndarray]:
    """Discrete state of a piecewise op; a change between two points means a kink lies between them."""
    if node.op == "relu":
        return ins[0] > 0
    if node.op == "maxpool2":
        return cache
    if node.op == "l2_norm":
        return cache > node.attrs["eps"]
    return None


# ---------------------------------------------------------------------------


class Graph:
    """Append-only DAG of tensor operations.

    Build with the op methods, each returning the integer id of the new node,
    then call :meth:`evaluate` with a mapping from placeholder names to arrays.
    The most recent evaluation is kept on the instance so :meth:`backward` can
    reuse the cached forward values; a single instance is therefore not
    thread-safe, but separate instances share nothing.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.placeholders: Dict[str, int] = {}
        self.outputs: Dict[str, int] = {}
        self._values: Optional[List[np.ndarray]] = None
        self._caches: Optional[List[Any]] = None

    # -- construction -------------------------------------------------------

    def _append(self, op: str, inputs: Sequence[int] = (), name: Optional[str] = None, **attrs) -> int:
        for i in inputs:
            if not (isinstance(i, (int, np.integer)) and 0 <= i < len(self.nodes)):
                raise GraphError(f"{op}: input {i!r} is not an existing node id")
        node = Node(len(self.nodes), op, tuple(int(i) for i in inputs), attrs, name)
        self.nodes.append(node)
        return node.id

    def placeholder(self, name: str) -> int:
        if name in self.placeholders:
            raise GraphError(f"duplicate placeholder {name!r}")
        nid = self._append("placeholder", name=name)
        self.placeholders[name] = nid
        return nid

    def constant(self, value) -> int:
        return self._append("constant", value=np.asarray(value, dtype=np.float64))

    def mark_output(self, name: str, node: int) -> int:
        self.outputs[name] = node
        return node

    def add(self, a, b):
        return self._append("add", (a, b))

    def sub(self, a, b):
        return self._append("sub", (a, b))

    def mul(self, a, b):
        return self._append("mul", (a, b))

    def matmul(self, a, b):
        return self._append("matmul", (a, b))

    def conv2d(self, x, w, padding: str = "same"):
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        return self._append("conv2d", (x, w), padding=padding)

    def relu(self, x):
        return self._append("relu", (x,))

    def maxpool2(self, x):
        return self._append("maxpool2", (x,))

    def global_avg_pool(self, x):
        return self._append("global_avg_pool", (x,))

    def dot(self, a, b):
        return self._append("dot", (a, b))

    def l2_norm(self, x, eps: float = 0.0):
        return self._append("l2_norm", (x,), eps=float(eps))

    def scalar_div(self, a, b):
        return self._append("scalar_div", (a, b))

    def log_softmax(self, x):
        return self._append("log_softmax", (x,))

    def gather(self, x, index):
        return self._append("gather", (x, index))

    def sum(self, x):
        return self._append("sum", (x,))

    def scale(self, x, factor: float):
        return self._append("scale", (x,), factor=float(factor))

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, inputs: Mapping[str, Any], outputs: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        """Run the forward pass and return the marked outputs by name.

        Raises :class:`UnboundInputError` for a missing placeholder,
        :class:`ShapeMismatchError` naming the first node whose inputs do not
        fit, and :class:`NonFiniteError` if any node produces NaN or Inf.
        """
        values: List[np.ndarray] = [None] * len(self.nodes)  # type: ignore[list-item]
        caches: List[Any] = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op == "placeholder":
                if node.name not in inputs:
                    raise UnboundInputError(f"placeholder {node.name!r} is not bound")
                v = np.asarray(inputs[node.name])
                if not np.issubdtype(v.dtype, np.integer):
                    v = v.astype(np.float64, copy=False)
            elif node.op == "constant":
                v = node.attrs["value"]
            else:
                fwd = _KERNELS[node.op][0]
                # non-finite results are reported below with the node's name
                with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                    v, caches[node.id] = fwd(node, *(values[i] for i in node.inputs))
                v = np.asarray(v)
            if v.dtype.kind == "f" and not np.all(np.isfinite(v)):
                raise NonFiniteError(f"{node.label()}: non-finite value in output")
            values[node.id] = v
        self._values, self._caches = values, caches
        names = self.outputs if outputs is None else {k: self.outputs[k] for k in outputs}
        return {k: values[nid] for k, nid in names.items()}

    def value(self, node: int) -> np.ndarray:
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        return self._values[node]

    def kink_state(self) -> Dict[int, np.ndarray]:
        """Discrete branch state (ReLU signs, pool winners, norm clamps) of the last evaluation."""
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        state = {}
        for node in self.nodes:
            if node.op in LEAF_KINDS:
                continue
            sig = _kink_signature(node, [self._values[i] for i in node.inputs], self._caches[node.id])
            if sig is not None:
                state[node.id] = sig
        return state

    def backward(self, loss_node: int) -> Dict[int, np.ndarray]:
        """Gradient of a scalar node with respect to every node of the graph.

        Uses the values of the most recent :meth:`evaluate`. Nodes that do not
        influence the loss get zero gradients; integer placeholders get zeros too.
        """
        if self._values is None:
            raise GraphError("backward called before evaluate")
        values, caches = self._values, self._caches
        if values[loss_node].shape != ():
            raise NonScalarLossError(f"loss node {loss_node} has shape {values[loss_node].shape}, expected scalar")
        grads: Dict[int, np.ndarray] = {loss_node: np.asarray(1.0)}
        for node in reversed(self.nodes[: loss_node + 1]):
            g = grads.get(node.id)
            if g is None or node.op in LEAF_KINDS:
                continue
            bwd = _KERNELS[node.op][1]
            ins = [values[i] for i in node.inputs]
            for i, gi in zip(node.inputs, bwd(node, g, ins, values[node.id], caches[node.id])):
                if gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"{node.label()}: non-finite gradient flowing to node {i}")
                grads[i] = grads[i] + gi if i in grads else gi
        for node in self.nodes:
            if node.id not in grads:
                grads[node.id] = np.zeros(np.shape(values[node.id]))
            elif grads[node.id].shape != np.shape(values[node.id]):
                grads[node.id] = np.broadcast_to(grads[node.id], np.shape(values[node.id])).copy()
        return grads


def evaluate_graph(graph: Graph, inputs: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    return graph.evaluate(inputs)


def backward(graph: Graph, loss_node: int) -> Dict[int, np.ndarray]:
    return graph.backward(loss_node)
