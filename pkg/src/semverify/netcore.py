"""Dataflow-graph representation of small feedforward/convolutional networks.

A network is a topologically ordered list of nodes over a closed layer set
(affine, conv, transposed conv, ReLU, add, flatten, reshape, input,
constant).  The module provides exact float32 forward inference, analytic
reverse-mode gradients, and a cached flat affine form of every linear node
that the bound-propagation machinery reuses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

FLOAT = np.float32


class GraphError(ValueError):
    """Structural problem in a network graph."""


class EvalError(RuntimeError):
    """Runtime problem while evaluating a graph (bad inputs, non-finite value)."""


@dataclass(frozen=True)
class Tensor:
    """Row-major float32 tensor: a shape plus flat data.

    All elements must be finite and ``prod(shape) == len(data)``.
    """

    shape: Tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        data = np.ascontiguousarray(self.data, dtype=FLOAT).ravel()
        object.__setattr__(self, "data", data)
        if any(d <= 0 for d in shape):
            raise ValueError(f"non-positive dimension in shape {shape}")
        if int(np.prod(shape)) != data.size:
            raise ValueError(
                f"shape {shape} implies {int(np.prod(shape))} elements, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor contains non-finite elements")

    @classmethod
    def of(cls, array) -> "Tensor":
        arr = np.asarray(array, dtype=FLOAT)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(arr.shape, arr)

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size


# --------------------------------------------------------------------------
# Node kinds (closed set: each needs forward, backward, interval and linear
# relaxation rules, so no open registry)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InputNode:
    name: str
    shape: Tuple[int, ...]


@dataclass(frozen=True)
class ConstantNode:
    value: Tensor


@dataclass(frozen=True)
class AffineNode:
    weights: np.ndarray  # (m, k) float32
    bias: np.ndarray  # (m,) float32
    pred: int


@dataclass(frozen=True)
class Conv2dNode:
    kernels: np.ndarray  # (out_c, in_c, kh, kw) float32
    bias: np.ndarray  # (out_c,) float32
    stride: int
    padding: int
    pred: int


@dataclass(frozen=True)
class ConvTranspose2dNode:
    kernels: np.ndarray  # (in_c, out_c, kh, kw) float32, torch convention
    bias: np.ndarray  # (out_c,) float32
    stride: int
    padding: int
    pred: int


@dataclass(frozen=True)
class ReLUNode:
    pred: int


@dataclass(frozen=True)
class AddNode:
    pred_a: int
    pred_b: int


@dataclass(frozen=True)
class FlattenNode:
    pred: int


@dataclass(frozen=True)
class ReshapeNode:
    shape: Tuple[int, ...]
    pred: int


Node = Union[
    InputNode,
    ConstantNode,
    AffineNode,
    Conv2dNode,
    ConvTranspose2dNode,
    ReLUNode,
    AddNode,
    FlattenNode,
    ReshapeNode,
]


def node_preds(node: Node) -> Tuple[int, ...]:
    if isinstance(node, (InputNode, ConstantNode)):
        return ()
    if isinstance(node, AddNode):
        return (node.pred_a, node.pred_b)
    return (node.pred,)


def node_kind(node: Node) -> str:
    return type(node).__name__.removesuffix("Node").lower()


def _as_f32(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=FLOAT)
    if not np.all(np.isfinite(arr)):
        raise GraphError(f"non-finite values in {name}")
    return arr


@dataclass
class LinOp:
    """Flat affine form ``y = m @ x + b`` of a linear node, cached per graph.

    ``m32`` is used by float32 inference; the float64 variants (including the
    positive/negative split needed for interval arithmetic) by bound
    propagation.  Matrices are dense for FC layers and CSR for convolutions.
    """

    m32: Union[np.ndarray, sp.csr_matrix]
    b32: np.ndarray
    m64: Union[np.ndarray, sp.csr_matrix]
    b64: np.ndarray
    pos64: Union[np.ndarray, sp.csr_matrix]
    neg64: Union[np.ndarray, sp.csr_matrix]

    @classmethod
    def from_dense(cls, m: np.ndarray, b: np.ndarray) -> "LinOp":
        m64 = m.astype(np.float64)
        return cls(
            m32=m.astype(FLOAT),
            b32=b.astype(FLOAT),
            m64=m64,
            b64=b.astype(np.float64),
            pos64=np.maximum(m64, 0.0),
            neg64=np.minimum(m64, 0.0),
        )

    @classmethod
    def from_sparse(cls, m: sp.coo_matrix, b: np.ndarray) -> "LinOp":
        m64 = m.astype(np.float64).tocsr()
        return cls(
            m32=m.astype(FLOAT).tocsr(),
            b32=b.astype(FLOAT),
            m64=m64,
            b64=b.astype(np.float64),
            pos64=m64.maximum(0.0).tocsr(),
            neg64=m64.minimum(0.0).tocsr(),
        )

    def apply32(self, x: np.ndarray) -> np.ndarray:
        return self.m32 @ x + self.b32

    def apply_transpose64(self, ct: np.ndarray) -> np.ndarray:
        return self.m64.T @ ct


def _conv2d_matrix(node: Conv2dNode, in_shape: Tuple[int, ...]):
    """Materialize a Conv2d as a sparse matrix over the flattened input."""
    c, h, w = in_shape
    oc, ic, kh, kw = node.kernels.shape
    st, p = node.stride, node.padding
    oh = (h + 2 * p - kh) // st + 1
    ow = (w + 2 * p - kw) // st + 1
    rows, cols, vals = [], [], []
    kern = node.kernels
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                r = (o * oh + i) * ow + j
                for ci in range(ic):
                    for ki in range(kh):
                        y = i * st - p + ki
                        if y < 0 or y >= h:
                            continue
                        for kj in range(kw):
                            x = j * st - p + kj
                            if x < 0 or x >= w:
                                continue
                            rows.append(r)
                            cols.append((ci * h + y) * w + x)
                            vals.append(kern[o, ci, ki, kj])
    m = sp.coo_matrix(
        (np.asarray(vals, dtype=np.float64), (rows, cols)),
        shape=(oc * oh * ow, c * h * w),
    )
    b = np.repeat(node.bias.astype(np.float64), oh * ow)
    return m, b, (oc, oh, ow)


def _conv_transpose2d_matrix(node: ConvTranspose2dNode, in_shape: Tuple[int, ...]):
    c, h, w = in_shape
    ic, oc, kh, kw = node.kernels.shape
    st, p = node.stride, node.padding
    oh = (h - 1) * st - 2 * p + kh
    ow = (w - 1) * st - 2 * p + kw
    rows, cols, vals = [], [], []
    kern = node.kernels
    for ci in range(ic):
        for i in range(h):
            for j in range(w):
                col = (ci * h + i) * w + j
                for o in range(oc):
                    for ki in range(kh):
                        y = i * st - p + ki
                        if y < 0 or y >= oh:
                            continue
                        for kj in range(kw):
                            x = j * st - p + kj
                            if x < 0 or x >= ow:
                                continue
                            rows.append((o * oh + y) * ow + x)
                            cols.append(col)
                            vals.append(kern[ci, o, ki, kj])
    m = sp.coo_matrix(
        (np.asarray(vals, dtype=np.float64), (rows, cols)),
        shape=(oc * oh * ow, c * h * w),
    )
    b = np.repeat(node.bias.astype(np.float64), oh * ow)
    return m, b, (oc, oh, ow)


def _infer_shape(node: Node, shapes: List[Optional[Tuple[int, ...]]], idx: int,
                 errors: List[str]) -> Optional[Tuple[int, ...]]:
    def pred_shape(p):
        return shapes[p]

    if isinstance(node, InputNode):
        if any(d <= 0 for d in node.shape):
            errors.append(f"node {idx} (input '{node.name}'): non-positive shape {node.shape}")
            return None
        return tuple(node.shape)
    if isinstance(node, ConstantNode):
        return node.value.shape
    if isinstance(node, AffineNode):
        ps = pred_shape(node.pred)
        if ps is None:
            return None
        w = node.weights
        if w.ndim != 2 or node.bias.ndim != 1 or node.bias.shape[0] != w.shape[0]:
            errors.append(f"node {idx} (affine): weight/bias dimensions inconsistent")
            return None
        if int(np.prod(ps)) != w.shape[1]:
            errors.append(
                f"node {idx} (affine): shape mismatch, weights expect {w.shape[1]} "
                f"inputs but predecessor has {int(np.prod(ps))}"
            )
            return None
        return (w.shape[0],)
    if isinstance(node, Conv2dNode):
        ps = pred_shape(node.pred)
        if ps is None:
            return None
        if len(ps) != 3:
            errors.append(f"node {idx} (conv2d): expects (c,h,w) input, got {ps}")
            return None
        c, h, w = ps
        oc, ic, kh, kw = node.kernels.shape
        if ic != c:
            errors.append(f"node {idx} (conv2d): kernel in-channels {ic} != input channels {c}")
            return None
        if node.stride < 1 or node.padding < 0:
            errors.append(f"node {idx} (conv2d): invalid stride/padding")
            return None
        oh = (h + 2 * node.padding - kh) // node.stride + 1
        ow = (w + 2 * node.padding - kw) // node.stride + 1
        if oh < 1 or ow < 1:
            errors.append(f"node {idx} (conv2d): kernel larger than padded input")
            return None
        return (oc, oh, ow)
    if isinstance(node, ConvTranspose2dNode):
        ps = pred_shape(node.pred)
        if ps is None:
            return None
        if len(ps) != 3:
            errors.append(f"node {idx} (conv_transpose2d): expects (c,h,w) input, got {ps}")
            return None
        c, h, w = ps
        ic, oc, kh, kw = node.kernels.shape
        if ic != c:
            errors.append(
                f"node {idx} (conv_transpose2d): kernel in-channels {ic} != input channels {c}"
            )
            return None
        oh = (h - 1) * node.stride - 2 * node.padding + kh
        ow = (w - 1) * node.stride - 2 * node.padding + kw
        if oh < 1 or ow < 1:
            errors.append(f"node {idx} (conv_transpose2d): empty output")
            return None
        return (oc, oh, ow)
    if isinstance(node, ReLUNode):
        return pred_shape(node.pred)
    if isinstance(node, AddNode):
        sa, sb = pred_shape(node.pred_a), pred_shape(node.pred_b)
        if sa is None or sb is None:
            return None
        if sa != sb:
            errors.append(f"node {idx} (add): predecessor shapes differ, {sa} vs {sb}")
            return None
        return sa
    if isinstance(node, FlattenNode):
        ps = pred_shape(node.pred)
        return None if ps is None else (int(np.prod(ps)),)
    if isinstance(node, ReshapeNode):
        ps = pred_shape(node.pred)
        if ps is None:
            return None
        if int(np.prod(ps)) != int(np.prod(node.shape)):
            errors.append(
                f"node {idx} (reshape): cannot reshape {ps} into {tuple(node.shape)}"
            )
            return None
        return tuple(node.shape)
    errors.append(f"node {idx}: unknown node kind {type(node).__name__}")
    return None


class NetworkGraph:
    """Immutable dataflow DAG.  Nodes are stored in topological order
    (every predecessor index is smaller than the node's own index);
    structural errors are collected rather than raised so that
    :func:`validate_graph` can report them."""

    def __init__(self, nodes: Sequence[Node], output: Optional[int] = None):
        self.nodes: List[Node] = list(nodes)
        self.output: int = len(self.nodes) - 1 if output is None else output
        self.inputs: Dict[str, int] = {}
        self.input_order: List[str] = []
        self.out_shapes: List[Optional[Tuple[int, ...]]] = []
        self._errors: List[str] = []
        self._linops: Dict[int, LinOp] = {}
        self._check_and_build()

    # -- construction ------------------------------------------------------

    def _check_and_build(self):
        errors = self._errors
        n = len(self.nodes)
        if n == 0:
            errors.append("graph has no nodes")
            return
        if not (0 <= self.output < n):
            errors.append(f"output index {self.output} out of range")
        for i, node in enumerate(self.nodes):
            for p in node_preds(node):
                if not (0 <= p < i):
                    errors.append(
                        f"node {i} ({node_kind(node)}): predecessor {p} is not earlier "
                        "in topological order (cycle or ordering error)"
                    )
            if isinstance(node, InputNode):
                if node.name in self.inputs:
                    errors.append(f"node {i}: duplicate input name '{node.name}'")
                else:
                    self.inputs[node.name] = i
                    self.input_order.append(node.name)
        if not self.inputs:
            errors.append("graph has no input nodes")
        if errors:
            return

        for kind, arrs in self._param_arrays():
            for name, a in arrs:
                if not np.all(np.isfinite(np.asarray(a))):
                    errors.append(f"non-finite parameter in {kind} ({name})")
        if errors:
            return

        shapes: List[Optional[Tuple[int, ...]]] = []
        for i, node in enumerate(self.nodes):
            shapes.append(_infer_shape(node, shapes, i, errors))
        self.out_shapes = shapes
        if errors or shapes[self.output] is None:
            if shapes[self.output] is None and not errors:
                errors.append("output shape could not be inferred")
            return

        for i, node in enumerate(self.nodes):
            if isinstance(node, AffineNode):
                self._linops[i] = LinOp.from_dense(node.weights, node.bias)
            elif isinstance(node, Conv2dNode):
                m, b, _ = _conv2d_matrix(node, shapes[node.pred])
                self._linops[i] = LinOp.from_sparse(m, b)
            elif isinstance(node, ConvTranspose2dNode):
                m, b, _ = _conv_transpose2d_matrix(node, shapes[node.pred])
                self._linops[i] = LinOp.from_sparse(m, b)

    def _param_arrays(self):
        for node in self.nodes:
            if isinstance(node, AffineNode):
                yield "affine", [("weights", node.weights), ("bias", node.bias)]
            elif isinstance(node, (Conv2dNode, ConvTranspose2dNode)):
                yield node_kind(node), [("kernels", node.kernels), ("bias", node.bias)]

    # -- queries -----------------------------------------------------------

    @property
    def ok(self) -> bool:
        return not self._errors

    def linop(self, idx: int) -> LinOp:
        return self._linops[idx]

    def out_shape(self, idx: Optional[int] = None) -> Tuple[int, ...]:
        idx = self.output if idx is None else idx
        shape = self.out_shapes[idx]
        if shape is None:
            raise GraphError(f"shape of node {idx} is undefined: {self._errors}")
        return shape

    def out_size(self, idx: Optional[int] = None) -> int:
        return int(np.prod(self.out_shape(idx)))

    def input_layout(self) -> List[Tuple[str, int, int]]:
        """Flattened external-variable layout as (name, offset, size)."""
        layout, off = [], 0
        for name in self.input_order:
            size = self.out_size(self.inputs[name])
            layout.append((name, off, size))
            off += size
        return layout

    @property
    def flat_input_dim(self) -> int:
        return sum(size for _, _, size in self.input_layout())

    def relu_ids(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if isinstance(n, ReLUNode)]

    def parameter_count(self) -> int:
        total = 0
        for node in self.nodes:
            if isinstance(node, AffineNode):
                total += node.weights.size + node.bias.size
            elif isinstance(node, (Conv2dNode, ConvTranspose2dNode)):
                total += node.kernels.size + node.bias.size
            elif isinstance(node, ConstantNode):
                total += node.value.size
        return total


def validate_graph(g: NetworkGraph) -> List[str]:
    """Return the list of structural errors (empty iff the graph is valid)."""
    return list(g._errors)


class GraphBuilder:
    """Small convenience builder used by fixtures, composition and tests."""

    def __init__(self):
        self.nodes: List[Node] = []

    def add(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, name: str, shape) -> int:
        return self.add(InputNode(name, tuple(int(d) for d in np.atleast_1d(shape))))

    def constant(self, value) -> int:
        return self.add(ConstantNode(Tensor.of(value)))

    def affine(self, weights, bias, pred: int) -> int:
        return self.add(AffineNode(_as_f32(weights, "weights"), _as_f32(bias, "bias"), pred))

    def conv2d(self, kernels, bias, pred: int, stride: int = 1, padding: int = 0) -> int:
        return self.add(
            Conv2dNode(_as_f32(kernels, "kernels"), _as_f32(bias, "bias"), stride, padding, pred)
        )

    def conv_transpose2d(self, kernels, bias, pred: int, stride: int = 1, padding: int = 0) -> int:
        return self.add(
            ConvTranspose2dNode(
                _as_f32(kernels, "kernels"), _as_f32(bias, "bias"), stride, padding, pred
            )
        )

    def relu(self, pred: int) -> int:
        return self.add(ReLUNode(pred))

    def add_nodes(self, a: int, b: int) -> int:
        return self.add(AddNode(a, b))

    def flatten(self, pred: int) -> int:
        return self.add(FlattenNode(pred))

    def reshape(self, shape, pred: int) -> int:
        return self.add(ReshapeNode(tuple(int(d) for d in shape), pred))

    def build(self, output: Optional[int] = None) -> NetworkGraph:
        g = NetworkGraph(self.nodes, output)
        if not g.ok:
            raise GraphError("; ".join(g._errors))
        return g


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def _check_inputs(g: NetworkGraph, inputs: Dict[str, Tensor]):
    if not g.ok:
        raise GraphError("invalid graph: " + "; ".join(g._errors))
    missing = set(g.inputs) - set(inputs)
    extra = set(inputs) - set(g.inputs)
    if missing:
        raise EvalError(f"missing inputs: {sorted(missing)}")
    if extra:
        raise EvalError(f"unknown inputs: {sorted(extra)}")
    for name, t in inputs.items():
        want = g.out_shape(g.inputs[name])
        if t.shape != want:
            raise EvalError(f"input '{name}' has shape {t.shape}, expected {want}")


def forward_values(g: NetworkGraph, inputs: Dict[str, Tensor]) -> List[np.ndarray]:
    """Per-node flat float32 values in topological order (internal workhorse)."""
    _check_inputs(g, inputs)
    vals: List[np.ndarray] = [None] * len(g.nodes)  # type: ignore[list-item]
    for i, node in enumerate(g.nodes):
        if isinstance(node, InputNode):
            v = inputs[node.name].data
        elif isinstance(node, ConstantNode):
            v = node.value.data
        elif isinstance(node, (AffineNode, Conv2dNode, ConvTranspose2dNode)):
            v = g.linop(i).apply32(vals[node.pred])
        elif isinstance(node, ReLUNode):
            v = np.maximum(vals[node.pred], FLOAT(0))
        elif isinstance(node, AddNode):
            v = vals[node.pred_a] + vals[node.pred_b]
        else:  # Flatten / Reshape are identities on flat data
            v = vals[node.pred]
        if not np.all(np.isfinite(v)):
            raise EvalError(f"non-finite value at node {i} ({node_kind(node)})")
        vals[i] = np.asarray(v, dtype=FLOAT)
    return vals


def forward(g: NetworkGraph, inputs: Dict[str, Tensor]) -> Tensor:
    """Exact float32 evaluation in stored topological order; deterministic."""
    vals = forward_values(g, inputs)
    return Tensor(g.out_shape(), vals[g.output])


def backward(
    g: NetworkGraph, inputs: Dict[str, Tensor], output_cotangent: Tensor
) -> Dict[str, Tensor]:
    """Gradient of <cotangent, output> w.r.t. every named input.

    Accumulates in float64 over the float32 forward values; the ReLU
    subgradient at exactly 0 is taken to be 0.
    """
    if output_cotangent.shape != g.out_shape():
        raise EvalError(
            f"cotangent shape {output_cotangent.shape} != output shape {g.out_shape()}"
        )
    vals = forward_values(g, inputs)
    cts: List[Optional[np.ndarray]] = [None] * len(g.nodes)
    cts[g.output] = output_cotangent.data.astype(np.float64)

    def send(idx: int, ct: np.ndarray):
        if cts[idx] is None:
            cts[idx] = ct.copy()
        else:
            cts[idx] = cts[idx] + ct

    for i in range(len(g.nodes) - 1, -1, -1):
        ct = cts[i]
        if ct is None:
            continue
        node = g.nodes[i]
        if isinstance(node, (InputNode, ConstantNode)):
            continue
        if isinstance(node, (AffineNode, Conv2dNode, ConvTranspose2dNode)):
            send(node.pred, g.linop(i).apply_transpose64(ct))
        elif isinstance(node, ReLUNode):
            mask = vals[node.pred] > 0
            send(node.pred, ct * mask)
        elif isinstance(node, AddNode):
            send(node.pred_a, ct)
            send(node.pred_b, ct)
        else:
            send(node.pred, ct)

    grads: Dict[str, Tensor] = {}
    for name, idx in g.inputs.items():
        ct = cts[idx]
        if ct is None:
            ct = np.zeros(g.out_size(idx), dtype=np.float64)
        grads[name] = Tensor(g.out_shape(idx), ct.astype(FLOAT))
    return grads
