"""Sound over-approximation of network output ranges over an input box.

Two propagators over the dataflow graph, both parameterized by a partial
ReLU phase assignment:

* interval arithmetic (:func:`interval_bounds`), and
* symbolic linear relaxation (:func:`linear_bounds`), which carries one lower
  and one upper affine function of the external inputs through every node.
  Crossing ReLUs are relaxed with the chord upper bound and a 0/1-slope lower
  bound; fixed phases replace the ReLU by identity or zero.

All arithmetic is float64 regardless of the float32 inference path, and every
interval endpoint is inflated outward by one ulp after each node as a cheap
substitute for directed rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .netcore import (
    AddNode,
    AffineNode,
    ConstantNode,
    Conv2dNode,
    ConvTranspose2dNode,
    InputNode,
    NetworkGraph,
    ReLUNode,
)

UNKNOWN, ACTIVE, INACTIVE = 0, 1, -1


class EmptyRegion(Exception):
    """A fixed ReLU phase contradicts the propagated bounds: the branch
    region is empty and can be pruned."""

    def __init__(self, node_id: int, neuron: int):
        super().__init__(f"empty region: relu node {node_id}, neuron {neuron}")
        self.node_id = node_id
        self.neuron = neuron


@dataclass(frozen=True)
class Box:
    """Per-dimension closed bounds, float64, all finite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        up = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        if lo.shape != up.shape or lo.ndim != 1:
            raise ValueError("box bounds must be equal-length vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > up):
            raise ValueError("box has lower > upper")

    @classmethod
    def of(cls, lower, upper) -> "Box":
        return cls(np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64))

    @classmethod
    def uniform(cls, lo: float, hi: float, dim: int) -> "Box":
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    @classmethod
    def concat(cls, boxes: Iterable["Box"]) -> "Box":
        boxes = list(boxes)
        return cls(
            np.concatenate([b.lower for b in boxes]),
            np.concatenate([b.upper for b in boxes]),
        )

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contained_in(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(
            np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol)
        )

    def intersect(self, other: "Box") -> "Box":
        return Box(np.maximum(self.lower, other.lower), np.minimum(self.upper, other.upper))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.uniform(size=(count, self.dim))
        return self.lower + u * (self.upper - self.lower)


class PhaseAssignment:
    """Partial ReLU phase assignment: per ReLU node an int8 vector with
    entries UNKNOWN (0), ACTIVE (1) or INACTIVE (-1)."""

    def __init__(self, graph: NetworkGraph, phases: Optional[Dict[int, np.ndarray]] = None):
        self._sizes = {i: graph.out_size(i) for i in graph.relu_ids()}
        self._phases: Dict[int, np.ndarray] = {}
        if phases:
            for node_id, vec in phases.items():
                if node_id not in self._sizes:
                    raise ValueError(f"node {node_id} is not a ReLU node")
                vec = np.asarray(vec, dtype=np.int8)
                if vec.size != self._sizes[node_id]:
                    raise ValueError(f"phase vector size mismatch at node {node_id}")
                self._phases[node_id] = vec

    def vector(self, node_id: int) -> np.ndarray:
        vec = self._phases.get(node_id)
        if vec is None:
            return np.zeros(self._sizes[node_id], dtype=np.int8)
        return vec

    def get(self, node_id: int, neuron: int) -> int:
        return int(self.vector(node_id)[neuron])

    def with_phase(self, node_id: int, neuron: int, phase: int) -> "PhaseAssignment":
        """Copy-on-write refinement."""
        new = PhaseAssignment.__new__(PhaseAssignment)
        new._sizes = self._sizes
        new._phases = dict(self._phases)
        vec = self.vector(node_id).copy()
        vec[neuron] = phase
        new._phases[node_id] = vec
        return new

    def fixed_items(self) -> List[Tuple[int, int, int]]:
        out = []
        for node_id in sorted(self._phases):
            vec = self._phases[node_id]
            for j in np.nonzero(vec)[0]:
                out.append((node_id, int(j), int(vec[j])))
        return out

    def num_fixed(self) -> int:
        return sum(int(np.count_nonzero(v)) for v in self._phases.values())


def _widen(lo: np.ndarray, up: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Outward 1-ulp inflation standing in for directed rounding."""
    return np.nextafter(lo, -np.inf), np.nextafter(up, np.inf)


@dataclass
class IntervalResult:
    node_boxes: Dict[int, Box]
    output: Box

    def pre_relu(self, graph: NetworkGraph, node_id: int) -> Box:
        return self.node_boxes[graph.nodes[node_id].pred]


def _relu_interval(lo, up, phase, node_id):
    """Interval rule for one ReLU node given per-neuron phases."""
    active = phase == ACTIVE
    inactive = phase == INACTIVE
    if np.any(active & (up < 0.0)):
        j = int(np.nonzero(active & (up < 0.0))[0][0])
        raise EmptyRegion(node_id, j)
    if np.any(inactive & (lo > 0.0)):
        j = int(np.nonzero(inactive & (lo > 0.0))[0][0])
        raise EmptyRegion(node_id, j)
    out_lo = np.maximum(lo, 0.0)
    out_up = np.maximum(up, 0.0)
    # fixed-active: value equals pre-activation, which is >= 0 on the region
    out_up = np.where(active, up, out_up)
    out_lo = np.where(active, np.maximum(lo, 0.0), out_lo)
    out_lo = np.where(inactive, 0.0, out_lo)
    out_up = np.where(inactive, 0.0, out_up)
    return out_lo, out_up


def _clip_to_prior(lo, up, prior: Optional[Box], node_id: int):
    """Intersect with bounds inherited from the parent branch.

    Sound because the parent's bounds hold on a superset of the current
    region; also keeps refinement monotone, which the relaxation alone does
    not guarantee (the 0/1 lower-slope choice can flip when intervals move).
    """
    if prior is None:
        return lo, up
    lo = np.maximum(lo, prior.lower)
    up = np.minimum(up, prior.upper)
    bad = lo > up
    if np.any(bad):
        # two sound bounds can only cross by rounding noise; collapse to a point
        gap = lo[bad] - up[bad]
        if np.any(gap > 1e-6):
            raise EmptyRegion(node_id, int(np.nonzero(bad)[0][0]))
        mid = 0.5 * (lo[bad] + up[bad])
        lo = lo.copy()
        up = up.copy()
        lo[bad] = mid
        up[bad] = mid
    return lo, up


def interval_bounds(
    g: NetworkGraph,
    input_box: Box,
    phases: Optional[PhaseAssignment] = None,
    prior_intervals: Optional[Dict[int, Box]] = None,
) -> IntervalResult:
    """Per-node interval propagation.  Sound for every concrete input in the
    box consistent with the phase assignment; raises :class:`EmptyRegion` if
    a fixed phase contradicts the propagated intervals."""
    if input_box.dim != g.flat_input_dim:
        raise ValueError(
            f"box dimension {input_box.dim} != flattened input dimension {g.flat_input_dim}"
        )
    phases = phases or PhaseAssignment(g)
    prior_intervals = prior_intervals or {}
    layout = {name: (off, size) for name, off, size in g.input_layout()}
    los: List[np.ndarray] = [None] * len(g.nodes)  # type: ignore[list-item]
    ups: List[np.ndarray] = [None] * len(g.nodes)  # type: ignore[list-item]
    boxes: Dict[int, Box] = {}
    for i, node in enumerate(g.nodes):
        if isinstance(node, InputNode):
            off, size = layout[node.name]
            lo = input_box.lower[off:off + size].copy()
            up = input_box.upper[off:off + size].copy()
        elif isinstance(node, ConstantNode):
            lo = up = node.value.data.astype(np.float64)
        elif isinstance(node, (AffineNode, Conv2dNode, ConvTranspose2dNode)):
            op = g.linop(i)
            lo = op.pos64 @ los[node.pred] + op.neg64 @ ups[node.pred] + op.b64
            up = op.pos64 @ ups[node.pred] + op.neg64 @ los[node.pred] + op.b64
        elif isinstance(node, ReLUNode):
            lo, up = _relu_interval(los[node.pred], ups[node.pred], phases.vector(i), i)
        elif isinstance(node, AddNode):
            lo = los[node.pred_a] + los[node.pred_b]
            up = ups[node.pred_a] + ups[node.pred_b]
        else:  # Flatten / Reshape
            lo, up = los[node.pred], ups[node.pred]
        lo, up = _widen(np.asarray(lo, dtype=np.float64), np.asarray(up, dtype=np.float64))
        lo, up = _clip_to_prior(lo, up, prior_intervals.get(i), i)
        los[i], ups[i] = lo, up
        boxes[i] = Box(lo, up)
    return IntervalResult(boxes, boxes[g.output])


@dataclass
class AffinePair:
    """Lower/upper affine bounds ``a @ x + c`` over the external inputs,
    together with the concretized interval (already intersected with the
    plain interval bounds)."""

    a_lo: np.ndarray  # (size, dim)
    c_lo: np.ndarray  # (size,)
    a_up: np.ndarray
    c_up: np.ndarray
    lo: np.ndarray
    up: np.ndarray


@dataclass
class LinearRelaxation:
    """Per-neuron symbolic bounds of a graph over an input box."""

    input_box: Box
    pre_relu: Dict[int, AffinePair]  # ReLU node id -> bounds of its pre-activation
    output: AffinePair
    node_intervals: Dict[int, Box] = field(default_factory=dict)

    def output_box(self) -> Box:
        return Box(self.output.lo, self.output.up)


def _concretize(a, c, box, sense):
    pos, neg = np.maximum(a, 0.0), np.minimum(a, 0.0)
    if sense == "lo":
        return pos @ box.lower + neg @ box.upper + c
    return pos @ box.upper + neg @ box.lower + c


class _SymbolicState:
    __slots__ = ("a_lo", "c_lo", "a_up", "c_up", "lo", "up")

    def __init__(self, a_lo, c_lo, a_up, c_up, lo, up):
        self.a_lo, self.c_lo = a_lo, c_lo
        self.a_up, self.c_up = a_up, c_up
        self.lo, self.up = lo, up


def _dense(a):
    return np.asarray(a.todense()) if hasattr(a, "todense") else np.asarray(a)


def linear_bounds(
    g: NetworkGraph,
    input_box: Box,
    phases: Optional[PhaseAssignment] = None,
    prior_intervals: Optional[Dict[int, Box]] = None,
) -> LinearRelaxation:
    """Symbolic affine bound propagation.

    Concretized intervals are intersected with interval propagation at every
    node, so they are never looser than :func:`interval_bounds`.  Branch and
    bound passes the parent node's intervals as ``prior_intervals``; they are
    intersected in as well (sound on the refined region, and it keeps
    refinement monotone).
    """
    if input_box.dim != g.flat_input_dim:
        raise ValueError(
            f"box dimension {input_box.dim} != flattened input dimension {g.flat_input_dim}"
        )
    phases = phases or PhaseAssignment(g)
    prior_intervals = prior_intervals or {}
    dim = input_box.dim
    layout = {name: (off, size) for name, off, size in g.input_layout()}
    states: List[_SymbolicState] = [None] * len(g.nodes)  # type: ignore[list-item]
    pre_relu: Dict[int, AffinePair] = {}
    node_intervals: Dict[int, Box] = {}

    for i, node in enumerate(g.nodes):
        if isinstance(node, InputNode):
            off, size = layout[node.name]
            a = np.zeros((size, dim))
            a[np.arange(size), off + np.arange(size)] = 1.0
            c = np.zeros(size)
            st = _SymbolicState(a, c, a.copy(), c.copy(), None, None)
        elif isinstance(node, ConstantNode):
            size = node.value.size
            a = np.zeros((size, dim))
            c = node.value.data.astype(np.float64)
            st = _SymbolicState(a, c, a.copy(), c.copy(), None, None)
        elif isinstance(node, (AffineNode, Conv2dNode, ConvTranspose2dNode)):
            op = g.linop(i)
            p = states[node.pred]
            st = _SymbolicState(
                _dense(op.pos64 @ p.a_lo + op.neg64 @ p.a_up),
                _dense(op.pos64 @ p.c_lo + op.neg64 @ p.c_up) + op.b64,
                _dense(op.pos64 @ p.a_up + op.neg64 @ p.a_lo),
                _dense(op.pos64 @ p.c_up + op.neg64 @ p.c_lo) + op.b64,
                None,
                None,
            )
        elif isinstance(node, ReLUNode):
            p = states[node.pred]
            l, u = p.lo, p.up
            pre_relu[i] = AffinePair(
                p.a_lo.copy(), p.c_lo.copy(), p.a_up.copy(), p.c_up.copy(), l.copy(), u.copy()
            )
            phase = phases.vector(i)
            if np.any((phase == ACTIVE) & (u < 0.0)):
                j = int(np.nonzero((phase == ACTIVE) & (u < 0.0))[0][0])
                raise EmptyRegion(i, j)
            if np.any((phase == INACTIVE) & (l > 0.0)):
                j = int(np.nonzero((phase == INACTIVE) & (l > 0.0))[0][0])
                raise EmptyRegion(i, j)
            passed = (phase == ACTIVE) | ((phase == UNKNOWN) & (l >= 0.0))
            crossing = (phase == UNKNOWN) & (l < 0.0) & (u > 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                slope = np.where(crossing, u / np.where(u - l == 0.0, 1.0, u - l), 0.0)
            up_coef = np.where(passed, 1.0, slope)[:, None]
            a_up = up_coef * p.a_up
            c_up = np.where(passed, p.c_up, slope * (p.c_up - l))
            keep_lo = passed | (crossing & (np.abs(u) >= np.abs(l)))
            a_lo = np.where(keep_lo[:, None], p.a_lo, 0.0)
            c_lo = np.where(keep_lo, p.c_lo, 0.0)
            st = _SymbolicState(a_lo, c_lo, a_up, c_up, None, None)
        elif isinstance(node, AddNode):
            pa, pb = states[node.pred_a], states[node.pred_b]
            st = _SymbolicState(
                pa.a_lo + pb.a_lo, pa.c_lo + pb.c_lo,
                pa.a_up + pb.a_up, pa.c_up + pb.c_up,
                None, None,
            )
        else:  # Flatten / Reshape alias their predecessor
            states[i] = states[node.pred]
            node_intervals[i] = node_intervals[node.pred]
            continue

        lo = _concretize(st.a_lo, st.c_lo, input_box, "lo")
        up = _concretize(st.a_up, st.c_up, input_box, "up")
        lo, up = _widen(lo, up)
        # intersect with interval propagation over the already-tightened
        # predecessor intervals (never looser than interval_bounds)
        iv_lo, iv_up = _interval_step(g, i, node, states, layout, input_box, phases)
        lo = np.maximum(lo, iv_lo)
        up = np.minimum(up, iv_up)
        # the two sound propagators can cross by rounding ulps
        bad = lo > up
        if np.any(bad):
            mid = 0.5 * (lo[bad] + up[bad])
            lo = lo.copy()
            up = up.copy()
            lo[bad] = mid
            up[bad] = mid
        st.lo, st.up = _clip_to_prior(lo, up, prior_intervals.get(i), i)
        states[i] = st
        node_intervals[i] = Box(st.lo, st.up)

    out = states[g.output]
    output = AffinePair(out.a_lo, out.c_lo, out.a_up, out.c_up, out.lo.copy(), out.up.copy())
    # expose the tightened pre-activation intervals on the relaxation
    for rid, pair in pre_relu.items():
        pred = g.nodes[rid].pred
        pair.lo = np.maximum(pair.lo, node_intervals[pred].lower)
        pair.up = np.minimum(pair.up, node_intervals[pred].upper)
    return LinearRelaxation(input_box, pre_relu, output, node_intervals)


def _interval_step(g, i, node, states, layout, input_box, phases):
    """One node of plain interval propagation reusing the already-intersected
    predecessor intervals held in ``states``."""
    if isinstance(node, InputNode):
        off, size = layout[node.name]
        return input_box.lower[off:off + size], input_box.upper[off:off + size]
    if isinstance(node, ConstantNode):
        v = node.value.data.astype(np.float64)
        return v, v
    if isinstance(node, (AffineNode, Conv2dNode, ConvTranspose2dNode)):
        op = g.linop(i)
        p = states[node.pred]
        lo = op.pos64 @ p.lo + op.neg64 @ p.up + op.b64
        up = op.pos64 @ p.up + op.neg64 @ p.lo + op.b64
        return _widen(lo, up)
    if isinstance(node, ReLUNode):
        p = states[node.pred]
        lo, up = _relu_interval(p.lo, p.up, phases.vector(i), i)
        return _widen(lo, up)
    if isinstance(node, AddNode):
        pa, pb = states[node.pred_a], states[node.pred_b]
        return _widen(pa.lo + pb.lo, pa.up + pb.up)
    p = states[node.pred]
    return p.lo, p.up


def concretize_lower(a: np.ndarray, c, box: Box) -> np.ndarray:
    """Minimum of ``a @ x + c`` over the box."""
    return _concretize(np.atleast_2d(a), np.atleast_1d(c), box, "lo")


def concretize_upper(a: np.ndarray, c, box: Box) -> np.ndarray:
    """Maximum of ``a @ x + c`` over the box."""
    return _concretize(np.atleast_2d(a), np.atleast_1d(c), box, "up")


def argmin_point(a: np.ndarray, box: Box) -> np.ndarray:
    """Box corner minimizing the linear functional ``a @ x``."""
    return np.where(np.asarray(a, dtype=np.float64) > 0, box.lower, box.upper)


def argmax_point(a: np.ndarray, box: Box) -> np.ndarray:
    return np.where(np.asarray(a, dtype=np.float64) > 0, box.upper, box.lower)
