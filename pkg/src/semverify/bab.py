"""Shared branch-and-bound machinery.

Both the noise-bound optimizer and the complete verifier branch on ReLU
phases.  This module holds what they share: split selection (widest unstable
pre-activation interval, ties by lowest node id), the phase-region LP solved
at fully-split leaves, and flat-vector evaluation helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from .boundprop import (
    ACTIVE,
    UNKNOWN,
    Box,
    LinearRelaxation,
    PhaseAssignment,
)
from .netcore import NetworkGraph, Tensor, forward


@dataclass
class BabBudget:
    """Wall-clock and branch limits for one branch-and-bound run.

    Open nodes keep their relaxation state alive, so the branch cap also
    bounds memory; 4096 is far beyond what desk-scale problems need to
    converge while keeping worst-case footprints modest."""

    time_seconds: float = float("inf")
    max_branches: int = 4096


def pick_split(relax: LinearRelaxation, phases: PhaseAssignment) -> Optional[Tuple[int, int]]:
    """Unstable ReLU neuron with the widest pre-activation interval.

    Deterministic: ties broken by lowest node id, then neuron index.
    Returns None when no unknown crossing neuron remains.
    """
    best = None
    best_width = -1.0
    for node_id in sorted(relax.pre_relu):
        pair = relax.pre_relu[node_id]
        phase = phases.vector(node_id)
        for j in range(pair.lo.size):
            if phase[j] != UNKNOWN:
                continue
            if not (pair.lo[j] < 0.0 < pair.up[j]):
                continue
            width = pair.up[j] - pair.lo[j]
            if width > best_width + 1e-15:
                best = (node_id, j)
                best_width = width
    return best


def region_constraints(
    relax: LinearRelaxation, phases: PhaseAssignment
) -> Tuple[np.ndarray, np.ndarray]:
    """Halfspace system ``G x <= h`` of the fixed phase constraints.

    Only meaningful at fully-split nodes, where the pre-activation affine
    forms are exact (lower == upper form).
    """
    rows: List[np.ndarray] = []
    rhs: List[float] = []
    for node_id, j, phase in phases.fixed_items():
        pair = relax.pre_relu.get(node_id)
        if pair is None:
            continue
        a = pair.a_lo[j]
        c = pair.c_lo[j]
        if phase == ACTIVE:
            rows.append(-a)
            rhs.append(c)
        else:
            rows.append(a)
            rhs.append(-c)
    if not rows:
        dim = relax.input_box.dim
        return np.zeros((0, dim)), np.zeros(0)
    return np.vstack(rows), np.asarray(rhs)


class LeafLPError(RuntimeError):
    """The leaf LP returned an unexpected solver status."""


def leaf_lp_max(
    obj_a: np.ndarray,
    obj_c: float,
    relax: LinearRelaxation,
    phases: PhaseAssignment,
    box: Box,
) -> Optional[Tuple[float, np.ndarray]]:
    """Exact maximum of an affine objective over the phase region.

    Returns (value, argmax point) or None when the region is empty.  The
    argmax point lies inside the region, so its concrete evaluation certifies
    the bound.
    """
    g_mat, h_vec = region_constraints(relax, phases)
    res = linprog(
        c=-np.asarray(obj_a, dtype=np.float64),
        A_ub=g_mat if g_mat.size else None,
        b_ub=h_vec if h_vec.size else None,
        bounds=list(zip(box.lower, box.upper)),
        method="highs",
    )
    if res.status == 2:  # infeasible: empty region
        return None
    if res.status != 0 or res.x is None:
        raise LeafLPError(f"leaf LP failed with status {res.status}: {res.message}")
    x = np.clip(res.x, box.lower, box.upper)
    value = float(np.asarray(obj_a, dtype=np.float64) @ x + obj_c)
    return value, x


def split_flat(g: NetworkGraph, x: np.ndarray) -> Dict[str, np.ndarray]:
    """Split a flat input vector into the graph's named input blocks."""
    out = {}
    for name, off, size in g.input_layout():
        out[name] = np.asarray(x[off:off + size])
    return out


def eval_flat32(g: NetworkGraph, x: np.ndarray) -> np.ndarray:
    """Exact float32 forward evaluation of a flat input vector."""
    tensors = {
        name: Tensor(g.out_shape(g.inputs[name]), block.astype(np.float32))
        for name, block in split_flat(g, x).items()
    }
    return forward(g, tensors).data


def eval_flat64(g: NetworkGraph, x: np.ndarray) -> np.ndarray:
    """Float64 forward evaluation (internal bound certificates only; shipped
    witnesses are always validated with the float32 path)."""
    from .netcore import (
        AddNode,
        AffineNode,
        ConstantNode,
        Conv2dNode,
        ConvTranspose2dNode,
        InputNode,
        ReLUNode,
    )

    blocks = split_flat(g, np.asarray(x, dtype=np.float64))
    vals: List[np.ndarray] = [None] * len(g.nodes)  # type: ignore[list-item]
    for i, node in enumerate(g.nodes):
        if isinstance(node, InputNode):
            v = blocks[node.name]
        elif isinstance(node, ConstantNode):
            v = node.value.data.astype(np.float64)
        elif isinstance(node, (AffineNode, Conv2dNode, ConvTranspose2dNode)):
            op = g.linop(i)
            v = op.m64 @ vals[node.pred] + op.b64
        elif isinstance(node, ReLUNode):
            v = np.maximum(vals[node.pred], 0.0)
        elif isinstance(node, AddNode):
            v = vals[node.pred_a] + vals[node.pred_b]
        else:
            v = vals[node.pred]
        vals[i] = v
    return vals[g.output]
