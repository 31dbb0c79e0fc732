"""Sound adversarial-noise box: the reachable range of the perturbation
generator over the trigger box, intersected with the per-dimension power
limit.

Each output dimension is maximized and minimized by branch and bound over
ReLU phases: linear relaxation for bounding, concrete evaluations at the
relaxation argmax for incumbent certificates, widest-interval split
selection, and an exact phase-region LP once a branch is fully split.  The
power constraint is applied afterwards by intersecting with [-sqrt(rho),
sqrt(rho)] (a sound over-approximation of the jointly-constrained range; the
clamped flags record where it may be loose).
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .bab import BabBudget, eval_flat64, leaf_lp_max, pick_split
from .boundprop import (
    ACTIVE,
    INACTIVE,
    Box,
    EmptyRegion,
    LinearRelaxation,
    PhaseAssignment,
    argmax_point,
    linear_bounds,
)
from .netcore import NetworkGraph, validate_graph

DEFAULT_TOL = 1e-4  # two orders below the 0.01 AWGN half-width of the worked example


def pnr_to_rho(pnr_db: float, latent_power: float) -> float:
    """Per-dimension power limit from a peak-noise-ratio in dB.

    rho = latent_power * 10^(pnr_db / 10).
    """
    if latent_power <= 0:
        raise ValueError("latent_power must be positive")
    return float(latent_power) * 10.0 ** (float(pnr_db) / 10.0)


@dataclass(frozen=True)
class PowerSpec:
    """Per-dimension squared-magnitude limit, optionally derived from PNR."""

    rho: float
    pnr_db: Optional[float] = None
    latent_power: Optional[float] = None

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.pnr_db is not None:
            if self.latent_power is None:
                raise ValueError("pnr_db requires latent_power")
            implied = pnr_to_rho(self.pnr_db, self.latent_power)
            if not np.isclose(self.rho, implied, rtol=1e-9, atol=0.0):
                raise ValueError(
                    f"inconsistent PowerSpec: rho={self.rho} but PNR implies {implied}"
                )

    @classmethod
    def from_rho(cls, rho: float) -> "PowerSpec":
        return cls(rho=float(rho))

    @classmethod
    def from_pnr(cls, pnr_db: float, latent_power: float) -> "PowerSpec":
        return cls(
            rho=pnr_to_rho(pnr_db, latent_power),
            pnr_db=float(pnr_db),
            latent_power=float(latent_power),
        )


@dataclass
class NoiseBoundsResult:
    bounds: Box
    clamped: np.ndarray  # power limit was binding on that side of the dimension
    infeasible: np.ndarray  # raw range lies entirely outside the power limit
    exact_gap: np.ndarray  # residual upper-vs-incumbent gap per dimension
    stats: Dict = field(default_factory=dict)


@dataclass(order=True)
class _QueueEntry:
    sort_key: Tuple[float, int]
    phases: PhaseAssignment = field(compare=False)
    relax: LinearRelaxation = field(compare=False)
    upper: float = field(compare=False)


class _DimOptimizer:
    """Branch-and-bound maximization of one (signed) output dimension."""

    def __init__(self, g: NetworkGraph, box: Box, dim: int, sign: float,
                 tol: float, deadline: float, max_branches: int, stats: Dict):
        self.g, self.box, self.dim, self.sign = g, box, dim, sign
        self.tol, self.deadline, self.max_branches = tol, deadline, max_branches
        self.stats = stats
        self.counter = 0

    def _objective_bound(self, relax: LinearRelaxation) -> Tuple[float, np.ndarray]:
        """Sound upper bound of sign*f_dim over the region + its driving form."""
        if self.sign > 0:
            return float(relax.output.up[self.dim]), relax.output.a_up[self.dim]
        return float(-relax.output.lo[self.dim]), -relax.output.a_lo[self.dim]

    def _incumbent_at(self, x: np.ndarray) -> float:
        self.stats["evals"] = self.stats.get("evals", 0) + 1
        return float(self.sign * eval_flat64(self.g, x)[self.dim])

    def run(self) -> Tuple[float, float]:
        """Returns (sound_upper, incumbent) for max of sign*f_dim."""
        stats = self.stats
        stats["bound_calls"] = stats.get("bound_calls", 0) + 1
        root_phases = PhaseAssignment(self.g)
        root_relax = linear_bounds(self.g, self.box, root_phases)
        upper, form = self._objective_bound(root_relax)
        incumbent = self._incumbent_at(argmax_point(form, self.box))
        incumbent = max(incumbent, self._incumbent_at(self.box.center))

        heap = []
        self.counter += 1
        heapq.heappush(
            heap, _QueueEntry((-upper, self.counter), root_phases, root_relax, upper)
        )
        pruned_upper = -np.inf
        branches = 0
        while heap:
            if upper_bound_of(heap) - incumbent <= self.tol:
                break
            if branches >= self.max_branches or time.monotonic() > self.deadline:
                break
            entry = heapq.heappop(heap)
            if entry.upper <= incumbent + self.tol:
                pruned_upper = max(pruned_upper, entry.upper)
                continue
            split = pick_split(entry.relax, entry.phases)
            if split is None:
                # fully split: solve the exact phase-region LP
                obj_a, obj_c = self._leaf_objective(entry.relax)
                stats["lp_calls"] = stats.get("lp_calls", 0) + 1
                sol = leaf_lp_max(obj_a, obj_c, entry.relax, entry.phases, self.box)
                if sol is None:
                    continue  # empty region
                value, x = sol
                incumbent = max(incumbent, self._incumbent_at(x))
                # tiny inflation guards LP solver tolerance
                pruned_upper = max(pruned_upper, value + 1e-9)
                continue
            branches += 1
            stats["branches"] = stats.get("branches", 0) + 1
            node_id, neuron = split
            for phase in (ACTIVE, INACTIVE):
                child_phases = entry.phases.with_phase(node_id, neuron, phase)
                stats["bound_calls"] += 1
                try:
                    child_relax = linear_bounds(
                        self.g, self.box, child_phases,
                        prior_intervals=entry.relax.node_intervals,
                    )
                except EmptyRegion:
                    continue
                child_upper, child_form = self._objective_bound(child_relax)
                child_upper = min(child_upper, entry.upper)
                incumbent = max(
                    incumbent, self._incumbent_at(argmax_point(child_form, self.box))
                )
                if child_upper <= incumbent + self.tol:
                    pruned_upper = max(pruned_upper, child_upper)
                    continue
                self.counter += 1
                heapq.heappush(
                    heap,
                    _QueueEntry((-child_upper, self.counter), child_phases,
                                child_relax, child_upper),
                )
        open_upper = max((e.upper for e in heap), default=-np.inf)
        sound_upper = max(incumbent, pruned_upper, open_upper)
        return sound_upper, incumbent

    def _leaf_objective(self, relax: LinearRelaxation) -> Tuple[np.ndarray, float]:
        # at a leaf the output forms coincide; use the upper one
        if self.sign > 0:
            return relax.output.a_up[self.dim], float(relax.output.c_up[self.dim])
        return -relax.output.a_lo[self.dim], float(-relax.output.c_lo[self.dim])


def upper_bound_of(heap) -> float:
    return -heap[0].sort_key[0] if heap else -np.inf


def compute_noise_bounds(
    generator: NetworkGraph,
    trigger_box: Box,
    power: PowerSpec,
    tol: float = DEFAULT_TOL,
    budget: Optional[BabBudget] = None,
) -> NoiseBoundsResult:
    """Sound per-dimension box around the clipped generator range.

    For every output dimension j the returned [L_j, U_j] contains
    {clip(G(r)_j) : r in trigger_box}, where clip restricts to the power
    limit.  On budget exhaustion the sound relaxation bound is returned and
    ``exact_gap`` records the residual uncertainty.
    """
    errs = validate_graph(generator)
    if errs:
        raise ValueError("invalid generator: " + "; ".join(errs))
    if tol <= 0:
        raise ValueError("tol must be positive")
    if len(generator.input_order) != 1:
        raise ValueError("generator must have exactly one input (the trigger)")
    d_in = generator.flat_input_dim
    d_out = generator.out_size()
    if d_in != d_out:
        raise ValueError(f"generator maps {d_in} -> {d_out}, trigger and noise must share |Z|")
    if trigger_box.dim != d_in:
        raise ValueError(f"trigger box dimension {trigger_box.dim} != {d_in}")

    budget = budget or BabBudget()
    deadline = time.monotonic() + budget.time_seconds
    t0 = time.monotonic()
    stats: Dict = {"branches": 0, "bound_calls": 0, "lp_calls": 0, "evals": 0}

    raw_lo = np.zeros(d_out)
    raw_up = np.zeros(d_out)
    gap = np.zeros(d_out)
    for j in range(d_out):
        up_bound, up_inc = _DimOptimizer(
            generator, trigger_box, j, +1.0, tol, deadline, budget.max_branches, stats
        ).run()
        lo_bound, lo_inc = _DimOptimizer(
            generator, trigger_box, j, -1.0, tol, deadline, budget.max_branches, stats
        ).run()
        raw_up[j] = up_bound
        raw_lo[j] = -lo_bound
        gap[j] = max(up_bound - up_inc, lo_bound - lo_inc)

    sqrt_rho = float(np.sqrt(power.rho))
    lo = np.maximum(raw_lo, -sqrt_rho)
    up = np.minimum(raw_up, sqrt_rho)
    clamped = (raw_up > sqrt_rho) | (raw_lo < -sqrt_rho)
    infeasible = np.zeros(d_out, dtype=bool)
    # a dimension whose whole raw range violates the limit pins to the border
    below = raw_up < -sqrt_rho
    above = raw_lo > sqrt_rho
    infeasible |= below | above
    lo[below], up[below] = -sqrt_rho, -sqrt_rho
    lo[above], up[above] = sqrt_rho, sqrt_rho

    stats["wall_time_s"] = time.monotonic() - t0
    stats["tol"] = tol
    stats["converged"] = bool(np.all(gap <= tol))
    return NoiseBoundsResult(
        bounds=Box(lo, up),
        clamped=clamped,
        infeasible=infeasible,
        exact_gap=gap,
        stats=stats,
    )
