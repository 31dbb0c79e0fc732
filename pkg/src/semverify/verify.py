"""Complete branch-and-bound verifier over the composed pipeline, plus the
end-to-end orchestrator (noise bounds, property construction, attacks,
formal verification).

Nodes are expanded best-first on the smallest certified margin lower bound;
the widest unstable ReLU splits a node; fully-split branches are resolved by
exact phase-region LPs.  `unsat` is sound w.r.t. the bound machinery's
outward rounding; every shipped `sat` witness violates argmax under exact
float32 forward evaluation.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .bab import BabBudget, eval_flat32, leaf_lp_max, pick_split
from .boundprop import (
    ACTIVE,
    INACTIVE,
    Box,
    EmptyRegion,
    LinearRelaxation,
    PhaseAssignment,
    argmin_point,
    linear_bounds,
)
from .compose import (
    BlurSpec,
    PipelineProperty,
    build_blur_front,
    build_property,
    compose_pipeline,
)
from .falsify import (
    REALIZABLE,
    UNCHECKED,
    UNREALIZABLE,
    AttackConfig,
    Counterexample,
    margin_and_winner,
    pgd_attack,
    pgm_sample_attack,
    validate_realizability,
)
from .modelio import PropertyFile
from .netcore import NetworkGraph
from .noisebounds import NoiseBoundsResult, PowerSpec, compute_noise_bounds

SAT, SAT_UNREALIZED, UNSAT, TIMEOUT = "sat", "sat_unrealized", "unsat", "timeout"


@dataclass
class Budget:
    timeout_seconds: float = 60.0
    max_nodes: int = 200_000


@dataclass
class Verdict:
    status: str
    witness: Optional[Counterexample] = None
    stats: Dict = field(default_factory=dict)

    def __post_init__(self):
        has_witness = self.witness is not None
        if (self.status in (SAT, SAT_UNREALIZED)) != has_witness:
            raise ValueError("witness must be present iff the verdict is sat-like")


@dataclass
class BranchNode:
    phases: PhaseAssignment
    relax: LinearRelaxation
    margin_lb: float  # certified lower bound of min_c(true - c) over the region
    depth: int
    creation_index: int
    worst_class: int
    worst_point: np.ndarray  # relaxation's most-adversarial concrete candidate


def _margin_analysis(
    relax: LinearRelaxation, box: Box, true_label: int
) -> Tuple[float, int, np.ndarray]:
    """Certified lower bound of the worst margin (true minus each other
    class), the most-adversarial class, and its adversarial box corner."""
    out = relax.output
    n_out = out.lo.size
    best_lb = np.inf
    worst_class = -1
    worst_form = None
    for c in range(n_out):
        if c == true_label:
            continue
        a = out.a_lo[true_label] - out.a_up[c]
        cst = out.c_lo[true_label] - out.c_up[c]
        pos, neg = np.maximum(a, 0.0), np.minimum(a, 0.0)
        lb_form = float(pos @ box.lower + neg @ box.upper + cst)
        lb_interval = float(out.lo[true_label] - out.up[c])
        lb = max(lb_form, lb_interval)
        if lb < best_lb:
            best_lb = lb
            worst_class = c
            worst_form = a
    return best_lb, worst_class, argmin_point(worst_form, box)


def verify(
    prop: PipelineProperty,
    budget: Budget = Budget(),
    validate_witness: Optional[Callable[[Counterexample], Counterexample]] = None,
) -> Verdict:
    """Branch-and-bound verification of the argmax robustness property.

    Returns unsat when the worklist empties, sat (after optional witness
    validation) on a confirmed violation, timeout on budget exhaustion.
    """
    g = prop.pipeline
    box = prop.input_box
    t0 = time.monotonic()
    deadline = t0 + budget.timeout_seconds
    stats: Dict = {
        "nodes": 0, "bound_calls": 0, "lp_calls": 0, "max_depth": 0,
        "sat_checks": 0, "unconfirmed_leaves": 0,
    }

    def finish(status, witness=None):
        stats["wall_time_s"] = time.monotonic() - t0
        return Verdict(status, witness, stats)

    def exact_violation(x: np.ndarray) -> Optional[Counterexample]:
        stats["sat_checks"] += 1
        logits = eval_flat32(g, x)
        margin, winner = margin_and_winner(logits, prop.true_label)
        if margin < 0.0:
            return None
        from .bab import split_flat

        blocks = split_flat(g, x)
        return Counterexample(
            s=float(blocks["s"][0]),
            n=blocks["n"].astype(np.float64),
            eps=blocks["eps"].astype(np.float64),
            logits=logits.astype(np.float64),
            violated_pair=(prop.true_label, winner),
        )

    def settle_sat(cex: Counterexample) -> Verdict:
        if validate_witness is not None:
            cex = validate_witness(cex)
        status = SAT_UNREALIZED if cex.realizability == UNREALIZABLE else SAT
        return finish(status, cex)

    counter = 0
    stats["bound_calls"] += 1
    root_relax = linear_bounds(g, box, PhaseAssignment(g))
    lb, worst_c, worst_x = _margin_analysis(root_relax, box, prop.true_label)
    heap: List[Tuple[Tuple[float, int], BranchNode]] = []
    if lb <= 0.0:
        cex = exact_violation(worst_x)
        if cex is not None:
            stats["nodes"] = 1
            return settle_sat(cex)
        counter += 1
        root = BranchNode(PhaseAssignment(g), root_relax, lb, 0, counter, worst_c, worst_x)
        heapq.heappush(heap, ((lb, counter), root))

    while heap:
        if time.monotonic() > deadline or stats["nodes"] >= budget.max_nodes:
            stats["open_nodes"] = len(heap)
            return finish(TIMEOUT)
        _, node = heapq.heappop(heap)
        stats["nodes"] += 1
        stats["max_depth"] = max(stats["max_depth"], node.depth)
        split = pick_split(node.relax, node.phases)
        if split is None:
            verdict = _resolve_leaf(node, prop, stats, exact_violation)
            if verdict is not None:
                return settle_sat(verdict)
            continue
        node_id, neuron = split
        for phase in (ACTIVE, INACTIVE):
            child_phases = node.phases.with_phase(node_id, neuron, phase)
            stats["bound_calls"] += 1
            try:
                child_relax = linear_bounds(
                    g, box, child_phases, prior_intervals=node.relax.node_intervals
                )
            except EmptyRegion:
                continue
            lb, worst_c, worst_x = _margin_analysis(child_relax, box, prop.true_label)
            lb = max(lb, node.margin_lb)
            if lb > 0.0:
                continue  # region certified robust
            cex = exact_violation(worst_x)
            if cex is not None:
                return settle_sat(cex)
            counter += 1
            child = BranchNode(
                child_phases, child_relax, lb, node.depth + 1, counter, worst_c, worst_x
            )
            heapq.heappush(heap, ((lb, counter), child))
    return finish(UNSAT)


def _resolve_leaf(node, prop, stats, exact_violation) -> Optional[Counterexample]:
    """Fully-split branch: per wrong class, exact LP of (c - true) over the
    phase region.  All maxima <= 0 proves the region; a positive maximum is
    confirmed by exact evaluation at the LP argmax."""
    out = node.relax.output
    n_out = out.lo.size
    confirmed = None
    any_positive = False
    for c in range(n_out):
        if c == prop.true_label:
            continue
        a = out.a_lo[c] - out.a_lo[prop.true_label]
        cst = float(out.c_lo[c] - out.c_lo[prop.true_label])
        stats["lp_calls"] += 1
        sol = leaf_lp_max(a, cst, node.relax, node.phases, prop.input_box)
        if sol is None:
            return None  # empty region
        value, x = sol
        if value <= 0.0:
            continue
        any_positive = True
        confirmed = exact_violation(x)
        if confirmed is not None:
            return confirmed
    if any_positive:
        # real-arithmetic violation not reproducible under float32 semantics
        stats["unconfirmed_leaves"] += 1
    return None


# --------------------------------------------------------------------------
# Orchestrator
# --------------------------------------------------------------------------


@dataclass
class VScanOutcome:
    verdict: Verdict
    noise: NoiseBoundsResult
    provenance: Dict
    resolved: Optional[PipelineProperty] = None


@dataclass
class PhaseSplit:
    """Fraction of the total wall budget per phase (bounds/attack/verify)."""

    bounds: float = 0.05
    attack: float = 0.10
    verification: float = 0.85


def run_vscan(
    generator: NetworkGraph,
    encoder: NetworkGraph,
    decoder: NetworkGraph,
    classifier: NetworkGraph,
    property_file: PropertyFile,
    budget: Optional[Budget] = None,
    *,
    latent_power: Optional[float] = None,
    attack_cfg: Optional[AttackConfig] = None,
    noise_tol: float = 1e-4,
    phase_split: PhaseSplit = PhaseSplit(),
    pgm_samples: int = 500,
    attack_only: bool = False,
) -> VScanOutcome:
    """The full three-phase procedure on one property.

    Phase 1 computes the sound adversarial-noise box, phase 2 builds the
    combined pipeline and property, phase 3 attacks it (PGD, then PGM
    sampling) with realizability validation, and phase 4 runs the complete
    verifier on whatever budget remains.
    """
    total = property_file.timeout_seconds if budget is None else budget.timeout_seconds
    max_nodes = 200_000 if budget is None else budget.max_nodes
    t0 = time.monotonic()
    deadline = t0 + total
    provenance: Dict = {"phases": {}, "notes": []}

    # phase 1: adversarial noise bounds
    if property_file.rho is not None:
        power = PowerSpec.from_rho(property_file.rho)
    else:
        if latent_power is None:
            raise ValueError("pnr_db property requires the encoder's latent_power")
        power = PowerSpec.from_pnr(property_file.pnr_db, latent_power)
    latent = generator.out_size()
    trigger_box = Box.uniform(*property_file.trigger_range, latent)
    t_phase = time.monotonic()
    noise = compute_noise_bounds(
        generator, trigger_box, power, tol=noise_tol,
        budget=BabBudget(time_seconds=total * phase_split.bounds, max_branches=64),
    )
    provenance["phases"]["bounds"] = {
        "wall_time_s": time.monotonic() - t_phase,
        "converged": noise.stats.get("converged"),
    }
    if not noise.stats.get("converged", True):
        provenance["notes"].append(
            "noise bounds not converged to tol; anytime sound bounds used"
        )

    # phase 2: property construction
    blur = BlurSpec(property_file.blur_kernel, property_file.s_range)
    front = build_blur_front(property_file.clean_input, blur)
    pipeline = compose_pipeline(encoder, decoder, classifier, front)
    prop = build_property(
        pipeline, noise, blur, property_file.awgn_sigma,
        property_file.true_label, property_file.property_id,
    )

    cfg = attack_cfg or AttackConfig(seed=0)
    rho = power.rho

    def validator(cex: Counterexample) -> Counterexample:
        if cex.realizability != UNCHECKED:
            return cex
        return validate_realizability(generator, cex, trigger_box, rho, cfg, prop)

    # phase 3: adversarial attack (budget checked between attack stages)
    t_phase = time.monotonic()
    attack_deadline = t_phase + total * phase_split.attack
    unrealized: Optional[Counterexample] = None
    for attack_name, attack in (
        ("pgd", lambda: pgd_attack(prop, cfg)),
        ("pgm", lambda: pgm_sample_attack(generator, prop, trigger_box, rho,
                                          num_samples=pgm_samples, seed=cfg.seed)),
    ):
        if attack_name != "pgd" and time.monotonic() > attack_deadline:
            provenance["notes"].append("attack budget exhausted before " + attack_name)
            break
        cex = attack()
        if cex is None:
            continue
        cex = validator(cex)
        provenance["phases"]["attack"] = {
            "wall_time_s": time.monotonic() - t_phase,
            "method": attack_name,
        }
        if cex.realizability == REALIZABLE:
            provenance["verdict_phase"] = "attack"
            return VScanOutcome(
                Verdict(SAT, cex, {"wall_time_s": time.monotonic() - t0}),
                noise, provenance, prop,
            )
        unrealized = cex
        provenance["notes"].append(
            f"{attack_name} counterexample is unrealizable; continuing to verification"
        )
    provenance["phases"].setdefault(
        "attack", {"wall_time_s": time.monotonic() - t_phase, "method": None}
    )

    if attack_only:
        provenance["verdict_phase"] = "attack"
        if unrealized is not None:
            verdict = Verdict(SAT_UNREALIZED, unrealized,
                              {"wall_time_s": time.monotonic() - t0})
        else:
            verdict = Verdict("unknown", None, {"wall_time_s": time.monotonic() - t0})
        return VScanOutcome(verdict, noise, provenance, prop)

    # phase 4: formal verification on the remaining budget
    remaining = max(deadline - time.monotonic(), 0.05 * total)
    verdict = verify(prop, Budget(remaining, max_nodes), validate_witness=validator)
    provenance["phases"]["verification"] = dict(verdict.stats)
    provenance["verdict_phase"] = "verification"

    if unrealized is not None:
        # the property over the noise box is falsified by a concrete point;
        # report the stronger fact when verification could not decide
        if verdict.status == TIMEOUT:
            verdict = Verdict(SAT_UNREALIZED, unrealized, verdict.stats)
            provenance["verdict_phase"] = "attack"
        elif verdict.status == UNSAT:
            provenance["notes"].append(
                "verifier returned unsat despite a concrete box violation; "
                "reporting the concrete witness"
            )
            verdict = Verdict(SAT_UNREALIZED, unrealized, verdict.stats)
            provenance["verdict_phase"] = "attack"
    verdict.stats["wall_time_s"] = time.monotonic() - t0
    return VScanOutcome(verdict, noise, provenance, prop)
