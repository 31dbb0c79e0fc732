"""Fast counterexample search and realizability validation.

PGD ascends the logit margin over the property's (s, n, eps) box; the PGM
sampler draws random triggers through the generator.  Counterexamples found
in the over-approximated noise box may be spurious, so they are validated by
searching for a trigger that reproduces a misclassification through the
end-to-end chain generator -> power clip -> pipeline.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .bab import eval_flat32, split_flat
from .boundprop import Box
from .compose import PipelineProperty, splice
from .netcore import (
    AddNode,
    AffineNode,
    InputNode,
    NetworkGraph,
    ReLUNode,
    Tensor,
    backward,
    forward,
    validate_graph,
)

REALIZABLE, UNREALIZABLE, UNCHECKED = "realizable", "unrealizable", "unchecked"


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 100
    step_size: float = 0.02  # fraction of the box width per dimension
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.restarts <= 0 or self.step_size <= 0:
            raise ValueError("steps, restarts and step_size must be positive")


@dataclass
class Counterexample:
    s: float
    n: np.ndarray
    eps: np.ndarray
    logits: np.ndarray
    violated_pair: Tuple[int, int]  # (true label, winning label)
    realizability: str = UNCHECKED
    trigger: Optional[np.ndarray] = None

    def point(self) -> np.ndarray:
        return np.concatenate([[self.s], self.n, self.eps]).astype(np.float64)

    def to_json(self) -> dict:
        return {
            "s": float(self.s),
            "n": [float(v) for v in self.n],
            "eps": [float(v) for v in self.eps],
            "trigger": None if self.trigger is None else [float(v) for v in self.trigger],
            "realizability": self.realizability,
            "violated_pair": [int(self.violated_pair[0]), int(self.violated_pair[1])],
        }


def margin_and_winner(logits: np.ndarray, true_label: int) -> Tuple[float, int]:
    """max_{c != true}(logit_c - logit_true) and the winning class."""
    masked = logits.astype(np.float64).copy()
    masked[true_label] = -np.inf
    winner = int(np.argmax(masked))
    return float(masked[winner] - logits[true_label]), winner


def _pgd_core(
    g: NetworkGraph,
    box: Box,
    true_label: int,
    cfg: AttackConfig,
    starts: List[np.ndarray],
    trace: Optional[List[np.ndarray]] = None,
) -> Optional[np.ndarray]:
    """Margin-ascent PGD over a flat box; returns the first violating point.

    Violations are checked with the exact float32 forward pass (ties count:
    a wrong class scoring >= the true class is a violation)."""
    width = box.width
    step = cfg.step_size * width
    layout = g.input_layout()

    def flat_grad(x: np.ndarray, wrong: int) -> np.ndarray:
        tensors = {
            name: Tensor(g.out_shape(g.inputs[name]), x[off:off + size].astype(np.float32))
            for name, off, size in layout
        }
        ct = np.zeros(g.out_size(), dtype=np.float32)
        ct[wrong] = 1.0
        ct[true_label] -= 1.0
        grads = backward(g, tensors, Tensor(g.out_shape(), ct))
        return np.concatenate([grads[name].data.astype(np.float64) for name, _, _ in layout])

    for x0 in starts:
        x = np.clip(np.asarray(x0, dtype=np.float64), box.lower, box.upper)
        for t in range(cfg.steps):
            logits = eval_flat32(g, x)
            margin, winner = margin_and_winner(logits, true_label)
            if margin >= 0.0:
                return x
            # decay the step to settle into narrow violation basins
            decay = 0.5 ** (4.0 * t / cfg.steps)
            x = np.clip(x + np.sign(flat_grad(x, winner)) * step * decay,
                        box.lower, box.upper)
            if trace is not None:
                trace.append(x.copy())
        logits = eval_flat32(g, x)
        margin, _ = margin_and_winner(logits, true_label)
        if margin >= 0.0:
            return x
    return None


def _starts(box: Box, cfg: AttackConfig, rng: np.random.Generator) -> List[np.ndarray]:
    starts = [box.center]
    for _ in range(cfg.restarts - 1):
        starts.append(box.sample(rng, 1)[0])
    return starts


def _trigger_lattice(box: Box, max_points: int = 81) -> List[np.ndarray]:
    """Regular lattice over a low-dimensional box (empty for high dims)."""
    per_dim = int(np.floor(max_points ** (1.0 / box.dim)))
    if per_dim < 2:
        return []
    per_dim = min(per_dim, 9)
    axes = [np.linspace(box.lower[i], box.upper[i], per_dim) for i in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return list(np.stack([m.ravel() for m in mesh], axis=1))


def _cex_from_point(prop: PipelineProperty, x: np.ndarray) -> Counterexample:
    blocks = split_flat(prop.pipeline, x)
    logits = eval_flat32(prop.pipeline, x)
    margin, winner = margin_and_winner(logits, prop.true_label)
    if margin < 0.0:
        raise AssertionError("candidate point does not violate under exact evaluation")
    return Counterexample(
        s=float(blocks["s"][0]),
        n=blocks["n"].astype(np.float64),
        eps=blocks["eps"].astype(np.float64),
        logits=logits.astype(np.float64),
        violated_pair=(prop.true_label, winner),
    )


def pgd_attack(
    prop: PipelineProperty,
    cfg: AttackConfig = AttackConfig(),
    trace: Optional[List[np.ndarray]] = None,
) -> Optional[Counterexample]:
    """Projected gradient ascent on the logit margin over (s, n, eps).

    Deterministic given the seed; the returned counterexample is re-validated
    by one exact forward pass."""
    rng = np.random.default_rng(cfg.seed)
    x = _pgd_core(prop.pipeline, prop.input_box, prop.true_label, cfg,
                  _starts(prop.input_box, cfg, rng), trace)
    return None if x is None else _cex_from_point(prop, x)


def pgm_sample_attack(
    generator: NetworkGraph,
    prop: PipelineProperty,
    trigger_box: Box,
    rho: float,
    num_samples: int = 1000,
    seed: int = 0,
) -> Optional[Counterexample]:
    """Input-agnostic attack: sample triggers, clip the generated noise to the
    power limit, pair with sampled (s, eps); first violation wins."""
    rng = np.random.default_rng(seed)
    sqrt_rho = float(np.sqrt(rho))
    blocks = {name: (off, size) for name, off, size in prop.pipeline.input_layout()}
    s_off, _ = blocks["s"]
    n_off, n_size = blocks["n"]
    e_off, e_size = blocks["eps"]
    box = prop.input_box
    gen_in = generator.input_order[0]
    for _ in range(num_samples):
        r = trigger_box.sample(rng, 1)[0]
        noise = forward(
            generator, {gen_in: Tensor.of(r.astype(np.float32))}
        ).data.astype(np.float64)
        noise = np.clip(noise, -sqrt_rho, sqrt_rho)
        s = rng.uniform(box.lower[s_off], box.upper[s_off])
        eps = rng.uniform(box.lower[e_off:e_off + e_size], box.upper[e_off:e_off + e_size])
        x = np.concatenate([[s], noise, eps])
        logits = eval_flat32(prop.pipeline, x)
        margin, winner = margin_and_winner(logits, prop.true_label)
        if margin >= 0.0:
            return Counterexample(
                s=float(s), n=noise, eps=eps, logits=logits.astype(np.float64),
                violated_pair=(prop.true_label, winner),
                realizability=REALIZABLE, trigger=r,
            )
    return None


def _clip_block(nodes: List, pred: int, size: int, half_width: float) -> int:
    """clip(x, -a, a) = ReLU(x + a) - ReLU(x - a) - a, exact in the layer set."""
    eye = np.eye(size, dtype=np.float32)
    a = np.float32(half_width)
    hi = len(nodes)
    nodes.append(AffineNode(eye, np.full(size, a, np.float32), pred))
    hi_relu = len(nodes)
    nodes.append(ReLUNode(hi))
    lo = len(nodes)
    nodes.append(AffineNode(eye, np.full(size, -a, np.float32), pred))
    lo_relu = len(nodes)
    nodes.append(ReLUNode(lo))
    neg = len(nodes)
    nodes.append(AffineNode(-eye, np.full(size, -a, np.float32), lo_relu))
    out = len(nodes)
    nodes.append(AddNode(hi_relu, neg))
    return out


def build_end_to_end(
    generator: NetworkGraph, pipeline: NetworkGraph, rho: float
) -> NetworkGraph:
    """Graph with inputs (r, s, eps): trigger through the generator, power
    clip, then the pipeline with its noise input bound to the clipped output."""
    latent = generator.out_size()
    if pipeline.out_shape(pipeline.inputs["n"]) != (latent,):
        raise ValueError("generator output does not match the pipeline noise input")
    nodes: List = [InputNode("r", (generator.flat_input_dim,))]
    gen_out = splice(nodes, generator, {generator.input_order[0]: 0})
    clip_out = _clip_block(nodes, gen_out, latent, float(np.sqrt(rho)))
    s_idx = len(nodes)
    nodes.append(InputNode("s", (1,)))
    e_idx = len(nodes)
    nodes.append(InputNode("eps", (latent,)))
    out = splice(nodes, pipeline, {"n": clip_out, "s": s_idx, "eps": e_idx})
    g = NetworkGraph(nodes, out)
    errs = validate_graph(g)
    if errs:
        raise ValueError("end-to-end graph invalid: " + "; ".join(errs))
    return g


def validate_realizability(
    generator: NetworkGraph,
    cex: Counterexample,
    trigger_box: Box,
    rho: float,
    cfg: AttackConfig,
    prop: PipelineProperty,
) -> Counterexample:
    """Search for a trigger that reproduces a misclassification end to end.

    (s, eps) are re-optimized jointly with the trigger rather than frozen at
    the candidate's values.  Returns the counterexample with realizability
    set; on success the assignment is replaced by the realized one."""
    e2e = build_end_to_end(generator, prop.pipeline, rho)
    blocks = {name: (off, size) for name, off, size in prop.pipeline.input_layout()}
    s_box = Box.of([prop.input_box.lower[blocks["s"][0]]],
                   [prop.input_box.upper[blocks["s"][0]]])
    e_off, e_size = blocks["eps"]
    eps_box = Box.of(prop.input_box.lower[e_off:e_off + e_size],
                     prop.input_box.upper[e_off:e_off + e_size])
    e2e_box = Box.concat([trigger_box, s_box, eps_box])

    rng = np.random.default_rng(cfg.seed)
    starts = []
    # candidate triggers first: the cex noise itself (exact for identity-like
    # generators) and any trigger already attached to it
    for cand in ([cex.trigger] if cex.trigger is not None else []) + [cex.n]:
        cand = np.asarray(cand, dtype=np.float64)
        if cand.size == trigger_box.dim:
            starts.append(np.concatenate([
                np.clip(cand, trigger_box.lower, trigger_box.upper), [cex.s], cex.eps
            ]))
    # deterministic lattice over the trigger dims covers basins PGD restarts
    # would otherwise have to stumble into
    for r0 in _trigger_lattice(trigger_box):
        starts.append(np.concatenate([r0, [cex.s], cex.eps]))
    starts.extend(_starts(e2e_box, cfg, rng))

    x = _pgd_core(e2e, e2e_box, prop.true_label, cfg, starts)
    if x is None:
        return dataclasses.replace(cex, realizability=UNREALIZABLE)
    r = x[:trigger_box.dim]
    s = float(x[trigger_box.dim])
    eps = x[trigger_box.dim + 1:]
    gen_in = generator.input_order[0]
    gen_out = forward(generator, {gen_in: Tensor.of(r.astype(np.float32))}).data
    # replicate the clip block's float32 arithmetic so the reported noise is
    # bit-identical to what the end-to-end graph fed the pipeline
    a = np.float32(np.sqrt(rho))
    noise = np.maximum(gen_out + a, np.float32(0)) + (
        -np.maximum(gen_out - a, np.float32(0)) + np.float32(-a)
    )
    xp = np.concatenate([[s], noise.astype(np.float64), eps])
    logits = eval_flat32(prop.pipeline, xp)
    margin, winner = margin_and_winner(logits, prop.true_label)
    if margin < 0.0:
        raise AssertionError("realized point does not violate under exact evaluation")
    return Counterexample(
        s=s, n=noise.astype(np.float64), eps=eps.astype(np.float64),
        logits=logits.astype(np.float64), violated_pair=(prop.true_label, winner),
        realizability=REALIZABLE, trigger=r.astype(np.float64),
    )
