"""Combined verifiable pipeline: blur-parameterized input, latent noise
injection, decoder and classifier, plus the verification property over it.

The clean image is baked into the graph as the constant part of a single
affine front node, so the only verification variables are the blur strength
``s``, the adversarial noise ``n`` and the channel noise ``eps``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .boundprop import Box
from .netcore import (
    AddNode,
    GraphBuilder,
    InputNode,
    NetworkGraph,
    Node,
    Tensor,
    forward,
    node_preds,
    validate_graph,
)
from .noisebounds import NoiseBoundsResult


class CompositionError(ValueError):
    """Shape chain break or malformed piece."""


class CleanMisclassification(ValueError):
    """The clean input is not classified as the stated label; the property
    is only posed for correctly-classified clean inputs."""


@dataclass(frozen=True)
class BlurSpec:
    """Normalized convolution kernel with a strength range."""

    kernel: np.ndarray  # k x k, odd, nonnegative, sums to 1
    s_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "s_range", (float(self.s_range[0]), float(self.s_range[1])))
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise CompositionError("kernel must be odd and square")
        if np.any(k < 0):
            raise CompositionError("kernel entries must be nonnegative")
        if abs(float(k.sum()) - 1.0) > 1e-9:
            raise CompositionError("kernel entries must sum to 1")
        s_lo, s_hi = self.s_range
        if not (0.0 <= s_lo <= s_hi <= 1.0):
            raise CompositionError("s_range must be within [0, 1]")

    @classmethod
    def box_blur(cls, size: int = 3, s_range=(0.0, 1.0)) -> "BlurSpec":
        return cls(np.full((size, size), 1.0 / (size * size)), s_range)


def _same_conv(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size zero-padded convolution applied per channel, float32."""
    c, h, w = image.shape
    k = kernel.shape[0]
    pad = k // 2
    out = np.zeros_like(image, dtype=np.float32)
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    padded[:, pad:pad + h, pad:pad + w] = image
    kern = kernel.astype(np.float32)
    for i in range(h):
        for j in range(w):
            patch = padded[:, i:i + k, j:j + k]
            out[:, i, j] = np.tensordot(patch, kern, axes=([1, 2], [0, 1]))
    return out


def build_blur_front(x_clean: Tensor, blur: BlurSpec) -> NetworkGraph:
    """Graph fragment mapping the scalar strength s to the blurred image
    x'(s) = (1-s)*x + s*(K*x), as a single affine node in s."""
    shape = x_clean.shape
    if len(shape) == 2:
        image = x_clean.array[None, :, :]
    elif len(shape) == 3:
        image = x_clean.array
    else:
        raise CompositionError(f"clean input must be (h,w) or (c,h,w), got {shape}")
    k = blur.kernel.shape[0]
    if k > image.shape[1] or k > image.shape[2]:
        raise CompositionError(
            f"kernel {k}x{k} larger than image {image.shape[1]}x{image.shape[2]}"
        )
    blurred = _same_conv(image, blur.kernel)
    coeff = (blurred - image).reshape(-1, 1).astype(np.float32)
    const = image.ravel().astype(np.float32)
    b = GraphBuilder()
    s = b.input("s", (1,))
    aff = b.affine(coeff, const, s)
    b.reshape(shape, aff)
    return b.build()


def splice(nodes: List[Node], sub: NetworkGraph, binding: Dict[str, int]) -> int:
    """Append a copy of ``sub`` to ``nodes``, rebinding its named inputs to
    existing node indices; returns the index of the copied output node."""
    errs = validate_graph(sub)
    if errs:
        raise CompositionError("invalid piece: " + "; ".join(errs))
    mapping: Dict[int, int] = {}
    for i, node in enumerate(sub.nodes):
        if isinstance(node, InputNode):
            if node.name not in binding:
                raise CompositionError(f"no binding for input '{node.name}'")
            mapping[i] = binding[node.name]
            continue
        remapped = {}
        if isinstance(node, AddNode):
            remapped = {"pred_a": mapping[node.pred_a], "pred_b": mapping[node.pred_b]}
        elif node_preds(node):
            remapped = {"pred": mapping[node_preds(node)[0]]}
        nodes.append(dataclasses.replace(node, **remapped) if remapped else node)
        mapping[i] = len(nodes) - 1
    return mapping[sub.output]


def _single_input_name(g: NetworkGraph, what: str) -> str:
    if len(g.input_order) != 1:
        raise CompositionError(f"{what} must have exactly one input")
    return g.input_order[0]


def compose_pipeline(
    encoder: NetworkGraph,
    decoder: NetworkGraph,
    classifier: NetworkGraph,
    front: NetworkGraph,
) -> NetworkGraph:
    """Single graph with external inputs (s, n, eps): front -> encoder ->
    (+n) -> (+eps) -> decoder -> classifier."""
    front_out_shape = front.out_shape()
    enc_in = encoder.out_shape(encoder.inputs[_single_input_name(encoder, "encoder")])
    if front_out_shape != enc_in:
        raise CompositionError(f"front output {front_out_shape} != encoder input {enc_in}")
    latent = encoder.out_shape()
    if len(latent) != 1:
        raise CompositionError(f"encoder output must be a flat vector, got {latent}")
    dec_in = decoder.out_shape(decoder.inputs[_single_input_name(decoder, "decoder")])
    if dec_in != latent:
        raise CompositionError(f"decoder input {dec_in} != latent {latent}")
    cls_in = classifier.out_shape(classifier.inputs[_single_input_name(classifier, "classifier")])
    if classifier.out_size() < 2:
        raise CompositionError("classifier must output at least two logits")
    if decoder.out_shape() != cls_in:
        raise CompositionError(
            f"decoder output {decoder.out_shape()} != classifier input {cls_in}"
        )

    front_in = _single_input_name(front, "front")
    if front.out_shape(front.inputs[front_in]) != (1,):
        raise CompositionError("front must take the scalar strength s")
    nodes: List[Node] = [InputNode("s", (1,))]
    front_out = splice(nodes, front, {front_in: 0})
    n_idx = len(nodes)
    nodes.append(InputNode("n", latent))
    eps_idx = len(nodes)
    nodes.append(InputNode("eps", latent))
    z_idx = splice(nodes, encoder, {_single_input_name(encoder, "encoder"): front_out})
    zn_idx = len(nodes)
    nodes.append(AddNode(z_idx, n_idx))
    zprime_idx = len(nodes)
    nodes.append(AddNode(zn_idx, eps_idx))
    xhat_idx = splice(nodes, decoder, {_single_input_name(decoder, "decoder"): zprime_idx})
    y_idx = splice(nodes, classifier, {_single_input_name(classifier, "classifier"): xhat_idx})
    g = NetworkGraph(nodes, y_idx)
    errs = validate_graph(g)
    if errs:
        raise CompositionError("composition failed: " + "; ".join(errs))
    return g


@dataclass
class PipelineProperty:
    """Resolved verification property over the composed pipeline."""

    pipeline: NetworkGraph
    input_box: Box  # over (s, n, eps)
    true_label: int
    clean_logits: Tensor
    latent_dim: int
    property_id: str = "property"

    @property
    def num_classes(self) -> int:
        return self.clean_logits.size

    def blocks(self) -> Dict[str, Tuple[int, int]]:
        return {name: (off, size) for name, off, size in self.pipeline.input_layout()}


def clean_forward(pipeline: NetworkGraph, latent_dim: int) -> Tensor:
    zeros = np.zeros(latent_dim, dtype=np.float32)
    return forward(
        pipeline,
        {
            "s": Tensor.of(np.zeros(1, np.float32)),
            "n": Tensor.of(zeros),
            "eps": Tensor.of(zeros.copy()),
        },
    )


def build_property(
    pipeline: NetworkGraph,
    noise_bounds: NoiseBoundsResult,
    blur: BlurSpec,
    awgn_sigma: float,
    true_label: int,
    property_id: str = "property",
) -> PipelineProperty:
    """Input box [s_L,s_U] x [n_L,n_U] x [-3*sigma, 3*sigma]^|Z| and the
    argmax output condition.  Refused when the clean input is misclassified."""
    if awgn_sigma < 0:
        raise CompositionError("awgn_sigma must be nonnegative")
    if set(pipeline.input_order) != {"s", "n", "eps"}:
        raise CompositionError("pipeline must have inputs (s, n, eps)")
    latent_dim = noise_bounds.bounds.dim
    clean_logits = clean_forward(pipeline, latent_dim)
    logits = clean_logits.data
    if not (0 <= true_label < logits.size):
        raise CompositionError("true label out of range")
    others = np.delete(logits, true_label)
    if not np.all(logits[true_label] > others):
        raise CleanMisclassification(
            f"clean input is not classified as label {true_label} "
            f"(logits argmax {int(np.argmax(logits))})"
        )
    s_box = Box.of([blur.s_range[0]], [blur.s_range[1]])
    eps_half = 3.0 * float(awgn_sigma)
    eps_box = Box.uniform(-eps_half, eps_half, latent_dim)
    input_box = Box.concat([s_box, noise_bounds.bounds, eps_box])
    return PipelineProperty(
        pipeline=pipeline,
        input_box=input_box,
        true_label=int(true_label),
        clean_logits=clean_logits,
        latent_dim=latent_dim,
        property_id=property_id,
    )
