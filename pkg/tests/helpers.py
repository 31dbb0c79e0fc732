"""Shared test oracles.

Everything here is deliberately written as straight-line code, independent of
the library's graph machinery, so it can serve as a reference for it.
"""

from __future__ import annotations

import numpy as np

from semverify.netcore import (
    AddNode,
    AffineNode,
    ConstantNode,
    Conv2dNode,
    ConvTranspose2dNode,
    FlattenNode,
    GraphBuilder,
    InputNode,
    NetworkGraph,
    ReLUNode,
    ReshapeNode,
)


def reference_forward(g: NetworkGraph, inputs: dict, dtype=np.float32) -> np.ndarray:
    """Straight-line per-node re-evaluation of a graph.

    ``inputs`` maps input names to raw arrays.  Walks the node list with plain
    numpy ops (explicit loops for the convolutions) instead of going through
    the library's cached affine forms.
    """
    vals = []
    for node in g.nodes:
        if isinstance(node, InputNode):
            v = np.asarray(inputs[node.name], dtype=dtype).reshape(node.shape)
        elif isinstance(node, ConstantNode):
            v = np.asarray(node.value.array, dtype=dtype)
        elif isinstance(node, AffineNode):
            v = node.weights.astype(dtype) @ vals[node.pred].ravel() + node.bias.astype(dtype)
        elif isinstance(node, Conv2dNode):
            v = reference_conv2d(
                vals[node.pred], node.kernels.astype(dtype), node.bias.astype(dtype),
                node.stride, node.padding,
            )
        elif isinstance(node, ConvTranspose2dNode):
            v = reference_conv_transpose2d(
                vals[node.pred], node.kernels.astype(dtype), node.bias.astype(dtype),
                node.stride, node.padding,
            )
        elif isinstance(node, ReLUNode):
            v = np.maximum(vals[node.pred], 0)
        elif isinstance(node, AddNode):
            v = vals[node.pred_a] + vals[node.pred_b]
        elif isinstance(node, FlattenNode):
            v = vals[node.pred].ravel()
        elif isinstance(node, ReshapeNode):
            v = vals[node.pred].reshape(node.shape)
        else:
            raise AssertionError(f"unhandled node {node}")
        vals.append(np.asarray(v, dtype=dtype))
    return vals[g.output]


def reference_conv2d(x, kernels, bias, stride, padding):
    """Direct-loop 2-D convolution (single sample, channels first)."""
    c, h, w = x.shape
    oc, ic, kh, kw = kernels.shape
    assert ic == c
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oc, oh, ow), dtype=x.dtype)
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * kernels[o]) + bias[o]
    return out


def reference_conv_transpose2d(x, kernels, bias, stride, padding):
    """Direct-loop transposed convolution matching the torch convention."""
    c, h, w = x.shape
    ic, oc, kh, kw = kernels.shape
    assert ic == c
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    out = np.zeros((oc, oh, ow), dtype=x.dtype)
    for ci in range(c):
        for i in range(h):
            for j in range(w):
                for o in range(oc):
                    for ki in range(kh):
                        y = i * stride - padding + ki
                        if not (0 <= y < oh):
                            continue
                        for kj in range(kw):
                            xx = j * stride - padding + kj
                            if not (0 <= xx < ow):
                                continue
                            out[o, y, xx] += x[ci, i, j] * kernels[ci, o, ki, kj]
    for o in range(oc):
        out[o] += bias[o]
    return out


def random_fc_graph(rng, in_dim=3, widths=(4, 3), input_name="x", scale=1.0):
    """Random little FC/ReLU chain used across the suite."""
    b = GraphBuilder()
    prev = b.input(input_name, (in_dim,))
    d = in_dim
    for i, width in enumerate(widths):
        w = rng.normal(scale=scale, size=(width, d)).astype(np.float32)
        bias = rng.normal(scale=scale, size=(width,)).astype(np.float32)
        prev = b.affine(w, bias, prev)
        if i < len(widths) - 1:
            prev = b.relu(prev)
        d = width
    return b.build()


def fd_gradient(g, inputs, cotangent, h=1e-3):
    """Central finite differences of <cotangent, forward(g)> in float64.

    ``inputs`` maps names to raw float64 arrays.  Uses the straight-line
    float64 reference evaluator, so the oracle shares nothing with the
    analytic backward pass under test.
    """
    ct = np.asarray(cotangent, dtype=np.float64).ravel()

    def value(mod_inputs):
        out = reference_forward(g, mod_inputs, dtype=np.float64)
        return float(ct @ out.ravel())

    grads = {}
    for name, base in inputs.items():
        base = np.asarray(base, dtype=np.float64)
        grad = np.zeros(base.size)
        for k in range(base.size):
            for sign in (+1.0, -1.0):
                bumped = base.ravel().copy()
                bumped[k] += sign * h
                mod = {n: np.asarray(v, dtype=np.float64) for n, v in inputs.items()}
                mod[name] = bumped.reshape(base.shape)
                grad[k] += sign * value(mod)
        grads[name] = grad / (2 * h)
    return grads


def batch_forward_nodes(g: NetworkGraph, inputs: dict, dtype=np.float64):
    """Per-node values for a batch of inputs, straight-line numpy ops.

    ``inputs`` maps input names to (N, size) arrays; returns a list of
    (N, size) arrays, one per node.  Convolutions fall back to the direct
    per-sample loops, so keep batches small for conv graphs.
    """
    n = next(iter(inputs.values())).shape[0]
    vals = []
    for node in g.nodes:
        if isinstance(node, InputNode):
            v = np.asarray(inputs[node.name], dtype=dtype).reshape(n, -1)
        elif isinstance(node, ConstantNode):
            v = np.tile(node.value.data.astype(dtype), (n, 1))
        elif isinstance(node, AffineNode):
            v = vals[node.pred] @ node.weights.T.astype(dtype) + node.bias.astype(dtype)
        elif isinstance(node, Conv2dNode):
            in_shape = g.out_shape(node.pred)
            v = np.stack([
                reference_conv2d(
                    vals[node.pred][k].reshape(in_shape),
                    node.kernels.astype(dtype), node.bias.astype(dtype),
                    node.stride, node.padding,
                ).ravel()
                for k in range(n)
            ])
        elif isinstance(node, ConvTranspose2dNode):
            in_shape = g.out_shape(node.pred)
            v = np.stack([
                reference_conv_transpose2d(
                    vals[node.pred][k].reshape(in_shape),
                    node.kernels.astype(dtype), node.bias.astype(dtype),
                    node.stride, node.padding,
                ).ravel()
                for k in range(n)
            ])
        elif isinstance(node, ReLUNode):
            v = np.maximum(vals[node.pred], 0)
        elif isinstance(node, AddNode):
            v = vals[node.pred_a] + vals[node.pred_b]
        else:
            v = vals[node.pred]
        vals.append(np.asarray(v, dtype=dtype))
    return vals


def split_box_samples(g: NetworkGraph, box, samples):
    """Split flat (N, dim) samples into the graph's named input blocks."""
    out = {}
    for name, off, size in g.input_layout():
        out[name] = samples[:, off:off + size]
    return out


def planted_triple(theta, latent=2, classes=3, image_shape=(1, 4, 4)):
    """Encoder/decoder/classifier with an analytically planted margin.

    The encoder outputs a constant zero latent, the decoder copies the
    received latent into the first pixels, and the classifier produces
    logits (theta, z'_0, -10, ...): the margin of the true class 0 over
    class 1 is exactly theta - (n_0 + eps_0).
    """
    d = int(np.prod(image_shape))
    enc = GraphBuilder()
    x = enc.input("x", image_shape)
    f = enc.flatten(x)
    enc.affine(np.zeros((latent, d), np.float32), np.zeros(latent, np.float32), f)
    encoder = enc.build()

    dec = GraphBuilder()
    z = dec.input("z", (latent,))
    w = np.zeros((d, latent), np.float32)
    for j in range(min(latent, d)):
        w[j, j] = 1.0
    a = dec.affine(w, np.zeros(d, np.float32), z)
    dec.reshape(image_shape, a)
    decoder = dec.build()

    cls = GraphBuilder()
    xi = cls.input("xhat", image_shape)
    fc = cls.flatten(xi)
    wc = np.zeros((classes, d), np.float32)
    bc = np.full(classes, -10.0, np.float32)
    bc[0] = np.float32(theta)
    wc[1, 0] = 1.0
    bc[1] = 0.0
    cls.affine(wc, bc, fc)
    classifier = cls.build()
    return encoder, decoder, classifier


def stub_noise_bounds(lo, hi, latent):
    from semverify.boundprop import Box
    from semverify.noisebounds import NoiseBoundsResult

    return NoiseBoundsResult(
        bounds=Box.uniform(lo, hi, latent),
        clamped=np.zeros(latent, bool),
        infeasible=np.zeros(latent, bool),
        exact_gap=np.zeros(latent),
    )


def planted_property(theta, n_half=0.5, eps_half=0.01, s_range=(0.0, 1.0),
                     latent=2, classes=3):
    """Resolved property over the planted pipeline: sat iff theta <= n_half
    + eps_half (the margin theta - n_0 - eps_0 can reach zero in the box)."""
    from semverify.compose import BlurSpec, build_blur_front, build_property, compose_pipeline
    from semverify.netcore import Tensor

    encoder, decoder, classifier = planted_triple(theta, latent=latent, classes=classes)
    image = Tensor.of(np.full((1, 4, 4), 0.5, np.float32))
    front = build_blur_front(image, BlurSpec.box_blur(3, s_range=s_range))
    pipeline = compose_pipeline(encoder, decoder, classifier, front)
    sigma = eps_half / 3.0
    return build_property(pipeline, stub_noise_bounds(-n_half, n_half, latent),
                          BlurSpec.box_blur(3, s_range=s_range), sigma, 0)


def random_toy_pipeline(rng, latent=1, classes=2, image_shape=(1, 4, 4), scale=0.8):
    """Random small pipeline with <= 8 ReLUs for grid-oracle comparisons."""
    from semverify.compose import BlurSpec, build_blur_front, compose_pipeline
    from semverify.netcore import Tensor

    d = int(np.prod(image_shape))
    enc = GraphBuilder()
    x = enc.input("x", image_shape)
    f = enc.flatten(x)
    h = enc.affine(rng.normal(scale=scale, size=(3, d)), rng.normal(scale=scale, size=3), f)
    r = enc.relu(h)
    enc.affine(rng.normal(scale=scale, size=(latent, 3)), rng.normal(scale=0.3, size=latent), r)
    encoder = enc.build()

    dec = GraphBuilder()
    z = dec.input("z", (latent,))
    h2 = dec.affine(rng.normal(scale=scale, size=(3, latent)), rng.normal(scale=scale, size=3), z)
    r2 = dec.relu(h2)
    a2 = dec.affine(rng.normal(scale=scale, size=(d, 3)), rng.normal(scale=0.3, size=d), r2)
    dec.reshape(image_shape, a2)
    decoder = dec.build()

    cls = GraphBuilder()
    xi = cls.input("xhat", image_shape)
    fc = cls.flatten(xi)
    h3 = cls.affine(rng.normal(scale=scale, size=(2, d)), rng.normal(scale=scale, size=2), fc)
    r3 = cls.relu(h3)
    cls.affine(rng.normal(scale=scale, size=(classes, 2)), rng.normal(scale=0.5, size=classes), r3)
    classifier = cls.build()

    image = Tensor.of(rng.uniform(0, 1, image_shape).astype(np.float32))
    front = build_blur_front(image, BlurSpec.box_blur(3))
    return compose_pipeline(encoder, decoder, classifier, front)


def grid_violation_search(pipeline, box, true_label, steps=501):
    """Dense float32 grid over the first two non-degenerate box dimensions.

    Returns (found, worst_margin, worst_point); remaining dimensions are
    pinned to the box center.  Ground truth uses the same float32 forward
    semantics as the verifier's witnesses.
    """
    widths = box.width
    free = [i for i in range(box.dim) if widths[i] > 0]
    assert len(free) <= 2, "grid oracle handles at most two free dimensions"
    axes = []
    for i in range(box.dim):
        if i in free:
            axes.append(np.linspace(box.lower[i], box.upper[i], steps))
        else:
            axes.append(np.array([box.center[i]]))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    inputs = split_box_samples(pipeline, box, pts)
    vals = batch_forward_nodes(pipeline, inputs, dtype=np.float32)
    logits = vals[pipeline.output]
    masked = logits.copy()
    masked[:, true_label] = -np.inf
    margins = masked.max(axis=1) - logits[:, true_label]
    worst = int(np.argmax(margins))
    return bool(margins[worst] >= 0.0), float(margins[worst]), pts[worst]
