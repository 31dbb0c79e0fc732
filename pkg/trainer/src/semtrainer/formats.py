"""Writers for the verifier's exchange formats.

The verifier side owns these formats; this module implements them
independently from their documented schema (format_version 1): a JSON
manifest describing the node graph plus a raw little-endian float32 blob in
node order, weights before bias, and the property JSON layout.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch.nn as nn

from .models import (
    ClassifierFC,
    ClassifierResNet,
    Decoder,
    Encoder,
    Generator,
)

FORMAT_VERSION = 1


class GraphWriter:
    """Accumulates node records and their parameter arrays."""

    def __init__(self):
        self.nodes: List[dict] = []
        self.params: List[np.ndarray] = []

    def _add(self, node: dict, *arrays) -> int:
        self.nodes.append(node)
        for arr in arrays:
            self.params.append(np.ascontiguousarray(arr, dtype="<f4"))
        return len(self.nodes) - 1

    def input(self, name: str, shape) -> int:
        return self._add({"kind": "input", "name": name, "shape": [int(d) for d in shape]})

    def relu(self, pred: int) -> int:
        return self._add({"kind": "relu", "pred": pred})

    def flatten(self, pred: int) -> int:
        return self._add({"kind": "flatten", "pred": pred})

    def reshape(self, shape, pred: int) -> int:
        return self._add({"kind": "reshape", "shape": [int(d) for d in shape], "pred": pred})

    def add(self, a: int, b: int) -> int:
        return self._add({"kind": "add", "pred_a": a, "pred_b": b})

    def linear(self, layer: nn.Linear, pred: int) -> int:
        w = layer.weight.detach().cpu().numpy()
        b = layer.bias.detach().cpu().numpy()
        return self._add(
            {"kind": "affine", "pred": pred,
             "out_size": int(w.shape[0]), "in_size": int(w.shape[1])},
            w, b,
        )

    def conv2d(self, layer: nn.Conv2d, pred: int) -> int:
        w = layer.weight.detach().cpu().numpy()  # (oc, ic, kh, kw)
        b = layer.bias.detach().cpu().numpy()
        return self._add(
            {"kind": "conv2d", "pred": pred,
             "out_channels": int(w.shape[0]), "in_channels": int(w.shape[1]),
             "kernel_hw": [int(w.shape[2]), int(w.shape[3])],
             "stride": int(layer.stride[0]), "padding": int(layer.padding[0])},
            w, b,
        )

    def conv_transpose2d(self, layer: nn.ConvTranspose2d, pred: int) -> int:
        w = layer.weight.detach().cpu().numpy()  # (ic, oc, kh, kw)
        b = layer.bias.detach().cpu().numpy()
        return self._add(
            {"kind": "conv_transpose2d", "pred": pred,
             "out_channels": int(w.shape[1]), "in_channels": int(w.shape[0]),
             "kernel_hw": [int(w.shape[2]), int(w.shape[3])],
             "stride": int(layer.stride[0]), "padding": int(layer.padding[0])},
            w, b,
        )

    def write(self, base: Path, role: str, latent_dim: int,
              latent_power: Optional[float] = None) -> Tuple[Path, Path]:
        base = Path(base)
        manifest = {
            "format_version": FORMAT_VERSION,
            "role": role,
            "latent_dim": int(latent_dim),
            "weight_blob_ref": base.name + ".weights.bin",
            "graph": {"nodes": self.nodes, "output": len(self.nodes) - 1},
        }
        if latent_power is not None:
            manifest["latent_power"] = float(latent_power)
        manifest_path = base.with_name(base.name + ".manifest.json")
        blob_path = base.with_name(base.name + ".weights.bin")
        manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
        blob_path.write_bytes(b"".join(p.tobytes() for p in self.params))
        return manifest_path, blob_path


def export_encoder(model: Encoder, in_shape, latent_dim: int, latent_power: float,
                   base: Path):
    g = GraphWriter()
    x = g.input("x", in_shape)
    c = g.conv2d(model.conv, x)
    r = g.relu(c)
    f = g.flatten(r)
    g.linear(model.fc, f)
    return g.write(base, "encoder", latent_dim, latent_power)


def export_decoder(model: Decoder, latent_dim: int, base: Path):
    g = GraphWriter()
    z = g.input("z", (latent_dim,))
    f = g.linear(model.fc, z)
    r = g.relu(f)
    shaped = g.reshape((8, model.half, model.half), r)
    g.conv_transpose2d(model.deconv, shaped)
    return g.write(base, "decoder", latent_dim)


def export_classifier(model: nn.Module, in_shape, latent_dim: int, base: Path):
    g = GraphWriter()
    x = g.input("xhat", in_shape)
    if isinstance(model, ClassifierFC):
        f = g.flatten(x)
        h = g.linear(model.fc1, f)
        r = g.relu(h)
        g.linear(model.fc2, r)
    elif isinstance(model, ClassifierResNet):
        h = g.conv2d(model.stem, x)
        h = g.relu(h)
        for block in model.blocks:
            b1 = g.conv2d(block.c1, h)
            a1 = g.relu(b1)
            b2 = g.conv2d(block.c2, a1)
            s = g.add(b2, h)
            h = g.relu(s)
        f = g.flatten(h)
        g.linear(model.fc, f)
    else:
        raise TypeError(f"unsupported classifier {type(model).__name__}")
    return g.write(base, "classifier", latent_dim)


def export_generator(model: Generator, latent_dim: int, base: Path):
    g = GraphWriter()
    r = g.input("r", (latent_dim,))
    prev = r
    for layer in model.net:
        if isinstance(layer, nn.Linear):
            prev = g.linear(layer, prev)
        elif isinstance(layer, nn.ReLU):
            prev = g.relu(prev)
    return g.write(base, "generator", latent_dim)


def write_property(
    path: Path,
    property_id: str,
    clean_input: np.ndarray,
    true_label: int,
    blur_kernel: np.ndarray,
    s_range: Tuple[float, float],
    trigger_range: Tuple[float, float],
    awgn_sigma: float,
    timeout_seconds: float,
    pnr_db: Optional[float] = None,
    rho: Optional[float] = None,
) -> Path:
    if (pnr_db is None) == (rho is None):
        raise ValueError("exactly one of pnr_db / rho")
    clean = np.ascontiguousarray(clean_input, dtype=np.float32)
    doc = {
        "format_version": FORMAT_VERSION,
        "id": property_id,
        "clean_input": {
            "shape": list(clean.shape),
            "data": [float(v) for v in clean.ravel()],
        },
        "true_label": int(true_label),
        "blur": {
            "kernel": [[float(v) for v in row] for row in np.asarray(blur_kernel)],
            "s_range": [float(s_range[0]), float(s_range[1])],
        },
        "trigger_range": [float(trigger_range[0]), float(trigger_range[1])],
        "awgn_sigma": float(awgn_sigma),
        "timeout_seconds": float(timeout_seconds),
    }
    if pnr_db is not None:
        doc["pnr_db"] = float(pnr_db)
    else:
        doc["rho"] = float(rho)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path
