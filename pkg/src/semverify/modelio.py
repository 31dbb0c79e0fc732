"""Language-neutral on-disk formats.

* ``<name>.manifest.json`` + ``<name>.weights.bin`` — network topology as
  JSON plus a raw little-endian float32 parameter blob (node order, weights
  before bias).
* ``<name>.property.json`` — verification property inputs.
* ``<run>.results.jsonl`` — one result record per line.
* ``<name>.vnnlib.txt`` — exchange text for third-party verifiers.

Loading is strict: any structural discrepancy is an error, never a warning.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .boundprop import Box
from .netcore import (
    AddNode,
    AffineNode,
    ConstantNode,
    Conv2dNode,
    ConvTranspose2dNode,
    FlattenNode,
    InputNode,
    NetworkGraph,
    Node,
    ReLUNode,
    ReshapeNode,
    Tensor,
    validate_graph,
)

FORMAT_VERSION = 1
ROLES = ("encoder", "decoder", "classifier", "generator", "discriminator")
VERDICTS = ("sat", "sat_unrealized", "unsat", "timeout", "unknown")


class ModelIOError(ValueError):
    """Malformed or inconsistent on-disk artifact."""


@dataclass(frozen=True)
class ModelMetadata:
    role: str
    latent_dim: int
    latent_power: Optional[float] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ModelIOError(f"unknown role '{self.role}'")
        if self.latent_dim < 1:
            raise ModelIOError("latent_dim must be positive")
        if (self.latent_power is not None) != (self.role == "encoder"):
            raise ModelIOError("latent_power must be present iff role is 'encoder'")
        if self.latent_power is not None and self.latent_power < 0:
            raise ModelIOError("latent_power must be nonnegative")


def _node_params(node: Node) -> List[np.ndarray]:
    if isinstance(node, AffineNode):
        return [node.weights, node.bias]
    if isinstance(node, (Conv2dNode, ConvTranspose2dNode)):
        return [node.kernels, node.bias]
    if isinstance(node, ConstantNode):
        return [node.value.data]
    return []


def _node_to_json(node: Node) -> dict:
    if isinstance(node, InputNode):
        return {"kind": "input", "name": node.name, "shape": list(node.shape)}
    if isinstance(node, ConstantNode):
        return {"kind": "constant", "shape": list(node.value.shape)}
    if isinstance(node, AffineNode):
        return {
            "kind": "affine",
            "pred": node.pred,
            "out_size": int(node.weights.shape[0]),
            "in_size": int(node.weights.shape[1]),
        }
    if isinstance(node, Conv2dNode):
        oc, ic, kh, kw = node.kernels.shape
        return {
            "kind": "conv2d", "pred": node.pred, "out_channels": int(oc),
            "in_channels": int(ic), "kernel_hw": [int(kh), int(kw)],
            "stride": int(node.stride), "padding": int(node.padding),
        }
    if isinstance(node, ConvTranspose2dNode):
        ic, oc, kh, kw = node.kernels.shape
        return {
            "kind": "conv_transpose2d", "pred": node.pred, "out_channels": int(oc),
            "in_channels": int(ic), "kernel_hw": [int(kh), int(kw)],
            "stride": int(node.stride), "padding": int(node.padding),
        }
    if isinstance(node, ReLUNode):
        return {"kind": "relu", "pred": node.pred}
    if isinstance(node, AddNode):
        return {"kind": "add", "pred_a": node.pred_a, "pred_b": node.pred_b}
    if isinstance(node, FlattenNode):
        return {"kind": "flatten", "pred": node.pred}
    if isinstance(node, ReshapeNode):
        return {"kind": "reshape", "pred": node.pred, "shape": list(node.shape)}
    raise ModelIOError(f"unsupported node kind {type(node).__name__}")


def _require(entry: dict, key: str, idx: int):
    if key not in entry:
        raise ModelIOError(f"node {idx}: missing field '{key}'")
    return entry[key]


def _node_from_json(entry: dict, idx: int, take) -> Node:
    kind = _require(entry, "kind", idx)
    if kind == "input":
        return InputNode(_require(entry, "name", idx), tuple(_require(entry, "shape", idx)))
    if kind == "constant":
        shape = tuple(_require(entry, "shape", idx))
        size = int(np.prod(shape))
        return ConstantNode(Tensor(shape, take(size)))
    if kind == "affine":
        m, k = int(_require(entry, "out_size", idx)), int(_require(entry, "in_size", idx))
        w = take(m * k).reshape(m, k)
        b = take(m)
        return AffineNode(w, b, int(_require(entry, "pred", idx)))
    if kind in ("conv2d", "conv_transpose2d"):
        oc = int(_require(entry, "out_channels", idx))
        ic = int(_require(entry, "in_channels", idx))
        kh, kw = (int(v) for v in _require(entry, "kernel_hw", idx))
        if kind == "conv2d":
            kern = take(oc * ic * kh * kw).reshape(oc, ic, kh, kw)
            cls = Conv2dNode
        else:
            kern = take(ic * oc * kh * kw).reshape(ic, oc, kh, kw)
            cls = ConvTranspose2dNode
        b = take(oc)
        return cls(
            kern, b, int(_require(entry, "stride", idx)),
            int(_require(entry, "padding", idx)), int(_require(entry, "pred", idx)),
        )
    if kind == "relu":
        return ReLUNode(int(_require(entry, "pred", idx)))
    if kind == "add":
        return AddNode(int(_require(entry, "pred_a", idx)), int(_require(entry, "pred_b", idx)))
    if kind == "flatten":
        return FlattenNode(int(_require(entry, "pred", idx)))
    if kind == "reshape":
        return ReshapeNode(tuple(_require(entry, "shape", idx)), int(_require(entry, "pred", idx)))
    raise ModelIOError(f"node {idx}: unknown kind '{kind}'")


def save_model(g: NetworkGraph, metadata: ModelMetadata, base: Path) -> Tuple[Path, Path]:
    """Write ``<base>.manifest.json`` and ``<base>.weights.bin``.

    The blob is bit-exact: weights are stored as raw little-endian float32 in
    node order, weights before bias within a node.
    """
    errs = validate_graph(g)
    if errs:
        raise ModelIOError("cannot save invalid graph: " + "; ".join(errs))
    base = Path(base)
    blob = bytearray()
    for node in g.nodes:
        for arr in _node_params(node):
            blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    manifest = {
        "format_version": FORMAT_VERSION,
        "role": metadata.role,
        "latent_dim": metadata.latent_dim,
        "weight_blob_ref": base.name + ".weights.bin",
        "graph": {
            "nodes": [_node_to_json(n) for n in g.nodes],
            "output": g.output,
        },
    }
    if metadata.latent_power is not None:
        manifest["latent_power"] = float(metadata.latent_power)
    manifest_path = base.with_name(base.name + ".manifest.json")
    blob_path = base.with_name(base.name + ".weights.bin")
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    blob_path.write_bytes(bytes(blob))
    return manifest_path, blob_path


def load_model(manifest_path: Path) -> Tuple[NetworkGraph, ModelMetadata]:
    """Load and strictly validate a manifest + blob pair."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ModelIOError(f"invalid manifest JSON: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelIOError(f"format_version {version} unsupported (expected {FORMAT_VERSION})")
    for key in ("role", "latent_dim", "weight_blob_ref", "graph"):
        if key not in manifest:
            raise ModelIOError(f"manifest missing '{key}'")
    blob_path = manifest_path.parent / manifest["weight_blob_ref"]
    if not blob_path.exists():
        raise ModelIOError(f"weight blob {blob_path} not found")
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")

    cursor = 0

    def take(count: int) -> np.ndarray:
        nonlocal cursor
        if cursor + count > blob.size:
            raise ModelIOError(
                f"weight blob too short: need {(cursor + count) * 4} bytes, have {blob.size * 4}"
            )
        out = np.array(blob[cursor:cursor + count], dtype=np.float32)
        cursor += count
        return out

    graph_json = manifest["graph"]
    nodes = [_node_from_json(e, i, take) for i, e in enumerate(graph_json.get("nodes", []))]
    if cursor != blob.size:
        raise ModelIOError(
            f"weight blob length mismatch: {blob.size * 4} bytes on disk, "
            f"{cursor * 4} declared by the manifest"
        )
    for i, node in enumerate(nodes):
        for arr in _node_params(node):
            if not np.all(np.isfinite(arr)):
                raise ModelIOError(f"non-finite weight in node {i}")
    g = NetworkGraph(nodes, graph_json.get("output"))
    errs = validate_graph(g)
    if errs:
        raise ModelIOError("invalid graph: " + "; ".join(errs))
    metadata = ModelMetadata(
        role=manifest["role"],
        latent_dim=int(manifest["latent_dim"]),
        latent_power=manifest.get("latent_power"),
    )
    return g, metadata


# --------------------------------------------------------------------------
# Property files
# --------------------------------------------------------------------------


@dataclass
class PropertyFile:
    """Inputs of one verification problem, prior to noise-bound resolution."""

    property_id: str
    clean_input: Tensor
    true_label: int
    blur_kernel: np.ndarray  # small odd square, entries sum to 1
    s_range: Tuple[float, float]
    trigger_range: Tuple[float, float]
    awgn_sigma: float
    timeout_seconds: float
    pnr_db: Optional[float] = None
    rho: Optional[float] = None

    def __post_init__(self):
        self.blur_kernel = np.asarray(self.blur_kernel, dtype=np.float64)
        k = self.blur_kernel
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ModelIOError("blur kernel must be a small odd square matrix")
        if abs(float(k.sum()) - 1.0) > 1e-9:
            raise ModelIOError("blur kernel entries must sum to 1")
        if self.s_range[0] > self.s_range[1]:
            raise ModelIOError("s_range must satisfy s_L <= s_U")
        if self.trigger_range[0] > self.trigger_range[1]:
            raise ModelIOError("trigger_range must satisfy r_L <= r_U")
        if (self.pnr_db is None) == (self.rho is None):
            raise ModelIOError("exactly one of pnr_db / rho must be given")
        if self.rho is not None and self.rho < 0:
            raise ModelIOError("rho must be nonnegative")
        if self.awgn_sigma < 0:
            raise ModelIOError("awgn_sigma must be nonnegative")
        if self.timeout_seconds <= 0:
            raise ModelIOError("timeout_seconds must be positive")


def save_property(prop: PropertyFile, path: Path) -> Path:
    path = Path(path)
    doc = {
        "format_version": FORMAT_VERSION,
        "id": prop.property_id,
        "clean_input": {
            "shape": list(prop.clean_input.shape),
            "data": [float(v) for v in prop.clean_input.data],
        },
        "true_label": int(prop.true_label),
        "blur": {
            "kernel": [[float(v) for v in row] for row in prop.blur_kernel],
            "s_range": [float(prop.s_range[0]), float(prop.s_range[1])],
        },
        "trigger_range": [float(prop.trigger_range[0]), float(prop.trigger_range[1])],
        "awgn_sigma": float(prop.awgn_sigma),
        "timeout_seconds": float(prop.timeout_seconds),
    }
    if prop.pnr_db is not None:
        doc["pnr_db"] = float(prop.pnr_db)
    else:
        doc["rho"] = float(prop.rho)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_property(path: Path) -> PropertyFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelIOError(f"invalid property JSON: {e}") from e
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelIOError("property format_version unsupported")
    for key in ("clean_input", "true_label", "blur", "trigger_range",
                "awgn_sigma", "timeout_seconds"):
        if key not in doc:
            raise ModelIOError(f"property file missing '{key}'")
    ci = doc["clean_input"]
    clean = Tensor(tuple(ci["shape"]), np.asarray(ci["data"], dtype=np.float32))
    return PropertyFile(
        property_id=doc.get("id", path.stem.removesuffix(".property")),
        clean_input=clean,
        true_label=int(doc["true_label"]),
        blur_kernel=np.asarray(doc["blur"]["kernel"], dtype=np.float64),
        s_range=tuple(doc["blur"]["s_range"]),
        trigger_range=tuple(doc["trigger_range"]),
        awgn_sigma=float(doc["awgn_sigma"]),
        timeout_seconds=float(doc["timeout_seconds"]),
        pnr_db=doc.get("pnr_db"),
        rho=doc.get("rho"),
    )


# --------------------------------------------------------------------------
# Result records
# --------------------------------------------------------------------------


@dataclass
class ResultRecord:
    property_id: str
    verdict: str
    counterexample: Optional[dict] = None
    statistics: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ModelIOError(f"unknown verdict '{self.verdict}'")
        needs_cex = self.verdict in ("sat", "sat_unrealized")
        if needs_cex != (self.counterexample is not None):
            raise ModelIOError("counterexample must be present iff verdict is sat-like")


def result_to_json(rec: ResultRecord) -> str:
    return json.dumps(
        {
            "property": rec.property_id,
            "verdict": rec.verdict,
            "counterexample": rec.counterexample,
            "statistics": rec.statistics,
        }
    )


def write_results(records: List[ResultRecord], path: Path) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for rec in records:
            f.write(result_to_json(rec) + "\n")
    return path


def read_results(path: Path) -> List[ResultRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        out.append(
            ResultRecord(
                property_id=doc["property"],
                verdict=doc["verdict"],
                counterexample=doc.get("counterexample"),
                statistics=doc.get("statistics", {}),
            )
        )
    return out


# --------------------------------------------------------------------------
# Exchange-format property text (VNN-LIB style)
# --------------------------------------------------------------------------


def export_exchange_property(pipeline: NetworkGraph, prop) -> str:
    """Emit a plain-text property: box bounds on the declared input variables
    and the disjunctive violation condition (some wrong class scoring at
    least the true class).  Byte-deterministic for identical inputs."""
    box: Box = prop.input_box
    true_label: int = prop.true_label
    if box is None:
        raise ModelIOError("property bounds are not resolved")
    n_in = pipeline.flat_input_dim
    n_out = pipeline.out_size()
    if box.dim != n_in:
        raise ModelIOError(f"box dimension {box.dim} != pipeline input dimension {n_in}")
    if not (0 <= true_label < n_out):
        raise ModelIOError("true label out of range")
    lines = [f"; semcom robustness property: {n_in} inputs, {n_out} outputs, "
             f"true label {true_label}"]
    for name, off, size in pipeline.input_layout():
        lines.append(f"; input block {name}: X_{off}..X_{off + size - 1}")
    lines.append("")
    for i in range(n_in):
        lines.append(f"(declare-const X_{i} Real)")
    for j in range(n_out):
        lines.append(f"(declare-const Y_{j} Real)")
    lines.append("")
    for i in range(n_in):
        lines.append(f"(assert (>= X_{i} {float(box.lower[i])!r}))")
        lines.append(f"(assert (<= X_{i} {float(box.upper[i])!r}))")
    lines.append("")
    lines.append("(assert (or")
    for j in range(n_out):
        if j == true_label:
            continue
        lines.append(f"  (and (>= Y_{j} Y_{true_label}))")
    lines.append("))")
    return "\n".join(lines) + "\n"


@dataclass
class ParsedExchangeProperty:
    input_box: Box
    true_label: int
    wrong_labels: List[int]
    num_outputs: int


_DECL_RE = re.compile(r"\(declare-const ([XY])_(\d+) Real\)")
_IN_RE = re.compile(r"\(assert \((<=|>=) X_(\d+) ([^ )]+)\)\)")
_OUT_RE = re.compile(r"\(and \(>= Y_(\d+) Y_(\d+)\)\)")


def parse_exchange_property(text: str) -> ParsedExchangeProperty:
    """Parse the emitted exchange text back (round-trip check support)."""
    n_in = n_out = 0
    for m in _DECL_RE.finditer(text):
        idx = int(m.group(2)) + 1
        if m.group(1) == "X":
            n_in = max(n_in, idx)
        else:
            n_out = max(n_out, idx)
    if n_in == 0 or n_out == 0:
        raise ModelIOError("exchange text declares no variables")
    lower = np.full(n_in, np.nan)
    upper = np.full(n_in, np.nan)
    for m in _IN_RE.finditer(text):
        op, idx, val = m.group(1), int(m.group(2)), float(m.group(3))
        if op == ">=":
            lower[idx] = val
        else:
            upper[idx] = val
    if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
        raise ModelIOError("incomplete input bounds in exchange text")
    wrong, true_candidates = [], set()
    for m in _OUT_RE.finditer(text):
        wrong.append(int(m.group(1)))
        true_candidates.add(int(m.group(2)))
    if len(true_candidates) != 1:
        raise ModelIOError("output condition does not reference a single true label")
    return ParsedExchangeProperty(
        input_box=Box.of(lower, upper),
        true_label=true_candidates.pop(),
        wrong_labels=sorted(wrong),
        num_outputs=n_out,
    )
