"""Code-constructed tiny models and properties with analytically known
verdicts.  Everything is generated at test/benchmark time from a seed, so
outputs are byte-deterministic and nothing binary is checked in.

The planted family has encoder with zero weights (constant latent), a
decoder that copies the received latent into the first pixels, and a
classifier whose margin for the true class over class 1 is exactly
``theta - (n_0 + eps_0)``: robust iff theta exceeds the reachable
perturbation, vulnerable with a crossing at n_0 + eps_0 = theta.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .modelio import ModelMetadata, PropertyFile, save_model, save_property
from .netcore import GraphBuilder, NetworkGraph, Tensor

BOX_BLUR3 = np.full((3, 3), 1.0 / 9.0)


def planted_models(theta: float, latent: int = 2, classes: int = 3,
                   image_shape=(1, 4, 4)) -> Dict[str, NetworkGraph]:
    d = int(np.prod(image_shape))
    enc = GraphBuilder()
    x = enc.input("x", image_shape)
    f = enc.flatten(x)
    enc.affine(np.zeros((latent, d), np.float32), np.zeros(latent, np.float32), f)

    dec = GraphBuilder()
    z = dec.input("z", (latent,))
    w = np.zeros((d, latent), np.float32)
    for j in range(min(latent, d)):
        w[j, j] = 1.0
    a = dec.affine(w, np.zeros(d, np.float32), z)
    dec.reshape(image_shape, a)

    cls = GraphBuilder()
    xi = cls.input("xhat", image_shape)
    fc = cls.flatten(xi)
    wc = np.zeros((classes, d), np.float32)
    bc = np.full(classes, -10.0, np.float32)
    bc[0] = np.float32(theta)
    wc[1, 0] = 1.0
    bc[1] = 0.0
    cls.affine(wc, bc, fc)

    return {"encoder": enc.build(), "decoder": dec.build(), "classifier": cls.build()}


def identity_generator(latent: int) -> NetworkGraph:
    b = GraphBuilder()
    r = b.input("r", (latent,))
    b.affine(np.eye(latent), np.zeros(latent), r)
    return b.build()


def constant_generator(latent: int, bias) -> NetworkGraph:
    b = GraphBuilder()
    r = b.input("r", (latent,))
    b.affine(np.zeros((latent, latent)), np.asarray(bias, np.float32), r)
    return b.build()


def _save_models(models: Dict[str, NetworkGraph], latent: int, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    for role, g in models.items():
        meta = ModelMetadata(
            role=role, latent_dim=latent,
            latent_power=1.0 if role == "encoder" else None,
        )
        save_model(g, meta, out_dir / role)


def _default_property(name: str, rho: float, latent: int, seed: int,
                      trigger_range=(-1.0, 1.0), timeout=60.0) -> PropertyFile:
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(1, 4, 4)).astype(np.float32)
    return PropertyFile(
        property_id=name,
        clean_input=Tensor.of(image),
        true_label=0,
        blur_kernel=BOX_BLUR3,
        s_range=(0.0, 1.0),
        trigger_range=trigger_range,
        awgn_sigma=0.01 / 3,
        timeout_seconds=timeout,
        rho=rho,
    )


@dataclass(frozen=True)
class FixtureInfo:
    name: str
    expected: str  # analytically known verdict for the shipped property
    latent: int
    model_dir: Path
    property_path: Path


def _build_named(name: str, latent: int, theta: Optional[float], gen: str):
    models = planted_models(theta if theta is not None else 0.9, latent=latent)
    if gen == "identity":
        generator = identity_generator(latent)
    elif gen == "constant":
        generator = constant_generator(latent, [0.3] + [0.0] * (latent - 1))
    else:  # zero-range generator
        generator = constant_generator(latent, [0.0] * latent)
    models["generator"] = generator
    return models


_FIXTURES = {
    # name: (latent, theta, generator kind, rho, expected verdict)
    "robust-2d": (2, 0.9, "identity", 0.25, "unsat"),
    "robust-4d": (4, 0.9, "identity", 0.25, "unsat"),
    "planted-sat-2d": (2, 0.3, "identity", 0.25, "sat"),
    "planted-sat-4d": (4, 0.3, "identity", 0.25, "sat"),
    "identity-gen": (2, 0.9, "identity", 0.25, "unsat"),
    "constant-gen": (2, 0.9, "constant", 0.25, "unsat"),
    "zero-weight": (2, 0.9, "zero", 0.25, "unsat"),
}


def fixture_names() -> List[str]:
    return sorted(_FIXTURES)


def make_fixture(name: str, seed: int, out_dir: Path) -> FixtureInfo:
    """Write the named fixture's model files and property file.

    Byte-deterministic given the seed; raises KeyError for unknown names.
    """
    if name not in _FIXTURES:
        raise KeyError(f"unknown fixture '{name}' (known: {', '.join(fixture_names())})")
    latent, theta, gen, rho, expected = _FIXTURES[name]
    out_dir = Path(out_dir)
    models = _build_named(name, latent, theta, gen)
    model_dir = out_dir / "models"
    _save_models(models, latent, model_dir)
    prop = _default_property(name, rho, latent, seed)
    prop_path = out_dir / f"{name}.property.json"
    save_property(prop, prop_path)
    return FixtureInfo(name, expected, latent, model_dir, prop_path)


def decile_intervals(lo: float = -1.0, hi: float = 1.0, count: int = 10):
    edges = np.linspace(lo, hi, count + 1)
    return [(float(edges[i]), float(edges[i + 1])) for i in range(count)]


def make_benchmark(
    out_dir: Path,
    seed: int = 0,
    rhos: Tuple[float, ...] = (0.04, 0.25, 1.0),
    theta: float = 0.45,
    images: int = 2,
    timeout: float = 60.0,
) -> Path:
    """Fixture benchmark: one planted model set (identity generator) and a
    grid of properties over trigger deciles x power limits x images.

    With the identity generator the reachable n_0 on interval [a, b] is
    min(b, sqrt(rho)), so a property is unsat iff min(b, sqrt(rho)) + 0.01
    < theta: the unsat count is non-increasing in rho by construction.
    """
    out_dir = Path(out_dir)
    latent = 2
    models = planted_models(theta, latent=latent)
    models["generator"] = identity_generator(latent)
    _save_models(models, latent, out_dir / "models")
    prop_dir = out_dir / "properties"
    prop_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for img_idx in range(images):
        image = rng.uniform(0.0, 1.0, size=(1, 4, 4)).astype(np.float32)
        for rho in rhos:
            for k, (a, b) in enumerate(decile_intervals()):
                name = f"img{img_idx}-rho{rho:g}-int{k}"
                prop = PropertyFile(
                    property_id=name,
                    clean_input=Tensor.of(image),
                    true_label=0,
                    blur_kernel=BOX_BLUR3,
                    s_range=(0.0, 1.0),
                    trigger_range=(a, b),
                    awgn_sigma=0.01 / 3,
                    timeout_seconds=timeout,
                    rho=float(rho),
                )
                save_property(prop, prop_dir / f"{name}.property.json")
    return out_dir


def expected_benchmark_verdict(theta: float, rho: float, interval: Tuple[float, float],
                               eps_half: float = 0.01) -> str:
    """Analytic verdict of a benchmark property (identity generator)."""
    reachable = min(interval[1], float(np.sqrt(rho))) + eps_half
    # reachable below -sqrt(rho) pins at the border (infeasible-to-clamp)
    reachable = max(reachable, -float(np.sqrt(rho)) + eps_half)
    return "unsat" if reachable < theta else "sat"
