"""Command-line entry point.

Subcommands: ``bounds`` (adversarial-noise box), ``verify`` (full run per
property), ``attack`` (phases 1-3 only), ``bench`` (batch with summary
table, CSV and figures), ``report`` (re-summarize an existing results file).

Exit codes: 0 completed, 2 input error, 3 completed with some timeouts.
``SEMVERIFY_LOG`` selects the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from . import report as report_mod
from .bab import BabBudget
from .boundprop import Box
from .compose import CleanMisclassification
from .falsify import AttackConfig
from .modelio import (
    ModelIOError,
    PropertyFile,
    ResultRecord,
    export_exchange_property,
    load_model,
    load_property,
    read_results,
    write_results,
)
from .netcore import NetworkGraph
from .noisebounds import PowerSpec, compute_noise_bounds
from .verify import Budget, run_vscan

log = logging.getLogger("semverify")

EXIT_OK, EXIT_INPUT, EXIT_TIMEOUTS = 0, 2, 3
DEFAULT_SEED = 20240917  # fixed for reproducibility


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    model_dir: Optional[Path]
    property_path: Optional[Path]
    benchmark: Optional[Path]
    timeout_s: Optional[float]
    seed: int
    workers: int
    out: Optional[Path]
    emit_vnnlib: bool = False


def _setup_logging():
    level = os.environ.get("SEMVERIFY_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _existing(path: Optional[str], what: str, required: bool) -> Optional[Path]:
    if path is None:
        if required:
            raise InputError(f"missing required {what}")
        return None
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


ROLES = ("encoder", "decoder", "classifier", "generator")


def load_model_set(model_dir: Path) -> Tuple[Dict[str, NetworkGraph], Dict]:
    graphs, metas = {}, {}
    for role in ROLES:
        manifest = model_dir / f"{role}.manifest.json"
        if not manifest.exists():
            raise InputError(f"model manifest missing: {manifest}")
        g, meta = load_model(manifest)
        if meta.role != role:
            raise InputError(f"{manifest} declares role '{meta.role}', expected '{role}'")
        graphs[role] = g
        metas[role] = meta
    return graphs, metas


def collect_properties(cfg: RunConfig) -> List[Path]:
    if cfg.property_path is not None:
        return [cfg.property_path]
    assert cfg.benchmark is not None
    props = sorted((cfg.benchmark / "properties").glob("*.property.json"))
    if not props:
        props = sorted(cfg.benchmark.glob("*.property.json"))
    if not props:
        raise InputError(f"no *.property.json files under {cfg.benchmark}")
    return props


def _model_dir_for(cfg: RunConfig) -> Path:
    if cfg.model_dir is not None:
        return cfg.model_dir
    if cfg.benchmark is not None and (cfg.benchmark / "models").is_dir():
        return cfg.benchmark / "models"
    raise InputError("no --model-dir given and the benchmark has no models/ directory")


def _group_label(prop: PropertyFile) -> str:
    if prop.pnr_db is not None:
        return f"pnr={prop.pnr_db:g}dB"
    return f"rho={prop.rho:g}"


def _run_property(graphs, metas, prop_path: Path, cfg: RunConfig,
                  attack_only: bool) -> ResultRecord:
    prop = load_property(prop_path)
    if cfg.timeout_s is not None:
        budget = Budget(timeout_seconds=cfg.timeout_s)
    else:
        budget = Budget(timeout_seconds=prop.timeout_seconds)
    outcome = run_vscan(
        graphs["generator"], graphs["encoder"], graphs["decoder"], graphs["classifier"],
        prop, budget,
        latent_power=metas["encoder"].latent_power,
        attack_cfg=AttackConfig(seed=cfg.seed),
        attack_only=attack_only,
    )
    if cfg.emit_vnnlib and outcome.resolved is not None:
        text = export_exchange_property(outcome.resolved.pipeline, outcome.resolved)
        vnn_path = prop_path.with_name(prop_path.name.replace(".property.json", "") +
                                       ".vnnlib.txt")
        vnn_path.write_text(text)
        log.info("exchange property written to %s", vnn_path)
    verdict = outcome.verdict
    stats = dict(verdict.stats)
    stats.setdefault("nodes", 0)
    stats.setdefault("bound_calls", 0)
    stats["group"] = _group_label(prop)
    stats["verdict_phase"] = outcome.provenance.get("verdict_phase")
    stats["noise_bounds"] = {
        "lower": [float(v) for v in outcome.noise.bounds.lower],
        "upper": [float(v) for v in outcome.noise.bounds.upper],
    }
    cex = verdict.witness.to_json() if verdict.witness is not None else None
    log.info("%s: %s", prop.property_id, verdict.status)
    return ResultRecord(prop.property_id, verdict.status, cex, stats)


def cmd_bounds(cfg: RunConfig) -> int:
    model_dir = _model_dir_for(cfg)
    prop = load_property(cfg.property_path)
    gen, gen_meta = load_model(model_dir / "generator.manifest.json")
    if prop.rho is not None:
        power = PowerSpec.from_rho(prop.rho)
    else:
        enc_manifest = model_dir / "encoder.manifest.json"
        if not enc_manifest.exists():
            raise InputError("pnr_db property needs encoder.manifest.json for latent_power")
        _, enc_meta = load_model(enc_manifest)
        power = PowerSpec.from_pnr(prop.pnr_db, enc_meta.latent_power)
    trigger_box = Box.uniform(*prop.trigger_range, gen.out_size())
    budget = BabBudget(time_seconds=cfg.timeout_s or prop.timeout_seconds)
    res = compute_noise_bounds(gen, trigger_box, power, budget=budget)
    doc = {
        "property": prop.property_id,
        "rho": power.rho,
        "bounds": {
            "lower": [float(v) for v in res.bounds.lower],
            "upper": [float(v) for v in res.bounds.upper],
        },
        "clamped": [bool(v) for v in res.clamped],
        "infeasible": [bool(v) for v in res.infeasible],
        "exact_gap": [float(v) for v in res.exact_gap],
        "stats": {k: v for k, v in res.stats.items()},
    }
    out = cfg.out or cfg.property_path.with_name(cfg.property_path.stem + ".bounds.json")
    Path(out).write_text(json.dumps(doc, indent=1) + "\n")
    log.info("noise bounds written to %s", out)
    return EXIT_OK


def _run_batch(cfg: RunConfig, attack_only: bool) -> Tuple[List[ResultRecord], Path]:
    model_dir = _model_dir_for(cfg)
    graphs, metas = load_model_set(model_dir)
    prop_paths = collect_properties(cfg)
    records: List[Optional[ResultRecord]] = [None] * len(prop_paths)

    def work(i: int):
        records[i] = _run_property(graphs, metas, prop_paths[i], cfg, attack_only)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(work, range(len(prop_paths))))
    else:
        for i in range(len(prop_paths)):
            work(i)
    out = cfg.out or Path("run.results.jsonl")
    write_results([r for r in records if r is not None], out)
    return [r for r in records if r is not None], out


def cmd_verify(cfg: RunConfig) -> int:
    records, out = _run_batch(cfg, attack_only=False)
    log.info("results written to %s", out)
    return EXIT_TIMEOUTS if any(r.verdict == "timeout" for r in records) else EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    records, out = _run_batch(cfg, attack_only=True)
    log.info("attack results written to %s", out)
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    records, out = _run_batch(cfg, attack_only=False)
    rows = report_mod.summarize(records)
    print(report_mod.format_table(rows))
    out_dir = Path(out).parent
    csv_path = out_dir / (Path(out).stem.replace(".results", "") + ".summary.csv")
    report_mod.write_summary_csv(rows, csv_path)
    figures = report_mod.render_figures(records, rows, out_dir / "figures")
    log.info("summary: %s; figures: %s", csv_path, ", ".join(str(p) for p in figures))
    return EXIT_TIMEOUTS if any(r.verdict == "timeout" for r in records) else EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    results_path = cfg.property_path  # repurposed positional: results file
    records = read_results(results_path)
    rows = report_mod.summarize(records)
    print(report_mod.format_table(rows))
    out_dir = Path(cfg.out) if cfg.out else results_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "summary.csv"
    report_mod.write_summary_csv(rows, csv_path)
    figures = report_mod.render_figures(records, rows, out_dir / "figures")
    log.info("summary: %s; figures: %s", csv_path, ", ".join(str(p) for p in figures))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semverify",
        description="Robustness verification of semantic-communication pipelines "
                    "against power-constrained generative adversarial noise.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_property=False, needs_models=True):
        if needs_models:
            p.add_argument("--model-dir", help="directory with <role>.manifest.json files")
        if needs_property:
            p.add_argument("--property", required=True, help="property JSON file")
        else:
            p.add_argument("--property", help="property JSON file")
        p.add_argument("--benchmark", help="benchmark directory (models/ + properties/)")
        p.add_argument("--timeout-s", type=float, help="override property timeouts")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", help="output path")
        p.add_argument("--emit-vnnlib", action="store_true",
                       help="also write <property>.vnnlib.txt exchange text")

    common(sub.add_parser("bounds", help="compute the adversarial-noise box"),
           needs_property=True)
    common(sub.add_parser("verify", help="run the full procedure per property"))
    common(sub.add_parser("attack", help="attack phases only (no formal verification)"))
    common(sub.add_parser("bench", help="run a benchmark and summarize"))
    rep = sub.add_parser("report", help="summarize an existing results.jsonl")
    rep.add_argument("results", help="results JSONL file")
    rep.add_argument("--out", help="output directory for CSV and figures")
    return parser


def _to_config(args: argparse.Namespace) -> RunConfig:
    if args.subcommand == "report":
        return RunConfig(
            subcommand="report",
            model_dir=None,
            property_path=_existing(args.results, "results file", required=True),
            benchmark=None,
            timeout_s=None,
            seed=DEFAULT_SEED,
            workers=1,
            out=Path(args.out) if args.out else None,
        )
    prop = _existing(getattr(args, "property", None), "property file",
                     required=args.subcommand == "bounds")
    bench = _existing(getattr(args, "benchmark", None), "benchmark directory",
                      required=False)
    if prop is None and bench is None:
        raise InputError("either --property or --benchmark is required")
    return RunConfig(
        subcommand=args.subcommand,
        model_dir=_existing(getattr(args, "model_dir", None), "model directory", False),
        property_path=prop,
        benchmark=bench,
        timeout_s=args.timeout_s,
        seed=args.seed,
        workers=max(1, args.workers),
        out=Path(args.out) if args.out else None,
        emit_vnnlib=bool(getattr(args, "emit_vnnlib", False)),
    )


COMMANDS = {
    "bounds": cmd_bounds,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _to_config(args)
        return COMMANDS[cfg.subcommand](cfg)
    except (InputError, ModelIOError, CleanMisclassification, ValueError) as e:
        log.error("%s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
