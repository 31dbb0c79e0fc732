"""`semtrain` command: train a semantic-communication triple plus
perturbation generators and export the benchmark grid."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DatasetUnavailable, load_dataset
from .export import export_benchmark, export_models
from .train import (
    TrainConfig,
    perturbed_accuracy,
    power_violation_rate,
    train_pgm,
    train_semcom,
)

log = logging.getLogger("semtrainer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semtrain")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    train = sub.add_parser("train", help="train and export models + benchmark")
    train.add_argument("--dataset", default="fashionmnist",
                       choices=["fashionmnist", "cifar10", "synthetic"])
    train.add_argument("--latent-dim", type=int, default=16)
    train.add_argument("--epochs", type=int, default=3)
    train.add_argument("--pgm-epochs", type=int, default=3)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--pnr", type=float, nargs="+", default=[-10.0, -7.5, -5.0],
                       help="PNR grid in dB (one generator per value)")
    train.add_argument("--data-dir", default="data")
    train.add_argument("--export-dir", required=True)
    train.add_argument("--intervals", type=int, default=10,
                       help="number of trigger intervals per image")
    train.add_argument("--timeout-s", type=float, default=60.0,
                       help="per-property verification budget written to the grid")
    return parser


def cmd_train(args) -> int:
    cfg = TrainConfig(
        dataset=args.dataset, latent_dim=args.latent_dim, epochs=args.epochs,
        pgm_epochs=args.pgm_epochs, seed=args.seed,
    )
    try:
        data = load_dataset(cfg.dataset, args.data_dir, seed=cfg.seed)
    except DatasetUnavailable as e:
        log.error("dataset fetch failure: %s", e)
        return 2
    models = train_semcom(cfg, data)
    log.info("clean accuracy: %.2f%%", 100 * models.clean_accuracy)
    export_dir = Path(args.export_dir)
    pgms = []
    for pnr in args.pnr:
        pgm = train_pgm(cfg, models, data, pnr)
        acc = perturbed_accuracy(models, pgm, data.test)
        viol = power_violation_rate(pgm)
        log.info("pnr %.1f dB: perturbed accuracy %.2f%%, power violations %.2f%%",
                 pnr, 100 * acc, 100 * viol)
        pgms.append(pgm)
    export_models(models, export_dir / "models", cfg.latent_dim, pgms[0])
    export_benchmark(cfg, models, pgms, data, export_dir / "benchmark",
                     intervals=args.intervals, timeout_seconds=args.timeout_s)
    log.info("exported to %s", export_dir)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.subcommand == "train":
        return cmd_train(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
