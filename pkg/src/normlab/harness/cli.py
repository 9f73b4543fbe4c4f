"""Command-line entry point: ``normlab <subcommand> ...``."""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..diagnostics import dump_json, elimination_probe
from ..gradcheck import run_suite
from .config import ConfigError, NormSpec, StatDiffConfig, SweepConfig, TrainConfig, load_config
from .data import iterate_batches
from .experiments import run_singularity_sweep, run_statdiff_trace, sweep_summary
from .train import load_checkpoint, load_data, train

log = logging.getLogger("normlab")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=None, help="directory for CSV/JSON artifacts")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--data", default=None, help="CIFAR-10 directory (overrides $NORMLAB_DATA)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="normlab", description="Normalization layers and singularity diagnostics.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-4)

    for name, text in (("train", "train one configuration"),
                       ("sweep", "fixed-statistics accuracy sweep"),
                       ("statdiff", "StatDiff trace across normalizers")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--config", type=Path, required=True)
        if name == "statdiff":
            sp.add_argument("--bn-control", action="store_true", help="also trace a BN model")

    pr = sub.add_parser("probe", parents=[common], help="report constantly deactivated channels")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--threshold", type=float, default=0.0)
    pr.add_argument("--batch-size", type=int, default=250)
    return p


def _override(cfg: TrainConfig, args) -> TrainConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.data is not None:
        changes["data_dir"] = args.data
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _cmd_gradcheck(args) -> int:
    reports = run_suite(seeds=args.seeds, tol=args.tol)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        dump_json(args.out / "gradcheck.json", [dict(dataclasses.asdict(r), passed=r.passed) for r in reports])
    return 1 if failed else 0


def _cmd_train(args) -> int:
    cfg = _override(load_config(TrainConfig, args.config), args)
    run = train(cfg, out_dir=args.out)
    print(f"final train acc {run.final_train_acc:.4f}  test acc {run.final_test_acc:.4f}"
          + ("  (diverged)" if run.diverged else ""))
    return 1 if run.diverged else 0


def _cmd_sweep(args) -> int:
    cfg = load_config(SweepConfig, args.config)
    cfg = dataclasses.replace(cfg, base=_override(cfg.base, args))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    results = run_singularity_sweep(cfg, out_dir=args.out)
    for r in results:
        print(f"sigma_mu={r.sigma_mu:g} sigma_sigma={r.sigma_sigma:g} seed={r.seed} "
              f"acc={r.accuracy:.4f}{' FAILED' if r.failed else ''}")
    print(f"spearman(accuracy, distance) = {sweep_summary(results, cfg.threshold)['spearman_accuracy_vs_distance']:.3f}")
    return 0


def _cmd_statdiff(args) -> int:
    cfg = load_config(StatDiffConfig, args.config)
    cfg = dataclasses.replace(cfg, base=_override(cfg.base, args))
    extra = [NormSpec("bn")] if args.bn_control else None
    runs = run_statdiff_trace(cfg, out_dir=args.out, extra=extra)
    for label, run in runs.items():
        means = " ".join(f"{r.mean_over_groups:.4f}" for r in run.statdiff)
        print(f"{label:<8} {means}")
    return 0


def _cmd_probe(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    cfg = _override(cfg, args)
    _, test = load_data(cfg)
    report = elimination_probe(model, (xb for xb, _ in iterate_batches(test, args.batch_size)), args.threshold)
    for layer, frac in report.fraction.items():
        print(f"{layer:<32} deactivated {frac:.3f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        dump_json(args.out / "probe.json", report.to_dict())
    return 0


COMMANDS = {
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "statdiff": _cmd_statdiff,
    "probe": _cmd_probe,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"normlab: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"normlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def cli(argv: Optional[List[str]] = None) -> int:
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
