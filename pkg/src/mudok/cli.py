"""Pre-train, tune and evaluate knowledge-graph item encoders from the shell.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import experiments as ex
from .reports import format_table, write_report
from .synthetic import SyntheticSpec, generate_synthetic_benchmark, write_benchmark

log = logging.getLogger("mudok")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ex.ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", default=".", help="base for every relative path")
    p.add_argument("--config", help="JSON file mirroring ExperimentConfig")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--manifest", help="benchmark manifest; omit to generate the synthetic benchmark")
    p.add_argument("--output-dir", help="where reports and checkpoints go")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mudok", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write the seeded synthetic benchmark")
    _common(p)
    p.add_argument("--out", default="bench", help="benchmark folder (relative to --workdir)")

    p = sub.add_parser("pretrain", help="pre-train the encoder; writes checkpoint, log and census")
    _common(p)
    p.add_argument("--include", nargs="*", default=None, help="domains to keep")
    p.add_argument("--exclude", nargs="*", default=None, help="domains to drop")
    p.add_argument("--ablation", choices=ex.ABLATIONS)

    for name, task in (("tune-rec", "rec"), ("tune-text", "text")):
        p = sub.add_parser(name, help=f"tune the {task} adapter (base or prefix-enhanced)")
        _common(p)
        p.set_defaults(task=task)
        p.add_argument("--mode", choices=ex.MODES)
        p.add_argument("--checkpoint", help="pre-trained encoder; omitted: pre-train first")
        p.add_argument("--target", help="domain to tune on")

    p = sub.add_parser("eval", help="score a tuned checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by tune-rec/tune-text")
    p.add_argument("--split", choices=("test", "valid"), default="test")

    p = sub.add_parser("transfer", help="OOD pre-training vs no pre-training vs all domains")
    _common(p)
    p.add_argument("--target", help="held-out domain")
    p.add_argument("--task", choices=ex.TASKS)
    p.add_argument("--no-full", action="store_true", help="skip the all-domain upper bound")

    p = sub.add_parser("ablate", help="full / G3 / G4 / G5 on one domain")
    _common(p)
    p.add_argument("--target", help="domain to tune on")
    p.add_argument("--task", choices=ex.TASKS)

    p = sub.add_parser("census", help="parameter census (meta tensors, no allocation)")
    _common(p)
    p.add_argument("--entities", type=int, default=500_000)
    p.add_argument("--items", type=int, default=50_000)
    p.add_argument("--relations", type=int, default=1_000)
    p.add_argument("--d-feat", type=int, default=768)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-p", type=int, default=16)
    p.add_argument("--head-params", type=int, default=0)
    return parser


def _load_config(args) -> ex.ExperimentConfig:
    workdir = Path(args.workdir)
    data: dict = {}
    if args.config:
        path = workdir / args.config
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ex.ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ex.ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ex.ConfigError(f"{path}: expected a JSON object")
    overrides = {
        "seed": args.seed,
        "manifest": args.manifest,
        "output_dir": args.output_dir,
        "mode": getattr(args, "mode", None),
        "ablation": getattr(args, "ablation", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "target_domain": getattr(args, "target", None),
        "task": getattr(args, "task", None),
        "include_domains": getattr(args, "include", None),
        "exclude_domains": getattr(args, "exclude", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ex.ExperimentConfig.from_dict(data)
    # every path is relative to the workdir
    if cfg.manifest:
        cfg.manifest = str(workdir / cfg.manifest)
    if cfg.checkpoint:
        cfg.checkpoint = str(workdir / cfg.checkpoint)
    cfg.output_dir = str(workdir / cfg.output_dir)
    return cfg


def _emit(report: dict, cfg: ex.ExperimentConfig, stem: str, figures: bool) -> None:
    paths = write_report(report, cfg.output_dir, stem, figures=figures)
    sys.stdout.write(format_table(report["rows"]))
    for kind, path in paths.items():
        sys.stdout.write(f"{kind}: {path}\n")


def run(args) -> None:
    cfg = _load_config(args)
    figures = not args.no_figures
    if args.command == "gen-synth":
        spec = SyntheticSpec(**{"seed": cfg.seed, **cfg.synthetic})
        try:
            bench = generate_synthetic_benchmark(spec)
        except ValueError as exc:
            raise ex.ConfigError(str(exc)) from exc
        path = write_benchmark(bench, Path(args.workdir) / args.out)
        sys.stdout.write(f"manifest: {path}\n")
    elif args.command == "pretrain":
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _emit(ex.run_pretrain(cfg, out_dir=out), cfg, "pretrain", figures)
    elif args.command in ("tune-rec", "tune-text"):
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _emit(ex.run_tune(cfg, out_dir=out), cfg, args.command, figures)
    elif args.command == "eval":
        _emit(ex.evaluate_checkpoint(cfg.checkpoint, args.workdir, args.split), cfg, "eval", figures)
    elif args.command == "transfer":
        _emit(ex.run_transfer(cfg, include_full=not args.no_full), cfg, "transfer", figures)
    elif args.command == "ablate":
        _emit(ex.run_ablation(cfg), cfg, "ablate", figures)
    elif args.command == "census":
        report = ex.run_census(
            n_entities=args.entities, n_items=args.items, d_feat=args.d_feat, d_model=args.d_model,
            n_layers=args.layers, n_relations=args.relations, d_p=args.d_p, head_params=args.head_params,
            seed=cfg.seed,
        )
        _emit(report, cfg, "census", figures)


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("MUDOK_THREADS")
    try:
        if threads:
            try:
                torch.set_num_threads(max(1, int(threads)))
            except ValueError as exc:
                raise ex.ConfigError(f"MUDOK_THREADS must be an integer, got {threads!r}") from exc
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        run(args)
    except ex.ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - map every runtime failure to one exit code
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
