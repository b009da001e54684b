"""Command-line entry point: ``stylepad <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, ExperimentConfig, load_config
from .dataio import SynthBenchSpec, default_groups, synth_benchmark_generate, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value experiment file")
    p.add_argument("--dataset", help="dataset manifest.json")
    p.add_argument("--target", help="held-out group, e.g. T0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir", help="experiment output directory")
    p.add_argument("--fraction", type=float)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stylepad", description="Style-fused diffusion domain padding for time-series classification.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="write the synthetic benchmark, or split a dataset for a run")
    _add_common(p)
    p.add_argument("--synthetic", metavar="DIR", help="generate the synthetic benchmark into DIR")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--per-class", type=int, default=40, dest="per_class")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--bench-seed", type=int, default=0, dest="bench_seed")

    p = sub.add_parser("pretrain-style", help="contrastive style encoder + per-instance style vectors")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-diffusion", help="train the conditional denoiser")
    _add_common(p)
    p.add_argument("--styles", help="accepted for interface compatibility; the run's styles.ckpt is used")
    p.add_argument("--T", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--drop", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="copy the checkpoint here as well")

    p = sub.add_parser("generate", help="sample the synthetic split")
    _add_common(p)
    p.add_argument("--kappa", type=float)
    p.add_argument("--o", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--out", help="copy the synthetic files into this directory as well")

    p = sub.add_parser("train-tsc", help="train the downstream classifier")
    _add_common(p)
    p.add_argument("--synth", help="accepted for interface compatibility; the run's synth/ is used")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--method", choices=("di2s", "erm"))
    p.add_argument("--out", help="copy the checkpoint here as well")

    p = sub.add_parser("eval", help="evaluate a classifier on the held-out target")
    _add_common(p)
    p.add_argument("--model", help="classifier checkpoint (default: the run's tsc.ckpt)")
    p.add_argument("--report", help="write the report JSON here as well")

    p = sub.add_parser("pipeline", help="run every stage for all targets and seeds")
    _add_common(p)
    p.add_argument("--targets", help="comma separated targets")
    p.add_argument("--seeds", help="comma separated seeds")
    p.add_argument("--method", choices=("di2s", "erm"))
    p.add_argument("--kappa", type=float)
    p.add_argument("--o", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--resume", action="store_true", help="skip stages whose outputs exist")

    p = sub.add_parser("export-embeddings", help="dump latent vectors as CSV")
    _add_common(p)
    p.add_argument("--space", required=True, help="class | domain | style")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="merge run reports into a delta table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels", help="comma separated column labels")
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(args: argparse.Namespace) -> dict:
    ov = {}
    if getattr(args, "dataset", None):
        ov["dataset"] = args.dataset
    if getattr(args, "target", None):
        ov["targets"] = [args.target]
    if getattr(args, "targets", None):
        ov["targets"] = [s.strip() for s in args.targets.split(",") if s.strip()]
    if getattr(args, "seed", None) is not None:
        ov["seeds"] = [args.seed]
    if getattr(args, "seeds", None):
        ov["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    for flag, key in (("out_dir", "out_dir"), ("fraction", "fraction"), ("method", "method"), ("T", "T"),
                      ("drop", "p_drop"), ("kappa", "kappa"), ("o", "o"), ("omega", "omega"), ("steps", "diff_steps")):
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = v
    stage_keys = {
        "pretrain-style": {"epochs": "style_epochs", "lr": "style_lr"},
        "train-diffusion": {"lr": "diff_lr", "batch": "diff_batch"},
        "train-tsc": {"epochs": "tsc_epochs", "lr": "tsc_lr"},
    }.get(args.command, {})
    for flag, key in stage_keys.items():
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = v
    return ov


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config, _overrides(args))
    return cfg.validate()


def _copy(src: Path, dst: str | None) -> None:
    if dst:
        d = Path(dst)
        d.parent.mkdir(parents=True, exist_ok=True)
        d.write_bytes(src.read_bytes())


def _single(cfg: ExperimentConfig) -> tuple[ExperimentConfig, Path]:
    if len(cfg.targets) != 1 or len(cfg.seeds) != 1:
        raise ConfigError("stage subcommands run one (target, seed); use 'pipeline' for sweeps")
    return cfg, P.run_dir_for(cfg, cfg.targets[0], cfg.seeds[0])


def cmd_prepare(args) -> int:
    if args.synthetic:
        spec = SynthBenchSpec(
            n_classes=args.classes,
            n_domains=args.domains,
            samples_per_class_per_domain=args.per_class,
            n_channels=args.channels,
            window_len=args.length,
            noise_level=args.noise,
            seed=args.bench_seed,
        )
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        inst = synth_benchmark_generate(spec)
        doms = sorted({i.domain_tag for i in inst})
        path = write_dataset(args.synthetic, inst, "synthbench", spec.n_classes, default_groups(doms))
        print(path)
        return EXIT_OK
    cfg, run_dir = _single(_load(args))
    P.run_stage("prepare", cfg, run_dir)
    print(run_dir / "split")
    return EXIT_OK


def _stage_cmd(stage: str):
    def run(args) -> int:
        cfg, run_dir = _single(_load(args))
        P.run_stage(stage, cfg, run_dir)
        paths = P.RunPaths(run_dir)
        if stage == "train-diffusion":
            _copy(paths.diff_ckpt, args.out)
        elif stage == "train-tsc":
            _copy(paths.tsc_ckpt, args.out)
        elif stage == "generate" and args.out:
            for suffix in (".di2s", ".csv"):
                _copy(paths.synth_stem.with_suffix(suffix), str(Path(args.out) / f"synth{suffix}"))
        print(run_dir)
        return EXIT_OK

    return run


def cmd_eval(args) -> int:
    cfg, run_dir = _single(_load(args))
    paths = P.RunPaths(run_dir)
    if args.model and Path(args.model).resolve() != paths.tsc_ckpt.resolve():
        _copy(Path(args.model), str(paths.tsc_ckpt))
    P.run_stage("eval", cfg, run_dir)
    _copy(paths.report, args.report)
    print(paths.report.read_text(), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    report = P.run_pipeline(cfg, resume=args.resume)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, run_dir = _single(_load(args))
    if args.space not in P.EMBED_SPACES:
        raise ConfigError(f"unknown embedding space {args.space!r}; choose from {P.EMBED_SPACES}")
    n = P.export_embeddings(run_dir, args.space, Path(args.out))
    print(f"{n} rows -> {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        reports = [P.read_report(Path(p)) for p in args.reports]
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    labels = [s.strip() for s in args.labels.split(",")] if args.labels else None
    try:
        rows = P.compare_methods(reports, labels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    P.write_comparison(Path(args.out) if args.out else None, rows)
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain-style": _stage_cmd("pretrain-style"),
    "train-diffusion": _stage_cmd("train-diffusion"),
    "generate": _stage_cmd("generate"),
    "train-tsc": _stage_cmd("train-tsc"),
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "export-embeddings": cmd_export,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s %(message)s", stream=sys.stderr)
    for h in logging.getLogger().handlers:
        h.setLevel(level)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.StageError as exc:
        print(f"stage failure: {exc.stage} (log: {exc.log_path}): {exc.__cause__}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
