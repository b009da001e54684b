"""Staged experiment runner: prepare -> pretrain-style -> train-diffusion -> generate -> train-tsc -> eval.

Every stage reads its inputs from and writes its outputs to one run directory
(``<out_dir>/<target>/seed<seed>``), so any stage can be re-run alone and a
resumed pipeline skips stages whose outputs already exist. Reports contain no
wall-clock values; timings go to a separate ``timings.json``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .combinator import GenerationBudget
from .config import ExperimentConfig
from .dataio import (
    DatasetSplit,
    NormStats,
    TimeSeriesInstance,
    leave_one_out_split,
    load_dataset,
    normalize,
    read_instances,
    read_manifest,
    stack_values,
    subsample_fraction,
    write_instances,
)
from .diffusion import Denoiser, DiffusionTrainConfig, UNetConfig, generate_dataset, make_schedule, model_eps_fn, train_diffusion
from .numerics.checkpoint import load_tensors, save_tensors
from .numerics.layers import Module
from .style_encoder import StyleConfig, StyleStore, StyleVector, encode_styles, extract_styles, prepare_encoder, pretrain_style_encoder, style_config_dict
from .tsc import ClassifierHeads, PooledSource, TSCConfig, accuracy, embed, erm_train, train_diversity

log = logging.getLogger(__name__)

REPORT_VERSION = 1
SPLIT_PARTS = ("train", "val", "test", "target")
STAGES = ("prepare", "pretrain-style", "train-diffusion", "generate", "train-tsc", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, run_dir: Path, cause: BaseException):
        self.stage = stage
        self.log_path = run_dir / "log.txt"
        super().__init__(f"stage {stage} failed: {cause} (log: {self.log_path})")


# --- checkpoint helpers -------------------------------------------------------------
def save_module(path: Path, module: Module, meta: dict) -> None:
    save_tensors(path, module.state_dict(), meta=meta)


def load_meta(path: Path, kind: str) -> tuple[dict, dict]:
    tensors, meta = load_tensors(path)
    if not meta or meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {None if not meta else meta.get('kind')!r}")
    if meta.get("format_version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {meta.get('format_version')!r}")
    return tensors, meta


def load_classifier(path: Path) -> ClassifierHeads:
    tensors, meta = load_meta(path, "tsc")
    heads = ClassifierHeads(meta["K"], meta["L"], meta["n_classes"], TSCConfig(**meta["tsc"]), 0)
    heads.load_state_dict(tensors)
    heads.eval()
    return heads


def load_denoiser(path: Path) -> tuple[Denoiser, dict]:
    tensors, meta = load_meta(path, "denoiser")
    model = Denoiser(UNetConfig.from_dict(meta["unet"]), 0)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


def load_style_encoder(path: Path):
    tensors, meta = load_meta(path, "style_encoder")
    cfg = StyleConfig(**{**meta["style"], "enc_channels": tuple(meta["style"]["enc_channels"])})
    model = prepare_encoder(meta["K"], meta["L"], cfg, 0)
    model.load_state_dict(tensors)
    model.eval()
    return model


def save_style_store(path: Path, store: StyleStore) -> None:
    vecs = store.all_vectors()
    save_tensors(
        path,
        {"values": np.stack([v.values for v in vecs]), "class": np.array([v.class_label for v in vecs], dtype=np.int64)},
        meta={
            "kind": "styles",
            "format_version": REPORT_VERSION,
            "n_classes": store.n_classes,
            "ids": [v.source_instance_id for v in vecs],
            "domains": [v.domain_tag for v in vecs],
        },
    )


def load_style_store(path: Path) -> StyleStore:
    tensors, meta = load_meta(path, "styles")
    store = StyleStore(meta["n_classes"])
    for v, c, i, d in zip(tensors["values"], tensors["class"], meta["ids"], meta["domains"]):
        store.add(StyleVector(values=v, class_label=int(c), source_instance_id=i, domain_tag=d))
    return store


# --- run layout ---------------------------------------------------------------------
@dataclass
class RunPaths:
    root: Path

    @property
    def split_dir(self) -> Path:
        return self.root / "split"

    @property
    def style_ckpt(self) -> Path:
        return self.root / "style.ckpt"

    @property
    def styles(self) -> Path:
        return self.root / "styles.ckpt"

    @property
    def diff_ckpt(self) -> Path:
        return self.root / "diff.ckpt"

    @property
    def synth_stem(self) -> Path:
        return self.root / "synth" / "synth"

    @property
    def tsc_ckpt(self) -> Path:
        return self.root / "tsc.ckpt"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    def outputs(self, stage: str) -> list[Path]:
        return {
            "prepare": [self.split_dir / "split.json"] + [self.split_dir / f"{p}.di2s" for p in SPLIT_PARTS],
            "pretrain-style": [self.style_ckpt, self.styles],
            "train-diffusion": [self.diff_ckpt],
            "generate": [self.synth_stem.with_suffix(".di2s"), self.synth_stem.with_suffix(".csv")],
            "train-tsc": [self.tsc_ckpt],
            "eval": [self.report],
        }[stage]


def run_dir_for(cfg: ExperimentConfig, target: str, seed: int) -> Path:
    return Path(cfg.out_dir) / target / f"seed{seed}"


def active_stages(cfg: ExperimentConfig) -> list[str]:
    if cfg.method == "erm" or cfg.kappa == 0:
        return ["prepare", "train-tsc", "eval"]
    return list(STAGES)


# --- stages ------------------------------------------------------------------------
def stage_prepare(cfg: ExperimentConfig, paths: RunPaths) -> None:
    manifest = read_manifest(cfg.dataset)
    instances = load_dataset(manifest)
    split = leave_one_out_split(instances, manifest.groups, cfg.targets[0], seed=cfg.seed, n_classes=manifest.n_classes)
    split = subsample_fraction(normalize(split), cfg.fraction, cfg.seed)
    write_split(paths.split_dir, split)


def write_split(directory: Path, split: DatasetSplit) -> None:
    for part in SPLIT_PARTS:
        write_instances(directory / part, getattr(split, part))
    info = {
        "format_version": REPORT_VERSION,
        "source_tags": split.source_tags,
        "target_tag": split.target_tag,
        "n_classes": split.n_classes,
        "K": split.n_channels,
        "L": split.window_len,
        "norm_mean": split.norm.mean.tolist() if split.norm else None,
        "norm_std": split.norm.std.tolist() if split.norm else None,
    }
    (directory / "split.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def read_split(directory: Path) -> DatasetSplit:
    info = json.loads((directory / "split.json").read_text())
    if info.get("format_version") != REPORT_VERSION:
        raise ValueError(f"{directory}: unsupported split format_version {info.get('format_version')!r}")
    parts = {p: read_instances(directory / p) for p in SPLIT_PARTS}
    norm = NormStats(np.array(info["norm_mean"]), np.array(info["norm_std"])) if info["norm_mean"] is not None else None
    return DatasetSplit(
        **parts,
        source_tags=info["source_tags"],
        target_tag=info["target_tag"],
        n_classes=info["n_classes"],
        n_channels=info["K"],
        window_len=info["L"],
        norm=norm,
    )


def stage_pretrain_style(cfg: ExperimentConfig, paths: RunPaths) -> None:
    split = read_split(paths.split_dir)
    scfg = StyleConfig(style_dim=cfg.style_dim, epochs=cfg.style_epochs, lr=cfg.style_lr)
    model, history = pretrain_style_encoder(split.train, scfg, cfg.seed)
    meta = {
        "kind": "style_encoder",
        "format_version": REPORT_VERSION,
        "K": split.n_channels,
        "L": split.window_len,
        "style": style_config_dict(scfg),
        "loss_history": history,
    }
    save_module(paths.style_ckpt, model, meta)
    save_style_store(paths.styles, extract_styles(model, split.train, split.n_classes))


def _schedule(cfg: ExperimentConfig):
    return make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)


def stage_train_diffusion(cfg: ExperimentConfig, paths: RunPaths) -> None:
    split = read_split(paths.split_dir)
    store = load_style_store(paths.styles)
    by_id = {v.source_instance_id: v.values for v in store.all_vectors()}
    x0 = stack_values(split.train)
    styles = np.stack([by_id[i.instance_id] for i in split.train])
    ucfg = UNetConfig(
        in_channels=split.n_channels,
        style_dim=store.style_dim,
        dim=cfg.unet_dim,
        dim_mults=tuple(cfg.unet_mults),
        time_channels=cfg.unet_time_channels,
        attention=cfg.unet_attention,
    )
    model = Denoiser(ucfg, cfg.seed)
    tcfg = DiffusionTrainConfig(
        T=cfg.T, beta_1=cfg.beta_1, beta_T=cfg.beta_T, lr=cfg.diff_lr, batch_size=cfg.diff_batch, steps=cfg.diff_steps, drop_prob=cfg.p_drop
    )
    history = train_diffusion(model, x0, styles, _schedule(cfg), tcfg, cfg.seed)
    meta = {
        "kind": "denoiser",
        "format_version": REPORT_VERSION,
        "unet": ucfg.to_dict(),
        "train": tcfg.to_dict(),
        "loss_first50": float(np.mean(history[:50])),
        "loss_last50": float(np.mean(history[-50:])),
    }
    save_module(paths.diff_ckpt, model, meta)


def stage_generate(cfg: ExperimentConfig, paths: RunPaths) -> None:
    split = read_split(paths.split_dir)
    store = load_style_store(paths.styles)
    model, _ = load_denoiser(paths.diff_ckpt)
    budget = GenerationBudget(kappa=cfg.kappa, o=cfg.o, fuse_dist=list(cfg.fuse_dist))
    generate_dataset(
        store,
        budget,
        model_eps_fn(model),
        _schedule(cfg),
        cfg.omega,
        (split.n_channels, split.window_len),
        len(split.train),
        cfg.seed,
        out_stem=paths.synth_stem,
        clip=cfg.clip,
        normalize=cfg.fuse_normalize,
    )


def _tsc_config(cfg: ExperimentConfig) -> TSCConfig:
    return TSCConfig(n_blocks=cfg.tsc_blocks, epochs=cfg.tsc_epochs, lr=cfg.tsc_lr, batch_size=cfg.tsc_batch)


def stage_train_tsc(cfg: ExperimentConfig, paths: RunPaths) -> None:
    split = read_split(paths.split_dir)
    tcfg = _tsc_config(cfg)
    if cfg.method == "erm":
        heads, history = erm_train(split.train, split.n_classes, tcfg, cfg.seed)
        generator_calls = 0
    else:
        source = PooledSource(read_instances(paths.synth_stem)) if cfg.kappa > 0 else None
        heads, history = train_diversity(split.train, source, cfg.kappa, split.n_classes, tcfg, cfg.seed)
        generator_calls = source.calls if source else 0
    meta = {
        "kind": "tsc",
        "format_version": REPORT_VERSION,
        "K": split.n_channels,
        "L": split.window_len,
        "n_classes": split.n_classes,
        "tsc": tcfg.to_dict(),
        "method": cfg.method,
        "generator_calls": generator_calls,
        "history": history,
    }
    save_module(paths.tsc_ckpt, heads, meta)


def stage_eval(cfg: ExperimentConfig, paths: RunPaths) -> None:
    split = read_split(paths.split_dir)
    heads = load_classifier(paths.tsc_ckpt)
    acc, per_class = accuracy(heads, split.target)
    report = {
        "format_version": REPORT_VERSION,
        "task": split.target_tag,
        "seed": cfg.seed,
        "method": cfg.method,
        "accuracy": acc,
        "per_class_accuracy": [None if math.isnan(a) else a for a in per_class],
        "source_test_accuracy": accuracy(heads, split.test)[0],
        "n_train": len(split.train),
        "kappa": cfg.kappa,
        "o": cfg.o,
        "config_hash": cfg.config_hash(),
    }
    write_json(paths.report, report)


STAGE_FUNCS: dict[str, Callable[[ExperimentConfig, RunPaths], None]] = {
    "prepare": stage_prepare,
    "pretrain-style": stage_pretrain_style,
    "train-diffusion": stage_train_diffusion,
    "generate": stage_generate,
    "train-tsc": stage_train_tsc,
    "eval": stage_eval,
}


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_report(path: Path) -> dict:
    rep = json.loads(Path(path).read_text())
    if rep.get("format_version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported report format_version {rep.get('format_version')!r}")
    return rep


class _RunLog:
    """Attach a per-run log file to the package logger for the duration of a stage."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "log.txt"
        self.handler: logging.Handler | None = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.handler = logging.FileHandler(self.path)
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
        self.handler.setLevel(logging.DEBUG)
        pkg = logging.getLogger("stylepad")
        pkg.addHandler(self.handler)
        # per-step lines are DEBUG; the file keeps them, console handlers filter by their own level
        self.saved_level = pkg.level
        pkg.setLevel(logging.DEBUG)
        return self

    def __exit__(self, *exc):
        pkg = logging.getLogger("stylepad")
        pkg.removeHandler(self.handler)
        pkg.setLevel(self.saved_level)
        self.handler.close()


def run_stage(stage: str, cfg: ExperimentConfig, run_dir: Path) -> float:
    """Run one stage for a single (target, seed) config; returns elapsed seconds."""
    paths = RunPaths(run_dir)
    start = time.perf_counter()
    with _RunLog(run_dir):
        log.info("stage=%s begin run=%s", stage, run_dir)
        try:
            STAGE_FUNCS[stage](cfg, paths)
        except Exception as exc:
            log.exception("stage=%s failed", stage)
            raise StageError(stage, run_dir, exc) from exc
        log.info("stage=%s end", stage)
    return time.perf_counter() - start


def run_single(cfg: ExperimentConfig, target: str, seed: int, resume: bool = False, stages: Sequence[str] | None = None) -> dict:
    """Run the staged pipeline for one (target, seed); returns per-stage timings (skipped stages absent)."""
    run_cfg = cfg.for_run(target, seed)
    run_dir = run_dir_for(cfg, target, seed)
    paths = RunPaths(run_dir)
    timings = {}
    dirty = False
    for stage in stages or active_stages(run_cfg):
        done = all(p.exists() for p in paths.outputs(stage))
        if resume and done and not dirty:
            log.info("stage=%s skipped (outputs present) run=%s", stage, run_dir)
            continue
        timings[stage] = run_stage(stage, run_cfg, run_dir)
        dirty = True
    return timings


def sample_std(values: Sequence[float]) -> float | None:
    return float(np.std(values, ddof=1)) if len(values) > 1 else None


def aggregate_reports(cfg: ExperimentConfig, per_run: dict[tuple[str, int], dict]) -> dict:
    tasks = []
    for target in cfg.targets:
        accs = [per_run[(target, s)]["accuracy"] for s in cfg.seeds]
        tasks.append(
            {"task": target, "seeds": list(cfg.seeds), "accuracies": accs, "mean": float(np.mean(accs)), "std": sample_std(accs)}
        )
    return {
        "format_version": REPORT_VERSION,
        "method": cfg.method,
        "config_hash": cfg.config_hash(),
        "kappa": cfg.kappa,
        "o": cfg.o,
        "tasks": tasks,
        "mean_accuracy": float(np.mean([t["mean"] for t in tasks])),
    }


def write_table(path: Path, run_report: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "method", "accuracy", "std"])
        for t in run_report["tasks"]:
            w.writerow([t["task"], run_report["method"], f"{t['mean']:.6f}", "" if t["std"] is None else f"{t['std']:.6f}"])
        w.writerow(["avg", run_report["method"], f"{run_report['mean_accuracy']:.6f}", ""])


def run_pipeline(cfg: ExperimentConfig, resume: bool = False) -> dict:
    """All stages for every (target, seed); writes run_report.json, accuracy_table.csv and timings.json."""
    cfg.validate()
    out = Path(cfg.out_dir)
    per_run = {}
    timings = {}
    for target in cfg.targets:
        for seed in cfg.seeds:
            timings[f"{target}/seed{seed}"] = run_single(cfg, target, seed, resume=resume)
            per_run[(target, seed)] = read_report(RunPaths(run_dir_for(cfg, target, seed)).report)
    report = aggregate_reports(cfg, per_run)
    write_json(out / "run_report.json", report)
    write_table(out / "accuracy_table.csv", report)
    write_json(out / "timings.json", timings)
    return report


# --- comparison and export -------------------------------------------------------------
def compare_methods(reports: Sequence[dict], labels: Sequence[str] | None = None) -> list[dict]:
    """Align run reports by task; ``delta_<label>`` is the first report's mean minus that report's mean."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    labels = list(labels) if labels else [r.get("method", f"r{i}") for i, r in enumerate(reports)]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{i}" for i, lab in enumerate(labels)]
    task_sets = [[t["task"] for t in r["tasks"]] for r in reports]
    for ts in task_sets[1:]:
        if sorted(ts) != sorted(task_sets[0]):
            raise ValueError(f"reports cover different tasks: {task_sets[0]} vs {ts}")
    means = [{t["task"]: t["mean"] for t in r["tasks"]} for r in reports]
    rows = []
    for task in task_sets[0] + ["avg"]:
        vals = [m[task] if task != "avg" else float(np.mean(list(m.values()))) for m in means]
        row = {"task": task}
        row.update({lab: v for lab, v in zip(labels, vals)})
        row.update({f"delta_{lab}": vals[0] - v for lab, v in zip(labels[1:], vals[1:])})
        rows.append(row)
    return rows


def write_comparison(path: Path | None, rows: list[dict]) -> None:
    """CSV of ``compare_methods`` rows; ``path=None`` writes to stdout."""
    fh = open(path, "w", newline="") if path is not None else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if path is not None:
            fh.close()


EMBED_SPACES = ("class", "domain", "style")


def export_embeddings(run_dir: Path, space: str, out_csv: Path, probe_epochs: int = 20) -> int:
    """Write (instance_id, origin_flag, class, domain, v_1..v_Z) rows for the run's source-train
    originals, its synthetic samples (if any) and the target domain. Returns the row count.

    ``class`` uses the trained classifier's class projection, ``style`` the style encoder, and
    ``domain`` a probe of the same architecture fitted to source-domain labels.
    """
    if space not in EMBED_SPACES:
        raise ValueError(f"unknown embedding space {space!r}; choose from {EMBED_SPACES}")
    paths = RunPaths(Path(run_dir))
    split = read_split(paths.split_dir)
    synth = read_instances(paths.synth_stem) if paths.synth_stem.with_suffix(".di2s").exists() else []
    instances: list[TimeSeriesInstance] = list(split.train) + synth + list(split.target)
    x = stack_values(instances)
    if space == "class":
        vecs = embed(load_classifier(paths.tsc_ckpt), x)
    elif space == "style":
        vecs = encode_styles(load_style_encoder(paths.style_ckpt), x)
    else:
        probe_path = paths.root / "domain_probe.ckpt"
        if probe_path.exists():
            probe = load_classifier(probe_path)
        else:
            tags = split.source_tags
            y = np.array([tags.index(i.domain_tag) for i in split.train])
            tcfg = TSCConfig(epochs=probe_epochs)
            probe, _ = erm_train(split.train, len(tags), tcfg, 0, labels=y)
            meta = {"kind": "tsc", "format_version": REPORT_VERSION, "K": split.n_channels, "L": split.window_len,
                    "n_classes": len(tags), "tsc": tcfg.to_dict(), "method": "domain-probe"}
            save_module(probe_path, probe, meta)
        vecs = embed(probe, x)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "origin_flag", "class", "domain"] + [f"v_{j + 1}" for j in range(vecs.shape[1])])
        for inst, v in zip(instances, vecs):
            w.writerow([inst.instance_id, inst.origin_flag, inst.class_label, inst.domain_tag] + [repr(float(a)) for a in v])
    return len(instances)
