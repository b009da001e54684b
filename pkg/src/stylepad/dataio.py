"""Windowed time-series instances, splits, normalization and the synthetic benchmark."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics.checkpoint import load_tensors, save_tensors
from .numerics.rng import RngStream

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
WAVEFORMS = ("sine", "square", "sawtooth", "pulse", "triangle", "chirp")


@dataclass
class TimeSeriesInstance:
    values: np.ndarray  # [K, L]
    class_label: int
    domain_tag: str
    origin_flag: int = 1  # 1 = original, 0 = synthetic
    instance_id: str = ""

    def with_values(self, values: np.ndarray) -> "TimeSeriesInstance":
        return replace(self, values=values)


@dataclass
class NormStats:
    mean: np.ndarray  # [K]
    std: np.ndarray  # [K]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None] + self.mean[:, None]


@dataclass
class DatasetSplit:
    train: list[TimeSeriesInstance]
    val: list[TimeSeriesInstance]
    test: list[TimeSeriesInstance]
    target: list[TimeSeriesInstance]
    source_tags: list[str]
    target_tag: str
    n_classes: int
    n_channels: int
    window_len: int
    norm: NormStats | None = None

    def all_instances(self) -> Iterable[TimeSeriesInstance]:
        for part in (self.train, self.val, self.test, self.target):
            yield from part


@dataclass
class SynthBenchSpec:
    n_classes: int = 4
    n_domains: int = 4
    samples_per_class_per_domain: int = 40
    n_channels: int = 3
    window_len: int = 64
    noise_level: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_classes", "n_domains", "samples_per_class_per_domain", "n_channels", "window_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_classes > len(WAVEFORMS):
            raise ValueError(f"n_classes={self.n_classes} exceeds the {len(WAVEFORMS)} implemented waveform families")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


def stack_values(instances: Sequence[TimeSeriesInstance]) -> np.ndarray:
    return np.stack([inst.values for inst in instances]) if instances else np.zeros((0, 0, 0))


def labels_of(instances: Sequence[TimeSeriesInstance]) -> np.ndarray:
    return np.array([inst.class_label for inst in instances], dtype=np.int64)


# --- windowing -----------------------------------------------------------------
def segment_windows(raw: np.ndarray, window_len: int, overlap_fraction: float) -> list[np.ndarray]:
    """Cut a [K, N] (or [N]) series into full windows; the trailing remainder is dropped."""
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[-1]
    stride = max(1, int(math.floor(window_len * (1.0 - overlap_fraction) + 0.5)))
    return [raw[..., s : s + window_len].copy() for s in range(0, n - window_len + 1, stride)]


# --- normalization ---------------------------------------------------------------
def compute_norm_stats(instances: Sequence[TimeSeriesInstance]) -> NormStats:
    if not instances:
        raise ValueError("cannot compute normalization statistics from an empty train set")
    x = stack_values(instances)  # N, K, L
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    flat = std < 1e-8
    if np.any(flat):
        log.warning("zero-variance channel(s) %s: std clamped to 1e-8", np.flatnonzero(flat).tolist())
        std = np.where(flat, 1e-8, std)
    return NormStats(mean=mean, std=std)


def normalize(split: DatasetSplit, mode: str = "per-channel-zscore") -> DatasetSplit:
    """Z-score every split with statistics from the training source data only."""
    if mode != "per-channel-zscore":
        raise ValueError(f"unknown normalization mode {mode!r}")
    stats = compute_norm_stats(split.train)

    def tx(part):
        return [inst.with_values(stats.apply(inst.values)) for inst in part]

    return replace(split, train=tx(split.train), val=tx(split.val), test=tx(split.test), target=tx(split.target), norm=stats)


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.invert(x)


# --- splitting -----------------------------------------------------------------------
def _ratio_counts(n: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_train = int(math.floor(n * ratios[0] + 0.5))
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def leave_one_out_split(
    instances: Sequence[TimeSeriesInstance],
    groups: dict[str, str],
    target_group: str,
    seed: int = 0,
    n_classes: int | None = None,
) -> DatasetSplit:
    """Hold out ``target_group`` entirely; split the rest 6:2:2 stratified by class."""
    group_names = sorted(set(groups.values()))
    if target_group not in group_names:
        raise KeyError(f"unknown target group {target_group!r}; known: {group_names}")
    if len(group_names) < 2:
        raise ValueError("leave-one-out needs at least two groups")
    for inst in instances:
        if inst.domain_tag not in groups:
            raise KeyError(f"instance {inst.instance_id!r} has undeclared domain {inst.domain_tag!r}")
    C = n_classes if n_classes is not None else int(max(i.class_label for i in instances)) + 1
    source = [i for i in instances if groups[i.domain_tag] != target_group]
    target = [i for i in instances if groups[i.domain_tag] == target_group]
    rng = RngStream("dataio/split", seed)
    train, val, test = [], [], []
    for c in range(C):
        members = [i for i in source if i.class_label == c]
        order = rng.permutation(len(members))
        n_tr, n_va, _ = _ratio_counts(len(members))
        picked = [members[j] for j in order]
        train += picked[:n_tr]
        val += picked[n_tr : n_tr + n_va]
        test += picked[n_tr + n_va :]
    K, L = instances[0].values.shape
    source_tags = sorted({d for d, g in groups.items() if g != target_group})
    return DatasetSplit(
        train=train,
        val=val,
        test=test,
        target=target,
        source_tags=source_tags,
        target_tag=target_group,
        n_classes=C,
        n_channels=K,
        window_len=L,
    )


def subsample_fraction(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Keep ``round(fraction * n_c)`` training instances of every class."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    rng = RngStream("dataio/subsample", seed)
    kept = []
    for c in range(split.n_classes):
        members = [i for i in split.train if i.class_label == c]
        if not members:
            continue
        n = int(math.floor(fraction * len(members) + 0.5))
        if n == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} with zero training samples")
        idx = np.sort(rng.choice(len(members), size=n, replace=False))
        kept += [members[j] for j in idx]
    return replace(split, train=kept)


# --- synthetic benchmark -------------------------------------------------------------
def _waveform(family: str, phase: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Unit-amplitude waveform; ``phase`` is in cycles, ``t`` in [0, 1)."""
    frac = np.mod(phase, 1.0)
    if family == "sine":
        return np.sin(2 * np.pi * phase)
    if family == "square":
        return np.tanh(8.0 * np.sin(2 * np.pi * phase))
    if family == "sawtooth":
        return 2.0 * frac - 1.0
    if family == "triangle":
        return 1.0 - 4.0 * np.abs(frac - 0.5)
    if family == "chirp":
        return np.sin(2 * np.pi * (phase + 1.5 * t * t))
    if family == "pulse":
        return 2.0 * np.exp(-((frac - 0.5) ** 2) / (2 * 0.06**2)) - 0.5
    raise ValueError(f"unknown waveform family {family!r}")


def _domain_styles(spec: SynthBenchSpec, rng: RngStream) -> list[dict]:
    """Per-domain style ranges: centres spread over a shuffled grid so domains differ systematically."""
    D = spec.n_domains
    grid = (np.arange(D) + 0.5) / D
    freq_c = 1.0 + 0.8 * (rng.permutation(grid) - 0.5)
    amp_c = 1.0 + 0.8 * (rng.permutation(grid) - 0.5)
    noise_c = spec.noise_level * (0.5 + rng.permutation(grid))
    styles = []
    for d in range(D):
        styles.append(
            {
                "freq": float(freq_c[d]),
                "amp": float(amp_c[d]),
                "noise": float(noise_c[d]),
                "phase": float(rng.uniform(0.0, 1.0)),
                "channel_gain": rng.uniform(0.6, 1.4, size=spec.n_channels),
                "channel_shift": rng.uniform(-0.25, 0.25, size=spec.n_channels),
                "offset": rng.normal(0.0, 0.2, size=spec.n_channels),
            }
        )
    return styles


def synth_benchmark_generate(spec: SynthBenchSpec) -> list[TimeSeriesInstance]:
    """Class = waveform family; domain = style transform (frequency, amplitude, phase, noise, channel mixing)."""
    spec.validate()
    rng = RngStream("dataio/synth", spec.seed)
    styles = _domain_styles(spec, rng)
    L, K = spec.window_len, spec.n_channels
    t = np.arange(L) / L
    base_cycles = 3.0
    out = []
    for d, st in enumerate(styles):
        for c in range(spec.n_classes):
            family = WAVEFORMS[c]
            for n in range(spec.samples_per_class_per_domain):
                freq = st["freq"] * rng.uniform(0.93, 1.07)
                amp = st["amp"] * rng.uniform(0.85, 1.15)
                phase0 = st["phase"] + rng.uniform(-0.15, 0.15)
                x = np.empty((K, L))
                for k in range(K):
                    ph = base_cycles * freq * t + phase0 + st["channel_shift"][k]
                    x[k] = amp * st["channel_gain"][k] * _waveform(family, ph, t) + st["offset"][k]
                x += rng.normal(0.0, st["noise"], size=(K, L))
                out.append(
                    TimeSeriesInstance(values=x, class_label=c, domain_tag=f"D{d}", instance_id=f"D{d}-c{c}-{n:04d}")
                )
    return out


def default_groups(domains: Sequence[str]) -> dict[str, str]:
    """Each synthetic domain is its own leave-one-out group, named T0..T{n-1}."""
    return {d: f"T{i}" for i, d in enumerate(domains)}


# --- on-disk format ------------------------------------------------------------------
@dataclass
class DatasetManifest:
    name: str
    n_classes: int
    n_channels: int
    window_len: int
    window_overlap: float
    channels: list[str]
    domains: list[str]
    groups: dict[str, str]
    files: list[dict] = field(default_factory=list)
    root: Path = Path(".")

    def to_json(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "name": self.name,
            "C": self.n_classes,
            "K": self.n_channels,
            "L": self.window_len,
            "window_overlap": self.window_overlap,
            "channels": self.channels,
            "domains": self.domains,
            "groups": self.groups,
            "files": self.files,
        }


def write_instances(path_stem: str | os.PathLike, instances: Sequence[TimeSeriesInstance]) -> tuple[Path, Path]:
    """Write ``<stem>.di2s`` (values) and ``<stem>.csv`` (instance_id, class, domain, origin_flag)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensor_path = stem.with_suffix(".di2s")
    csv_path = stem.with_suffix(".csv")
    values = stack_values(instances) if instances else np.zeros((0, 0, 0))
    save_tensors(tensor_path, {"values": values}, meta={"kind": "instances", "count": len(instances)})
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "class", "domain", "origin_flag"])
        for inst in instances:
            w.writerow([inst.instance_id, inst.class_label, inst.domain_tag, inst.origin_flag])
    return tensor_path, csv_path


def read_instances(path_stem: str | os.PathLike) -> list[TimeSeriesInstance]:
    stem = Path(path_stem)
    tensors, _ = load_tensors(stem.with_suffix(".di2s"))
    values = tensors["values"]
    with open(stem.with_suffix(".csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(values):
        raise ValueError(f"{stem}: {len(rows)} label rows for {len(values)} tensors")
    return [
        TimeSeriesInstance(
            values=values[i],
            class_label=int(r["class"]),
            domain_tag=r["domain"],
            origin_flag=int(r.get("origin_flag", 1) or 1),
            instance_id=r["instance_id"],
        )
        for i, r in enumerate(rows)
    ]


def write_dataset(
    root: str | os.PathLike,
    instances: Sequence[TimeSeriesInstance],
    name: str,
    n_classes: int,
    groups: dict[str, str] | None = None,
    window_overlap: float = 0.0,
    channels: Sequence[str] | None = None,
) -> Path:
    """Store one container + CSV per domain and a ``manifest.json`` describing them."""
    root = Path(root)
    domains = sorted({i.domain_tag for i in instances})
    K, L = instances[0].values.shape
    groups = groups or default_groups(domains)
    files = []
    for d in domains:
        tensor_path, csv_path = write_instances(root / f"domain_{d}", [i for i in instances if i.domain_tag == d])
        files.append({"domain": d, "values": tensor_path.name, "labels": csv_path.name})
    manifest = DatasetManifest(
        name=name,
        n_classes=n_classes,
        n_channels=K,
        window_len=L,
        window_overlap=window_overlap,
        channels=list(channels) if channels else [f"ch{k}" for k in range(K)],
        domains=domains,
        groups=groups,
        files=files,
        root=root,
    )
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    if raw.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest format_version {raw.get('format_version')!r}")
    return DatasetManifest(
        name=raw["name"],
        n_classes=int(raw["C"]),
        n_channels=int(raw["K"]),
        window_len=int(raw["L"]),
        window_overlap=float(raw["window_overlap"]),
        channels=list(raw["channels"]),
        domains=list(raw["domains"]),
        groups=dict(raw.get("groups") or default_groups(raw["domains"])),
        files=list(raw["files"]),
        root=path.parent,
    )


def load_dataset(manifest: DatasetManifest) -> list[TimeSeriesInstance]:
    out = []
    for entry in manifest.files:
        stem = manifest.root / Path(entry["values"]).with_suffix("")
        part = read_instances(stem)
        for inst in part:
            if inst.values.shape != (manifest.n_channels, manifest.window_len):
                raise ValueError(f"{inst.instance_id}: shape {inst.values.shape} != manifest (K, L)")
            if not 0 <= inst.class_label < manifest.n_classes:
                raise ValueError(f"{inst.instance_id}: class {inst.class_label} outside [0, {manifest.n_classes})")
        out += part
    return out
