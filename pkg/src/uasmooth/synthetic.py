"""Spectrogram-like synthetic corpus with learnable per-task patterns.

Each task owns a small time-frequency template. A positive clip carries its
template at a random time offset (and a one-bin frequency jitter) on top of
noise that shares a smooth spectral profile within a recording. Clips are
grouped into recordings and whole recordings belong to one partition.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import load_tensor, read_labels, save_tensor, write_labels
from .segmentation import PARTITIONS


@dataclass
class SyntheticConfig:
    tasks: int = 1
    shape: tuple[int, int] = (32, 16)
    clips: dict = field(default_factory=lambda: {"train": 880, "devel": 220, "test": 330})
    positive_fraction: float | list = 1 / 11  # 1:10 imbalance
    amplitude: float = 3.0
    template_shape: tuple[int, int] = (6, 4)
    clips_per_recording: int = 10
    profile_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.shape = tuple(int(v) for v in self.shape)
        self.template_shape = tuple(int(v) for v in self.template_shape)
        if self.tasks < 1:
            raise ValueError("synthetic corpus needs at least one task")
        th, tw = self.template_shape
        if th > self.shape[0] or tw + 2 > self.shape[1]:
            raise ValueError(f"template {self.template_shape} does not fit clip shape {self.shape}")
        if set(self.clips) != set(PARTITIONS):
            raise ValueError(f"clip counts needed for exactly {PARTITIONS}, got {sorted(self.clips)}")

    def fractions(self) -> list[float]:
        f = self.positive_fraction
        return [float(f)] * self.tasks if np.isscalar(f) else [float(v) for v in f]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Partition:
    x: np.ndarray  # (N, time, mel)
    y: np.ndarray  # (N, tasks) int
    recording_ids: list[str]

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    partitions: dict[str, Partition]
    task_names: list[str]

    def __getitem__(self, name: str) -> Partition:
        return self.partitions[name]


def templates(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Unit-energy templates and their base frequency offsets, one per task."""
    th, tw = cfg.template_shape
    t = rng.normal(size=(cfg.tasks, th, tw))
    t /= np.sqrt((t ** 2).mean(axis=(1, 2), keepdims=True))
    base = rng.integers(1, cfg.shape[1] - tw, size=cfg.tasks)
    return t, base


def _labels(n: int, fractions, rng) -> np.ndarray:
    y = np.zeros((n, len(fractions)), dtype=np.int64)
    for t, f in enumerate(fractions):
        k = int(round(f * n))
        if k < 1:
            raise ValueError(f"task {t}: positive fraction {f} leaves no positives among {n} clips")
        if k >= n:
            raise ValueError(f"task {t}: positive fraction {f} leaves no negatives among {n} clips")
        y[rng.permutation(n)[:k], t] = 1
    return y


def _partition(name: str, n: int, cfg: SyntheticConfig, tmpl, base, rng) -> Partition:
    h, w = cfg.shape
    th, tw = cfg.template_shape
    y = _labels(n, cfg.fractions(), rng)
    n_rec = -(-n // cfg.clips_per_recording)
    rec = np.arange(n) // cfg.clips_per_recording
    profiles = np.cumsum(rng.normal(size=(n_rec, w)), axis=1) * cfg.profile_scale / np.sqrt(w)
    x = rng.normal(size=(n, h, w)) + profiles[rec][:, None, :]
    for i, t in zip(*np.nonzero(y)):
        t0 = rng.integers(0, h - th + 1)
        f0 = base[t] + rng.integers(-1, 2)
        x[i, t0: t0 + th, f0: f0 + tw] += cfg.amplitude * tmpl[t]
    return Partition(x, y, [f"{name}-{r:04d}" for r in rec])


def synthetic_corpus(cfg: SyntheticConfig | None = None) -> Dataset:
    """Deterministic given ``cfg.seed``."""
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    tmpl, base = templates(cfg, rng)
    parts = {name: _partition(name, int(cfg.clips[name]), cfg, tmpl, base, rng) for name in PARTITIONS}
    return Dataset(parts, [f"task{t}" for t in range(cfg.tasks)])


def save_dataset(ds: Dataset, directory) -> None:
    """One tensor container and one label CSV per partition."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, p in ds.partitions.items():
        save_tensor(d / f"{name}.spec", p.x, {"partition": name})
        write_labels(d / f"{name}.csv", p.y, p.recording_ids, ds.task_names)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    parts, names = {}, None
    for name in PARTITIONS:
        if not (d / f"{name}.spec").exists():
            raise FileNotFoundError(f"{d}: missing partition {name!r}")
        x, _ = load_tensor(d / f"{name}.spec")
        y, recs, names = read_labels(d / f"{name}.csv")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{name}: {x.shape[0]} spectrograms but {y.shape[0]} label rows")
        parts[name] = Partition(x, y, recs)
    return Dataset(parts, names)
