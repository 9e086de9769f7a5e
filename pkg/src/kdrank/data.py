"""Synthetic Gaussian-cluster classification data and its text file format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class DatasetSpec:
    """Class-conditional Gaussian clusters.

    Classes come in groups of ``group_size`` whose means share a common
    anchor; ``inter_class_correlation`` is the weight of that anchor, so
    higher values put sibling classes closer together and give the teacher
    a non-trivial ranking over the wrong classes.
    """

    num_classes: int = 20
    input_dim: int = 32
    samples_per_class: int = 200
    cluster_spread: float = 1.25
    inter_class_correlation: float = 0.5
    seed: int = 0
    group_size: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < 1 or self.samples_per_class < 1 or self.group_size < 1:
            raise ConfigError("input_dim, samples_per_class and group_size must be positive")
        if not self.cluster_spread > 0:
            raise ConfigError("cluster_spread must be positive")
        if not 0 <= self.inter_class_correlation < 1:
            raise ConfigError("inter_class_correlation must be in [0, 1)")
        if self.samples_per_class * TRAIN_FRACTION < 1 or self.samples_per_class * (1 - TRAIN_FRACTION) < 1:
            raise ConfigError("samples_per_class too small for an 80/20 split")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def class_means(spec: DatasetSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    n_groups = -(-spec.num_classes // spec.group_size)
    anchors = rng.normal(size=(n_groups, spec.input_dim))
    own = rng.normal(size=(spec.num_classes, spec.input_dim))
    rho = spec.inter_class_correlation
    group = np.arange(spec.num_classes) // spec.group_size
    return np.sqrt(rho) * anchors[group] + np.sqrt(1 - rho) * own


def generate_dataset(spec: DatasetSpec) -> tuple[Split, Split]:
    """Return ``(train, test)`` with a per-class 80/20 split.

    Both splits are class-balanced and ordered by a seeded shuffle.
    """
    means = class_means(spec)
    rng = np.random.default_rng([spec.seed, 2])
    n_train = int(round(spec.samples_per_class * TRAIN_FRACTION))
    parts = {"train": ([], []), "test": ([], [])}
    for c in range(spec.num_classes):
        x = means[c] + spec.cluster_spread * rng.normal(size=(spec.samples_per_class, spec.input_dim))
        for name, rows in (("train", x[:n_train]), ("test", x[n_train:])):
            parts[name][0].append(rows)
            parts[name][1].append(np.full(len(rows), c, dtype=np.int64))
    out = []
    for name in ("train", "test"):
        x = np.concatenate(parts[name][0])
        y = np.concatenate(parts[name][1])
        perm = rng.permutation(len(y))
        out.append(Split(x[perm], y[perm]))
    return out[0], out[1]


def write_split(split: Split, path) -> None:
    """Headerless CSV: feature columns then the integer label."""
    lines = [",".join([*(repr(float(v)) for v in row), str(int(label))]) for row, label in zip(split.x, split.y)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(path)


def read_split(path) -> Split:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ShapeError(f"{path}: no samples")
    width = len(rows[0])
    if width < 2 or any(len(r) != width for r in rows):
        raise ShapeError(f"{path}: ragged or too-narrow rows")
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Split(x, y)
