"""Synthetic source/target domain pairs and CSV ingestion.

All generators draw from numpy's PCG64 bit generator seeded with a 64-bit
integer, one stream per call, so output is a pure function of the spec.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("features, labels and ids must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if np.unique(self.ids).size != n:
            raise ValueError("ids must be unique")

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask_or_idx) -> "LabeledSet":
        return LabeledSet(self.features[mask_or_idx], self.labels[mask_or_idx],
                          self.ids[mask_or_idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class DomainSpec:
    n_classes: int = 8
    n_source: int = 2000
    n_target: int = 2000
    rotation: float = 0.0
    noise_scale_source: float = 0.15
    noise_scale_target: float = 0.15
    class_priors_target: list | None = None
    shift: tuple = (0.0, 0.0)
    seed: int = 0

    def priors(self) -> np.ndarray:
        if self.class_priors_target is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.class_priors_target, dtype=np.float64)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_source <= 0 or self.n_target <= 0:
            raise ValueError("sample counts must be positive")
        if self.noise_scale_source <= 0 or self.noise_scale_target <= 0:
            raise ValueError("noise scales must be positive")
        pri = self.priors()
        if pri.shape != (self.n_classes,) or np.any(pri < 0) or abs(pri.sum() - 1.0) > 1e-9:
            raise ValueError("class_priors_target must be a probability vector of length n_classes")


def skewed_priors(n_classes: int, ratio: float = 10.0) -> list[float]:
    """Geometric priors whose largest/smallest ratio equals ``ratio``."""
    w = ratio ** (-np.arange(n_classes) / (n_classes - 1))
    return list(w / w.sum())


def _rotate(points: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return points @ np.array([[c, s], [-s, c]])


def gen_gaussian_ring(spec: DomainSpec) -> tuple[LabeledSet, LabeledSet]:
    """Isotropic Gaussian classes with means evenly spaced on the unit circle.

    Target means are the source means rotated by ``spec.rotation``; target
    class counts are multinomial under the target priors.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    C = spec.n_classes
    angles = 2 * np.pi * np.arange(C) / C
    means = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    y_s = rng.integers(0, C, size=spec.n_source)
    x_s = means[y_s] + rng.normal(0.0, spec.noise_scale_source, size=(spec.n_source, 2))

    counts = rng.multinomial(spec.n_target, spec.priors())
    y_t = rng.permutation(np.repeat(np.arange(C), counts))
    t_means = _rotate(means, spec.rotation) + np.asarray(spec.shift, dtype=np.float64)
    x_t = t_means[y_t] + rng.normal(0.0, spec.noise_scale_target, size=(spec.n_target, 2))

    source = LabeledSet(x_s, y_s, np.arange(spec.n_source), C)
    target = LabeledSet(x_t, y_t, np.arange(spec.n_target), C)
    return source, target


def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_outer = (n + 1) // 2
    n_inner = n // 2
    t_out = np.linspace(0, np.pi, n_outer)
    t_in = np.linspace(0, np.pi, n_inner)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    x = np.concatenate([outer, inner]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


def gen_two_moons_shift(spec: DomainSpec) -> tuple[LabeledSet, LabeledSet]:
    """Two interleaved half circles; the target copy is rotated about the
    data centre by ``spec.rotation`` then translated by ``spec.shift``."""
    if spec.n_classes != 2:
        raise ValueError("two moons requires n_classes == 2")
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    x_s, y_s = _moons(spec.n_source, spec.noise_scale_source, rng)
    x_t, y_t = _moons(spec.n_target, spec.noise_scale_target, rng)
    centre = np.array([0.5, 0.25])
    x_t = _rotate(x_t - centre, spec.rotation) + centre + np.asarray(spec.shift, dtype=np.float64)
    return (LabeledSet(x_s, y_s, np.arange(spec.n_source), 2),
            LabeledSet(x_t, y_t, np.arange(spec.n_target), 2))


# ---------------------------------------------------------------------------
# CSV


class CsvParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class CsvSchema:
    n_classes: int
    has_header: bool = False
    input_dim: int | None = None


def load_csv(path, schema: CsvSchema) -> LabeledSet:
    """Read rows of feature columns followed by an integer label column."""
    rows, labels = [], []
    width = schema.input_dim
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and schema.has_header:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise CsvParseError(lineno, "need at least one feature column and a label")
            if width is None:
                width = len(row) - 1
            if len(row) != width + 1:
                raise CsvParseError(lineno, f"expected {width + 1} columns, found {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise CsvParseError(lineno, f"non-numeric feature ({exc})") from None
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise CsvParseError(lineno, f"label {row[-1]!r} is not an integer") from None
            if not 0 <= label < schema.n_classes:
                raise CsvParseError(lineno, f"label {label} outside [0, {schema.n_classes})")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise CsvParseError(0, "no data rows")
    return LabeledSet(np.array(rows), np.array(labels), np.arange(len(rows)), schema.n_classes)


def save_csv(data: LabeledSet, path, header: bool = False) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{j}" for j in range(data.input_dim)] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
    return path
