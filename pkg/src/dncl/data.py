"""Datasets: toy generators, CSV ingestion, splits and standardization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64


# stream keys so one user seed can drive several consumers without correlation
_SPIRALS_STREAM = 0x5F1
_TOY_STREAM = 0x70F
_SPLIT_STREAM = 0x5B7


class DataError(ValueError):
    """Malformed or missing input data."""


@dataclass
class Dataset:
    features: np.ndarray  # (N, D)
    targets: np.ndarray  # (N, O)
    name: str = "dataset"
    feature_names: list = field(default_factory=list)
    target_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.features) != len(self.targets):
            raise DataError(f"{len(self.features)} feature rows but {len(self.targets)} target rows")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.features.shape[1])]
        if not self.target_names:
            self.target_names = [f"y{i}" for i in range(self.targets.shape[1])]

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.targets[idx], name or self.name,
                       list(self.feature_names), list(self.target_names))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.feature_names + self.target_names)
            for xr, yr in zip(self.features, self.targets):
                w.writerow([repr(float(v)) for v in xr] + [repr(float(v)) for v in yr])


@dataclass(frozen=True)
class SpiralsSpec:
    points_per_arm: int = 200
    turns: float = 2.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.points_per_arm < 1:
            raise ValueError("points_per_arm must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not self.turns > 0:
            raise ValueError("turns must be positive")


def spiral_point(t, arm: int, turns: float) -> np.ndarray:
    """Noise-free position on arm 0 or 1 at angle parameter ``t``."""
    t = np.asarray(t, dtype=np.float64)
    r = t / (turns * 2 * math.pi)
    phase = t + arm * math.pi
    return np.stack([r * np.cos(phase), r * np.sin(phase)], axis=-1)


def gen_spirals(spec: SpiralsSpec = SpiralsSpec()) -> Dataset:
    """Two interleaved arms; arm 0 is labelled +1, arm 1 is labelled -1."""
    rng = SplitMix64(spec.seed).spawn(_SPIRALS_STREAM)
    n = spec.points_per_arm
    xs, ys = [], []
    for arm, label in ((0, 1.0), (1, -1.0)):
        t = rng.uniform(n, 0.0, spec.turns * 2 * math.pi)
        pts = spiral_point(t, arm, spec.turns)
        if spec.noise > 0:
            pts = pts + rng.normal((n, 2), spec.noise)
        xs.append(pts)
        ys.append(np.full((n, 1), label))
    return Dataset(np.concatenate(xs), np.concatenate(ys), "spirals", ["x", "y"], ["label"])


@dataclass(frozen=True)
class ScalarToySpec:
    target: float = -1.5
    regressors: int = 6
    iterations: int = 30
    lr: float = 0.1
    init_low: float = -4.0
    init_high: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.regressors < 1:
            raise ValueError("regressors must be >= 1")
        if not self.init_low <= self.init_high:
            raise ValueError("init_low must not exceed init_high")


def gen_scalar_toy(spec: ScalarToySpec = ScalarToySpec()):
    """One constant sample with the scalar target, plus seeded initial regressor values."""
    init = SplitMix64(spec.seed).spawn(_TOY_STREAM).uniform(spec.regressors, spec.init_low, spec.init_high)
    return Dataset(np.ones((1, 1)), np.array([[spec.target]]), "scalar-toy"), init


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if math.isnan(v):
        raise DataError(f"row {row}, column {col!r}: NaN is not allowed")
    return v


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, feature_cols, target_cols, name: str | None = None) -> Dataset:
    """Read a comma-separated numeric table.

    A first row containing any non-numeric cell is taken as the header.
    Columns are selected by header name or by integer position.  Rows are
    numbered from 1 as they appear in the file.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = None
    first = 1
    if not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first = 2
    if not rows:
        raise DataError(f"{path}: no data rows (empty dataset)")
    width = len(header) if header else len(rows[0])

    def resolve(cols):
        out = []
        for c in cols:
            if isinstance(c, int) or (isinstance(c, str) and c.isdigit() and header is None):
                i = int(c)
            elif header is not None and c in header:
                i = header.index(c)
            else:
                raise DataError(f"{path}: column {c!r} not found")
            if not 0 <= i < width:
                raise DataError(f"{path}: column index {i} out of range (width {width})")
            out.append(i)
        return out

    fi, ti = resolve(feature_cols), resolve(target_cols)
    names = header or [str(i) for i in range(width)]
    X, Y = [], []
    for n, r in enumerate(rows, start=first):
        if len(r) != width:
            raise DataError(f"row {n}: expected {width} cells, found {len(r)}")
        cells = []
        for i in fi + ti:
            cell = r[i].strip()
            if cell == "":
                raise DataError(f"row {n}, column {names[i]!r}: missing value")
            cells.append(_parse_float(cell, n, names[i]))
        X.append(cells[: len(fi)])
        Y.append(cells[len(fi) :])
    return Dataset(np.array(X), np.array(Y), name or str(path),
                   [names[i] for i in fi], [names[i] for i in ti])


def split(dataset: Dataset, test_fraction: float, seed: int):
    """Seeded disjoint train/test partition; the test part has round(f * N) rows."""
    if not 0 <= test_fraction <= 1:
        raise ValueError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    n = len(dataset)
    order = SplitMix64(seed).spawn(_SPLIT_STREAM).permutation(n)
    n_test = int(round(test_fraction * n))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return (dataset.subset(train_idx, dataset.name + ":train"),
            dataset.subset(test_idx, dataset.name + ":test"))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean
