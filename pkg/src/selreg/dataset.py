"""Tabular regression data: CSV loading, min-max preprocessing, seeded
splits, synthetic generators and feature perturbation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str = "numeric"
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise DatasetError(f"unknown column kind {self.kind!r}")


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus target.

    ``features`` is a float matrix once preprocessed; raw datasets with
    categorical columns hold an object matrix of labels and numbers.
    """

    features: np.ndarray
    target: np.ndarray
    columns: tuple[ColumnMeta, ...]
    target_name: str = "y"

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError("features must be 2-D")
        if self.features.shape[0] != self.target.shape[0]:
            raise DatasetError("features and target have different row counts")
        if self.features.shape[1] != len(self.columns):
            raise DatasetError("column metadata does not match feature count")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DatasetError("column names must be unique")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], target=self.target[idx])

    def column_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DatasetError(f"unknown feature {name!r}") from None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*self.names, self.target_name])
            for row, t in zip(self.features, self.target):
                w.writerow([_fmt(v) for v in row] + [_fmt(t)])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


# ------------------------------------------------------------------ loading


def _parses(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, target_column: str, column_kinds: dict[str, str] | None = None) -> Dataset:
    """Read a header-first comma-separated file into a raw dataset.

    Columns whose every cell parses as a number are numeric; the rest are
    categorical, with categories in first-appearance order.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DatasetError("empty dataset")
    header, body = rows[0], rows[1:]
    if target_column not in header:
        raise DatasetError(f"missing target column {target_column!r}")
    if not body:
        raise DatasetError("empty dataset")
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DatasetError(f"ragged row at line {i}: {len(r)} fields, expected {len(header)}")

    kinds = dict(column_kinds or {})
    t = header.index(target_column)
    try:
        target = np.array([float(r[t]) for r in body])
    except ValueError:
        raise DatasetError("target column must be numeric") from None

    cols, data = [], []
    for j, name in enumerate(header):
        if j == t:
            continue
        cells = [r[j] for r in body]
        kind = kinds.get(name) or ("numeric" if all(_parses(c) for c in cells) else "categorical")
        if kind == "numeric":
            try:
                data.append([float(c) for c in cells])
            except ValueError:
                raise DatasetError(f"column {name!r} is not numeric") from None
            cols.append(ColumnMeta(name))
        else:
            cats = tuple(dict.fromkeys(cells))
            data.append(cells)
            cols.append(ColumnMeta(name, "categorical", cats))
    if any(c.kind == "categorical" for c in cols):
        features = np.empty((len(body), len(cols)), dtype=object)
        for j, col in enumerate(data):
            features[:, j] = col
    else:
        features = np.array(data, dtype=float).T.reshape(len(body), len(cols))
    return Dataset(features, target, tuple(cols), target_name=target_column)


# ------------------------------------------------------------ preprocessing


@dataclass
class PreprocessRecord:
    """Statistics needed to re-apply or invert the preprocessing."""

    source_columns: list[ColumnMeta]
    feature_min: np.ndarray
    feature_max: np.ndarray
    target_min: float
    target_max: float
    onehot: dict[str, list[str]] = field(default_factory=dict)

    def _encode(self, raw: Dataset) -> np.ndarray:
        if raw.names != [c.name for c in self.source_columns]:
            raise DatasetError("columns differ from the fitted record")
        out = []
        for j, col in enumerate(self.source_columns):
            cells = raw.features[:, j]
            if col.kind == "categorical":
                labels = np.array([str(v) for v in cells], dtype=object)
                # unseen labels fall through to an all-zero block
                out.extend((labels == c).astype(float) for c in col.categories)
            else:
                out.append(np.asarray(cells, dtype=float))
        return np.column_stack(out) if out else np.empty((raw.n, 0))

    @staticmethod
    def _scale(values, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (values - lo) / safe, 0.0)

    def apply(self, raw: Dataset) -> Dataset:
        encoded = self._encode(raw)
        X = self._scale(encoded, self.feature_min, self.feature_max)
        y = self.scale_target(raw.target)
        cols = tuple(ColumnMeta(name) for name in self.output_names)
        return Dataset(X, y, cols, raw.target_name)

    def scale_target(self, y) -> np.ndarray:
        return self._scale(np.asarray(y, dtype=float), self.target_min, self.target_max)

    def inverse_target(self, y_scaled) -> np.ndarray:
        y_scaled = np.asarray(y_scaled, dtype=float)
        span = self.target_max - self.target_min
        if span == 0:
            return np.full_like(y_scaled, self.target_min)
        return y_scaled * span + self.target_min

    @property
    def output_names(self) -> list[str]:
        names = []
        for col in self.source_columns:
            names.extend(self.onehot.get(col.name, [col.name]))
        return names

    def to_dict(self) -> dict:
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, "categories": list(c.categories)}
                for c in self.source_columns
            ],
            "feature_min": self.feature_min.tolist(),
            "feature_max": self.feature_max.tolist(),
            "target_min": self.target_min,
            "target_max": self.target_max,
            "onehot": self.onehot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessRecord":
        cols = [ColumnMeta(c["name"], c["kind"], tuple(c["categories"])) for c in d["columns"]]
        return cls(
            cols,
            np.array(d["feature_min"], dtype=float),
            np.array(d["feature_max"], dtype=float),
            float(d["target_min"]),
            float(d["target_max"]),
            {k: list(v) for k, v in d["onehot"].items()},
        )


def _onehot_names(col: ColumnMeta, taken: set[str]) -> list[str]:
    names = []
    for c in col.categories:
        name = f"{col.name}={c}"
        while name in taken:
            name += "_"
        taken.add(name)
        names.append(name)
    return names


def preprocess(raw: Dataset, fit_rows=None) -> tuple[Dataset, PreprocessRecord]:
    """One-hot encode categoricals and min-max scale features and target.

    Categories and scaling statistics come from ``fit_rows`` only (all rows
    if omitted); other rows may fall outside [0, 1], and labels unseen on
    the fit rows encode as all-zero one-hot blocks.
    """
    fit_rows = np.arange(raw.n) if fit_rows is None else np.asarray(fit_rows)
    if fit_rows.size == 0:
        raise DatasetError("fit_rows is empty")
    # categories are those seen on the fit rows; others encode as all zeros
    columns = []
    for j, c in enumerate(raw.columns):
        if c.kind == "categorical":
            seen = {str(v) for v in raw.features[fit_rows, j]}
            c = ColumnMeta(c.name, "categorical", tuple(v for v in c.categories if v in seen))
        columns.append(c)
    taken = {c.name for c in columns if c.kind == "numeric"}
    onehot = {c.name: _onehot_names(c, taken) for c in columns if c.kind == "categorical"}
    n_out = sum(len(onehot.get(c.name, [c.name])) for c in columns)
    record = PreprocessRecord(columns, np.zeros(n_out), np.zeros(n_out), 0.0, 0.0, onehot)
    encoded = record._encode(raw)
    if not np.all(np.isfinite(encoded)) or not np.all(np.isfinite(raw.target)):
        raise DatasetError("non-finite values; imputation is not supported")
    fit = encoded[fit_rows]
    record.feature_min = fit.min(axis=0) if fit.shape[1] else np.zeros(0)
    record.feature_max = fit.max(axis=0) if fit.shape[1] else np.zeros(0)
    record.target_min = float(raw.target[fit_rows].min())
    record.target_max = float(raw.target[fit_rows].max())
    return record.apply(raw), record


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    fractions: tuple[tuple[str, float], ...]
    assignment: tuple[str, ...]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.fractions]

    def indices(self, name: str) -> np.ndarray:
        if name not in self.names:
            raise DatasetError(f"unknown split {name!r}")
        return np.array([i for i, a in enumerate(self.assignment) if a == name], dtype=int)

    def sizes(self) -> dict[str, int]:
        return {name: self.assignment.count(name) for name in self.names}

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "fractions": [[n, f] for n, f in self.fractions],
                "assignment": list(self.assignment),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(int(d["seed"]), tuple((n, float(f)) for n, f in d["fractions"]), tuple(d["assignment"]))


DEFAULT_SPLIT = (("train", 0.6), ("calibration", 0.2), ("test", 0.2))
AUDIT_SPLIT = (("train", 0.25), ("calibration", 0.25), ("validation", 0.25), ("test", 0.25))


def split(n_or_data, fractions: Sequence = DEFAULT_SPLIT, seed: int = 0) -> SplitPlan:
    """Shuffle rows with a seeded generator and cut by cumulative fractions.

    Split sizes are floored; leftover rows go to the last split. Plain
    fraction lists get names ``split0``, ``split1``, ...
    """
    n = n_or_data.n if isinstance(n_or_data, Dataset) else int(n_or_data)
    named = []
    for i, item in enumerate(fractions):
        if isinstance(item, (tuple, list)):
            named.append((str(item[0]), float(item[1])))
        else:
            named.append((f"split{i}", float(item)))
    fr = [f for _, f in named]
    if any(f <= 0 for f in fr):
        raise DatasetError("fractions must be positive")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise DatasetError("fractions must sum to 1")
    sizes = [math.floor(n * f) for f in fr]
    sizes[-1] = n - sum(sizes[:-1])
    if any(s <= 0 for s in sizes):
        raise DatasetError("empty split")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = [""] * n
    pos = 0
    for (name, _), size in zip(named, sizes):
        for i in perm[pos : pos + size]:
            assignment[i] = name
        pos += size
    return SplitPlan(int(seed), tuple(named), tuple(assignment))


# -------------------------------------------------------- synthetic & shift


def _unique_name(name: str, taken: Sequence[str]) -> str:
    if name not in taken:
        return name
    k = 1
    while f"{name}_{k}" in taken:
        k += 1
    return f"{name}_{k}"


def add_random_feature(data: Dataset, seed: int = 0, name: str = "X_Random") -> Dataset:
    """Append an i.i.d. Uniform[0, 1] column that is independent of the target."""
    col = np.random.default_rng(seed).random(data.n)
    X = np.column_stack([np.asarray(data.features, dtype=float), col])
    meta = ColumnMeta(_unique_name(name, data.names))
    return replace(data, features=X, columns=(*data.columns, meta))


def perturb(
    data: Dataset,
    feature_names: Sequence[str],
    noise_mean: float = 5.0,
    noise_sd: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Add independent N(noise_mean, noise_sd^2) draws to the named columns."""
    idx = [data.column_index(name) for name in feature_names]
    return replace(data, features=gaussian_shift(data.features, idx, noise_mean, noise_sd, seed))


def gaussian_shift(X, columns: Sequence[int], noise_mean=5.0, noise_sd=1.0, seed=0) -> np.ndarray:
    """Copy of ``X`` with i.i.d. Gaussian noise added to ``columns``."""
    X = np.array(X, dtype=float, copy=True)
    columns = list(columns)
    if columns:
        rng = np.random.default_rng(seed)
        X[:, columns] += rng.normal(noise_mean, noise_sd, size=(X.shape[0], len(columns)))
    return X


def _signal(X):
    d = X.shape[1]
    w = 1.0 / np.arange(1, d + 1)
    return X[:, 0] + np.sin(np.pi * X) @ w


def _noise_sd(X, profile, scale):
    if profile == "increasing":
        return scale * (0.1 + X[:, 0] ** 2)
    if profile == "bump":
        return scale * (0.1 + np.exp(-((X[:, 0] - 0.5) ** 2) / 0.02))
    if profile == "constant":
        return np.full(X.shape[0], float(scale))
    raise DatasetError(f"unknown noise profile {profile!r}")


def synth_heteroscedastic(
    n: int, d: int, noise_profile: str = "increasing", seed: int = 0, noise_scale: float = 1.0
) -> tuple[Dataset, np.ndarray]:
    """Smooth regression surface with input-dependent Gaussian noise.

    ``y = x1 + sum_j sin(pi x_j) / j + sd(x) * e`` with ``x ~ U[0,1]^d``.
    Profiles: ``increasing`` (sd grows with x1^2), ``bump`` (peak at
    x1 = 0.5), ``constant`` (sd = noise_scale). Returns the dataset and the
    true per-row noise sd.
    """
    if n < 10 or d < 1:
        raise DatasetError("need n >= 10 and d >= 1")
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    sd = _noise_sd(X, noise_profile, noise_scale)
    y = _signal(X) + sd * rng.standard_normal(n)
    cols = tuple(ColumnMeta(f"x{j + 1}") for j in range(d))
    return Dataset(X, y, cols), sd


HOUSE_FEATURES = (
    "GrLivArea",
    "OverallQual",
    "CentralAir",
    "KitchenAbvGr",
    "BsmtQual",
    "KitchenQual",
    "GarageCars",
)


def synth_houses(n: int = 6000, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """House-price-like data with seven named features on raw scales.

    The target is a log sale price growing with living area and quality.
    The log of the noise sd is linear in the features: it grows with every
    feature except central air, where it shrinks, and is dominated by living
    area, so uncertainty concentrates on large, high-end properties.

    Returns
    -------
    data : Dataset
        Features ``HOUSE_FEATURES`` and target ``LogSalePrice``.
    sd : ndarray
        True per-row noise standard deviation.
    """
    if n < 10:
        raise DatasetError("need n >= 10")
    rng = np.random.default_rng(seed)
    area = rng.gamma(9.0, 170.0, n) + 350.0
    qual = np.clip(np.round(rng.normal(6.0, 1.4, n) + (area - 1500) / 900), 1, 10)
    air = (rng.random(n) < 0.8).astype(float)
    kitchens = 1.0 + (rng.random(n) < 0.15)
    bsmt = np.clip(np.round(rng.normal(3.2, 1.0, n)), 1, 5)
    kqual = np.clip(np.round(rng.normal(3.0, 1.0, n)), 1, 5)
    garage = np.clip(np.round(rng.normal(1.8, 1.0, n)), 0, 4)

    a = np.clip((area - 350.0) / 3000.0, 0.0, 1.0)
    q = (qual - 1) / 9
    log_price = (
        11.0
        + 1.2 * a
        + 0.9 * q
        + 0.12 * air
        - 0.10 * (kitchens - 1)
        + 0.05 * bsmt
        + 0.06 * kqual
        + 0.05 * garage
    )
    # log-linear noise scale: acceptance {sd < t} is a half-space in features
    log_sd = (
        -4.6
        + 2.0 * a
        + 1.2 * q
        + 0.8 * (1 - air)
        + 0.8 * (kitchens - 1)
        + 1.6 * (bsmt - 1) / 4
        + 1.6 * (kqual - 1) / 4
        + 1.6 * garage / 4
    )
    sd = np.exp(log_sd)
    log_price = log_price + sd * rng.standard_normal(n)
    X = np.column_stack([area, qual, air, kitchens, bsmt, kqual, garage])
    cols = tuple(ColumnMeta(name) for name in HOUSE_FEATURES)
    return Dataset(X, log_price, cols, target_name="LogSalePrice"), sd
