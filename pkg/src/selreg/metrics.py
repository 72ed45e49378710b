"""Selective-regression evaluation: coverage, coverage satisfaction, relative
MSE change with violation zeroing, risk-coverage curves and Friedman /
Nemenyi rank comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy import stats

# standard benchmark grid, plus full coverage
COVERAGE_GRID = (0.99, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70, 0.65, 0.60, 0.55, 0.50)
FULL_GRID = (1.0, *COVERAGE_GRID)
EPSILON = 0.05

# Two-tailed Nemenyi critical values q_alpha (studentized range / sqrt 2),
# k = 2..10 (Demsar 2006, Table 5).
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920),
}


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationRecord:
    method: str
    target_coverage: float
    actual_coverage: float
    mse_full: float
    mse_accepted: float
    delta_mse: float
    cov_ok: bool
    n_accepted: int
    n_total: int
    seed: int = 0
    dataset: str = ""

    def as_row(self) -> dict:
        return asdict(self)


RECORD_FIELDS = [f.name for f in fields(EvaluationRecord)]


def _accepted_mask(preds) -> np.ndarray:
    if len(preds) and hasattr(preds[0], "accepted"):
        return np.array([p.accepted for p in preds], dtype=bool)
    return np.asarray(preds, dtype=bool)


def coverage(preds) -> float:
    """Accepted fraction of a list of predictions or a boolean mask."""
    mask = _accepted_mask(preds)
    if mask.size == 0:
        raise MetricsError("coverage of an empty prediction list")
    return int(mask.sum()) / mask.size


def cov_sat(alpha: float, actual: float, eps: float = EPSILON) -> bool:
    """True when the shortfall ``alpha - actual`` is strictly below ``eps``."""
    # rounding keeps k/n boundaries exact, e.g. 0.9 - 0.85 == eps is a violation
    return round(alpha - actual, 12) < eps


def delta_mse(
    accepted,
    y_pred,
    y_true,
    alpha: float,
    eps: float = EPSILON,
    method: str = "",
    seed: int = 0,
    dataset: str = "",
) -> EvaluationRecord:
    """Evaluate one selection against the full-coverage predictions.

    ``accepted`` is a boolean mask or a list of selective predictions;
    ``y_pred`` holds the predictor's value for every row.
    """
    mask = _accepted_mask(accepted)
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if not (mask.shape == y_pred.shape == y_true.shape):
        raise MetricsError("mask, predictions and targets must align")
    if mask.size == 0:
        raise MetricsError("empty evaluation set")
    sq = (y_true - y_pred) ** 2
    mse_full = float(sq.mean())
    if mse_full == 0:
        raise MetricsError("degenerate perfect predictor: full-coverage MSE is 0")
    n_acc = int(mask.sum())
    actual = n_acc / mask.size
    mse_acc = float(sq[mask].mean()) if n_acc else math.nan
    ok = cov_sat(alpha, actual, eps)
    delta = mse_acc / mse_full - 1.0 if ok else 0.0
    return EvaluationRecord(method, alpha, actual, mse_full, mse_acc, delta, ok, n_acc, mask.size, seed, dataset)


def risk_coverage_curve(
    model, X_test, y_test, grid: Sequence[float] = FULL_GRID, eps: float = EPSILON, seed: int = 0, dataset: str = ""
) -> list[EvaluationRecord]:
    """One record per target coverage, re-deriving the threshold each time.

    Scores and predictions are computed once; GoldCase scores use labels.
    """
    y_test = np.asarray(y_test, dtype=float)
    needs_labels = model.method == "goldcase"
    y_pred, scores, _ = model.select(X_test, y_test if needs_labels else None)
    out = []
    for alpha in grid:
        m = model.with_coverage(alpha)
        out.append(delta_mse(scores <= m.tau, y_pred, y_test, alpha, eps, model.method, seed, dataset))
    return out


def write_records_csv(records: Sequence[EvaluationRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            row = r.as_row()
            for k, v in row.items():
                if isinstance(v, float):
                    row[k] = repr(v)
            w.writerow(row)


def read_records_csv(path) -> list[EvaluationRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EvaluationRecord(
                    method=row["method"],
                    target_coverage=float(row["target_coverage"]),
                    actual_coverage=float(row["actual_coverage"]),
                    mse_full=float(row["mse_full"]),
                    mse_accepted=float(row["mse_accepted"]),
                    delta_mse=float(row["delta_mse"]),
                    cov_ok=row["cov_ok"] == "True",
                    n_accepted=int(row["n_accepted"]),
                    n_total=int(row["n_total"]),
                    seed=int(row["seed"]),
                    dataset=row["dataset"],
                )
            )
    return out


# ------------------------------------------------------------ rank analysis


@dataclass(frozen=True)
class RankSummary:
    methods: tuple[str, ...]
    mean_ranks: tuple[float, ...]
    cd: float
    n_datasets: int
    k: int
    friedman_statistic: float
    friedman_pvalue: float
    not_separated: tuple[tuple[str, str], ...]

    def rank_of(self, method: str) -> float:
        return self.mean_ranks[self.methods.index(method)]


def nemenyi_q(k: int, significance: float = 0.05) -> float:
    if significance not in NEMENYI_Q:
        raise MetricsError(f"no Nemenyi table for significance {significance}")
    if not 2 <= k <= 10:
        raise MetricsError("Nemenyi table covers 2 <= k <= 10 methods")
    return NEMENYI_Q[significance][k - 2]


def friedman_nemenyi(table, methods: Sequence[str] | None = None, significance: float = 0.05) -> RankSummary:
    """Rank methods per dataset (1 = lowest value) and compute the Nemenyi CD.

    ``table`` is datasets x methods; ties share their average rank.
    """
    T = np.asarray(table, dtype=float)
    if T.ndim != 2:
        raise MetricsError("table must be datasets x methods")
    N, k = T.shape
    if N < 2 or k < 2:
        raise MetricsError("need at least 2 datasets and 2 methods")
    if not np.all(np.isfinite(T)):
        raise MetricsError("table has missing cells")
    methods = tuple(methods) if methods is not None else tuple(f"m{j}" for j in range(k))
    if len(methods) != k:
        raise MetricsError("method names do not match table width")
    ranks = np.apply_along_axis(stats.rankdata, 1, T)
    mean_ranks = ranks.mean(axis=0)
    cd = nemenyi_q(k, significance) * math.sqrt(k * (k + 1) / (6.0 * N))

    # Friedman chi-square with tie correction
    ssr = N * np.sum((mean_ranks - (k + 1) / 2) ** 2)
    ties = sum(np.sum(c**3 - c) for c in (np.unique(r, return_counts=True)[1] for r in ranks))
    denom = k * (k + 1) / 12.0 - ties / (12.0 * N * (k - 1))
    if denom > 0:
        chi2 = float(ssr / denom)
        pvalue = float(stats.chi2.sf(chi2, k - 1))
    else:
        chi2, pvalue = 0.0, 1.0

    close = tuple(
        (methods[i], methods[j])
        for i in range(k)
        for j in range(i + 1, k)
        if abs(mean_ranks[i] - mean_ranks[j]) < cd
    )
    return RankSummary(methods, tuple(float(r) for r in mean_ranks), cd, N, k, chi2, pvalue, close)
