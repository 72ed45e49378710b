"""Selective regressors: uncertainty scorers, threshold calibration and the
builders for every benchmarked method.

Scores are uncertainties: a row is accepted when ``score <= tau``, with
ties accepted. The confidence of a prediction is ``-score``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .learners import FittedModel, fit, model_from_dict, spawn_seeds
from .uncertainty import BootstrapEnsemble, fit_ensemble

METHODS = ("doubt_var", "doubt_int", "plugin", "scross", "cvplus", "goldcase")


class SelectiveError(ValueError):
    pass


# ------------------------------------------------------------------ scorers


class EnsembleScorer:
    """Variance (``doubt_var``) or 95% interval width (``doubt_int``) of the
    bootstrap uncertainty set."""

    def __init__(self, ensemble: BootstrapEnsemble, method="doubt_var", lo_q=0.025, hi_q=0.975):
        if method not in ("doubt_var", "doubt_int"):
            raise SelectiveError(f"not an ensemble method: {method}")
        self.ensemble = ensemble
        self.method = method
        self.lo_q, self.hi_q = lo_q, hi_q

    def score(self, X, y=None):
        if self.method == "doubt_var":
            return self.ensemble.variance(X)
        lo, hi = self.ensemble.interval(X, self.lo_q, self.hi_q)
        return hi - lo

    def to_dict(self):
        return {"method": self.method, "ensemble": self.ensemble.to_dict(), "lo_q": self.lo_q, "hi_q": self.hi_q}


class ResidualScorer:
    """Score = prediction of a model fitted to squared residuals."""

    def __init__(self, residual_model: FittedModel, method: str):
        self.residual_model = residual_model
        self.method = method

    def score(self, X, y=None):
        return self.residual_model.predict(X)

    def to_dict(self):
        return {"method": self.method, "residual_model": self.residual_model.to_dict()}


class FoldMeanPredictor:
    def __init__(self, models):
        self.models = list(models)

    def fold_predictions(self, X) -> np.ndarray:
        return np.stack([m.predict(X) for m in self.models], axis=1)

    def predict(self, X):
        return self.fold_predictions(X).mean(axis=1)

    def to_dict(self):
        return {"fold_models": [m.to_dict() for m in self.models]}


def cvplus_ranks(n: int, level: float) -> tuple[int, int]:
    """1-based order-statistic ranks (lower, upper) for ``n`` residuals."""
    lo = math.floor((1 - level) * (n + 1) + 1e-9)
    hi = math.ceil(level * (n + 1) - 1e-9)
    if lo < 1 or hi > n:
        raise SelectiveError(f"n_train={n} too small for CV+ intervals at level {level}")
    return lo, hi


class CVPlusScorer:
    """Width of the CV+ prediction interval."""

    method = "cvplus"

    def __init__(self, predictor: FoldMeanPredictor, residuals, fold_of, level=0.95):
        self.predictor = predictor
        self.residuals = np.asarray(residuals, dtype=float)
        self.fold_of = np.asarray(fold_of, dtype=int)
        self.level = float(level)
        self.ranks = cvplus_ranks(len(self.residuals), self.level)

    def interval(self, X, chunk=256):
        P = self.predictor.fold_predictions(np.atleast_2d(np.asarray(X, dtype=float)))
        lo_k, hi_k = self.ranks
        lower = np.empty(len(P))
        upper = np.empty(len(P))
        for s in range(0, len(P), chunk):
            shifted = P[s : s + chunk][:, self.fold_of]
            lower[s : s + chunk] = np.partition(shifted - self.residuals, lo_k - 1, axis=1)[:, lo_k - 1]
            upper[s : s + chunk] = np.partition(shifted + self.residuals, hi_k - 1, axis=1)[:, hi_k - 1]
        return lower, upper

    def score(self, X, y=None):
        lo, hi = self.interval(X)
        return hi - lo

    def to_dict(self):
        return {
            "method": self.method,
            "residuals": self.residuals.tolist(),
            "fold_of": self.fold_of.tolist(),
            "level": self.level,
        }


class GoldCaseScorer:
    """Oracle score: the true squared residual; needs labels."""

    method = "goldcase"

    def __init__(self, predictor):
        self.predictor = predictor

    def score(self, X, y=None):
        if y is None:
            raise SelectiveError("goldcase scoring needs true labels")
        return (np.asarray(y, dtype=float) - self.predictor.predict(X)) ** 2

    def to_dict(self):
        return {"method": self.method}


# -------------------------------------------------------------- calibration


def threshold(scores, alpha: float) -> float:
    """Empirical ``alpha``-quantile of ``scores`` (linear interpolation)."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise SelectiveError("empty calibration set")
    if not 0 < alpha <= 1:
        raise SelectiveError("alpha must lie in (0, 1]")
    return float(np.quantile(scores, alpha, method="linear"))


def calibrate(scorer, X_cal, alpha: float, y_cal=None) -> float:
    X_cal = np.asarray(X_cal, dtype=float)
    if X_cal.shape[0] == 0:
        raise SelectiveError("empty calibration set")
    return threshold(scorer.score(X_cal, y_cal), alpha)


@dataclass(frozen=True)
class SelectivePrediction:
    accepted: bool
    value: float | None
    score: float


@dataclass(frozen=True)
class SelectiveModel:
    method: str
    predictor: object
    scorer: object
    alpha: float
    tau: float
    cal_scores: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def with_coverage(self, alpha: float) -> "SelectiveModel":
        """Same scorer, threshold re-derived from the stored calibration scores."""
        return replace(self, alpha=alpha, tau=threshold(self.cal_scores, alpha))

    def with_threshold(self, tau: float) -> "SelectiveModel":
        return replace(self, tau=float(tau))

    def score(self, X, y=None) -> np.ndarray:
        return self.scorer.score(X, y)

    def select(self, X, y=None):
        """Vectorised (values, scores, accepted) for every row of ``X``."""
        scores = self.score(X, y)
        return self.predictor.predict(X), scores, scores <= self.tau

    def accept(self, X, y=None) -> np.ndarray:
        return self.score(X, y) <= self.tau

    def to_dict(self) -> dict:
        predictor = self.predictor.to_dict() if hasattr(self.predictor, "to_dict") else None
        return {
            "method": self.method,
            "alpha": self.alpha,
            "tau": self.tau,
            "predictor": predictor,
            "scorer": self.scorer.to_dict(),
            "cal_scores": np.asarray(self.cal_scores).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _calibrated(method, predictor, scorer, X_cal, alpha, y_cal=None) -> SelectiveModel:
    X_cal = np.asarray(X_cal, dtype=float)
    if X_cal.shape[0] < 2:
        raise SelectiveError("need at least 2 calibration rows")
    scores = scorer.score(X_cal, y_cal)
    return SelectiveModel(method, predictor, scorer, alpha, threshold(scores, alpha), scores)


# ----------------------------------------------------------------- builders


def build_doubt(method, spec, X_train, y_train, X_cal, alpha, seed=0, B=None, ensemble=None):
    if ensemble is None:
        ensemble = fit_ensemble(spec, X_train, y_train, B=B, seed=seed)
    return _calibrated(method, ensemble, EnsembleScorer(ensemble, method), X_cal, alpha)


def build_doubt_var(spec, X_train, y_train, X_cal, alpha, seed=0, B=None, ensemble=None):
    return build_doubt("doubt_var", spec, X_train, y_train, X_cal, alpha, seed, B, ensemble)


def build_doubt_int(spec, X_train, y_train, X_cal, alpha, seed=0, B=None, ensemble=None):
    return build_doubt("doubt_int", spec, X_train, y_train, X_cal, alpha, seed, B, ensemble)


def build_plugin(spec, X_train, y_train, X_cal, alpha, seed=0, residual_spec=None):
    """Residual model fitted on in-sample squared residuals of the predictor."""
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    s_f, s_g = spawn_seeds(seed, 2)
    f_hat = fit(spec, X, y, seed=s_f)
    resid = (y - f_hat.predict(X)) ** 2
    g_hat = fit(residual_spec or spec, X, resid, seed=s_g)
    return _calibrated("plugin", f_hat, ResidualScorer(g_hat, "plugin"), X_cal, alpha)


def kfold(n: int, K: int, seed: int = 0) -> np.ndarray:
    """Fold id per row: seeded shuffle, then near-equal contiguous folds."""
    if K < 2:
        raise SelectiveError("K must be >= 2")
    if n < K:
        raise SelectiveError(f"cannot form {K} non-empty folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    for k, part in enumerate(np.array_split(perm, K)):
        fold_of[part] = k
    return fold_of


def _cross_fit(spec, X, y, K, seed):
    s_split, *s_models = spawn_seeds(seed, K + 1)
    fold_of = kfold(len(y), K, s_split)
    models, oof = [], np.empty(len(y))
    for k in range(K):
        out = fold_of == k
        m = fit(spec, X[~out], y[~out], seed=s_models[k])
        models.append(m)
        oof[out] = m.predict(X[out])
    return models, oof, fold_of


def build_scross(spec, X_train, y_train, X_cal, alpha, K=5, seed=0, residual_spec=None):
    """Residual model fitted on out-of-fold squared residuals; predictor refit on all rows."""
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    s_cv, s_f, s_g = spawn_seeds(seed, 3)
    _, oof, _ = _cross_fit(spec, X, y, K, s_cv)
    g_hat = fit(residual_spec or spec, X, (y - oof) ** 2, seed=s_g)
    f_hat = fit(spec, X, y, seed=s_f)
    return _calibrated("scross", f_hat, ResidualScorer(g_hat, "scross"), X_cal, alpha)


def build_cvplus(spec, X_train, y_train, X_cal, alpha, K=5, level=0.95, seed=0):
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    cvplus_ranks(len(y), level)
    models, oof, fold_of = _cross_fit(spec, X, y, K, seed)
    predictor = FoldMeanPredictor(models)
    scorer = CVPlusScorer(predictor, np.abs(y - oof), fold_of, level)
    return _calibrated("cvplus", predictor, scorer, X_cal, alpha)


def build_goldcase(predictor, X_test, y_test, alpha) -> SelectiveModel:
    """Label-using oracle calibrated on the very rows it will be scored on."""
    return _calibrated("goldcase", predictor, GoldCaseScorer(predictor), X_test, alpha, y_test)


def predict_selective(model: SelectiveModel, X, y=None) -> list[SelectivePrediction]:
    values, scores, accepted = model.select(X, y)
    return [
        SelectivePrediction(bool(a), float(v) if a else None, float(s))
        for v, s, a in zip(values, scores, accepted)
    ]


def write_predictions_csv(preds: list[SelectivePrediction], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "score", "accepted", "value"])
        for i, p in enumerate(preds):
            w.writerow([i, repr(p.score), int(p.accepted), "" if p.value is None else repr(p.value)])


def selective_from_dict(d: dict) -> SelectiveModel:
    """Rebuild a serialised selective model. GoldCase is not reloadable."""
    sc = d["scorer"]
    method = d["method"]
    if method in ("doubt_var", "doubt_int"):
        ensemble = BootstrapEnsemble.from_dict(sc["ensemble"])
        predictor, scorer = ensemble, EnsembleScorer(ensemble, method, sc["lo_q"], sc["hi_q"])
    elif method in ("plugin", "scross"):
        predictor = model_from_dict(d["predictor"])
        scorer = ResidualScorer(model_from_dict(sc["residual_model"]), method)
    elif method == "cvplus":
        predictor = FoldMeanPredictor([model_from_dict(m) for m in d["predictor"]["fold_models"]])
        scorer = CVPlusScorer(predictor, sc["residuals"], sc["fold_of"], sc["level"])
    else:
        raise SelectiveError(f"cannot reload method {method!r}")
    return SelectiveModel(
        method, predictor, scorer, float(d["alpha"]), float(d["tau"]), np.array(d["cal_scores"], dtype=float)
    )
