"""Explaining accept/reject decisions.

An audit classifier learns the selection rule on a validation split; its
acceptance log-odds (or probability) is attributed to features with interventional
Shapley values, and distribution shifts are summarised by the 1-D
Wasserstein distance between Shapley samples before and after the shift.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .dataset import gaussian_shift
from .learners import FittedModel, LearnerSpec, LinearModel, LogisticModel, _sigmoid, fit, spawn_seeds

MAX_EXACT_FEATURES = 12
OUTPUTS = ("log_odds", "probability")


class ExplainError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ExplainError("AUC needs both classes")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class AuditModel:
    classifier: FittedModel
    feature_names: list[str]
    train_auc: float

    def predict_proba(self, X) -> np.ndarray:
        return self.classifier.predict_proba(X)

    def decision_function(self, X) -> np.ndarray:
        return self.classifier.decision_function(X)

    def __call__(self, X) -> np.ndarray:
        return self.predict_proba(X)


def fit_audit(X_val, accept_labels, spec: LearnerSpec | None = None, feature_names=None, seed=0) -> AuditModel:
    """Fit a classifier imitating the selection rule (1 = accepted)."""
    X_val = np.asarray(X_val, dtype=float)
    y = np.asarray(accept_labels).astype(float)
    if len(np.unique(y)) < 2:
        raise ExplainError("selection degenerate on validation split")
    clf = fit(spec or LearnerSpec("logistic"), X_val, y, seed=seed)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X_val.shape[1])]
    return AuditModel(clf, names, auc(clf.predict_proba(X_val), y))


# ----------------------------------------------------------------- Shapley


@dataclass
class ShapleyAttribution:
    values: np.ndarray
    base_value: float
    std_errors: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# base_value={self.base_value!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            names = self.feature_names or [f"x{j}" for j in range(self.values.shape[1])]
            w.writerow(names)
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])

    def beeswarm_json(self, X) -> str:
        """Per-feature (feature value, attribution) pairs for plotting."""
        X = np.asarray(X, dtype=float)
        names = self.feature_names or [f"x{j}" for j in range(self.values.shape[1])]
        return json.dumps(
            {n: [[float(X[i, j]), float(self.values[i, j])] for i in range(len(X))] for j, n in enumerate(names)}
        )


def _output_fn(model, output="log_odds") -> Callable[[np.ndarray], np.ndarray]:
    if output not in OUTPUTS:
        raise ExplainError(f"unknown Shapley output {output!r}")
    if output == "log_odds" and hasattr(model, "decision_function"):
        return model.decision_function
    if hasattr(model, "predict_proba"):
        return model.predict_proba
    if callable(model):
        return model
    return model.predict


def _coalition_value(f, X, background, mask, chunk=200_000):
    """Mean model output with features in ``mask`` from X, the rest from background."""
    n, d = X.shape
    m = background.shape[0]
    out = np.empty(n)
    rows = max(1, chunk // m)
    for s in range(0, n, rows):
        xs = X[s : s + rows]
        hybrid = np.where(mask, xs[:, None, :], background[None, :, :]).reshape(-1, d)
        out[s : s + rows] = f(hybrid).reshape(len(xs), m).mean(axis=1)
    return out


def _linear_link(model, output="log_odds"):
    """(coef, intercept, link) when the output is link(X @ coef + intercept)."""
    clf = getattr(model, "classifier", model)
    if isinstance(clf, LogisticModel):
        return clf.coef, clf.intercept, (None if output == "log_odds" else _sigmoid)
    if isinstance(clf, LinearModel):
        return clf.coef, clf.intercept, None
    return None


def _linear_coalition_value(coef, intercept, link, X, background, mask, chunk=200_000):
    # score splits into an explained-row part and a background part
    cx = X[:, mask] @ coef[mask]
    cz = background[:, ~mask] @ coef[~mask] + intercept
    if link is None:
        return cx + cz.mean()
    out = np.empty(len(X))
    rows = max(1, chunk // len(cz))
    for s in range(0, len(X), rows):
        out[s : s + rows] = link(cx[s : s + rows, None] + cz[None, :]).mean(axis=1)
    return out


def _exact(f, X, background, linear=None):
    n, d = X.shape
    if d > MAX_EXACT_FEATURES:
        raise ExplainError(f"exact Shapley supports at most {MAX_EXACT_FEATURES} features")
    bits = 1 << np.arange(d)
    masks = (np.arange(2**d)[:, None] & bits) > 0
    if linear is not None:
        v = np.stack([_linear_coalition_value(*linear, X, background, mk) for mk in masks], axis=1)
    else:
        v = np.stack([_coalition_value(f, X, background, mk) for mk in masks], axis=1)
    size = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])
    phi = np.zeros((n, d))
    for j in range(d):
        without = np.nonzero(~masks[:, j])[0]
        phi[:, j] = (v[:, without | bits[j]] - v[:, without]) @ weight[size[without]]
    return phi, float(v[0, 0])


def _permutation(f, X, background, samples, seed):
    n, d = X.shape
    phi = np.zeros((n, d))
    se = np.zeros((n, d))
    base = float(f(background).mean())
    for i, s in enumerate(spawn_seeds(seed, n)):
        rng = np.random.default_rng(s)
        perms = np.array([rng.permutation(d) for _ in range(samples)])
        # prefix masks: step t has the first t features of the permutation
        masks = np.zeros((samples, d + 1, d), dtype=bool)
        for t in range(1, d + 1):
            masks[:, t] = masks[:, t - 1]
            masks[np.arange(samples), t, perms[:, t - 1]] = True
        flat = masks.reshape(-1, d)
        hybrid = np.where(flat[:, None, :], X[i][None, None, :], background[None, :, :])
        v = f(hybrid.reshape(-1, d)).reshape(len(flat), -1).mean(axis=1).reshape(samples, d + 1)
        contrib = np.empty((samples, d))
        contrib[np.arange(samples)[:, None], perms] = np.diff(v, axis=1)
        phi[i] = contrib.mean(axis=0)
        se[i] = contrib.std(axis=0, ddof=1) / math.sqrt(samples) if samples > 1 else np.inf
    return phi, base, se


def shapley(
    model,
    X_explain,
    background,
    mode: str = "exact",
    samples: int = 1000,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
    output: str = "log_odds",
) -> ShapleyAttribution:
    """Interventional Shapley values of a model's output.

    The value of a coalition is the background-averaged output with the
    coalition's features taken from the explained row. ``exact`` enumerates
    all coalitions; ``permutation`` averages marginal contributions over
    ``samples`` seeded feature orderings and reports standard errors.

    For classifiers ``output`` selects the explained quantity: the
    log-odds (default; additive, does not saturate) or the probability.
    Other models are explained through ``predict`` or by being called.
    """
    X = np.atleast_2d(np.asarray(X_explain, dtype=float))
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if bg.shape[0] == 0:
        raise ExplainError("background set is empty")
    if bg.shape[1] != X.shape[1]:
        raise ExplainError("background and explained rows differ in width")
    f = _output_fn(model, output)
    names = list(feature_names) if feature_names is not None else list(getattr(model, "feature_names", []))
    if mode == "exact":
        phi, base = _exact(f, X, bg, _linear_link(model, output))
        return ShapleyAttribution(phi, base, None, names)
    if mode == "permutation":
        if samples < 1:
            raise ExplainError("need at least one permutation sample")
        phi, base, se = _permutation(f, X, bg, samples, seed)
        return ShapleyAttribution(phi, base, se, names)
    raise ExplainError(f"unknown Shapley mode {mode!r}")


# ------------------------------------------------------------- Wasserstein


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions: integral of |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ExplainError("Wasserstein distance needs nonempty samples")
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    gaps = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * gaps))


# ------------------------------------------------------------- shift study


@dataclass(frozen=True)
class ShiftRow:
    scenario: str
    feature: str
    mean_distance: float
    sd: float
    repeats: int
    mean_shapley_change: float


@dataclass
class ShiftReport:
    rows: list[ShiftRow]
    scenarios: dict[str, list[str]]
    accepted_after_shift: dict[str, float] = field(default_factory=dict)

    def table(self) -> list[ShiftRow]:
        """Univariate scenarios only, one row per shifted feature."""
        return [r for r in self.rows if self.scenarios.get(r.scenario) == [r.feature]]

    def distance(self, scenario: str, feature: str) -> float:
        for r in self.rows:
            if r.scenario == scenario and r.feature == feature:
                return r.mean_distance
        raise KeyError((scenario, feature))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "feature", "mean_distance", "sd", "repeats", "mean_shapley_change"])
            for r in self.rows:
                w.writerow([r.scenario, r.feature, repr(r.mean_distance), repr(r.sd), r.repeats, repr(r.mean_shapley_change)])


def shift_audit(
    selective,
    audit: AuditModel,
    X_test_accepted,
    features_to_shift: Sequence[str] | Mapping[str, Sequence[str]] | None = None,
    noise_mean: float = 5.0,
    noise_sd: float = 1.0,
    repeats: int = 5,
    seed: int = 0,
    background=None,
    mode: str = "exact",
    samples: int = 500,
    output: str = "log_odds",
) -> ShiftReport:
    """Shapley-distribution drift of the audit model under Gaussian shifts.

    ``features_to_shift`` is a list of feature names (one univariate
    scenario each; default every feature) or a mapping of scenario name to
    the features shifted jointly. Each scenario reports, for every feature,
    the W1 distance between its Shapley values on the original and shifted
    rows, as mean and sample sd over ``repeats`` seeded draws. The selective
    model's threshold stays fixed; its acceptance rate on shifted rows is
    recorded per scenario.
    """
    X = np.atleast_2d(np.asarray(X_test_accepted, dtype=float))
    if X.shape[0] == 0:
        raise ExplainError("no accepted rows to shift")
    names = list(audit.feature_names)
    if features_to_shift is None:
        scenarios = {n: [n] for n in names}
    elif isinstance(features_to_shift, Mapping):
        scenarios = {k: list(v) for k, v in features_to_shift.items()}
    else:
        scenarios = {n: [n] for n in features_to_shift}
    for feats in scenarios.values():
        for n in feats:
            if n not in names:
                raise ExplainError(f"unknown feature {n!r}")
    bg = X if background is None else np.asarray(background, dtype=float)

    rep_seeds = spawn_seeds(seed, repeats)
    dist = {k: np.zeros((repeats, len(names))) for k in scenarios}
    change = {k: np.zeros((repeats, len(names))) for k in scenarios}
    accepted = {k: [] for k in scenarios}
    base_phi = None
    for r, rs in enumerate(rep_seeds):
        if base_phi is None or mode != "exact":
            base_phi = shapley(audit, X, bg, mode, samples, rs, output=output).values
        for s_idx, (key, feats) in enumerate(scenarios.items()):
            if not feats:
                continue
            cols = [names.index(n) for n in feats]
            Xs = gaussian_shift(X, cols, noise_mean, noise_sd, seed=[rs, s_idx])
            phi = shapley(audit, Xs, bg, mode, samples, rs, output=output).values
            for j in range(len(names)):
                dist[key][r, j] = wasserstein_1d(base_phi[:, j], phi[:, j])
                change[key][r, j] = phi[:, j].mean() - base_phi[:, j].mean()
            if selective is not None:
                accepted[key].append(float(np.mean(selective.accept(Xs))))

    rows = []
    for key in scenarios:
        for j, n in enumerate(names):
            d = dist[key][:, j]
            rows.append(
                ShiftRow(
                    key,
                    n,
                    float(d.mean()),
                    float(d.std(ddof=1)) if repeats > 1 else 0.0,
                    repeats,
                    float(change[key][:, j].mean()),
                )
            )
    acc = {k: float(np.mean(v)) for k, v in accepted.items() if v}
    return ShiftReport(rows, scenarios, acc)
