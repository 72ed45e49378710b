"""Base learners written from scratch behind one ``fit``/``predict`` surface.

Regressors: ordinary least squares, CART tree, random forest and
squared-error gradient boosting. Classifier: L2-regularised logistic
regression, used as the audit model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import _tree

SERIAL_VERSION = 1

KINDS = ("linear", "tree", "forest", "gbt", "logistic")

DEFAULTS: dict[str, dict[str, Any]] = {
    "linear": {},
    "tree": {"max_depth": None, "min_samples_leaf": 1},
    "forest": {
        "n_trees": 100,
        "feature_fraction": 1 / 3,
        "bootstrap": True,
        "max_depth": None,
        "min_samples_leaf": 1,
    },
    "gbt": {"n_rounds": 100, "learning_rate": 0.3, "max_depth": 6, "min_samples_leaf": 1},
    "logistic": {"l2_strength": 1.0, "max_iterations": 1000, "tolerance": 1e-6},
}


class LearnerError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LearnerError(f"unknown learner kind {self.kind!r}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise LearnerError(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        hp = self.hyperparameters
        for key in ("n_trees", "n_rounds", "min_samples_leaf", "max_iterations"):
            if key in hp and int(hp[key]) < 1:
                raise LearnerError(f"{key} must be >= 1")
        if hp.get("max_depth") is not None and int(hp["max_depth"]) < 0:
            raise LearnerError("max_depth must be >= 0 or None")
        if "feature_fraction" in hp and not 0 < hp["feature_fraction"] <= 1:
            raise LearnerError("feature_fraction must lie in (0, 1]")
        if "learning_rate" in hp and not hp["learning_rate"] > 0:
            raise LearnerError("learning_rate must be > 0")
        if "l2_strength" in hp and hp["l2_strength"] < 0:
            raise LearnerError("l2_strength must be >= 0")

    @property
    def hyperparameters(self) -> dict[str, Any]:
        return {**DEFAULTS[self.kind], **self.params}

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LearnerSpec":
        return cls(d["kind"], dict(d.get("params", {})))


def _check_X(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise LearnerError("X must be a 2-D matrix")
    if n_features is not None and X.shape[1] != n_features:
        raise LearnerError(f"expected {n_features} columns, got {X.shape[1]}")
    return X


class FittedModel:
    """Common base: a trained learner with a deterministic ``predict``."""

    kind: str = ""

    def __init__(self, spec: LearnerSpec, n_features: int, n_train: int):
        self.spec = spec
        self.n_features = n_features
        self.n_train = n_train

    def predict(self, X) -> np.ndarray:
        raise NotImplementedError

    def _params(self) -> dict[str, Any]:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": SERIAL_VERSION,
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "n_features": self.n_features,
            "n_train": self.n_train,
            "params": self._params(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class LinearModel(FittedModel):
    kind = "linear"

    def __init__(self, spec, coef, intercept, n_train):
        super().__init__(spec, len(coef), n_train)
        self.coef = np.asarray(coef, dtype=float)
        self.intercept = float(intercept)

    def predict(self, X):
        X = _check_X(X, self.n_features)
        return X @ self.coef + self.intercept

    def _params(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept}


class TreeModel(FittedModel):
    kind = "tree"

    def __init__(self, spec, n_features, n_train, feature, threshold, left, right, value):
        super().__init__(spec, n_features, n_train)
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X):
        X = _check_X(X, self.n_features)
        return _tree.predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def _params(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }


class ForestModel(FittedModel):
    kind = "forest"

    def __init__(self, spec, n_features, n_train, trees):
        super().__init__(spec, n_features, n_train)
        self.trees = list(trees)

    def member_predictions(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X):
        return self.member_predictions(X).mean(axis=0)

    def _params(self):
        return {"trees": [t._params() for t in self.trees]}


class GBTModel(FittedModel):
    kind = "gbt"

    def __init__(self, spec, n_features, n_train, init, learning_rate, trees, train_mse=()):
        super().__init__(spec, n_features, n_train)
        self.init = float(init)
        self.learning_rate = float(learning_rate)
        self.trees = list(trees)
        # training MSE after each boosting round, index 0 = constant init
        self.train_mse = list(train_mse)

    def predict(self, X):
        X = _check_X(X, self.n_features)
        out = np.full(X.shape[0], self.init)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def _params(self):
        return {
            "init": self.init,
            "learning_rate": self.learning_rate,
            "trees": [t._params() for t in self.trees],
        }


class LogisticModel(FittedModel):
    kind = "logistic"

    def __init__(self, spec, coef, intercept, n_train, n_iter=0):
        super().__init__(spec, len(coef), n_train)
        self.coef = np.asarray(coef, dtype=float)
        self.intercept = float(intercept)
        self.n_iter = n_iter

    def decision_function(self, X):
        X = _check_X(X, self.n_features)
        return X @ self.coef + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(float)

    def _params(self):
        return {"coef": self.coef.tolist(), "intercept": self.intercept}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


# ---------------------------------------------------------------- fitting


def _fit_linear(spec, X, y):
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc + 1e-8 * np.eye(X.shape[1])
    coef = np.linalg.solve(gram, Xc.T @ (y - y_mean))
    return LinearModel(spec, coef, y_mean - x_mean @ coef, len(y))


def _tree_arrays(X, y, sorted_ids, max_depth, min_samples_leaf, n_sub, seed):
    depth = -1 if max_depth is None else int(max_depth)
    return _tree.build_tree(X, y, sorted_ids, depth, int(min_samples_leaf), int(n_sub), int(seed))


def _fit_tree(spec, X, y, seed, ids=None, n_sub=None, sorted_ids=None):
    hp = spec.hyperparameters
    d = X.shape[1]
    if sorted_ids is None:
        sorted_ids = _tree.presort(X, np.arange(len(y)) if ids is None else ids)
    f, thr, lft, rgt, val, _ = _tree_arrays(
        X, y, sorted_ids, hp["max_depth"], hp["min_samples_leaf"], d if n_sub is None else n_sub, seed
    )
    return TreeModel(spec, d, sorted_ids.shape[1], f, thr, lft, rgt, val)


def spawn_seeds(seed, count) -> list[int]:
    """``count`` independent 32-bit child seeds derived from ``seed``."""
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(count)]


def _fit_forest(spec, X, y, seed):
    hp = spec.hyperparameters
    n, d = X.shape
    n_sub = max(1, int(np.floor(hp["feature_fraction"] * d)))
    tree_spec = LearnerSpec(
        "tree", {"max_depth": hp["max_depth"], "min_samples_leaf": hp["min_samples_leaf"]}
    )
    trees = []
    for s in spawn_seeds(seed, hp["n_trees"]):
        rng = np.random.default_rng(s)
        ids = rng.integers(0, n, size=n) if hp["bootstrap"] else np.arange(n)
        trees.append(_fit_tree(tree_spec, X, y, s, ids=ids, n_sub=n_sub))
    return ForestModel(spec, d, n, trees)


def _fit_gbt(spec, X, y):
    hp = spec.hyperparameters
    n, d = X.shape
    tree_spec = LearnerSpec(
        "tree", {"max_depth": hp["max_depth"], "min_samples_leaf": hp["min_samples_leaf"]}
    )
    lr = float(hp["learning_rate"])
    init = float(y.mean())
    pred = np.full(n, init)
    history = [float(np.mean((y - pred) ** 2))]
    trees = []
    # features never change between rounds: sort once, copy per tree
    presorted = _tree.presort(X, np.arange(n))
    for _ in range(int(hp["n_rounds"])):
        resid = y - pred
        tree = _fit_tree(tree_spec, X, resid, 0, sorted_ids=presorted.copy())
        pred = pred + lr * tree.predict(X)
        trees.append(tree)
        history.append(float(np.mean((y - pred) ** 2)))
    return GBTModel(spec, d, n, init, lr, trees, history)


def logistic_objective(w, b, X, y, l2):
    """Penalised negative log-likelihood, summed over rows; intercept unpenalised."""
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.sum(np.logaddexp(0.0, z) - y * z)
    return float(loss + 0.5 * l2 * w @ w)


def logistic_gradient(w, b, X, y, l2):
    p = _sigmoid(X @ w + b)
    r = p - y
    return X.T @ r + l2 * w, float(r.sum())


def _fit_logistic(spec, X, y):
    hp = spec.hyperparameters
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise LearnerError("logistic targets must be 0/1")
    if len(classes) < 2:
        raise LearnerError("logistic regression needs both classes present")
    l2 = float(hp["l2_strength"])
    tol = float(hp["tolerance"])
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    penalty = np.full(d + 1, l2)
    penalty[-1] = 0.0
    obj = logistic_objective(theta[:-1], theta[-1], X, y, l2)
    it = 0
    # damped Newton: each step is a gradient step preconditioned by the Hessian
    for it in range(1, int(hp["max_iterations"]) + 1):
        p = _sigmoid(A @ theta)
        grad = A.T @ (p - y) + penalty * theta
        if np.max(np.abs(grad)) <= tol:
            break
        W = p * (1.0 - p)
        hess = (A * W[:, None]).T @ A + np.diag(penalty) + 1e-10 * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            new_obj = logistic_objective(cand[:-1], cand[-1], X, y, l2)
            if new_obj <= obj - 1e-4 * t * grad @ step or t < 1e-10:
                break
            t *= 0.5
        stalled = t < 1e-10
        theta, obj = cand, new_obj
        if stalled:
            break
    return LogisticModel(spec, theta[:-1], theta[-1], n, it)


def fit(spec: LearnerSpec, X, y, seed: int = 0) -> FittedModel:
    """Train ``spec`` on ``(X, y)``; ``seed`` drives forest resampling only."""
    X = _check_X(X)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise LearnerError("X and y have mismatched row counts")
    if X.shape[0] < 2:
        raise LearnerError("need at least 2 training rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise LearnerError("non-finite values in training data")
    X = np.ascontiguousarray(X)
    if spec.kind == "linear":
        return _fit_linear(spec, X, y)
    if spec.kind == "tree":
        return _fit_tree(spec, X, y, seed)
    if spec.kind == "forest":
        return _fit_forest(spec, X, y, seed)
    if spec.kind == "gbt":
        return _fit_gbt(spec, X, y)
    return _fit_logistic(spec, X, y)


def predict(model: FittedModel, X) -> np.ndarray:
    return model.predict(X)


def predict_proba(model: FittedModel, X) -> np.ndarray:
    if not isinstance(model, LogisticModel):
        raise LearnerError(f"predict_proba needs a logistic model, got {model.kind}")
    return model.predict_proba(X)


# ---------------------------------------------------------- serialization


def _tree_from_params(spec, n_features, n_train, p):
    return TreeModel(
        spec, n_features, n_train, p["feature"], p["threshold"], p["left"], p["right"], p["value"]
    )


def model_from_dict(d: dict[str, Any]) -> FittedModel:
    if d.get("version") != SERIAL_VERSION:
        raise LearnerError(f"unsupported model version {d.get('version')!r}")
    spec = LearnerSpec.from_dict(d["spec"])
    p = d["params"]
    nf, nt = d["n_features"], d["n_train"]
    kind = d["kind"]
    if kind == "linear":
        return LinearModel(spec, p["coef"], p["intercept"], nt)
    if kind == "logistic":
        return LogisticModel(spec, p["coef"], p["intercept"], nt)
    if kind == "tree":
        return _tree_from_params(spec, nf, nt, p)
    tree_spec = LearnerSpec("tree")
    trees = [_tree_from_params(tree_spec, nf, nt, t) for t in p["trees"]]
    if kind == "forest":
        return ForestModel(spec, nf, nt, trees)
    if kind == "gbt":
        return GBTModel(spec, nf, nt, p["init"], p["learning_rate"], trees)
    raise LearnerError(f"unknown model kind {kind!r}")


def model_from_json(text: str) -> FittedModel:
    return model_from_dict(json.loads(text))
