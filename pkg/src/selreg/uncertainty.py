"""Bootstrap-ensemble uncertainty.

For an input ``x`` the uncertainty set is the cross-sum of member deviations
``f_b(x) - mean_b f_b(x)`` with the recentred out-of-bag residual pool. Its
quantiles give prediction intervals and its variance a scalar score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .learners import FittedModel, LearnerSpec, fit, model_from_dict, spawn_seeds

MAX_SET_SIZE = 10_000


class UncertaintyError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintySet:
    values: np.ndarray
    center: float


def default_n_bootstraps(n_train: int) -> int:
    return max(2, math.isqrt(n_train))


def quantile(values, q):
    """Linear interpolation between order statistics, ``h = (m - 1) q``."""
    return np.quantile(values, q, axis=-1, method="linear")


class BootstrapEnsemble:
    def __init__(self, members, member_row_masks, residual_pool, max_set_size=MAX_SET_SIZE, seed=0):
        self.members: list[FittedModel] = list(members)
        self.member_row_masks = np.asarray(member_row_masks, dtype=bool)
        self.residual_pool = np.asarray(residual_pool, dtype=float)
        self.max_set_size = int(max_set_size)
        self.seed = int(seed)
        size = self.B * len(self.residual_pool)
        if size > self.max_set_size:
            rng = np.random.default_rng(self.seed)
            flat = np.sort(rng.choice(size, self.max_set_size, replace=False))
            self._pairs = np.divmod(flat, len(self.residual_pool))
        else:
            self._pairs = None

    @property
    def B(self) -> int:
        return len(self.members)

    @property
    def subsampled(self) -> bool:
        return self._pairs is not None

    def member_predictions(self, X) -> np.ndarray:
        """Array of shape (B, n_rows)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([m.predict(X) for m in self.members])

    def predict(self, X) -> np.ndarray:
        return self.member_predictions(X).mean(axis=0)

    def _deviations(self, X):
        preds = self.member_predictions(X)
        center = preds.mean(axis=0)
        return (preds - center).T, center

    def _set_values(self, dev):
        """Rows of uncertainty-set values for a (n_rows, B) deviation matrix."""
        pool = self.residual_pool
        if self._pairs is None:
            return (dev[:, :, None] + pool[None, None, :]).reshape(dev.shape[0], -1)
        b_idx, r_idx = self._pairs
        return dev[:, b_idx] + pool[r_idx]

    def c_set(self, x) -> UncertaintySet:
        dev, center = self._deviations(np.asarray(x, dtype=float).reshape(1, -1))
        return UncertaintySet(self._set_values(dev)[0], float(center[0]))

    def interval(self, X, lo_q=0.025, hi_q=0.975, chunk=256):
        """Per-row (lower, upper) arrays: centre plus set quantiles."""
        if not 0 < lo_q < hi_q < 1:
            raise UncertaintyError("need 0 < lo_q < hi_q < 1")
        dev, center = self._deviations(X)
        lower = np.empty(len(center))
        upper = np.empty(len(center))
        for s in range(0, len(center), chunk):
            vals = self._set_values(dev[s : s + chunk])
            q = quantile(vals, [lo_q, hi_q])
            lower[s : s + chunk] = q[0]
            upper[s : s + chunk] = q[1]
        return center + lower, center + upper

    def variance(self, X) -> np.ndarray:
        """Population variance of the full (never subsampled) uncertainty set.

        Both summands are centred, so the cross-sum variance splits exactly
        into member-deviation variance plus pool variance.
        """
        dev, _ = self._deviations(X)
        return dev.var(axis=1) + self.residual_pool.var()

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "members": [m.to_dict() for m in self.members],
            "member_row_masks": self.member_row_masks.astype(int).tolist(),
            "residual_pool": self.residual_pool.tolist(),
            "max_set_size": self.max_set_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapEnsemble":
        return cls(
            [model_from_dict(m) for m in d["members"]],
            np.array(d["member_row_masks"], dtype=bool),
            d["residual_pool"],
            d["max_set_size"],
            d["seed"],
        )


def fit_ensemble(
    spec: LearnerSpec,
    X_train,
    y_train,
    B: int | None = None,
    seed: int = 0,
    max_set_size: int = MAX_SET_SIZE,
) -> BootstrapEnsemble:
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train, dtype=float)
    n = len(y)
    if n < 4:
        raise UncertaintyError("need at least 4 training rows")
    B = default_n_bootstraps(n) if B is None else int(B)
    if B < 2:
        raise UncertaintyError("need at least 2 bootstrap members")
    seeds = spawn_seeds(seed, B + 1)
    members, masks, oob_preds = [], np.zeros((B, n), dtype=bool), np.zeros((B, n))
    for b in range(B):
        ids = np.random.default_rng(seeds[b]).integers(0, n, size=n)
        masks[b, ids] = True
        model = fit(spec, X[ids], y[ids], seed=seeds[b])
        members.append(model)
        oob_preds[b] = model.predict(X)
    out_of_bag = ~masks
    n_oob = out_of_bag.sum(axis=0)
    usable = n_oob > 0
    if usable.sum() < 2:
        raise UncertaintyError("insufficient OOB residuals")
    oob_mean = (oob_preds * out_of_bag).sum(axis=0)[usable] / n_oob[usable]
    pool = y[usable] - oob_mean
    pool = pool - pool.mean()
    return BootstrapEnsemble(members, masks, pool, max_set_size, seeds[B])


def c_set(ensemble: BootstrapEnsemble, x) -> UncertaintySet:
    return ensemble.c_set(x)


def interval(ensemble: BootstrapEnsemble, x, lo_q=0.025, hi_q=0.975):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        lo, hi = ensemble.interval(x.reshape(1, -1), lo_q, hi_q)
        return float(lo[0]), float(hi[0])
    return ensemble.interval(x, lo_q, hi_q)


def variance(ensemble: BootstrapEnsemble, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(ensemble.variance(x.reshape(1, -1))[0])
    return ensemble.variance(x)
