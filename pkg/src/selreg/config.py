"""Experiment configuration: a strict JSON grammar validated before any work.

A config is a JSON object::

    {
      "datasets": [
        {"name": "het1", "generator": "heteroscedastic", "n": 2000, "d": 4,
         "noise_profile": "increasing", "noise_scale": 1.0, "seed": 1},
        {"name": "houses", "generator": "houses", "n": 6000, "seed": 0,
         "random_feature": true},
        {"name": "mine", "csv": "data.csv", "target": "y",
         "column_kinds": {"colour": "categorical"}}
      ],
      "methods": ["doubt_var", "doubt_int", "plugin", "scross", "cvplus", "goldcase"],
      "learner": {"kind": "gbt", "params": {}},
      "residual_learner": null,
      "coverages": [1.0, 0.99, ..., 0.5],
      "seeds": [0, 1, 2, 3, 4],
      "split": {"train": 0.6, "calibration": 0.2, "test": 0.2},
      "epsilon": 0.05, "K": 5, "B": null, "cvplus_level": 0.95,
      "out": "results",
      "audit": { ... see AUDIT_DEFAULTS ... }
    }

Every key is optional except ``datasets``; unknown keys anywhere are errors.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .dataset import AUDIT_SPLIT, DEFAULT_SPLIT
from .learners import DEFAULTS, KINDS, LearnerError, LearnerSpec
from .metrics import EPSILON, FULL_GRID
from .selective import METHODS

GENERATORS = {
    "heteroscedastic": {"n": 1000, "d": 5, "noise_profile": "increasing", "noise_scale": 1.0, "seed": 0},
    "houses": {"n": 6000, "seed": 0},
}
NOISE_PROFILES = ("increasing", "bump", "constant")

TOP_DEFAULTS: dict[str, Any] = {
    "methods": list(METHODS),
    "learner": {"kind": "gbt", "params": {}},
    "residual_learner": None,
    "coverages": list(FULL_GRID),
    "seeds": [0, 1, 2, 3, 4],
    "split": dict(DEFAULT_SPLIT),
    "epsilon": EPSILON,
    "K": 5,
    "B": None,
    "cvplus_level": 0.95,
    "out": None,
    "audit": None,
}

AUDIT_DEFAULTS: dict[str, Any] = {
    "dataset": None,  # name of an entry in "datasets"; default the first
    "method": "doubt_var",
    "coverage": 0.8,
    "audit_learner": {"kind": "logistic", "params": {}},
    "split": dict(AUDIT_SPLIT),
    "shift_features": None,  # null = every feature univariately
    "joint_shifts": {},
    "noise_mean": 5.0,
    "noise_sd": 1.0,
    "repeats": 5,
    "background_size": 200,
    "max_explained": None,
    "shapley_mode": "exact",
    "samples": 500,
    "output": "log_odds",
}


class ConfigError(ValueError):
    pass


def _check_keys(obj: dict, allowed, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _learner(obj, where: str) -> dict:
    _check_keys(obj, ("kind", "params"), where)
    kind = obj.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"{where}: unknown learner kind {kind!r}")
    params = dict(obj.get("params") or {})
    try:
        LearnerSpec(kind, params)
    except LearnerError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return {"kind": kind, "params": params}


def _dataset(obj, i: int) -> dict:
    where = f"datasets[{i}]"
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError(f"{where}: 'name' must be a nonempty string")
    if "csv" in obj:
        _check_keys(obj, ("name", "csv", "target", "column_kinds", "random_feature"), where)
        if not isinstance(obj["csv"], str) or not isinstance(obj.get("target"), str):
            raise ConfigError(f"{where}: csv datasets need string 'csv' and 'target'")
        kinds = obj.get("column_kinds") or {}
        if not isinstance(kinds, dict) or any(v not in ("numeric", "categorical") for v in kinds.values()):
            raise ConfigError(f"{where}: column_kinds values must be 'numeric' or 'categorical'")
        return {
            "name": name,
            "csv": obj["csv"],
            "target": obj["target"],
            "column_kinds": dict(sorted(kinds.items())),
            "random_feature": bool(obj.get("random_feature", False)),
        }
    gen = obj.get("generator")
    if gen not in GENERATORS:
        raise ConfigError(f"{where}: need 'csv' or a 'generator' in {sorted(GENERATORS)}")
    _check_keys(obj, ("name", "generator", "random_feature", *GENERATORS[gen]), where)
    out = {"name": name, "generator": gen, **GENERATORS[gen]}
    out.update({k: v for k, v in obj.items() if k in GENERATORS[gen]})
    out["random_feature"] = bool(obj.get("random_feature", False))
    if not _is_int(out["n"]) or out["n"] < 10:
        raise ConfigError(f"{where}: n must be an integer >= 10")
    if not _is_int(out["seed"]) or out["seed"] < 0:
        raise ConfigError(f"{where}: seed must be a nonnegative integer")
    if gen == "heteroscedastic":
        if not _is_int(out["d"]) or out["d"] < 1:
            raise ConfigError(f"{where}: d must be a positive integer")
        if out["noise_profile"] not in NOISE_PROFILES:
            raise ConfigError(f"{where}: noise_profile must be one of {NOISE_PROFILES}")
        if not _is_num(out["noise_scale"]) or out["noise_scale"] < 0:
            raise ConfigError(f"{where}: noise_scale must be >= 0")
    return out


def _split(obj, where: str) -> dict:
    if not isinstance(obj, dict) or not obj:
        raise ConfigError(f"{where}: expected a nonempty object of fractions")
    if not all(_is_num(v) and v > 0 for v in obj.values()):
        raise ConfigError(f"{where}: fractions must be positive numbers")
    if abs(sum(obj.values()) - 1.0) > 1e-9:
        raise ConfigError(f"{where}: fractions must sum to 1")
    return {str(k): float(v) for k, v in obj.items()}


def _coverage(v, where: str) -> float:
    if not _is_num(v) or not 0 < v <= 1:
        raise ConfigError(f"{where}: target coverage must lie in (0, 1]")
    return float(v)


def _audit(obj, names: list[str]) -> dict:
    _check_keys(obj, AUDIT_DEFAULTS, "audit")
    out = copy.deepcopy(AUDIT_DEFAULTS)
    out.update(copy.deepcopy(obj))
    if out["dataset"] is None:
        out["dataset"] = names[0]
    if out["dataset"] not in names:
        raise ConfigError(f"audit: unknown dataset {out['dataset']!r}")
    if out["method"] not in METHODS or out["method"] == "goldcase":
        raise ConfigError(f"audit: method must be one of {[m for m in METHODS if m != 'goldcase']}")
    out["coverage"] = _coverage(out["coverage"], "audit.coverage")
    out["audit_learner"] = _learner(out["audit_learner"], "audit.audit_learner")
    out["split"] = _split(out["split"], "audit.split")
    if set(out["split"]) != {"train", "calibration", "validation", "test"}:
        raise ConfigError("audit.split: needs train, calibration, validation and test")
    sf = out["shift_features"]
    if sf is not None and not (isinstance(sf, list) and all(isinstance(s, str) for s in sf)):
        raise ConfigError("audit.shift_features: expected null or a list of feature names")
    js = out["joint_shifts"]
    if not isinstance(js, dict) or not all(
        isinstance(v, list) and v and all(isinstance(s, str) for s in v) for v in js.values()
    ):
        raise ConfigError("audit.joint_shifts: expected an object of nonempty name lists")
    for key in ("noise_mean", "noise_sd"):
        if not _is_num(out[key]):
            raise ConfigError(f"audit.{key}: expected a number")
    if out["noise_sd"] < 0:
        raise ConfigError("audit.noise_sd: must be >= 0")
    for key, lo in (("repeats", 1), ("background_size", 1), ("samples", 1)):
        if not _is_int(out[key]) or out[key] < lo:
            raise ConfigError(f"audit.{key}: expected an integer >= {lo}")
    me = out["max_explained"]
    if me is not None and (not _is_int(me) or me < 1):
        raise ConfigError("audit.max_explained: expected null or a positive integer")
    if out["shapley_mode"] not in ("exact", "permutation"):
        raise ConfigError("audit.shapley_mode: expected 'exact' or 'permutation'")
    if out["output"] not in ("log_odds", "probability"):
        raise ConfigError("audit.output: expected 'log_odds' or 'probability'")
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, normalized configuration (all defaults filled in)."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def learner(self) -> LearnerSpec:
        return LearnerSpec(self.data["learner"]["kind"], self.data["learner"]["params"])

    @property
    def residual_learner(self) -> LearnerSpec | None:
        r = self.data["residual_learner"]
        return None if r is None else LearnerSpec(r["kind"], r["params"])

    def dataset(self, name: str) -> dict:
        for d in self.data["datasets"]:
            if d["name"] == name:
                return d
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON, excluding the output location."""
        d = {k: v for k, v in self.data.items() if k != "out"}
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d.update({k: v for k, v in kw.items() if v is not None})
        return validate(d)


def validate(obj: dict) -> ExperimentConfig:
    """Check a raw config object and fill defaults; raises ConfigError."""
    _check_keys(obj, ("datasets", *TOP_DEFAULTS), "config")
    cfg = copy.deepcopy(TOP_DEFAULTS)
    cfg.update(copy.deepcopy(obj))

    ds = cfg.get("datasets")
    if not isinstance(ds, list) or not ds:
        raise ConfigError("config: 'datasets' must be a nonempty list")
    cfg["datasets"] = [_dataset(d, i) for i, d in enumerate(ds)]
    names = [d["name"] for d in cfg["datasets"]]
    if len(set(names)) != len(names):
        raise ConfigError("config: dataset names must be unique")

    methods = cfg["methods"]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("config: 'methods' must be a nonempty list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"config: unknown method {m!r}; expected one of {list(METHODS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("config: duplicate method")

    cfg["learner"] = _learner(cfg["learner"], "learner")
    if cfg["residual_learner"] is not None:
        cfg["residual_learner"] = _learner(cfg["residual_learner"], "residual_learner")

    cov = cfg["coverages"]
    if not isinstance(cov, list) or not cov:
        raise ConfigError("config: 'coverages' must be a nonempty list")
    cfg["coverages"] = [_coverage(c, "coverages") for c in cov]
    if len(set(cfg["coverages"])) != len(cov):
        raise ConfigError("config: duplicate coverage")

    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(_is_int(s) and s >= 0 for s in seeds):
        raise ConfigError("config: 'seeds' must be a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("config: duplicate seed")

    cfg["split"] = _split(cfg["split"], "split")
    if set(cfg["split"]) != {"train", "calibration", "test"}:
        raise ConfigError("split: needs exactly train, calibration and test")
    if not _is_num(cfg["epsilon"]) or not 0 < cfg["epsilon"] < 1:
        raise ConfigError("config: epsilon must lie in (0, 1)")
    if not _is_int(cfg["K"]) or cfg["K"] < 2:
        raise ConfigError("config: K must be an integer >= 2")
    if cfg["B"] is not None and (not _is_int(cfg["B"]) or cfg["B"] < 2):
        raise ConfigError("config: B must be null or an integer >= 2")
    if not _is_num(cfg["cvplus_level"]) or not 0 < cfg["cvplus_level"] < 1:
        raise ConfigError("config: cvplus_level must lie in (0, 1)")
    if cfg["out"] is not None and not isinstance(cfg["out"], str):
        raise ConfigError("config: out must be a path string")
    if cfg["audit"] is not None:
        cfg["audit"] = _audit(cfg["audit"], names)
    return ExperimentConfig(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = validate(obj)
    # relative CSV paths resolve against the config file's directory
    for d in cfg.data["datasets"]:
        if "csv" in d and not Path(d["csv"]).is_absolute():
            d["csv"] = str((path.parent / d["csv"]).resolve())
    return cfg
