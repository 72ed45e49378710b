"""Experiment harness: benchmark grids, the audit/shift study and reports.

The unit of work is one (dataset, seed) cell. Cells are independent, run
serially or in a process pool, and are collected in grid order, so every
output byte depends only on the config and the seed list. A failing cell is
recorded in the manifest and does not stop the others.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .dataset import Dataset, add_random_feature, load_csv, preprocess, split, synth_heteroscedastic, synth_houses
from .explain import ExplainError, auc, fit_audit, shapley, shift_audit
from .learners import LearnerSpec, fit, spawn_seeds
from .metrics import (
    EvaluationRecord,
    MetricsError,
    friedman_nemenyi,
    read_records_csv,
    risk_coverage_curve,
    write_records_csv,
)
from .selective import (
    METHODS,
    build_cvplus,
    build_doubt_int,
    build_doubt_var,
    build_goldcase,
    build_plugin,
    build_scross,
)
from .uncertainty import fit_ensemble

EXIT_OK, EXIT_VALIDATION, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3


class RunError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def load_dataset(spec: dict) -> Dataset:
    """Materialise a dataset entry of a validated config."""
    if "csv" in spec:
        data = load_csv(spec["csv"], spec["target"], spec["column_kinds"])
        extra_seed = 0
    elif spec["generator"] == "houses":
        data, _ = synth_houses(spec["n"], seed=spec["seed"])
        extra_seed = spec["seed"]
    else:
        data, _ = synth_heteroscedastic(
            spec["n"], spec["d"], spec["noise_profile"], seed=spec["seed"], noise_scale=spec["noise_scale"]
        )
        extra_seed = spec["seed"]
    if spec.get("random_feature"):
        data = add_random_feature(data, seed=[extra_seed, 1])
    return data


def versions() -> dict:
    import numba
    import scipy

    return {
        "selreg": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": platform.python_version(),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _error_text(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def _run_cells(fn, tasks, jobs: int):
    """Apply ``fn`` to every task, preserving order; exceptions become results."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _method_seed(seed: int, method: str) -> int:
    # fixed slot per method so a method's results do not depend on which
    # other methods are in the config
    return spawn_seeds(seed, len(METHODS))[METHODS.index(method)]


def _manifest(kind: str, cfg: ExperimentConfig, cells: list[dict], out: Path, files: list[str]) -> dict:
    config = {k: v for k, v in cfg.data.items() if k != "out"}
    return {
        "kind": kind,
        "config": config,
        "config_hash": cfg.hash(),
        "seeds": list(cfg["seeds"]),
        "versions": versions(),
        "cells": cells,
        "failures": [c for c in cells if c["status"] != "ok"],
        "outputs": {name: _sha256(out / name) for name in files},
    }


def _exit_code(cells: list[dict]) -> int:
    failed = sum(c["status"] != "ok" for c in cells)
    if failed == 0:
        return EXIT_OK
    return EXIT_FATAL if failed == len(cells) else EXIT_PARTIAL


# -------------------------------------------------------------------- bench


def bench_cell(task) -> dict:
    """Fit, calibrate and evaluate every method on one (dataset, seed)."""
    cfg_data, ds_name, seed = task
    try:
        return {"status": "ok", **_bench_cell(ExperimentConfig(cfg_data), ds_name, seed)}
    except Exception as exc:  # isolate-and-record
        return {"status": "error", "error": _error_text(exc), "trace": traceback.format_exc(limit=3)}


def _bench_cell(cfg: ExperimentConfig, ds_name: str, seed: int) -> dict:
    raw = load_dataset(cfg.dataset(ds_name))
    plan = split(raw, tuple(cfg["split"].items()), seed=seed)
    tr, ca, te = plan.indices("train"), plan.indices("calibration"), plan.indices("test")
    data, _ = preprocess(raw, tr)
    X, y = data.features, data.target
    spec, rspec = cfg.learner, cfg.residual_learner
    alpha0 = max(cfg["coverages"])
    methods = cfg["methods"]

    ensemble = None
    if "doubt_var" in methods or "doubt_int" in methods:
        ensemble = fit_ensemble(spec, X[tr], y[tr], B=cfg["B"], seed=_method_seed(seed, "doubt_var"))

    records: list[EvaluationRecord] = []
    diagnostics = []
    for m in methods:
        ms = _method_seed(seed, m)
        if m == "doubt_var":
            model = build_doubt_var(spec, X[tr], y[tr], X[ca], alpha0, ensemble=ensemble)
        elif m == "doubt_int":
            model = build_doubt_int(spec, X[tr], y[tr], X[ca], alpha0, ensemble=ensemble)
        elif m == "plugin":
            model = build_plugin(spec, X[tr], y[tr], X[ca], alpha0, seed=ms, residual_spec=rspec)
        elif m == "scross":
            model = build_scross(spec, X[tr], y[tr], X[ca], alpha0, K=cfg["K"], seed=ms, residual_spec=rspec)
        elif m == "cvplus":
            model = build_cvplus(spec, X[tr], y[tr], X[ca], alpha0, K=cfg["K"], level=cfg["cvplus_level"], seed=ms)
        else:
            predictor = fit(spec, X[tr], y[tr], seed=ms)
            model = build_goldcase(predictor, X[te], y[te], alpha0)
        records.extend(
            risk_coverage_curve(model, X[te], y[te], cfg["coverages"], cfg["epsilon"], seed=seed, dataset=ds_name)
        )
        cal = np.asarray(model.cal_scores)
        diagnostics.append(
            {
                "dataset": ds_name,
                "seed": seed,
                "method": m,
                "distinct_scores": int(np.unique(cal).size),
                "degenerate": bool(np.ptp(cal) == 0),
            }
        )
    return {"records": records, "diagnostics": diagnostics}


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return mean, sd


def summarize(records: list[EvaluationRecord], datasets: list[str], methods: list[str], coverages: list[float]) -> dict:
    """Per-dataset appendix-style blocks: coverage and ΔMSE mean/sd over seeds."""
    out = {}
    for ds in datasets:
        block = {"actual_coverage": {}, "delta_mse": {}, "cov_ok_rate": {}}
        for m in methods:
            for key in block:
                block[key][m] = {}
            for a in coverages:
                rows = [r for r in records if r.dataset == ds and r.method == m and r.target_coverage == a]
                if not rows:
                    continue
                k = repr(a)
                mean, sd = _mean_sd([r.actual_coverage for r in rows])
                block["actual_coverage"][m][k] = {"mean": mean, "sd": sd, "n": len(rows)}
                mean, sd = _mean_sd([r.delta_mse for r in rows])
                block["delta_mse"][m][k] = {"mean": mean, "sd": sd, "n": len(rows)}
                block["cov_ok_rate"][m][k] = sum(r.cov_ok for r in rows) / len(rows)
        out[ds] = block
    return {"spread": "sample sd over seeds", "datasets": out}


def rank_tables(records, datasets, methods, coverages, significance=0.05) -> dict:
    """Friedman/Nemenyi on mean ΔMSE over seeds, one analysis per coverage."""
    out = {}
    for a in coverages:
        rows = []
        for ds in datasets:
            row = []
            for m in methods:
                vals = [r.delta_mse for r in records if r.dataset == ds and r.method == m and r.target_coverage == a]
                row.append(float(np.mean(vals)) if vals else math.nan)
            if all(math.isfinite(v) for v in row):
                rows.append(row)
        key = repr(a)
        try:
            rs = friedman_nemenyi(rows, methods, significance) if rows else None
        except MetricsError as exc:
            out[key] = {"skipped": str(exc)}
            continue
        if rs is None:
            out[key] = {"skipped": "no complete datasets"}
            continue
        out[key] = {
            "methods": list(rs.methods),
            "mean_ranks": list(rs.mean_ranks),
            "cd": rs.cd,
            "n_datasets": rs.n_datasets,
            "friedman_statistic": rs.friedman_statistic,
            "friedman_pvalue": rs.friedman_pvalue,
            "not_separated": [list(p) for p in rs.not_separated],
        }
    return out


def _write_diagnostics(path: Path, diagnostics: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["dataset", "seed", "method", "distinct_scores", "degenerate"], lineterminator="\n")
        w.writeheader()
        w.writerows(diagnostics)


def run_bench(cfg: ExperimentConfig, out, jobs: int = 1) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = [d["name"] for d in cfg["datasets"]]
    tasks = [(cfg.data, ds, s) for ds in names for s in cfg["seeds"]]
    results = _run_cells(bench_cell, tasks, jobs)

    records, diagnostics, cells = [], [], []
    for (_, ds, s), res in zip(tasks, results):
        cell = {"dataset": ds, "seed": s, "status": res["status"]}
        if res["status"] == "ok":
            records.extend(res["records"])
            diagnostics.extend(res["diagnostics"])
        else:
            cell["error"] = res["error"]
        cells.append(cell)

    write_records_csv(records, out / "evaluations.csv")
    _write_diagnostics(out / "cells.csv", diagnostics)
    _write_json(out / "summary.json", summarize(records, names, cfg["methods"], cfg["coverages"]))
    _write_json(out / "ranks.json", rank_tables(records, names, cfg["methods"], cfg["coverages"]))
    files = ["evaluations.csv", "cells.csv", "summary.json", "ranks.json"]
    _write_json(out / "manifest.json", _manifest("bench", cfg, cells, out, files))
    return _exit_code(cells)


# -------------------------------------------------------------------- audit


def audit_cell(task) -> dict:
    cfg_data, seed, out = task
    try:
        return {"status": "ok", **_audit_cell(ExperimentConfig(cfg_data), seed, Path(out))}
    except Exception as exc:
        return {"status": "error", "error": _error_text(exc), "trace": traceback.format_exc(limit=3)}


def _build(method, spec, Xtr, ytr, Xca, alpha, seed, cfg):
    if method == "doubt_var":
        return build_doubt_var(spec, Xtr, ytr, Xca, alpha, seed=seed, B=cfg["B"])
    if method == "doubt_int":
        return build_doubt_int(spec, Xtr, ytr, Xca, alpha, seed=seed, B=cfg["B"])
    if method == "plugin":
        return build_plugin(spec, Xtr, ytr, Xca, alpha, seed=seed, residual_spec=cfg.residual_learner)
    if method == "scross":
        return build_scross(spec, Xtr, ytr, Xca, alpha, K=cfg["K"], seed=seed, residual_spec=cfg.residual_learner)
    return build_cvplus(spec, Xtr, ytr, Xca, alpha, K=cfg["K"], level=cfg["cvplus_level"], seed=seed)


def _audit_cell(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    q = cfg["audit"]
    raw = load_dataset(cfg.dataset(q["dataset"]))
    plan = split(raw, tuple(q["split"].items()), seed=seed)
    tr, ca, va, te = (plan.indices(k) for k in ("train", "calibration", "validation", "test"))
    data, _ = preprocess(raw, tr)
    X, y, names = data.features, data.target, data.names
    s_model, s_audit, s_bg, s_explain, s_shift = spawn_seeds(seed, 5)

    model = _build(q["method"], cfg.learner, X[tr], y[tr], X[ca], q["coverage"], s_model, cfg)
    lab_va, lab_te = model.accept(X[va]), model.accept(X[te])
    audit_spec = LearnerSpec(q["audit_learner"]["kind"], q["audit_learner"]["params"])
    audit = fit_audit(X[va], lab_va, audit_spec, names, seed=s_audit)
    try:
        test_auc = auc(audit.predict_proba(X[te]), lab_te)
    except ExplainError:
        test_auc = None

    rng = np.random.default_rng(s_bg)
    bg_ids = np.sort(rng.choice(len(va), min(q["background_size"], len(va)), replace=False))
    background = X[va][bg_ids]
    X_acc = X[te][lab_te]
    if X_acc.shape[0] == 0:
        raise RunError("no accepted test rows to explain")
    if q["max_explained"] is not None and X_acc.shape[0] > q["max_explained"]:
        keep = np.sort(np.random.default_rng(s_explain).choice(X_acc.shape[0], q["max_explained"], replace=False))
        X_acc = X_acc[keep]

    attribution = shapley(
        audit, X_acc, background, q["shapley_mode"], q["samples"], s_explain, names, output=q["output"]
    )
    univariate = names if q["shift_features"] is None else q["shift_features"]
    scenarios = {f: [f] for f in univariate}
    for key, feats in q["joint_shifts"].items():
        if key in scenarios:
            raise RunError(f"joint shift name {key!r} collides with a feature scenario")
        scenarios[key] = list(feats)
    report = shift_audit(
        model,
        audit,
        X_acc,
        scenarios,
        q["noise_mean"],
        q["noise_sd"],
        q["repeats"],
        s_shift,
        background,
        q["shapley_mode"],
        q["samples"],
        output=q["output"],
    )

    cell_dir = out / f"seed_{seed}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    attribution.to_csv(cell_dir / "shapley.csv")
    (cell_dir / "beeswarm.json").write_text(attribution.beeswarm_json(X_acc) + "\n", encoding="utf-8")
    report.to_csv(cell_dir / "shift_report.csv")
    _write_table1(cell_dir / "table1.csv", report)
    clf = audit.classifier
    summary = {
        "dataset": q["dataset"],
        "seed": seed,
        "method": q["method"],
        "target_coverage": q["coverage"],
        "tau": model.tau,
        "acceptance_validation": float(lab_va.mean()),
        "acceptance_test": float(lab_te.mean()),
        "audit_train_auc": audit.train_auc,
        "audit_test_auc": test_auc,
        "audit_coefficients": dict(zip(names, map(float, getattr(clf, "coef", [])))),
        "audit_intercept": float(getattr(clf, "intercept", math.nan)),
        "explained_rows": int(X_acc.shape[0]),
        "background_rows": int(background.shape[0]),
        "shapley_output": q["output"],
        "shapley_method": "interventional",
        "shapley_base_value": attribution.base_value,
        "accepted_after_shift": report.accepted_after_shift,
    }
    _write_json(cell_dir / "audit.json", summary)
    files = [f"seed_{seed}/{n}" for n in ("audit.json", "shapley.csv", "beeswarm.json", "shift_report.csv", "table1.csv")]
    return {"files": files, "auc": test_auc}


def _write_table1(path: Path, report) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean_distance", "sd", "repeats"])
        for r in report.table():
            w.writerow([r.feature, repr(r.mean_distance), repr(r.sd), r.repeats])


def run_audit(cfg: ExperimentConfig, out, jobs: int = 1) -> int:
    if cfg["audit"] is None:
        raise RunError("config has no audit block")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg.data, s, str(out)) for s in cfg["seeds"]]
    results = _run_cells(audit_cell, tasks, jobs)
    cells, files = [], []
    for (_, s, _), res in zip(tasks, results):
        cell = {"dataset": cfg["audit"]["dataset"], "seed": s, "status": res["status"]}
        if res["status"] == "ok":
            files.extend(res["files"])
            cell["audit_test_auc"] = res["auc"]
        else:
            cell["error"] = res["error"]
        cells.append(cell)
    _write_json(out / "manifest.json", _manifest("audit", cfg, cells, out, files))
    return _exit_code(cells)


# ------------------------------------------------------------------- report


def _read_manifest(results_dir: Path) -> dict:
    path = results_dir / "manifest.json"
    if not path.is_file():
        raise RunError(f"no manifest.json in {results_dir}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RunError(f"corrupt manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("kind") not in ("bench", "audit"):
        raise RunError("corrupt manifest: missing or unknown 'kind'")
    return manifest


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _bench_report(results_dir: Path, manifest: dict, out: Path) -> None:
    records = read_records_csv(results_dir / "evaluations.csv")
    cfg = manifest["config"]
    methods = [m for m in cfg["methods"] if any(r.method == m for r in records)]
    coverages = cfg["coverages"]
    lines = [
        f"bench report  config {manifest['config_hash'][:12]}",
        f"cells: {len(manifest['cells'])}  failed: {len(manifest['failures'])}",
        "",
        "coverage satisfied (% of dataset x seed x coverage cells)",
    ]
    cov_rows = []
    for m in methods:
        rows = [r for r in records if r.method == m]
        pct = 100.0 * sum(r.cov_ok for r in rows) / len(rows)
        cov_rows.append([m, len(rows), repr(pct)])
        lines.append(f"  {m:<10} {pct:6.1f}%  ({len(rows)} cells)")

    lines += ["", "mean delta MSE (violations count as 0) by target coverage"]
    lines.append("  " + "coverage".ljust(10) + "".join(f"{m:>11}" for m in methods))
    delta_rows = []
    for a in coverages:
        cells = []
        for m in methods:
            vals = [r.delta_mse for r in records if r.method == m and r.target_coverage == a]
            mean, sd = _mean_sd(vals) if vals else (math.nan, math.nan)
            delta_rows.append([m, repr(a), repr(mean), repr(sd), len(vals)])
            cells.append(mean)
        lines.append("  " + f"{a:<10.2f}" + "".join(f"{c:>11.4f}" for c in cells))

    ranks = rank_tables(records, [d["name"] for d in cfg["datasets"]], methods, coverages)
    lines += ["", "Friedman / Nemenyi mean ranks of delta MSE (1 = best)"]
    rank_rows = []
    for a in coverages:
        r = ranks[repr(a)]
        if "skipped" in r:
            lines.append(f"  {a:.2f}: skipped ({r['skipped']})")
            continue
        order = sorted(zip(r["mean_ranks"], r["methods"]))
        lines.append(
            f"  {a:.2f}: CD={r['cd']:.3f} p={r['friedman_pvalue']:.3g}  "
            + ", ".join(f"{m} {rk:.2f}" for rk, m in order)
        )
        rank_rows.extend([repr(a), m, repr(rk), repr(r["cd"])] for rk, m in zip(r["mean_ranks"], r["methods"]))

    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "report_covsat.csv").write_text(_csv_text(["method", "cells", "pct_cov_ok"], cov_rows), encoding="utf-8")
    (out / "report_delta_mse.csv").write_text(
        _csv_text(["method", "target_coverage", "mean_delta_mse", "sd", "n"], delta_rows), encoding="utf-8"
    )
    (out / "report_ranks.csv").write_text(
        _csv_text(["target_coverage", "method", "mean_rank", "cd"], rank_rows), encoding="utf-8"
    )


def _audit_report(results_dir: Path, manifest: dict, out: Path) -> None:
    lines = [f"audit report  config {manifest['config_hash'][:12]}", ""]
    rows = []
    for cell in manifest["cells"]:
        s = cell["seed"]
        if cell["status"] != "ok":
            lines.append(f"seed {s}: FAILED ({cell.get('error', '')})")
            continue
        summary = json.loads((results_dir / f"seed_{s}" / "audit.json").read_text(encoding="utf-8"))
        auc_txt = "n/a" if summary["audit_test_auc"] is None else f"{summary['audit_test_auc']:.3f}"
        lines.append(
            f"seed {s}: {summary['method']} at coverage {summary['target_coverage']}, "
            f"audit AUC train {summary['audit_train_auc']:.3f} held-out {auc_txt}"
        )
        with open(results_dir / f"seed_{s}" / "table1.csv", newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                lines.append(f"  {r['feature']:<16} {float(r['mean_distance']):10.4f} +- {float(r['sd']):.4f}")
                rows.append([s, r["feature"], r["mean_distance"], r["sd"], r["repeats"]])
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "report_table1.csv").write_text(
        _csv_text(["seed", "feature", "mean_distance", "sd", "repeats"], rows), encoding="utf-8"
    )


def run_report(results_dir, out=None) -> int:
    results_dir = Path(results_dir)
    manifest = _read_manifest(results_dir)
    out = results_dir if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if manifest["kind"] == "bench":
        _bench_report(results_dir, manifest, out)
    else:
        _audit_report(results_dir, manifest, out)
    return EXIT_OK
