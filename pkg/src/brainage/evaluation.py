"""Cross-validated evaluation and before/after-filtering comparison.

Runs k-fold cross-validation per backbone and per phase (full dataset vs
the outlier-screened subset), computes MSE/RMSE/MAE/MAPE plus wall-clock
training time per fold, averages them, and renders the comparison as a
structured report, a flat table, and a log-scale MAE chart.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import isoforest
from . import model as model_mod
from .ingest import Manifest
from .model import BackboneSpec, HeadConfig, TrainConfig
from .preprocess import Dataset

log = logging.getLogger(__name__)

PHASE_BEFORE = "before_filtering"
PHASE_AFTER = "after_filtering"
PHASES = (PHASE_BEFORE, PHASE_AFTER)

REPORT_NOTES = [
    "Phase labels: before_filtering trains on the full dataset; "
    "after_filtering trains on the subset kept by outlier screening.",
    "Aggregate rows are arithmetic means over folds, so the aggregate rmse "
    "is the mean of per-fold rmse values, not the square root of the "
    "aggregate mse.",
]


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class FoldMetrics:
    mse: float
    rmse: float
    mae: float
    mape: float
    training_time_seconds: float


@dataclass
class CellResult:
    """One (backbone, phase) cell of the comparison grid."""

    backbone: str
    phase: str
    folds: list[FoldMetrics] = field(default_factory=list)
    aggregate: Optional[FoldMetrics] = None
    status: str = "complete"  # complete | failed | skipped
    error: Optional[str] = None


@dataclass
class ComparisonReport:
    cells: list[CellResult]
    seed: int
    config: dict
    notes: list[str] = field(default_factory=lambda: list(REPORT_NOTES))

    def cell(self, backbone: str, phase: str) -> CellResult:
        for c in self.cells:
            if c.backbone == backbone and c.phase == phase:
                return c
        raise KeyError(f"no cell for ({backbone}, {phase})")


def make_folds(n: int, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Shuffle 0..n-1 by seed, then cut k contiguous near-equal test sets.

    The first n % k folds get the larger test size.  Test sets are disjoint,
    cover every index, and differ in size by at most one.
    """
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    base, rem = divmod(n, k)
    folds = []
    lo = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        test = np.sort(perm[lo:lo + size])
        train = np.sort(np.setdiff1d(perm, test, assume_unique=True))
        folds.append(FoldSplit(fold_index=i, train_indices=train, test_indices=test))
        lo += size
    return folds


def make_grouped_folds(groups: Sequence[str], k: int = 5,
                       seed: int = 0) -> list[FoldSplit]:
    """k-fold over unique group labels, expanded to record indices.

    Keeps all records of a group (e.g. slices of one subject) in the same
    test fold, so test sets stay disjoint and cover everything but may
    differ in size by more than one record.
    """
    groups = list(groups)
    unique: list[str] = []
    seen = set()
    for g in groups:
        if g not in seen:
            seen.add(g)
            unique.append(g)
    gfolds = make_folds(len(unique), k, seed)
    group_arr = np.asarray(groups)
    folds = []
    for gf in gfolds:
        test_groups = {unique[i] for i in gf.test_indices}
        mask = np.isin(group_arr, sorted(test_groups))
        test = np.flatnonzero(mask)
        train = np.flatnonzero(~mask)
        folds.append(FoldSplit(fold_index=gf.fold_index,
                               train_indices=train, test_indices=test))
    return folds


def check_fold_coverage(folds: Sequence[FoldSplit], n: int) -> None:
    """Assert disjointness and full coverage of the test sets."""
    seen = np.concatenate([f.test_indices for f in folds])
    if len(seen) != n or len(np.unique(seen)) != n:
        raise EvaluationError("test folds do not partition the index set")
    for f in folds:
        if np.intersect1d(f.train_indices, f.test_indices).size:
            raise EvaluationError(f"fold {f.fold_index} train/test sets overlap")


def compute_metrics(y_true: Sequence[float], y_pred: Sequence[float],
                    training_time: float = 0.0) -> FoldMetrics:
    """MSE, RMSE, MAE, and MAPE (as a fraction) of predictions.

    Targets must be strictly positive so MAPE is defined.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("empty inputs")
    if (y_true <= 0).any():
        raise ValueError("targets must be strictly positive for MAPE")
    err = y_pred - y_true
    mse = float(np.mean(err ** 2))
    return FoldMetrics(
        mse=mse,
        rmse=math.sqrt(mse),
        mae=float(np.mean(np.abs(err))),
        mape=float(np.mean(np.abs(err) / y_true)),
        training_time_seconds=float(training_time),
    )


def aggregate_folds(rows: Sequence[FoldMetrics]) -> FoldMetrics:
    """Field-wise arithmetic mean over folds."""
    if not rows:
        raise ValueError("cannot aggregate zero folds")
    return FoldMetrics(
        mse=float(np.mean([r.mse for r in rows])),
        rmse=float(np.mean([r.rmse for r in rows])),
        mae=float(np.mean([r.mae for r in rows])),
        mape=float(np.mean([r.mape for r in rows])),
        training_time_seconds=float(np.mean([r.training_time_seconds for r in rows])),
    )


def _derived_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


def _fold_cache_path(run_dir: Path, backbone: str, phase: str, fold: int) -> Path:
    return run_dir / "cells" / backbone / phase / f"fold{fold}"


def _load_cached_fold(fold_dir: Path, config_hash: str) -> Optional[FoldMetrics]:
    meta_path = fold_dir / "metrics.json"
    if not meta_path.is_file():
        return None
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("config_hash") != config_hash:
        return None
    return FoldMetrics(**meta["metrics"])


def _save_fold(fold_dir: Path, config_hash: str, backbone: str, phase: str,
               fold: int, seed: int, metrics: FoldMetrics,
               trained: model_mod.TrainedModel) -> None:
    fold_dir.mkdir(parents=True, exist_ok=True)
    model_mod.save_model(trained, fold_dir / "model")
    meta = {
        "config_hash": config_hash,
        "backbone": backbone,
        "phase": phase,
        "fold": fold,
        "seed": seed,
        "metrics": asdict(metrics),
    }
    with open(fold_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def screen_outliers(dataset: Dataset, manifest: Optional[Manifest], params,
                    seed: int) -> isoforest.OutlierReport:
    """Fit the isolation forest on dataset features and flag top scorers."""
    feats = isoforest.features_matrix(dataset.inputs, params.feature_dim)
    psi = min(params.subsample_size, len(feats))
    forest = isoforest.fit(feats, trees=params.trees, subsample_size=psi, seed=seed)
    scores = isoforest.score_all(forest, feats)
    return isoforest.flag_outliers(scores, params.contamination, manifest)


def run_experiment(dataset: Dataset, manifest: Manifest, config,
                   run_dir: Optional[Path] = None,
                   config_hash: str = "") -> ComparisonReport:
    """Run the full comparison grid: backbones x phases x folds.

    The master seed deterministically drives outlier screening, fold
    shuffling, and per-fold model initialization and batching.  A fold
    failure marks its cell as failed; remaining cells still run.  When
    ``run_dir`` is given, completed folds are cached and reruns with a
    matching config hash skip them.
    """
    n = len(dataset)
    master = config.seed

    iso_seed = _derived_seed(master, 0)
    fold_seed = _derived_seed(master, 1)
    outliers = screen_outliers(dataset, manifest, config.isoforest, iso_seed)
    kept = np.setdiff1d(np.arange(n), outliers.flagged)
    if run_dir is not None:
        isoforest.save_outlier_report(outliers, dataset.ids, run_dir / "outliers")
        if outliers.kept_manifest is not None:
            from .ingest import save_manifest

            save_manifest(outliers.kept_manifest, run_dir / "manifest.kept")
    log.info("outlier screening kept %d of %d records", len(kept), n)

    subjects = [r.subject_id for r in manifest.records]
    phase_indices = {
        PHASE_BEFORE: np.arange(n),
        PHASE_AFTER: kept,
    }

    cells = []
    for bi, bspec in enumerate(config.backbones):
        for pi, phase in enumerate(PHASES):
            idx = phase_indices[phase]
            cell = CellResult(backbone=bspec.name, phase=phase)
            subset = dataset.subset(idx)
            if config.group_by_subject:
                folds = make_grouped_folds([subjects[i] for i in idx],
                                           config.k_folds, fold_seed)
            else:
                folds = make_folds(len(idx), config.k_folds, fold_seed)
            check_fold_coverage(folds, len(idx))
            try:
                for f, split in enumerate(folds):
                    seed = _derived_seed(master, 2, bi, pi, f)
                    fold_dir = None
                    if run_dir is not None:
                        fold_dir = _fold_cache_path(run_dir, bspec.name, phase, f)
                        cached = _load_cached_fold(fold_dir, config_hash)
                        if cached is not None:
                            log.info("cell %s/%s fold %d: cached", bspec.name, phase, f)
                            cell.folds.append(cached)
                            continue
                    log.info("cell %s/%s fold %d: training on %d, testing on %d",
                             bspec.name, phase, f, len(split.train_indices),
                             len(split.test_indices))
                    reg = model_mod.build_model(
                        bspec, HeadConfig(), seed=seed,
                        canonical_preprocessing=config.canonical_preprocessing)
                    train_cfg = TrainConfig(
                        learning_rate=config.train.learning_rate,
                        epochs=config.train.epochs,
                        batch_size=config.train.batch_size,
                        seed=seed)
                    trained = model_mod.train(reg, subset.subset(split.train_indices),
                                              train_cfg)
                    preds = model_mod.predict(trained,
                                              subset.inputs[split.test_indices])
                    metrics = compute_metrics(subset.targets[split.test_indices],
                                              preds, trained.training_time_seconds)
                    if abs(metrics.rmse ** 2 - metrics.mse) > 1e-9:
                        raise EvaluationError("per-fold rmse^2 != mse")
                    cell.folds.append(metrics)
                    if fold_dir is not None:
                        _save_fold(fold_dir, config_hash, bspec.name, phase, f,
                                   seed, metrics, trained)
                cell.aggregate = aggregate_folds(cell.folds)
            except Exception as exc:
                log.error("cell %s/%s failed: %s", bspec.name, phase, exc)
                cell.status = "failed"
                cell.error = f"fold {len(cell.folds)}: {exc}"
                cell.aggregate = None
            cells.append(cell)

    return ComparisonReport(cells=cells, seed=master, config=config.to_dict())


# --- serialization -------------------------------------------------------

def report_to_dict(report: ComparisonReport) -> dict:
    return {
        "seed": report.seed,
        "config": report.config,
        "notes": list(report.notes),
        "cells": [
            {
                "backbone": c.backbone,
                "phase": c.phase,
                "status": c.status,
                "error": c.error,
                "folds": [asdict(m) for m in c.folds],
                "aggregate": asdict(c.aggregate) if c.aggregate else None,
            }
            for c in report.cells
        ],
    }


def report_from_dict(doc: dict) -> ComparisonReport:
    cells = [
        CellResult(
            backbone=c["backbone"],
            phase=c["phase"],
            status=c["status"],
            error=c.get("error"),
            folds=[FoldMetrics(**m) for m in c["folds"]],
            aggregate=FoldMetrics(**c["aggregate"]) if c.get("aggregate") else None,
        )
        for c in doc["cells"]
    ]
    return ComparisonReport(cells=cells, seed=doc["seed"], config=doc["config"],
                            notes=list(doc["notes"]))


def save_report(report: ComparisonReport, run_dir: str | Path) -> Path:
    """Write report.json plus the flat report.csv table."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    json_path = run_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(run_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "phase", "fold", "mse", "rmse", "mae", "mape",
                         "training_time_seconds"])
        for c in report.cells:
            for i, m in enumerate(c.folds):
                writer.writerow([c.backbone, c.phase, i, repr(m.mse), repr(m.rmse),
                                 repr(m.mae), repr(m.mape),
                                 repr(m.training_time_seconds)])
            if c.aggregate is not None:
                a = c.aggregate
                writer.writerow([c.backbone, c.phase, "mean", repr(a.mse),
                                 repr(a.rmse), repr(a.mae), repr(a.mape),
                                 repr(a.training_time_seconds)])
    return json_path


def load_report(path: str | Path) -> ComparisonReport:
    with open(path, encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))


def report_hash(report: ComparisonReport) -> str:
    """Content hash of the report with training-time fields zeroed out."""
    doc = copy.deepcopy(report_to_dict(report))
    for cell in doc["cells"]:
        for m in cell["folds"]:
            m["training_time_seconds"] = 0.0
        if cell["aggregate"]:
            cell["aggregate"]["training_time_seconds"] = 0.0
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- plotting ------------------------------------------------------------

def emit_plot_data(report: ComparisonReport,
                   out_dir: str | Path) -> list[tuple[str, str, float]]:
    """Emit (backbone, phase, MAE) rows and a log-scale grouped bar chart.

    Writes plot_data.csv and plot.svg into ``out_dir``; the SVG render is
    byte-deterministic for a given report.  Raises if no cell completed.
    """
    rows = [(c.backbone, c.phase, c.aggregate.mae)
            for c in report.cells if c.status == "complete" and c.aggregate]
    if not rows:
        raise EvaluationError("no complete cells to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "plot_data.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["backbone", "phase", "mae"])
        for backbone, phase, mae in rows:
            writer.writerow([backbone, phase, repr(mae)])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    backbones = sorted({r[0] for r in rows})
    by_key = {(b, p): mae for b, p, mae in rows}
    width = 0.38
    xs = np.arange(len(backbones))
    with plt.rc_context({"svg.hashsalt": "brainage"}):
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        for off, phase in ((-width / 2, PHASE_BEFORE), (width / 2, PHASE_AFTER)):
            vals = [by_key.get((b, phase)) for b in backbones]
            pos = [x + off for x, v in zip(xs, vals) if v is not None]
            heights = [v for v in vals if v is not None]
            if heights:
                ax.bar(pos, heights, width=width, label=phase.replace("_", " "))
        ax.set_yscale("log")
        ax.set_xticks(xs)
        ax.set_xticklabels(backbones)
        ax.set_ylabel("MAE (years, log scale)")
        ax.set_title("Fold-averaged MAE by backbone and filtering phase")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "plot.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
    return rows
