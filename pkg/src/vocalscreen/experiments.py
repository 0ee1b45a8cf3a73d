"""Grid search over encoder/kernel/fragment-count configurations.

Every (configuration, fold) cell trains independently, persists its
outcome as one JSON file (written atomically), and is skipped on
restart, so an interrupted 45-configuration sweep resumes without
recomputation.  Ranking is descending mean PR-AUC with ties broken by
lower standard error, then lexicographic configuration.
"""

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import CorpusIndex, load_manifest
from .evaluation import mean_sem, pr_auc
from .features import FrameSpec
from .model import ModelConfig, ScreeningModel
from .training import TrainConfig, train, validation_scores

SAMPLE_SIZES = (5, 10, 15, 30, 60)
KERNEL_SIZES = (3, 5, 7)
ENCODERS = ("cnn", "cnn_lstm", "cnn_gru")

DISPLAY_NAMES = {"cnn": "1D CNN", "cnn_lstm": "1D CNN-LSTM",
                 "cnn_gru": "1D CNN-GRU"}
INTERNAL_NAMES = {v: k for k, v in DISPLAY_NAMES.items()}

EVAL_REPEATS = 10  # fragment draws per subject for the final fold score


@dataclass(frozen=True)
class GridSpec:
    """The search domain plus the shared training recipe.

    Defaults span the full 5 x 3 x 3 = 45 grid; any subset of the
    canonical axis values is allowed for scaled-down runs.
    """

    train: TrainConfig
    seed: int = 0
    sample_sizes: tuple = SAMPLE_SIZES
    kernel_sizes: tuple = KERNEL_SIZES
    encoders: tuple = ENCODERS
    model_base: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, got, allowed in (("sample_sizes", self.sample_sizes, SAMPLE_SIZES),
                                   ("kernel_sizes", self.kernel_sizes, KERNEL_SIZES),
                                   ("encoders", self.encoders, ENCODERS)):
            if not got:
                raise ValueError(f"{name} must be non-empty")
            bad = [v for v in got if v not in allowed]
            if bad:
                raise ValueError(f"{name} outside the grid domain: {bad}")

    def cells(self) -> list:
        return [(n, k, e) for n in self.sample_sizes
                for k in self.kernel_sizes for e in self.encoders]

    def config_for(self, cell) -> ModelConfig:
        n, k, encoder = cell
        return ModelConfig(encoder=encoder, kernel_size=k, n_fragments=n,
                           **self.model_base)


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cell_seed(spec_seed: int, chash: str, fold: int) -> int:
    """Stable per-cell seed independent of grid subsetting."""
    digest = hashlib.sha256(f"{spec_seed}|{chash}|{fold}".encode()).hexdigest()
    return int(digest[:12], 16)


def _cell_path(results_dir, chash: str, fold: int) -> str:
    return os.path.join(results_dir, "cells", f"{chash}_f{fold}.json")


def _write_json_atomic(path, payload) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run_cell(spec: GridSpec, index: CorpusIndex, fold_plan, cell,
             fold: int) -> dict:
    """Train one configuration on one fold; return its result record."""
    config = spec.config_for(cell)
    chash = config_hash(config)
    seed = cell_seed(spec.seed, chash, fold)
    model = ScreeningModel(config, seed=seed)
    cfg = replace(spec.train, seed=seed)
    ckpt, history = train(model, index, fold_plan, fold, cfg)
    _, val_recs = fold_plan.split(index.records, fold)
    usable = [r for r in val_recs if index.pool_size(r) > 0]
    scored = validation_scores(ckpt.model, index, usable, EVAL_REPEATS,
                               np.random.default_rng([seed, 777]))
    return {
        "config": config.to_dict(),
        "config_hash": chash,
        "fold": fold,
        "seed": spec.seed,
        "status": "ok",
        "pr_auc": pr_auc(scored),
        "best_epoch": ckpt.metadata["epoch"],
        "n_epochs": len(history.rows),
    }


def _run_cell_job(args):
    """Worker entry: rebuilds the corpus index from disk, runs one cell."""
    (spec, manifest_path, frame_spec, cache_dir, fold_plan, cell, fold) = args
    records = load_manifest(manifest_path)
    index = CorpusIndex(records, spec=frame_spec, cache_dir=cache_dir)
    index.build()
    try:
        return run_cell(spec, index, fold_plan, cell, fold)
    except Exception as e:  # cell failures are recorded, not fatal
        config = spec.config_for(cell)
        return {"config": config.to_dict(), "config_hash": config_hash(config),
                "fold": fold, "seed": spec.seed, "status": "failed",
                "error": f"{type(e).__name__}: {e}"}


@dataclass
class ResultTable:
    """One aggregated row per configuration."""

    rows: list = field(default_factory=list)

    @staticmethod
    def from_cells(cells: list, results: list) -> "ResultTable":
        by_cell = {}
        for r in results:
            if r["status"] != "ok":
                continue
            c = r["config"]
            key = (c["n_fragments"], c["kernel_size"], c["encoder"])
            by_cell.setdefault(key, {})[r["fold"]] = r["pr_auc"]
        table = ResultTable()
        for cell in cells:
            folds = by_cell.get(cell, {})
            if not folds:
                continue
            values = [folds[f] for f in sorted(folds)]
            if len(values) >= 2:
                mean, sem = mean_sem(values)
            else:
                mean, sem = values[0], None
            table.rows.append({
                "sample_size": cell[0], "kernel_size": cell[1],
                "encoder": cell[2], "pr_auc_mean": mean,
                "pr_auc_stderr": sem,
                "folds": {str(f): folds[f] for f in sorted(folds)},
            })
        return table

    @staticmethod
    def from_values(values) -> "ResultTable":
        """Build from (sample_size, kernel_size, encoder, mean) tuples.

        Encoder may be an internal slug or a display name.
        """
        table = ResultTable()
        for n, k, encoder, mean in values:
            table.rows.append({
                "sample_size": int(n), "kernel_size": int(k),
                "encoder": INTERNAL_NAMES.get(encoder, encoder),
                "pr_auc_mean": float(mean), "pr_auc_stderr": None,
                "folds": {},
            })
        return table

    def to_aggregate_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_size", "kernel_size", "encoder",
                        "pr_auc_mean", "pr_auc_stderr"])
            for r in self.rows:
                sem = "" if r["pr_auc_stderr"] is None else repr(r["pr_auc_stderr"])
                w.writerow([r["sample_size"], r["kernel_size"], r["encoder"],
                            repr(r["pr_auc_mean"]), sem])

    def to_fold_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_size", "kernel_size", "encoder", "fold",
                        "pr_auc"])
            for r in self.rows:
                for fold, value in r["folds"].items():
                    w.writerow([r["sample_size"], r["kernel_size"],
                                r["encoder"], fold, repr(value)])

    def render_text(self, percent: bool = True) -> str:
        lines = [f"{'Sample Size':<12}{'Kernel Size':<12}"
                 f"{'Encoder Type':<14}{'PR-AUC':>8}"]
        for r in self.rows:
            v = r["pr_auc_mean"] * (100.0 if percent else 1.0)
            lines.append(f"{r['sample_size']:<12}{r['kernel_size']:<12}"
                         f"{DISPLAY_NAMES[r['encoder']]:<14}{v:>8.2f}")
        return "\n".join(lines)


def grid_search(spec: GridSpec, index: CorpusIndex, fold_plan,
                results_dir, folds=None, jobs: int = 1,
                manifest_path=None) -> ResultTable:
    """Run (or resume) the grid; returns the aggregated table.

    Completed cell files are trusted and skipped.  With jobs > 1 the
    pending cells fan out over processes, each reloading the corpus
    from ``manifest_path`` and the shared fragment cache.
    """
    folds = list(range(fold_plan.k)) if folds is None else list(folds)
    os.makedirs(os.path.join(results_dir, "cells"), exist_ok=True)
    cells = spec.cells()

    pending = []
    results = []
    for cell in cells:
        chash = config_hash(spec.config_for(cell))
        for fold in folds:
            path = _cell_path(results_dir, chash, fold)
            done = None
            if os.path.exists(path):
                try:
                    with open(path) as fh:
                        done = json.load(fh)
                except (OSError, json.JSONDecodeError):
                    done = None
            if done is not None and done.get("status") == "ok":
                results.append(done)  # trusted; file left untouched
            else:
                pending.append((cell, fold))  # failures are retried

    if pending and jobs > 1:
        if manifest_path is None:
            raise ValueError("jobs > 1 requires manifest_path for workers")
        args = [(spec, manifest_path, index.spec, index.cache_dir,
                 fold_plan, cell, fold) for cell, fold in pending]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_job, args))
    else:
        outcomes = []
        for cell, fold in pending:
            try:
                outcomes.append(run_cell(spec, index, fold_plan, cell, fold))
            except Exception as e:
                config = spec.config_for(cell)
                outcomes.append({"config": config.to_dict(),
                                 "config_hash": config_hash(config),
                                 "fold": fold, "seed": spec.seed,
                                 "status": "failed",
                                 "error": f"{type(e).__name__}: {e}"})

    for rec in outcomes:
        _write_json_atomic(
            _cell_path(results_dir, rec["config_hash"], rec["fold"]), rec)
        results.append(rec)
    return ResultTable.from_cells(cells, results)


def rank_configs(table: ResultTable, top_n: int = 5) -> list:
    """Best rows first: mean desc, stderr asc, then config ascending."""

    def key(r):
        sem = r["pr_auc_stderr"]
        return (-r["pr_auc_mean"],
                float("inf") if sem is None else sem,
                (r["sample_size"], r["kernel_size"], r["encoder"]))

    return sorted(table.rows, key=key)[:top_n]
