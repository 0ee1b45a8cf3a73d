"""Command-line entry point for reproducible batch runs.

Each subcommand merges defaults, an optional JSON config file, and
explicit flags (flags win), validates the merged configuration before
writing anything, and emits deterministic artifacts plus a
run_manifest.json recording the configuration hash.  Wall-clock
information goes only to the sidecar run.log, never into artifacts.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .audio import AudioError
from .clustering import (
    ClusteringError,
    cluster_report,
    extract_features,
    kmeans,
    save_cluster_report,
)
from .corpus import (
    CorpusIndex,
    ManifestError,
    NoFragmentsError,
    SynthSpec,
    TooFewSpeakersError,
    load_manifest,
    make_folds,
    synth_corpus,
)
from .evaluation import (
    DegenerateLabelsError,
    aggregate_folds,
    evaluate_fold,
    format_mean_sem,
    pr_curve,
    roc_curve,
    save_curve_csv,
)
from .experiments import (
    GridSpec,
    cell_seed,
    config_hash,
    grid_search,
    rank_configs,
)
from .features import FragmentCacheError
from .model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    ScreeningModel,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainingError,
    train,
    validation_scores,
)

EVAL_REPEATS = 10

DOMAIN_ERRORS = (AudioError, ManifestError, TooFewSpeakersError,
                 NoFragmentsError, FragmentCacheError, ModelError,
                 CheckpointError, TrainingError, ClusteringError,
                 DegenerateLabelsError, ValueError, OSError)


class ConfigInvalidError(Exception):
    """Configuration failed validation; message names the offending key."""


# key -> (coercer, required, default); coercers raise ValueError
def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _str(v):
    return str(v)


def _int_list(v):
    if isinstance(v, str):
        v = [p for p in v.split(",") if p]
    return [int(x) for x in v]


def _float_list(v):
    if isinstance(v, str):
        v = [p for p in v.split(",") if p]
    return [float(x) for x in v]


def _str_list(v):
    if isinstance(v, str):
        v = [p for p in v.split(",") if p]
    return [str(x) for x in v]


COMMON_TRAIN_KEYS = {
    "lr": (_float, False, 1e-4),
    "max_epochs": (_int, False, 50),
    "early_stop_patience": (_int, False, 10),
    "batch_size": (_int, False, 8),
    "val_repeats": (_int, False, 3),
    "focal_alpha": (_float, False, 0.25),
    "focal_gamma": (_float, False, 2.0),
}

MODEL_KEYS = {
    "encoder": (_str, False, "cnn_gru"),
    "kernel_size": (_int, False, 5),
    "n_fragments": (_int, False, 15),
    "n_filters": (_int, False, 128),
    "feature_dim": (_int, False, 128),
    "head_hidden": (_int, False, 128),
    "dropout": (_float, False, 0.1),
}

KEY_SPECS = {
    "synth": {
        "out": (_str, True, None),
        "seed": (_int, True, None),
        "n_speakers": (_int, False, 60),
        "depressed_fraction": (_float, False, 0.30),
        "duration_s": (_float_list, False, [4.0, 7.0]),
        "sample_rate": (_int, False, 16000),
        "marker_band": (_int_list, False, [64, 80]),
        "marker_prevalence": (_float, False, 0.5),
        "marker_kind": (_str, False, "band"),
        "marker_gain_db": (_float, False, 36.0),
    },
    "featurize": {
        "manifest": (_str, True, None),
        "cache_dir": (_str, True, None),
    },
    "train": {
        "manifest": (_str, True, None),
        "cache_dir": (_str, False, None),
        "out": (_str, True, None),
        "seed": (_int, True, None),
        "folds": (_int, False, 3),
        "fold": (_int, False, None),
        "fold_seed": (_int, False, 0),
        **MODEL_KEYS,
        **COMMON_TRAIN_KEYS,
    },
    "grid": {
        "manifest": (_str, True, None),
        "cache_dir": (_str, False, None),
        "out": (_str, True, None),
        "seed": (_int, True, None),
        "folds": (_int, False, 3),
        "fold": (_int, False, None),
        "fold_seed": (_int, False, 0),
        "sample_sizes": (_int_list, False, [5, 10, 15, 30, 60]),
        "kernel_sizes": (_int_list, False, [3, 5, 7]),
        "encoders": (_str_list, False, ["cnn", "cnn_lstm", "cnn_gru"]),
        "n_filters": (_int, False, 128),
        "feature_dim": (_int, False, 128),
        "head_hidden": (_int, False, 128),
        "dropout": (_float, False, 0.1),
        "jobs": (_int, False, 1),
        **COMMON_TRAIN_KEYS,
    },
    "eval": {
        "checkpoint": (_str, True, None),
        "manifest": (_str, True, None),
        "cache_dir": (_str, False, None),
        "out": (_str, True, None),
        "seed": (_int, True, None),
        "folds": (_int, False, 3),
        "fold": (_int, False, None),
        "fold_seed": (_int, False, 0),
        "repeats": (_int, False, EVAL_REPEATS),
    },
    "cluster": {
        "checkpoint": (_str, True, None),
        "manifest": (_str, True, None),
        "cache_dir": (_str, False, None),
        "out": (_str, True, None),
        "seed": (_int, True, None),
        "m": (_int, False, 2000),
        "k": (_int, False, 3),
        "restarts": (_int, False, 20),
    },
}


def merge_config(command: str, args) -> dict:
    """defaults < config file < flags, validated against the key table."""
    specs = KEY_SPECS[command]
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigInvalidError(f"config: file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigInvalidError(f"config: invalid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise ConfigInvalidError("config: top level must be an object")
        unknown = sorted(set(file_cfg) - set(specs))
        if unknown:
            raise ConfigInvalidError(f"{unknown[0]}: unknown config key")
    merged = {}
    for key, (coerce, required, default) in specs.items():
        value = getattr(args, key, None)
        if value is None and key in file_cfg:
            value = file_cfg[key]
        if value is None:
            value = default
        if value is None:
            if required:
                raise ConfigInvalidError(f"{key}: required key missing")
            merged[key] = None
            continue
        try:
            merged[key] = coerce(value)
        except (TypeError, ValueError):
            raise ConfigInvalidError(f"{key}: invalid value {value!r}")
    return merged


def _config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# filesystem locations identify where a run landed, not what it computed;
# keeping them out of the manifest makes artifacts byte-identical across
# output directories (locations still appear in the sidecar run.log)
PATH_KEYS = frozenset({"out", "manifest", "cache_dir", "checkpoint"})


def write_run_manifest(out_dir, command: str, cfg: dict) -> None:
    semantic = {k: v for k, v in cfg.items() if k not in PATH_KEYS}
    payload = {"command": command, "config": semantic,
               "config_sha256": _config_digest(semantic),
               "package_version": __version__}
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar_log(out_dir, command: str, started: float) -> None:
    # the one artifact allowed to carry wall-clock state
    with open(os.path.join(out_dir, "run.log"), "a") as fh:
        fh.write(f"{command} out={out_dir} started_unix={started:.3f} "
                 f"duration_s={time.time() - started:.3f}\n")


def _load_index(cfg) -> CorpusIndex:
    records = load_manifest(cfg["manifest"])
    index = CorpusIndex(records, cache_dir=cfg.get("cache_dir"))
    index.build()
    return index


def _train_config(cfg, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, lr=cfg["lr"], max_epochs=cfg["max_epochs"],
                       early_stop_patience=cfg["early_stop_patience"],
                       batch_size=cfg["batch_size"],
                       val_repeats=cfg["val_repeats"],
                       focal_alpha=cfg["focal_alpha"],
                       focal_gamma=cfg["focal_gamma"])


# --- subcommands ---


def cmd_synth(args) -> int:
    cfg = merge_config("synth", args)
    dur = cfg["duration_s"]
    band = cfg["marker_band"]
    if len(dur) != 2:
        raise ConfigInvalidError("duration_s: expected two values (min,max)")
    if len(band) != 2:
        raise ConfigInvalidError("marker_band: expected two values (lo,hi)")
    spec = SynthSpec(n_speakers=cfg["n_speakers"],
                     depressed_fraction=cfg["depressed_fraction"],
                     duration_s=(dur[0], dur[1]),
                     sample_rate=cfg["sample_rate"],
                     marker_band=(band[0], band[1]),
                     marker_prevalence=cfg["marker_prevalence"],
                     marker_kind=cfg["marker_kind"],
                     marker_gain_db=cfg["marker_gain_db"],
                     seed=cfg["seed"])
    started = time.time()
    os.makedirs(cfg["out"], exist_ok=True)
    manifest = synth_corpus(spec, cfg["out"])
    write_run_manifest(cfg["out"], "synth", cfg)
    _sidecar_log(cfg["out"], "synth", started)
    print(manifest)
    return 0


def cmd_featurize(args) -> int:
    cfg = merge_config("featurize", args)
    index = _load_index(cfg)
    total = sum(index.pool_size(r) for r in index.records)
    print(f"speakers={len(index.records)} fragments={total} "
          f"cache={cfg['cache_dir']}")
    return 0


def _fold_list(cfg, plan) -> list:
    if cfg["fold"] is not None:
        if not 0 <= cfg["fold"] < plan.k:
            raise ConfigInvalidError(f"fold: {cfg['fold']} out of range")
        return [cfg["fold"]]
    return list(range(plan.k))


def cmd_train(args) -> int:
    cfg = merge_config("train", args)
    started = time.time()
    index = _load_index(cfg)
    plan = make_folds(index.records, k=cfg["folds"], seed=cfg["fold_seed"])
    folds = _fold_list(cfg, plan)
    model_cfg = ModelConfig(
        encoder=cfg["encoder"], kernel_size=cfg["kernel_size"],
        n_fragments=cfg["n_fragments"], n_filters=cfg["n_filters"],
        feature_dim=cfg["feature_dim"], head_hidden=cfg["head_hidden"],
        dropout=cfg["dropout"])
    chash = config_hash(model_cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    plan.to_json(os.path.join(cfg["out"], "folds.json"))

    reports = []
    for fold in folds:
        seed = cell_seed(cfg["seed"], chash, fold)
        model = ScreeningModel(model_cfg, seed=seed)
        ckpt, history = train(model, index, plan, fold,
                              _train_config(cfg, seed))
        save_checkpoint(model, os.path.join(cfg["out"], f"fold{fold}.ckpt"),
                        metadata=ckpt.metadata,
                        trainer_state=ckpt.trainer_state)
        history.to_csv(os.path.join(cfg["out"], f"fold{fold}_history.csv"))
        _, val_recs = plan.split(index.records, fold)
        usable = [r for r in val_recs if index.pool_size(r) > 0]
        scored = validation_scores(model, index, usable, EVAL_REPEATS,
                                   np.random.default_rng([seed, 777]))
        report = evaluate_fold(scored, fold)
        with open(os.path.join(cfg["out"], f"fold{fold}_metrics.json"),
                  "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        reports.append(report)
        print(f"fold {fold}: pr_auc={report.pr_auc:.4f} "
              f"best_epoch={ckpt.metadata['epoch']}")

    summary = {"folds": {str(r.fold_index): r.pr_auc for r in reports}}
    if len(reports) >= 2:
        agg = aggregate_folds(reports)
        summary["aggregate"] = {k: {"mean": m, "sem": s}
                                for k, (m, s) in agg.items()}
        print("pr_auc " + format_mean_sem(*agg["pr_auc"]))
    with open(os.path.join(cfg["out"], "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_manifest(cfg["out"], "train", cfg)
    _sidecar_log(cfg["out"], "train", started)
    return 0


def cmd_grid(args) -> int:
    cfg = merge_config("grid", args)
    started = time.time()
    index = _load_index(cfg)
    plan = make_folds(index.records, k=cfg["folds"], seed=cfg["fold_seed"])
    folds = _fold_list(cfg, plan)
    model_base = {k: cfg[k] for k in
                  ("n_filters", "feature_dim", "head_hidden", "dropout")}
    try:
        spec = GridSpec(train=_train_config(cfg, cfg["seed"]),
                        seed=cfg["seed"],
                        sample_sizes=tuple(cfg["sample_sizes"]),
                        kernel_sizes=tuple(cfg["kernel_sizes"]),
                        encoders=tuple(cfg["encoders"]),
                        model_base=model_base)
    except ValueError as e:
        raise ConfigInvalidError(str(e))
    os.makedirs(cfg["out"], exist_ok=True)
    table = grid_search(spec, index, plan, cfg["out"], folds=folds,
                        jobs=cfg["jobs"], manifest_path=cfg["manifest"])
    table.to_aggregate_csv(os.path.join(cfg["out"], "grid_aggregate.csv"))
    table.to_fold_csv(os.path.join(cfg["out"], "grid_cells.csv"))
    with open(os.path.join(cfg["out"], "grid_table.txt"), "w") as fh:
        fh.write(table.render_text() + "\n")
    top = rank_configs(table, top_n=5)
    with open(os.path.join(cfg["out"], "top_configs.json"), "w") as fh:
        json.dump(top, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_manifest(cfg["out"], "grid", cfg)
    _sidecar_log(cfg["out"], "grid", started)
    for r in top:
        print(f"{r['sample_size']:>3} {r['kernel_size']} "
              f"{r['encoder']:<9} {r['pr_auc_mean']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = merge_config("eval", args)
    started = time.time()
    ckpt = load_checkpoint(cfg["checkpoint"])
    index = _load_index(cfg)
    if ckpt.metadata.get("corpus") and \
            ckpt.metadata["corpus"] != index.fingerprint():
        raise ConfigInvalidError(
            "manifest: corpus fingerprint does not match the checkpoint")
    plan = make_folds(index.records, k=cfg["folds"], seed=cfg["fold_seed"])
    fold = cfg["fold"]
    if fold is None:
        fold = ckpt.metadata.get("fold")
        if fold is None:
            raise ConfigInvalidError("fold: required (not in checkpoint)")
    if not 0 <= fold < plan.k:
        raise ConfigInvalidError(f"fold: {fold} out of range")
    _, val_recs = plan.split(index.records, fold)
    usable = [r for r in val_recs if index.pool_size(r) > 0]
    scored = validation_scores(ckpt.model, index, usable, cfg["repeats"],
                               np.random.default_rng([cfg["seed"], 777]))
    report = evaluate_fold(scored, fold)
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "metrics.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_curve_csv(os.path.join(cfg["out"], "pr_curve.csv"),
                   pr_curve(scored), "pr")
    save_curve_csv(os.path.join(cfg["out"], "roc_curve.csv"),
                   roc_curve(scored), "roc")
    write_run_manifest(cfg["out"], "eval", cfg)
    _sidecar_log(cfg["out"], "eval", started)
    print(f"fold {fold}: pr_auc={report.pr_auc:.4f} "
          f"roc_auc={report.roc_auc:.4f} f1={report.f1:.4f}")
    return 0


def cmd_cluster(args) -> int:
    cfg = merge_config("cluster", args)
    started = time.time()
    ckpt = load_checkpoint(cfg["checkpoint"])
    index = _load_index(cfg)
    features = extract_features(ckpt.model, index, cfg["m"],
                                np.random.default_rng([cfg["seed"], 55]))
    result = kmeans(features.vectors, k=cfg["k"], restarts=cfg["restarts"],
                    seed=cfg["seed"])
    report = cluster_report(result, features.labels)
    os.makedirs(cfg["out"], exist_ok=True)
    features.to_csv(os.path.join(cfg["out"], "features.csv"))
    save_cluster_report(os.path.join(cfg["out"], "cluster_report.json"),
                        report)
    write_run_manifest(cfg["out"], "cluster", cfg)
    _sidecar_log(cfg["out"], "cluster", started)
    top = report["clusters"][0]
    print(f"clusters={cfg['k']} top_depressed_pct={top['depressed_pct']:.2f}")
    return 0


# --- parser & dispatch ---


def _add_common(p, keys):
    p.add_argument("--config", help="JSON config file; flags override it")
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vocalscreen",
        description="Audio-based depression screening experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("synth", cmd_synth), ("featurize", cmd_featurize),
                     ("train", cmd_train), ("grid", cmd_grid),
                     ("eval", cmd_eval), ("cluster", cmd_cluster)):
        p = sub.add_parser(name)
        _add_common(p, KEY_SPECS[name])
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except ConfigInvalidError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DOMAIN_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
