"""Fragment-feature extraction and k-means composition analysis.

A trained encoder maps a class-balanced sample of fragments to feature
vectors; k-means (k-means++ init, best of several restarts) groups
them, and the report states each cluster's depressed/healthy share as
reconciled two-decimal percentages.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

ENCODE_CHUNK = 512


class ClusteringError(Exception):
    pass


class InsufficientFragmentsError(ClusteringError):
    """A label class contributes no fragments at all."""


class DegenerateDataError(ClusteringError):
    """Fewer distinct points than requested clusters."""


@dataclass
class FeatureSet:
    """M encoded fragments with their origin labels.

    Rows are class-balanced: depressed-origin rows == healthy-origin
    rows.  ``origins`` holds (speaker_id, (audio_path, start_frame)).
    """

    vectors: np.ndarray
    labels: np.ndarray
    origins: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = self.vectors.shape[1]
            w.writerow(["speaker_id", "label"] + [f"f{i}" for i in range(dim)])
            for i in range(len(self.labels)):
                w.writerow([self.origins[i][0], int(self.labels[i])]
                           + [repr(float(v)) for v in self.vectors[i]])


def extract_features(model, index, m: int, rng) -> FeatureSet:
    """Encode m fragments, half from each label class.

    Fragments are drawn uniformly from the pooled per-class fragment
    populations, without replacement whenever a class pool is deep
    enough.  Raises InsufficientFragmentsError when a class has no
    fragments at all.
    """
    if m < 2 or m % 2:
        raise ValueError("m must be an even number >= 2")
    index.build()
    pools = {0: [], 1: []}
    for rec in index.records:
        for path, start in rec.fragment_index:
            pools[rec.label].append((rec.speaker_id, path, start))
    half = m // 2
    picks = []
    for label in (1, 0):  # depressed rows first
        pool = pools[label]
        if not pool:
            name = "depressed" if label else "healthy"
            raise InsufficientFragmentsError(
                f"no fragments available from {name} speakers")
        idx = rng.choice(len(pool), size=half, replace=len(pool) < half)
        picks.extend((label,) + pool[int(i)] for i in idx)

    spec = index.spec
    stack = np.empty((m, spec.n_mels, spec.fragment_width), dtype=np.float32)
    labels = np.empty(m, dtype=np.int64)
    origins = []
    for row, (label, speaker_id, path, start) in enumerate(picks):
        stack[row] = index.fragments_for(path)[start]
        labels[row] = label
        origins.append((speaker_id, (path, start)))
    chunks = [model.encode(stack[i:i + ENCODE_CHUNK], "infer")[0]
              for i in range(0, m, ENCODE_CHUNK)]
    return FeatureSet(vectors=np.concatenate(chunks), labels=labels,
                      origins=origins)


# --- k-means ---


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list
    n_iter: int
    restart_index: int
    seed: int
    restarts: int


def _pairwise_d2(x, centroids):
    d2 = (np.sum(x * x, axis=1)[:, None]
          - 2.0 * x @ centroids.T
          + np.sum(centroids * centroids, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _kpp_init(x, k, rng):
    n = len(x)
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[int(rng.integers(n))]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(x, k, rng, tol, max_iter):
    centroids = _kpp_init(x, k, rng)
    trace = []
    for it in range(max_iter):
        d2 = _pairwise_d2(x, centroids)
        assign = np.argmin(d2, axis=1)
        trace.append(float(np.take_along_axis(
            d2, assign[:, None], axis=1).sum()))
        new = np.empty_like(centroids)
        min_d2 = np.take_along_axis(d2, assign[:, None], axis=1)[:, 0]
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(min_d2))
                if min_d2[far] <= 0.0:
                    raise DegenerateDataError(
                        "cannot repair empty cluster: no separated points")
                new[j] = x[far]
                min_d2[far] = 0.0
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _pairwise_d2(x, centroids)
    assign = np.argmin(d2, axis=1)
    trace.append(float(np.take_along_axis(d2, assign[:, None], axis=1).sum()))
    return assign, centroids, trace


def kmeans(features: np.ndarray, k: int = 3, restarts: int = 20,
           seed: int = 0, tol: float = 1e-6,
           max_iter: int = 300) -> KMeansResult:
    """Best-of-restarts Lloyd's algorithm with k-means++ seeding.

    Convergence is centroid shift < tol or max_iter sweeps; an empty
    cluster is reseeded at the point farthest from its centroid.  Ties
    between restarts keep the lowest restart index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < k:
        raise ValueError(f"need at least k={k} points, got shape {x.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > 1 and len(np.unique(x, axis=0)) < k:
        raise DegenerateDataError(
            f"only {len(np.unique(x, axis=0))} distinct points for k={k}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        assign, centroids, trace = _lloyd(x, k, rng, tol, max_iter)
        inertia = trace[-1]
        if best is None or inertia < best.inertia:
            best = KMeansResult(assignments=assign, centroids=centroids,
                                inertia=inertia, inertia_trace=trace,
                                n_iter=len(trace) - 1, restart_index=r,
                                seed=seed, restarts=restarts)
    return best


# --- composition report ---


def _reconcile_cents(cents_a: int, cents_b: int) -> tuple:
    """Force two percentage cents to sum to 10000; larger absorbs."""
    residue = 10000 - cents_a - cents_b
    if residue:
        if cents_a >= cents_b:
            cents_a += residue
        else:
            cents_b += residue
    return cents_a, cents_b


def cluster_composition(assignments, labels) -> list:
    """Per-cluster label shares, ordered by descending depressed %.

    Percentages carry two decimals and are reconciled so each cluster's
    pair sums to exactly 100.00.
    """
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if len(assignments) != len(labels):
        raise ValueError("assignments and labels must align")
    rows = []
    for j in sorted(set(int(a) for a in assignments)):
        members = assignments == j
        size = int(members.sum())
        dep = int((labels[members] == 1).sum())
        heal = size - dep
        cd = round(10000 * dep / size)
        ch = round(10000 * heal / size)
        cd, ch = _reconcile_cents(cd, ch)
        rows.append({"cluster": j, "size": size,
                     "depressed_count": dep, "healthy_count": heal,
                     "depressed_pct": cd / 100.0, "healthy_pct": ch / 100.0})
    rows.sort(key=lambda r: (-r["depressed_pct"], -r["size"], r["cluster"]))
    return rows


def cluster_report(result: KMeansResult, labels) -> dict:
    """ClusterReport payload: composition plus the run parameters."""
    return {
        "clusters": cluster_composition(result.assignments, labels),
        "inertia": result.inertia,
        "seed": result.seed,
        "restarts": result.restarts,
        "n_iter": result.n_iter,
        "restart_index": result.restart_index,
    }


def save_cluster_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
