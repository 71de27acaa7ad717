"""Isolation Forest screening of low-quality images before training.

Anomalies are isolated by fewer random axis-aligned splits than regular
points, so their expected path length through an ensemble of random trees
is short.  Scores are normalized to (0, 1] via the expected
unsuccessful-search path length of a binary search tree; records with the
highest scores are flagged and dropped from the kept manifest.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ingest import Manifest

log = logging.getLogger(__name__)

DEFAULT_TREES = 100
DEFAULT_SUBSAMPLE = 256
DEFAULT_FEATURE_DIM = 1024

# Flagged fraction that reproduces a 2102 -> 1988 record reduction.
DEFAULT_CONTAMINATION = 114 / 2102


def avg_path_c(n: int) -> float:
    """Expected unsuccessful-search path length of a BST with n nodes.

    c(n) = 2 * H(n-1) - 2 * (n-1) / n with H(i) = ln(i) + Euler-Mascheroni.
    c(2) is exactly 1 (H(1) = 1 exactly, the log approximation is skipped)
    and c(n) = 0 for n <= 1, where there is nothing left to split.
    """
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1.0) + np.euler_gamma) - 2.0 * (n - 1.0) / n


@dataclass
class IsolationTree:
    """Flat array encoding of one isolation tree.

    Node i is internal when ``feature[i] >= 0`` (children at ``left[i]`` /
    ``right[i]``, points with value < ``threshold[i]`` go left) and external
    otherwise, with ``size[i]`` training points having reached it.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    height_limit: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def node_depths(self) -> np.ndarray:
        depths = np.zeros(self.n_nodes, dtype=np.int32)
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            depths[node] = d
            if self.feature[node] >= 0:
                stack.append((self.left[node], d + 1))
                stack.append((self.right[node], d + 1))
        return depths

    def max_depth(self) -> int:
        return int(self.node_depths().max())


@dataclass
class IsolationForestModel:
    trees: list[IsolationTree]
    subsample_size: int
    feature_dim: int
    seed: int


@dataclass
class OutlierReport:
    """Per-record anomaly scores plus the flagged index set."""

    scores: np.ndarray
    flagged: np.ndarray
    contamination: float
    kept_manifest: Optional[Manifest] = None


class _TreeBuilder:
    """Accumulates nodes for one tree during recursive growth."""

    def __init__(self) -> None:
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.size: list[int] = []

    def add_external(self, size: int) -> int:
        idx = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(size)
        return idx

    def add_internal(self, feat: int, thr: float) -> int:
        idx = len(self.feature)
        self.feature.append(feat)
        self.threshold.append(thr)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(0)
        return idx

    def finish(self, height_limit: int) -> IsolationTree:
        return IsolationTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            size=np.asarray(self.size, dtype=np.int32),
            height_limit=height_limit,
        )


def _grow(builder: _TreeBuilder, x: np.ndarray, depth: int, limit: int,
          rng: np.random.Generator) -> int:
    n = len(x)
    if n <= 1 or depth >= limit:
        return builder.add_external(n)
    mins = x.min(axis=0)
    maxs = x.max(axis=0)
    valid = np.flatnonzero(maxs > mins)
    if valid.size == 0:
        # Every feature is constant on this node's points.
        return builder.add_external(n)
    feat = int(valid[rng.integers(valid.size)])
    thr = float(rng.uniform(mins[feat], maxs[feat]))
    mask = x[:, feat] < thr
    idx = builder.add_internal(feat, thr)
    builder.left[idx] = _grow(builder, x[mask], depth + 1, limit, rng)
    builder.right[idx] = _grow(builder, x[~mask], depth + 1, limit, rng)
    return idx


def fit(features: np.ndarray, trees: int = DEFAULT_TREES,
        subsample_size: Optional[int] = None, seed: int = 0) -> IsolationForestModel:
    """Fit an isolation forest on an N x d feature matrix.

    Each tree draws ``subsample_size`` rows without replacement, then
    recursively picks a uniform random feature (skipping features with zero
    range at that node) and a uniform split value within the feature's
    current min-max range, stopping at height ceil(log2(subsample_size)) or
    once a single point remains.  Per-tree generators are spawned
    deterministically from the master seed, so the model is a pure function
    of (features, trees, subsample_size, seed).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    n, d = features.shape
    if n < 2:
        raise ValueError(f"need at least 2 points to fit, got {n}")
    if not np.isfinite(features).all():
        raise ValueError("features must be finite")
    if trees < 1:
        raise ValueError(f"tree count must be >= 1, got {trees}")
    psi = min(DEFAULT_SUBSAMPLE, n) if subsample_size is None else int(subsample_size)
    if not 2 <= psi <= n:
        raise ValueError(f"subsample size must be in [2, {n}], got {psi}")
    limit = math.ceil(math.log2(psi))

    fitted = []
    for child_seq in np.random.SeedSequence(seed).spawn(trees):
        rng = np.random.default_rng(child_seq)
        rows = rng.choice(n, size=psi, replace=False)
        builder = _TreeBuilder()
        _grow(builder, features[rows], 0, limit, rng)
        fitted.append(builder.finish(limit))
    return IsolationForestModel(trees=fitted, subsample_size=psi,
                                feature_dim=d, seed=seed)


def path_length(tree: IsolationTree, x: np.ndarray) -> float:
    """Edges from root to the external node reached by x, plus c(leaf size)."""
    x = np.asarray(x, dtype=np.float64)
    node = 0
    depth = 0
    while tree.feature[node] >= 0:
        if x[tree.feature[node]] < tree.threshold[node]:
            node = tree.left[node]
        else:
            node = tree.right[node]
        depth += 1
    return depth + avg_path_c(int(tree.size[node]))


def _tree_path_lengths(tree: IsolationTree, x: np.ndarray) -> np.ndarray:
    """Vectorized path_length over the rows of x."""
    n = len(x)
    node = np.zeros(n, dtype=np.int64)
    depth = np.zeros(n, dtype=np.float64)
    active = tree.feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        cur = node[idx]
        feat = tree.feature[cur]
        go_left = x[idx, feat] < tree.threshold[cur]
        node[idx] = np.where(go_left, tree.left[cur], tree.right[cur])
        depth[idx] += 1.0
        active[idx] = tree.feature[node[idx]] >= 0
    leaf_c = np.array([avg_path_c(int(s)) for s in tree.size[node]])
    return depth + leaf_c


def mean_path_length(model: IsolationForestModel, x: np.ndarray) -> np.ndarray:
    """E[h(x)] over the forest, for a batch of points (N x d)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    total = np.zeros(len(x), dtype=np.float64)
    for tree in model.trees:
        total += _tree_path_lengths(tree, x)
    return total / len(model.trees)


def score_from_mean_path(mean_path: float, subsample_size: int) -> float:
    """Anomaly score s = 2^(-E[h] / c(subsample_size)), in (0, 1]."""
    return float(2.0 ** (-mean_path / avg_path_c(subsample_size)))


def score(model: IsolationForestModel, x: np.ndarray) -> float:
    """Anomaly score of a single point: higher means more anomalous."""
    e_h = float(mean_path_length(model, x.reshape(1, -1))[0])
    return score_from_mean_path(e_h, model.subsample_size)


def score_all(model: IsolationForestModel, features: np.ndarray) -> np.ndarray:
    """Anomaly scores for each row of an N x d matrix."""
    e_h = mean_path_length(model, features)
    c = avg_path_c(model.subsample_size)
    return 2.0 ** (-e_h / c)


def extract_features(image: np.ndarray, feature_dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Grayscale + area-averaged downsample of a normalized image.

    The H x W x 3 input in [0, 1] is reduced to grayscale by channel mean,
    pooled over equal square blocks down to a sqrt(feature_dim)-sided grid,
    and flattened.  feature_dim must be a perfect square whose side divides
    the image height and width.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    side = math.isqrt(feature_dim)
    if side * side != feature_dim:
        raise ValueError(f"feature_dim must be a perfect square, got {feature_dim}")
    h, w = image.shape[:2]
    if h % side or w % side:
        raise ValueError(f"grid side {side} must divide image shape {h}x{w}")
    gray = image.mean(axis=2)
    pooled = gray.reshape(side, h // side, side, w // side).mean(axis=(1, 3))
    return pooled.ravel()


def features_matrix(images: np.ndarray, feature_dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Stack extract_features over a batch of N x H x W x 3 images."""
    return np.stack([extract_features(img, feature_dim) for img in images])


def flag_outliers(scores: Sequence[float], contamination: float,
                  manifest: Optional[Manifest] = None) -> OutlierReport:
    """Flag the floor(contamination * N) highest-scoring records.

    Ties are broken toward the lower record index.  When a manifest is
    supplied, the kept manifest excludes flagged records in original order.
    """
    if not 0.0 < contamination < 1.0:
        raise ValueError(f"contamination must be in (0, 1), got {contamination}")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    n_flag = int(math.floor(contamination * n))
    # Stable sort keeps earlier indices first among equal scores.
    order = np.argsort(-scores, kind="stable")
    flagged = np.sort(order[:n_flag])

    kept = None
    if manifest is not None:
        if len(manifest.records) != n:
            raise ValueError(
                f"manifest has {len(manifest.records)} records but {n} scores given")
        flagged_set = set(flagged.tolist())
        kept_records = [r for i, r in enumerate(manifest.records) if i not in flagged_set]
        kept = Manifest(records=kept_records, created_at=manifest.created_at,
                        source_root=manifest.source_root)
    return OutlierReport(scores=scores, flagged=flagged,
                         contamination=contamination, kept_manifest=kept)


def save_outlier_report(report: OutlierReport, record_ids: Sequence[str],
                        path: Path) -> None:
    """Write record_id,score,flagged rows to ``path`` (CSV with header)."""
    if len(record_ids) != len(report.scores):
        raise ValueError("record_ids and scores length mismatch")
    flagged = set(report.flagged.tolist())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "score", "flagged"])
        for i, rid in enumerate(record_ids):
            writer.writerow([rid, repr(float(report.scores[i])), int(i in flagged)])
