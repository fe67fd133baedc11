"""Isolation forest built from scratch.

Trees are stored as flat node arrays so a whole forest can be traversed with a
handful of vectorised steps, one per tree level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EULER_GAMMA = 0.5772156649015329
MODEL_VERSION = 1
TRANSFORMS = ("none", "log1p")


class ForestError(ValueError):
    pass


def c_factor(n) -> float:
    """Average unsuccessful-search path length in a BST of ``n`` points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1.0) + EULER_GAMMA) - 2.0 * (n - 1.0) / n


_c_vec = np.vectorize(c_factor, otypes=[float])


@dataclass(frozen=True)
class IsolationTree:
    """Leaves have ``feature == -1``; ``size`` counts training points at the leaf."""

    feature: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    # (lo, hi) of the split feature over the subsample reaching each node
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            if self.feature[i] < 0:
                best = max(best, d)
            else:
                stack += [(self.left[i], d + 1), (self.right[i], d + 1)]
        return best


def build_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, split, left, right, size, lo, hi = [], [], [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (split, 0.0), (left, -1), (right, -1), (size, 0),
                       (lo, 0.0), (hi, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(X)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        size[node] = len(idx)
        if depth >= height_limit or len(idx) <= 1:
            continue
        sub = X[idx]
        mins, maxs = sub.min(axis=0), sub.max(axis=0)
        splittable = np.nonzero(maxs > mins)[0]
        if splittable.size == 0:
            continue
        q = int(rng.choice(splittable))
        p = rng.uniform(mins[q], maxs[q])
        if not mins[q] < p < maxs[q]:  # uniform() can return the lower bound
            p = 0.5 * (mins[q] + maxs[q])
        mask = sub[:, q] < p
        feature[node], split[node], lo[node], hi[node] = q, p, mins[q], maxs[q]
        left[node], right[node] = new_node(), new_node()
        stack.append((left[node], idx[mask], depth + 1))
        stack.append((right[node], idx[~mask], depth + 1))

    return IsolationTree(np.array(feature, dtype=np.int64), np.array(split),
                         np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                         np.array(size, dtype=np.int64), np.array(lo), np.array(hi))


class IsolationForest:
    """Ensemble of isolation trees over standardized inputs.

    ``threshold`` is the (1 - alpha) quantile of the training scores; a sample is
    anomalous when its score is strictly above it.

    With ``transform="log1p"`` the (non-negative) features are log-compressed
    before z-scoring, taming the heavy tail of the covariance determinant.
    """

    def __init__(self, trees: list[IsolationTree], psi: int, mean: np.ndarray, std: np.ndarray,
                 threshold: float, alpha: float, window: int = 3, window_mode: str = "concat",
                 transform: str = "none"):
        if transform not in TRANSFORMS:
            raise ForestError(f"unknown feature transform {transform!r}")
        if not trees:
            raise ForestError("forest needs at least one tree")
        if psi < 2:
            raise ForestError("subsample size must be at least 2")
        self.trees = trees
        self.psi = int(psi)
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.threshold = float(threshold)
        self.alpha = float(alpha)
        self.window = int(window)
        self.window_mode = window_mode
        self.transform = transform
        self.c_psi = c_factor(self.psi)
        self._pack()

    @property
    def dim(self) -> int:
        return len(self.mean)

    def _pack(self) -> None:
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])[:-1]
        feats, splits, lefts, rights, sizes = [], [], [], [], []
        for off, t in zip(offsets, self.trees):
            leaf = t.feature < 0
            own = np.arange(t.n_nodes) + off
            feats.append(np.where(leaf, 0, t.feature))
            splits.append(np.where(leaf, np.inf, t.split))
            lefts.append(np.where(leaf, own, t.left + off))
            rights.append(np.where(leaf, own, t.right + off))
            sizes.append(t.size)
        self._feat = np.concatenate(feats)
        self._split = np.concatenate(splits)
        self._left = np.concatenate(lefts)
        self._right = np.concatenate(rights)
        self._internal = np.concatenate([t.feature >= 0 for t in self.trees])
        self._leaf_c = _c_vec(np.concatenate(sizes))
        self._roots = offsets.astype(np.int64)
        self._max_depth = max(t.depth() for t in self.trees)

    def standardize(self, X) -> np.ndarray:
        return (_apply_transform(X, self.transform) - self.mean) / self.std

    def path_lengths(self, X) -> np.ndarray:
        """Mean adjusted path length over trees for each row of ``X`` (standardized)."""
        X = np.atleast_2d(X)
        n = len(X)
        idx = np.broadcast_to(self._roots, (n, len(self.trees))).copy()
        depth = np.zeros(idx.shape)
        rows = np.arange(n)[:, None]
        for _ in range(self._max_depth):
            internal = self._internal[idx]
            if not internal.any():
                break
            go_left = X[rows, self._feat[idx]] < self._split[idx]
            depth += internal
            idx = np.where(go_left, self._left[idx], self._right[idx])
        return (depth + self._leaf_c[idx]).mean(axis=1)

    def score_samples(self, X) -> np.ndarray:
        """Anomaly scores in (0, 1) for raw (unstandardized) rows."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ForestError(f"expected {self.dim} features, got {X.shape[1]}")
        return np.power(2.0, -self.path_lengths(self.standardize(X)) / self.c_psi)

    def with_alpha(self, alpha: float, training_scores: np.ndarray) -> "IsolationForest":
        return IsolationForest(self.trees, self.psi, self.mean, self.std,
                               contamination_threshold(training_scores, alpha), alpha,
                               self.window, self.window_mode, self.transform)

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        return {
            "format": "rsuguard-iforest",
            "version": MODEL_VERSION,
            "psi": self.psi,
            "alpha": self.alpha,
            "threshold": self.threshold,
            "window": self.window,
            "window_mode": self.window_mode,
            "transform": self.transform,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "trees": [
                {k: getattr(t, k).tolist() for k in ("feature", "split", "left", "right", "size", "lo", "hi")}
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationForest":
        if d.get("format") != "rsuguard-iforest" or d.get("version") != MODEL_VERSION:
            raise ForestError("unsupported model file")
        trees = [IsolationTree(np.array(t["feature"], dtype=np.int64), np.array(t["split"], dtype=float),
                               np.array(t["left"], dtype=np.int64), np.array(t["right"], dtype=np.int64),
                               np.array(t["size"], dtype=np.int64), np.array(t["lo"], dtype=float),
                               np.array(t["hi"], dtype=float))
                 for t in d["trees"]]
        return cls(trees, d["psi"], np.array(d["mean"]), np.array(d["std"]), d["threshold"],
                   d["alpha"], d["window"], d["window_mode"], d.get("transform", "none"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "IsolationForest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ForestError(f"{path}: malformed model file ({exc})") from None


def _apply_transform(X, transform: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.log1p(X) if transform == "log1p" else X


def contamination_threshold(scores: np.ndarray, alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ForestError("contamination must lie in [0, 1)")
    return float(np.quantile(np.asarray(scores, dtype=float), 1.0 - alpha))


def train_iforest(samples, n_trees: int = 100, psi: int | None = None, alpha: float = 0.2,
                  rng: np.random.Generator | None = None, *, window: int = 3,
                  window_mode: str = "concat", transform: str = "none", return_scores: bool = False):
    """Fit a forest on benign samples (rows) and set the contamination threshold."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2:
        raise ForestError("training samples must be a 2-D array")
    if rng is None:
        rng = np.random.default_rng()
    if psi is None:
        psi = min(256, len(X))
    if psi < 2 or len(X) < psi:
        raise ForestError(f"need at least psi={psi} >= 2 training samples, got {len(X)}")
    if n_trees < 1:
        raise ForestError("need at least one tree")
    if transform not in TRANSFORMS:
        raise ForestError(f"unknown feature transform {transform!r}")
    T = _apply_transform(X, transform)
    mean = T.mean(axis=0)
    std = T.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (T - mean) / std
    height = math.ceil(math.log2(psi))
    trees = []
    for _ in range(n_trees):
        sub = Z[rng.choice(len(Z), size=psi, replace=False)]
        trees.append(build_tree(sub, height, rng))
    forest = IsolationForest(trees, psi, mean, std, 0.5, alpha, window, window_mode, transform)
    scores = forest.score_samples(X)
    forest.threshold = contamination_threshold(scores, alpha)
    return (forest, scores) if return_scores else forest


def score(forest: IsolationForest, window) -> "DetectorVerdict":
    """Verdict for one windowed sample (``3W`` values in concat mode)."""
    from .baselines import IFOREST, DetectorVerdict

    x = np.asarray(window, dtype=float).ravel()
    if x.size != forest.dim:
        raise ForestError(f"window has {x.size} values, forest expects {forest.dim}")
    s = float(forest.score_samples(x[None, :])[0])
    return DetectorVerdict(1 if s > forest.threshold else -1, s, IFOREST)


def vote(forest: IsolationForest, window) -> "DetectorVerdict":
    """Majority of per-step verdicts over a window of single-step features."""
    from .baselines import IFOREST, DetectorVerdict

    x = np.asarray(window, dtype=float).reshape(-1, forest.dim)
    s = forest.score_samples(x)
    flagged = int(np.sum(s > forest.threshold))
    return DetectorVerdict(1 if 2 * flagged > len(s) else -1, float(s[-1]), IFOREST)
