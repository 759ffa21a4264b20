"""Gradient-boosted quantile regression trees.

Boosting starts from the empirical beta-quantile of the targets (the
pinball minimizer over constants) and at each stage fits a small
regression tree on a seeded subsample. Tree structure is chosen by
variance reduction on the pinball negative gradient; leaf values are the
beta-quantile of the in-leaf residuals, so every stage directly lowers
pinball loss rather than squared error. With subsample_frac=1 and
learning_rate <= 1 the full-sample training pinball loss is
nonincreasing in the stage count (each leaf moves a convex per-leaf
objective toward its minimizer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import check_level

__all__ = ["GBHyper", "GBQuantileModel", "fit_gradient_boosting_qr"]


@dataclass(frozen=True)
class GBHyper:
    n_estimators: int = 100
    max_depth: int = 2
    learning_rate: float = 0.1
    subsample_frac: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample_frac <= 1.0:
            raise ValueError("subsample_frac must lie in (0, 1]")


@dataclass(frozen=True)
class _Tree:
    """Flat array tree; feature == -1 marks a leaf node."""

    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    value: tuple[float, ...]

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if self.feature[node] < 0:
                out[idx] = self.value[node]
                continue
            go_left = X[idx, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out


class _TreeBuilder:
    def __init__(self, X, grad, resid, beta, max_depth):
        self.X = X
        self.grad = grad
        self.resid = resid
        self.beta = beta
        self.max_depth = max_depth
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def build(self) -> _Tree:
        self._node(np.arange(self.X.shape[0]), 0)
        return _Tree(
            feature=tuple(self.feature),
            threshold=tuple(self.threshold),
            left=tuple(self.left),
            right=tuple(self.right),
            value=tuple(self.value),
        )

    def _leaf(self, idx) -> int:
        node = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(np.quantile(self.resid[idx], self.beta)))
        return node

    def _node(self, idx, depth) -> int:
        if depth >= self.max_depth or idx.shape[0] < 2:
            return self._leaf(idx)
        split = self._best_split(idx)
        if split is None:
            return self._leaf(idx)
        feat, thr = split
        node = len(self.feature)
        self.feature.append(feat)
        self.threshold.append(thr)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        go_left = self.X[idx, feat] <= thr
        self.left[node] = self._node(idx[go_left], depth + 1)
        self.right[node] = self._node(idx[~go_left], depth + 1)
        return node

    def _best_split(self, idx):
        g = self.grad[idx]
        n = g.shape[0]
        total = g.sum()
        base = total * total / n
        best_gain = 1e-12
        best = None
        for feat in range(self.X.shape[1]):
            xs = self.X[idx, feat]
            order = np.argsort(xs, kind="stable")
            xs_sorted = xs[order]
            cuts = np.nonzero(xs_sorted[:-1] < xs_sorted[1:])[0]
            if cuts.shape[0] == 0:
                continue
            csum = np.cumsum(g[order])[:-1]
            n_left = np.arange(1, n)
            score = csum**2 / n_left + (total - csum) ** 2 / (n - n_left)
            gains = score[cuts] - base
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                pos = cuts[k]
                best = (feat, float((xs_sorted[pos] + xs_sorted[pos + 1]) / 2.0))
        return best


@dataclass(frozen=True)
class GBQuantileModel:
    """Fitted boosted quantile model: base_value + lr * sum of trees."""

    level: float
    base_value: float
    trees: tuple[_Tree, ...]
    learning_rate: float
    max_depth: int
    n_estimators: int
    subsample_frac: float
    n_features_: int = field(repr=False, default=0)

    def __post_init__(self):
        check_level(self.level)
        if len(self.trees) > self.n_estimators:
            raise ValueError("tree count exceeds n_estimators")

    @property
    def n_features(self) -> int:
        return self.n_features_

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.n_features_}"
            )
        out = np.full(X.shape[0], self.base_value)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def to_dict(self) -> dict:
        return {
            "format": "bandcast.qgb.v1",
            "level": self.level,
            "base_value": self.base_value,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "n_estimators": self.n_estimators,
            "subsample_frac": self.subsample_frac,
            "n_features": self.n_features_,
            "trees": [
                {
                    "feature": list(t.feature),
                    "threshold": list(t.threshold),
                    "left": list(t.left),
                    "right": list(t.right),
                    "value": list(t.value),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBQuantileModel":
        if d.get("format") != "bandcast.qgb.v1":
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        trees = tuple(
            _Tree(
                feature=tuple(t["feature"]),
                threshold=tuple(t["threshold"]),
                left=tuple(t["left"]),
                right=tuple(t["right"]),
                value=tuple(t["value"]),
            )
            for t in d["trees"]
        )
        return cls(
            level=d["level"],
            base_value=float(d["base_value"]),
            trees=trees,
            learning_rate=float(d["learning_rate"]),
            max_depth=int(d["max_depth"]),
            n_estimators=int(d["n_estimators"]),
            subsample_frac=float(d["subsample_frac"]),
            n_features_=int(d["n_features"]),
        )


def fit_gradient_boosting_qr(
    X, y, level: float, hyper: GBHyper = GBHyper()
) -> GBQuantileModel:
    """Boost quantile regression trees on (X, y) for one level.

    Deterministic given hyper.seed; with n_estimators=0 the model is the
    constant empirical level-quantile of y.
    """
    beta = check_level(level)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, d) aligned with y")
    if y.shape[0] == 0:
        raise ValueError("cannot fit on an empty series")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")

    n = y.shape[0]
    base = float(np.quantile(y, beta))
    pred = np.full(n, base)
    rng = np.random.default_rng(hyper.seed)
    n_sub = max(1, int(np.ceil(hyper.subsample_frac * n)))

    trees: list[_Tree] = []
    for _ in range(hyper.n_estimators):
        # ties y == pred take the ascending branch (gradient beta, not
        # beta-1): after the constant initialization every target sits
        # exactly at the fit, and the descending choice would zero out
        # the gradient spread and stall boosting at stage one.
        grad = np.where(y < pred, beta - 1.0, beta)
        resid = y - pred
        if hyper.subsample_frac < 1.0:
            idx = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            idx = np.arange(n)
        tree = _TreeBuilder(
            X[idx], grad[idx], resid[idx], beta, hyper.max_depth
        ).build()
        trees.append(tree)
        pred = pred + hyper.learning_rate * tree.predict(X)

    return GBQuantileModel(
        level=beta,
        base_value=base,
        trees=tuple(trees),
        learning_rate=hyper.learning_rate,
        max_depth=hyper.max_depth,
        n_estimators=hyper.n_estimators,
        subsample_frac=hyper.subsample_frac,
        n_features_=X.shape[1],
    )
