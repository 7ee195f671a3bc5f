"""Second-order gradient-boosted regression trees with logistic loss.

Each round fits a depth-limited tree to the gradient/hessian of the log-loss
at the current raw scores, using exact greedy split search over sorted
feature values. Missing values (NaN) are sent to whichever side gives the
larger gain at training time; that side is stored as the node's default.

The score of a split with left/right gradient sums ``GL, GR`` and hessian
sums ``HL, HR`` is::

    gain = 1/2 * [GL^2/(HL+lam) + GR^2/(HR+lam) - (GL+GR)^2/(HL+HR+lam)] - gamma

and a leaf's Newton weight is ``-G / (H + lam)`` scaled by the learning rate.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

__all__ = [
    "GbdtParams",
    "Tree",
    "GbdtModel",
    "SplitCandidate",
    "DegenerateNodeError",
    "UntrainableError",
    "SchemaMismatchError",
    "sigmoid",
    "logistic_grad_hess",
    "log_loss",
    "leaf_weight",
    "split_gain",
    "find_best_split",
    "train",
    "predict",
    "predict_raw",
]

MODEL_FORMAT_VERSION = 1
_MASK64 = (1 << 64) - 1
TIE_RTOL = 1e-10


class DegenerateNodeError(ArithmeticError):
    pass


class UntrainableError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GbdtParams:
    num_rounds: int = 300
    learning_rate: float = 0.1
    max_depth: int = 4
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    rng_seed: int = 0
    # Holdout early stopping; off unless early_stopping_rounds is set.
    early_stopping_rounds: int | None = None
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if not 0 < self.learning_rate:
            raise ValueError("learning_rate must be > 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("reg_lambda, gamma and min_child_weight must be >= 0")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ValueError("subsample and colsample must be in (0, 1]")
        if self.early_stopping_rounds is not None and not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GBDT parameter(s) {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# Loss pieces
# --------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_grad_hess(raw_score, label):
    """``g = p - y``, ``h = p (1 - p)`` with ``p = sigmoid(raw)``; scalars or arrays."""
    scalar = np.ndim(raw_score) == 0 and np.ndim(label) == 0
    p = sigmoid(np.atleast_1d(raw_score))
    y = np.asarray(label, dtype=float)
    g, h = p - y, p * (1.0 - p)
    if scalar:
        return float(g[0]), float(h[0])
    return g, h


def log_loss(raw_score, label) -> float:
    """Summed negative log-likelihood, computed stably from raw scores."""
    z = np.asarray(raw_score, dtype=float)
    y = np.asarray(label, dtype=float)
    # log(1 + e^z) - y z
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    if H + reg_lambda <= 0:
        raise DegenerateNodeError(f"H + lambda = {H + reg_lambda} <= 0")
    return -G / (H + reg_lambda)


def split_gain(GL, HL, GR, HR, reg_lambda, gamma):
    return 0.5 * (
        GL * GL / (HL + reg_lambda)
        + GR * GR / (HR + reg_lambda)
        - (GL + GR) ** 2 / (HL + HR + reg_lambda)
    ) - gamma


# --------------------------------------------------------------------------
# Split search
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    default_left: bool
    gain: float


def _midpoint(a: float, b: float) -> float:
    mid = a + (b - a) / 2.0
    return mid if a < mid <= b else b


def _select(cands: list[SplitCandidate]) -> SplitCandidate | None:
    """Max gain; near-ties go to the lowest feature index, then lowest threshold."""
    if not cands:
        return None
    best = max(c.gain for c in cands)
    tol = TIE_RTOL * max(1.0, abs(best))
    return min((c for c in cands if c.gain >= best - tol), key=lambda c: (c.feature, c.threshold))


def _scan(idx, xs, g, h, G, H, feats, params) -> list[SplitCandidate]:
    """Near-best candidates for a block of features.

    ``idx``/``xs`` are ``(len(feats), m)`` row ids and values of the node's
    rows, each row of the block sorted by value with NaN last.
    """
    m = idx.shape[1]
    if len(feats) == 0 or m < 2:
        return []
    lam, gamma, mcw = params.reg_lambda, params.gamma, params.min_child_weight
    gs, hs = g[idx], h[idx]
    missing = np.isnan(xs)
    any_missing = bool(missing.any())
    if any_missing:
        present = ~missing
        gm = np.where(present, 0.0, gs).sum(axis=1)
        hm = np.where(present, 0.0, hs).sum(axis=1)
        gs, hs = np.where(present, gs, 0.0), np.where(present, hs, 0.0)
    cg = np.cumsum(gs, axis=1)[:, :-1]
    ch = np.cumsum(hs, axis=1)[:, :-1]

    # Split after position i needs x[i] < x[i+1], both present; NaN != NaN
    # and NaN != x, so only the right-hand NaN needs masking.
    valid = xs[:, 1:] != xs[:, :-1]
    if any_missing:
        valid &= present[:, 1:]
    parent = G * G / (H + lam)

    def score(GL, HL):
        # In-place arithmetic; this is the hot loop of training.
        with np.errstate(divide="ignore", invalid="ignore"):
            t = HL + lam
            s = np.square(GL)
            s /= t
            np.subtract(H + lam, HL, out=t)
            u = np.subtract(G, GL)
            np.square(u, out=u)
            u /= t
            s += u
        ok = HL >= mcw
        ok &= t >= mcw + lam
        ok &= valid
        s[~ok] = -np.inf
        return s

    best = score(cg, ch)
    go_left = None
    if any_missing:
        has_missing = missing.any(axis=1)[:, None]
        s_left = np.where(has_missing, score(cg + gm[:, None], ch + hm[:, None]), -np.inf)
        # Missing-right wins exact ties between directions.
        go_left = s_left > best
        best = np.where(go_left, s_left, best)
    gain = 0.5 * (best - parent) - gamma
    top = gain.max()
    if not (np.isfinite(top) and top > 0):
        return []
    tol = TIE_RTOL * max(1.0, abs(top))
    out = []
    for j, i in zip(*np.nonzero(gain >= max(top - tol, 0.0))):
        if gain[j, i] <= 0:
            continue
        thr = _midpoint(float(xs[j, i]), float(xs[j, i + 1]))
        left = bool(go_left[j, i]) if go_left is not None else False
        out.append(SplitCandidate(int(feats[j]), thr, left, float(gain[j, i])))
    return out


def _search(idx, xs, g, h, G, H, feats, params, n_jobs) -> SplitCandidate | None:
    if n_jobs <= 1 or len(feats) < 2:
        return _select(_scan(idx, xs, g, h, G, H, feats, params))
    blocks = [b for b in np.array_split(np.arange(len(feats)), min(n_jobs, len(feats))) if len(b)]

    def run(b):
        return _scan(idx[b], xs[b], g, h, G, H, feats[b], params)

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        cands = [c for part in pool.map(run, blocks) for c in part]
    return _select(cands)


def _node_view(X, order, rows, feats):
    """Sorted ``(idx, xs)`` blocks of ``rows`` for ``feats``."""
    n = X.shape[0]
    in_node = np.zeros(n, dtype=bool)
    in_node[rows] = True
    S = order[:, feats].T
    idx = S[in_node[S]].reshape(len(feats), int(in_node.sum()))
    return idx, X[idx, feats[:, None]]


def _presort(X: np.ndarray) -> np.ndarray:
    return np.argsort(X, axis=0, kind="stable")


def find_best_split(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    rows: Sequence[int] | None = None,
    features: Sequence[int] | None = None,
    params: GbdtParams | None = None,
    *,
    order: np.ndarray | None = None,
    n_jobs: int = 1,
) -> SplitCandidate | None:
    """Exact greedy search for the best split of the node holding ``rows``.

    Thresholds are midpoints between adjacent distinct present values; rows
    with ``x < threshold`` go left, NaN goes to the default side. Returns None
    when no candidate has positive gain with both children meeting
    ``min_child_weight``.
    """
    params = params or GbdtParams()
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=int)
    feats = np.arange(d) if features is None else np.asarray(features, dtype=int)
    order = _presort(X) if order is None else order
    idx, xs = _node_view(X, order, rows, feats)
    G, H = float(np.sum(g[rows])), float(np.sum(h[rows]))
    return _search(idx, xs, g, h, G, H, feats, params, n_jobs)


# --------------------------------------------------------------------------
# Trees
# --------------------------------------------------------------------------


@dataclass
class Tree:
    """Flat pre-order node arrays; ``feature == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    default_left: list[bool] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    weight: list[float] = field(default_factory=list)

    def _add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.default_left.append(False)
        self.left.append(-1)
        self.right.append(-1)
        self.weight.append(0.0)
        return len(self.feature) - 1

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0) if self.feature else 0

    def leaf_weights(self) -> list[float]:
        return [w for f, w in zip(self.feature, self.weight) if f < 0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by each row."""
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        dleft = np.asarray(self.default_left)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=int)
        active = feat[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            nd = node[rows]
            x = X[rows, feat[nd]]
            go_left = np.where(np.isnan(x), dleft[nd], x < thr[nd])
            node[rows] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.weight)[self.apply(X)]

    def to_nodes(self) -> list[dict]:
        nodes = []
        for i, f in enumerate(self.feature):
            if f < 0:
                nodes.append({"id": i, "weight": self.weight[i]})
            else:
                nodes.append(
                    {
                        "id": i,
                        "feature": f,
                        "threshold": self.threshold[i],
                        "default": "left" if self.default_left[i] else "right",
                        "left": self.left[i],
                        "right": self.right[i],
                    }
                )
        return nodes

    @classmethod
    def from_nodes(cls, nodes: list[dict]) -> "Tree":
        t = cls()
        for k, nd in enumerate(sorted(nodes, key=lambda nd: nd["id"])):
            if nd["id"] != k:
                raise ValueError("tree node ids must be 0..n-1")
            t._add()
            if "weight" in nd:
                t.weight[k] = float(nd["weight"])
            else:
                t.feature[k] = int(nd["feature"])
                t.threshold[k] = float(nd["threshold"])
                t.default_left[k] = nd["default"] == "left"
                t.left[k] = int(nd["left"])
                t.right[k] = int(nd["right"])
        for k, f in enumerate(t.feature):
            if f >= 0 and not (0 < t.left[k] < len(t.feature) and 0 < t.right[k] < len(t.feature)):
                raise ValueError(f"node {k} references a missing child")
        return t


def _grow(X, order, g, h, rows, feats, params, n_jobs) -> Tree:
    tree = Tree()
    lam, eta = params.reg_lambda, params.learning_rate
    go_left_all = np.zeros(X.shape[0], dtype=bool)

    def build(node_rows, idx, xs, depth) -> int:
        k = tree._add()
        G, H = float(np.sum(g[node_rows])), float(np.sum(h[node_rows]))
        split = None
        if depth < params.max_depth:
            split = _search(idx, xs, g, h, G, H, feats, params, n_jobs)
        if split is None:
            tree.weight[k] = eta * leaf_weight(G, H, lam)
            return k
        x = X[node_rows, split.feature]
        go_left = np.where(np.isnan(x), split.default_left, x < split.threshold)
        tree.feature[k] = split.feature
        tree.threshold[k] = split.threshold
        tree.default_left[k] = split.default_left
        # Partition the sorted blocks; row order within each block is kept.
        go_left_all[node_rows] = go_left
        sel = go_left_all[idx].ravel()
        d = idx.shape[0]
        flat_idx, flat_xs = idx.ravel(), xs.ravel()
        kl, kr = np.flatnonzero(sel), np.flatnonzero(~sel)
        left_idx, left_xs = flat_idx[kl].reshape(d, -1), flat_xs[kl].reshape(d, -1)
        right_idx, right_xs = flat_idx[kr].reshape(d, -1), flat_xs[kr].reshape(d, -1)
        tree.left[k] = build(node_rows[go_left], left_idx, left_xs, depth + 1)
        tree.right[k] = build(node_rows[~go_left], right_idx, right_xs, depth + 1)
        return k

    rows = np.asarray(rows, dtype=int)
    idx, xs = _node_view(X, order, rows, feats)
    build(rows, idx, xs, 0)
    return tree


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass
class GbdtModel:
    base_score: float
    trees: list[Tree]
    feature_names: tuple[str, ...]
    params: GbdtParams
    # Training diagnostics; not serialized.
    loss_history: list[float] = field(default_factory=list, repr=False, compare=False)
    penalty_history: list[float] = field(default_factory=list, repr=False, compare=False)
    train_raw: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FORMAT_VERSION,
            "base_score": self.base_score,
            "params": self.params.to_dict(),
            "feature_names": list(self.feature_names),
            "trees": [t.to_nodes() for t in self.trees],
        }

    def to_json(self, extra: dict | None = None) -> str:
        d = self.to_dict()
        if extra:
            d.update(extra)
        return json.dumps(d, sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('version')!r}")
        return cls(
            base_score=float(d["base_score"]),
            trees=[Tree.from_nodes(t) for t in d["trees"]],
            feature_names=tuple(d["feature_names"]),
            params=GbdtParams.from_dict(d["params"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "GbdtModel":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json(extra))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GbdtModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _round_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng((int(seed) ^ round_index) & _MASK64)


def _stratified_holdout(y, fraction, seed):
    rng = np.random.default_rng(int(seed) & _MASK64)
    val = []
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        k = int(math.floor(fraction * len(idx) + 0.5))
        val.extend(rng.permutation(idx)[:k].tolist())
    val = np.sort(np.asarray(val, dtype=int))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


def train(
    X,
    y=None,
    params: GbdtParams | None = None,
    feature_names: Sequence[str] | None = None,
    n_jobs: int = 1,
) -> GbdtModel:
    """Fit a boosted model.

    Args:
        X: a :class:`~cirrhosis_horizon.features.FeatureMatrix` (labels and
            names taken from it) or a 2-D float array with NaN for missing.
        y: 0/1 labels when ``X`` is an array.
        params: hyperparameters; defaults to :class:`GbdtParams()`.
        n_jobs: threads for per-node split scans. Results do not depend on it.

    Raises:
        UntrainableError: fewer than two rows or only one class present.
    """
    params = params or GbdtParams()
    if hasattr(X, "model_input"):
        feature_names = X.feature_names
        y = X.labels
        X = X.model_input()
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    feature_names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(d))
    if len(feature_names) != d:
        raise ValueError("feature_names length does not match X")
    if n < 2 or y.min() == y.max():
        raise UntrainableError("training needs at least two rows and both classes")

    fit_rows = np.arange(n)
    val_rows = None
    if params.early_stopping_rounds is not None:
        fit_rows, val_rows = _stratified_holdout(y.astype(int), params.validation_fraction, params.rng_seed)
        if y[fit_rows].min() == y[fit_rows].max():
            raise UntrainableError("holdout left a single class for fitting")

    pos = float(np.sum(y[fit_rows]))
    base = math.log(pos / (len(fit_rows) - pos))
    order = _presort(X)
    raw = np.full(n, base)
    model = GbdtModel(base, [], feature_names, params)
    model.loss_history.append(log_loss(raw[fit_rows], y[fit_rows]))

    best_val, best_round, since_best = math.inf, 0, 0
    best_raw = raw.copy()
    for t in range(params.num_rounds):
        g, h = logistic_grad_hess(raw, y)
        rows, feats = fit_rows, np.arange(d)
        if params.subsample < 1 or params.colsample < 1:
            rng = _round_rng(params.rng_seed, t)
            if params.subsample < 1:
                k = max(1, int(round(params.subsample * len(fit_rows))))
                rows = np.sort(rng.choice(fit_rows, size=k, replace=False))
            if params.colsample < 1:
                k = max(1, int(round(params.colsample * d)))
                feats = np.sort(rng.choice(d, size=k, replace=False))
        tree = _grow(X, order, g, h, rows, feats, params, n_jobs)
        raw = raw + tree.predict(X)
        model.trees.append(tree)
        model.loss_history.append(log_loss(raw[fit_rows], y[fit_rows]))
        w = np.asarray(tree.leaf_weights())
        model.penalty_history.append(params.gamma * len(w) + 0.5 * params.reg_lambda * float(w @ w))

        if val_rows is not None:
            v = log_loss(raw[val_rows], y[val_rows])
            if v < best_val:
                best_val, best_round, since_best = v, t + 1, 0
                best_raw = raw.copy()
            else:
                since_best += 1
                if since_best >= params.early_stopping_rounds:
                    break
    if val_rows is not None:
        del model.trees[best_round:]
        raw = best_raw
    model.train_raw = raw
    return model


def _check_names(model: GbdtModel, names: Sequence[str]) -> None:
    names = tuple(names)
    for i, expected in enumerate(model.feature_names):
        got = names[i] if i < len(names) else None
        if got != expected:
            raise SchemaMismatchError(f"column {i}: expected {expected!r}, got {got!r}")
    if len(names) > len(model.feature_names):
        raise SchemaMismatchError(f"unexpected extra column {names[len(model.feature_names)]!r}")


def predict_raw(model: GbdtModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    if hasattr(X, "model_input"):
        feature_names = X.feature_names
        X = X.model_input()
    X = np.asarray(X, dtype=float)
    if feature_names is not None:
        _check_names(model, feature_names)
    elif X.shape[1] != len(model.feature_names):
        raise SchemaMismatchError(f"expected {len(model.feature_names)} columns, got {X.shape[1]}")
    raw = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        raw = raw + tree.predict(X)
    return raw


def predict(model: GbdtModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    """Probabilities ``sigmoid(base + sum of tree outputs)``."""
    return sigmoid(predict_raw(model, X, feature_names))
