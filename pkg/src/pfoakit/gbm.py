"""Gradient-boosted decision trees with native missing-value handling.

Binary logistic boosting in the second-order (gradient/hessian) style: the
base score is the label log-odds, each round fits one leaf-wise-grown tree to
the current gradients, and leaf values are L2-regularized Newton steps.
Missing feature values are never imputed; every split stores a default
direction chosen by gain, and prediction routes missing values along it.

Also implements exact per-tree Shapley attributions (the polynomial-time
path algorithm) using node covers as the background weighting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from pfoakit import evalstats
from pfoakit.datamodel import KneeRecord

REFERENCE_FEATURES = {
    1: ("age", "sex", "bmi"),
    2: ("age", "sex", "bmi", "womac_total"),
    3: ("age", "sex", "bmi", "womac_total", "kl"),
}
FUSION_FEATURES = ("age", "sex", "bmi", "womac_total", "kl", "cnn_prob")

_MIN_HESS = 1e-16


@dataclass(frozen=True)
class GbmParams:
    num_rounds: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 15
    min_samples_leaf: int = 5
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    l2_leaf_regularization: float = 1.0
    growth: str = "leafwise"
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1 or self.max_leaves < 2 or self.min_samples_leaf < 1:
            raise ValueError("num_rounds, max_leaves and min_samples_leaf must be positive")
        if not (0.0 < self.feature_fraction <= 1.0 and 0.0 < self.bagging_fraction <= 1.0):
            raise ValueError("fractions must be in (0, 1]")
        if self.learning_rate <= 0 or self.l2_leaf_regularization < 0:
            raise ValueError("learning_rate must be > 0 and l2 regularization >= 0")
        if self.growth not in ("leafwise", "depthwise"):
            raise ValueError("growth must be 'leafwise' or 'depthwise'")


@dataclass
class Tree:
    """Flat arrays; feature == -1 marks a leaf. Covers are training-row counts."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_values(self, x: np.ndarray) -> np.ndarray:
        """Route rows (NaN = missing) to their leaf values."""
        node = np.zeros(len(x), dtype=np.int64)
        while True:
            feats = self.feature[node]
            active = feats >= 0
            if not active.any():
                break
            rows = np.flatnonzero(active)
            cur = node[rows]
            vals = x[rows, feats[rows]]
            go_left = np.where(np.isnan(vals), self.default_left[cur], vals < self.threshold[cur])
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
        return self.value[node]


@dataclass
class GbmModel:
    base_score: float
    learning_rate: float
    trees: list[Tree]
    feature_names: tuple[str, ...]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p: float) -> float:
    p = min(max(p, 1e-15), 1.0 - 1e-15)
    return math.log(p / (1.0 - p))


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    default_left: bool
    left_rows: np.ndarray
    right_rows: np.ndarray


def _best_split(x, g, h, rows, features, lam, min_leaf) -> Optional[_Split]:
    """Best gain split of `rows`, trying both default directions for missing.

    Ties are broken deterministically: lowest feature index, then lowest
    threshold, then default-left. Features with fewer than two distinct
    present values (in particular all-missing features) are never selected.
    """
    g_tot = g[rows].sum()
    h_tot = h[rows].sum()
    parent = g_tot * g_tot / (h_tot + lam)
    best: Optional[_Split] = None
    for f in features:
        vals = x[rows, f]
        missing = np.isnan(vals)
        present_rows = rows[~missing]
        if len(present_rows) == 0:
            continue
        pv = x[present_rows, f]
        order = np.argsort(pv, kind="stable")
        pv_sorted = pv[order]
        boundaries = np.flatnonzero(pv_sorted[:-1] != pv_sorted[1:])
        if len(boundaries) == 0:
            continue
        sorted_rows = present_rows[order]
        cg = np.cumsum(g[sorted_rows])
        ch = np.cumsum(h[sorted_rows])
        g_miss = g[rows[missing]].sum()
        h_miss = h[rows[missing]].sum()
        n_miss = int(missing.sum())
        n_tot = len(rows)
        thresholds = 0.5 * (pv_sorted[boundaries] + pv_sorted[boundaries + 1])
        gl_p = cg[boundaries]
        hl_p = ch[boundaries]
        nl_p = boundaries + 1
        for default_left in (True, False):
            gl = gl_p + (g_miss if default_left else 0.0)
            hl = hl_p + (h_miss if default_left else 0.0)
            nl = nl_p + (n_miss if default_left else 0)
            nr = n_tot - nl
            ok = (nl >= min_leaf) & (nr >= min_leaf)
            if not ok.any():
                continue
            gr = g_tot - gl
            hr = h_tot - hl
            gains = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
            gains = np.where(ok, gains, -np.inf)
            k = int(np.argmax(gains))
            gain = float(gains[k])
            if gain <= 0.0:
                continue
            if best is None or gain > best.gain:
                thr = float(thresholds[k])
                go_left = np.where(np.isnan(vals), default_left, vals < thr)
                best = _Split(
                    gain=gain,
                    feature=int(f),
                    threshold=thr,
                    default_left=default_left,
                    left_rows=rows[go_left],
                    right_rows=rows[~go_left],
                )
    return best


def _grow_tree(x, g, h, rows, features, params: GbmParams) -> Tree:
    lam = params.l2_leaf_regularization
    feature = [-1]
    threshold = [0.0]
    default_left = [True]
    left = [-1]
    right = [-1]
    value = [-g[rows].sum() / (h[rows].sum() + lam)]
    cover = [float(len(rows))]

    # frontier entries: (node_id, rows, candidate split, depth)
    frontier: list[tuple[int, np.ndarray, Optional[_Split], int]] = [
        (0, rows, _best_split(x, g, h, rows, features, lam, params.min_samples_leaf), 0)
    ]
    n_leaves = 1
    while n_leaves < params.max_leaves:
        splittable = [e for e in frontier if e[2] is not None]
        if not splittable:
            break
        if params.growth == "leafwise":
            entry = max(splittable, key=lambda e: (e[2].gain, -e[0]))
        else:
            entry = min(splittable, key=lambda e: (e[3], e[0]))
        frontier.remove(entry)
        node_id, node_rows, split, depth = entry
        li, ri = len(feature), len(feature) + 1
        feature[node_id] = split.feature
        threshold[node_id] = split.threshold
        default_left[node_id] = split.default_left
        left[node_id] = li
        right[node_id] = ri
        for child_rows in (split.left_rows, split.right_rows):
            feature.append(-1)
            threshold.append(0.0)
            default_left.append(True)
            left.append(-1)
            right.append(-1)
            value.append(-g[child_rows].sum() / (h[child_rows].sum() + lam))
            cover.append(float(len(child_rows)))
        frontier.append((li, split.left_rows,
                         _best_split(x, g, h, split.left_rows, features, lam, params.min_samples_leaf),
                         depth + 1))
        frontier.append((ri, split.right_rows,
                         _best_split(x, g, h, split.right_rows, features, lam, params.min_samples_leaf),
                         depth + 1))
        n_leaves += 1
    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        default_left=np.array(default_left, dtype=bool),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        cover=np.array(cover, dtype=np.float64),
    )


def fit_gbm(features: np.ndarray, labels: np.ndarray, params: GbmParams,
            feature_names: Optional[Sequence[str]] = None) -> GbmModel:
    """Fit the boosted ensemble; NaN cells in `features` are missing values."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (n, d) with labels parallel")
    if len(x) < 2:
        raise ValueError("need at least 2 samples")
    if len(np.unique(y)) < 2:
        raise ValueError("labels are single-class; nothing to fit")
    n, d = x.shape
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(d))
    elif len(feature_names) != d:
        raise ValueError("feature_names length does not match features")

    rng = np.random.default_rng(params.seed)
    base = _logit(float(y.mean()))
    raw = np.full(n, base)
    trees: list[Tree] = []
    all_rows = np.arange(n)
    all_feats = np.arange(d)
    for _ in range(params.num_rounds):
        p = _sigmoid(raw)
        g = p - y
        h = np.maximum(p * (1.0 - p), _MIN_HESS)
        if params.bagging_fraction < 1.0:
            m = max(2 * params.min_samples_leaf, int(round(params.bagging_fraction * n)))
            rows = np.sort(rng.choice(n, size=min(m, n), replace=False))
        else:
            rows = all_rows
        if params.feature_fraction < 1.0:
            k = max(1, int(round(params.feature_fraction * d)))
            feats = np.sort(rng.choice(d, size=k, replace=False))
        else:
            feats = all_feats
        tree = _grow_tree(x, g, h, rows, feats, params)
        trees.append(tree)
        raw = raw + params.learning_rate * tree.leaf_values(x)
    return GbmModel(base_score=base, learning_rate=params.learning_rate,
                    trees=trees, feature_names=tuple(feature_names))


def predict_raw_gbm(model: GbmModel, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise ValueError(f"row has {x.shape[1]} features, schema expects {model.n_features}")
    raw = np.full(len(x), model.base_score)
    for tree in model.trees:
        raw += model.learning_rate * tree.leaf_values(x)
    return raw


def predict_proba_gbm(model: GbmModel, features: np.ndarray):
    """Probability of the positive class for one row or a batch."""
    single = np.asarray(features).ndim == 1
    p = _sigmoid(predict_raw_gbm(model, features))
    return float(p[0]) if single else p


# ---------------------------------------------------------------------------
# Exact tree Shapley attributions
# ---------------------------------------------------------------------------

def _expected_leaf_value(tree: Tree, cover: np.ndarray, node: int = 0) -> float:
    if tree.feature[node] < 0:
        return float(tree.value[node])
    li, ri = tree.left[node], tree.right[node]
    cl, cr = cover[li], cover[ri]
    return (cl * _expected_leaf_value(tree, cover, li) + cr * _expected_leaf_value(tree, cover, ri)) / (cl + cr)


def _recompute_cover(tree: Tree, background: np.ndarray) -> np.ndarray:
    cover = np.zeros(tree.n_nodes)

    def drop(node: int, rows: np.ndarray) -> None:
        cover[node] = float(len(rows))
        if tree.feature[node] < 0:
            return
        vals = background[rows, tree.feature[node]]
        go_left = np.where(np.isnan(vals), tree.default_left[node], vals < tree.threshold[node])
        drop(tree.left[node], rows[go_left])
        drop(tree.right[node], rows[~go_left])

    drop(0, np.arange(len(background)))
    if (cover == 0).any():
        raise ValueError("background set leaves tree nodes with zero cover; use more rows")
    return cover


def _shap_tree(tree: Tree, cover: np.ndarray, row: np.ndarray, phi: np.ndarray) -> None:
    """One tree's exact Shapley contributions, accumulated into phi.

    Walks every root-leaf path once, maintaining the per-feature inclusion
    ("one") and exclusion ("zero") fractions together with the permutation
    weight polynomial; path entries are [feature, zero_fraction, one_fraction,
    pweight].
    """

    def extend(path, zero_fraction, one_fraction, feature_index):
        path = [entry.copy() for entry in path]
        path.append([feature_index, zero_fraction, one_fraction, 1.0 if not path else 0.0])
        d = len(path) - 1
        for i in range(d - 1, -1, -1):
            path[i + 1][3] += one_fraction * path[i][3] * (i + 1) / (d + 1)
            path[i][3] = zero_fraction * path[i][3] * (d - i) / (d + 1)
        return path

    def unwind(path, index):
        path = [entry.copy() for entry in path]
        d = len(path) - 1
        one = path[index][2]
        zero = path[index][1]
        next_one = path[d][3]
        for i in range(d - 1, -1, -1):
            if one != 0.0:
                tmp = path[i][3]
                path[i][3] = next_one * (d + 1) / ((i + 1) * one)
                next_one = tmp - path[i][3] * zero * (d - i) / (d + 1)
            else:
                path[i][3] = path[i][3] * (d + 1) / (zero * (d - i))
        for i in range(index, d):
            path[i][:3] = path[i + 1][:3]
        return path[:-1]

    def unwound_sum(path, index):
        d = len(path) - 1
        one = path[index][2]
        zero = path[index][1]
        next_one = path[d][3]
        total = 0.0
        for i in range(d - 1, -1, -1):
            if one != 0.0:
                tmp = next_one * (d + 1) / ((i + 1) * one)
                total += tmp
                next_one = path[i][3] - tmp * zero * (d - i) / (d + 1)
            else:
                total += path[i][3] * (d + 1) / (zero * (d - i))
        return total

    def recurse(node, path, zero_fraction, one_fraction, feature_index):
        path = extend(path, zero_fraction, one_fraction, feature_index)
        f = tree.feature[node]
        if f < 0:
            for i in range(1, len(path)):
                w = unwound_sum(path, i)
                phi[path[i][0]] += w * (path[i][2] - path[i][1]) * tree.value[node]
            return
        val = row[f]
        go_left = tree.default_left[node] if np.isnan(val) else val < tree.threshold[node]
        hot = tree.left[node] if go_left else tree.right[node]
        cold = tree.right[node] if go_left else tree.left[node]
        incoming_zero, incoming_one = 1.0, 1.0
        k = next((i for i in range(1, len(path)) if path[i][0] == f), None)
        if k is not None:
            incoming_zero, incoming_one = path[k][1], path[k][2]
            path = unwind(path, k)
        recurse(hot, path, incoming_zero * cover[hot] / cover[node], incoming_one, int(f))
        recurse(cold, path, incoming_zero * cover[cold] / cover[node], 0.0, int(f))

    recurse(0, [], 1.0, 1.0, -1)


def treeshap(model: GbmModel, row: np.ndarray,
             background: Optional[np.ndarray] = None) -> tuple[np.ndarray, float]:
    """Per-feature contributions and the expected value for one row.

    Local accuracy holds exactly: expected + phi.sum() equals the raw
    (log-odds) model score. Covers come from the rows each tree was fitted
    on unless a background matrix is given, in which case they are
    recomputed by routing the background through each tree.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (model.n_features,):
        raise ValueError(f"row shape {row.shape} does not match schema ({model.n_features},)")
    phi = np.zeros(model.n_features)
    expected = model.base_score
    for tree in model.trees:
        cover = tree.cover if background is None else _recompute_cover(tree, np.asarray(background, dtype=np.float64))
        tree_phi = np.zeros(model.n_features)
        _shap_tree(tree, cover, row, tree_phi)
        phi += model.learning_rate * tree_phi
        expected += model.learning_rate * _expected_leaf_value(tree, cover)
    return phi, float(expected)


def shap_importance(model: GbmModel, dataset: np.ndarray,
                    background: Optional[np.ndarray] = None) -> list[tuple[str, float]]:
    """Mean |contribution| per feature over the dataset, descending."""
    x = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    total = np.zeros(model.n_features)
    for row in x:
        phi, _ = treeshap(model, row, background=background)
        total += np.abs(phi)
    mean_abs = total / len(x)
    order = sorted(range(model.n_features), key=lambda j: (-mean_abs[j], j))
    return [(model.feature_names[j], float(mean_abs[j])) for j in order]


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

DEFAULT_SEARCH_GRID: dict[str, tuple] = {
    "num_rounds": (40, 80, 150),
    "learning_rate": (0.05, 0.1, 0.2),
    "max_leaves": (7, 15, 31),
    "min_samples_leaf": (5, 20, 50),
    "feature_fraction": (0.8, 1.0),
    "bagging_fraction": (0.8, 1.0),
    "l2_leaf_regularization": (1.0, 5.0),
}


def tune(features: np.ndarray, labels: np.ndarray, subject_ids: Sequence[str],
         search_budget: int = 16, inner_folds: int = 3, seed: int = 0,
         grid: Mapping[str, tuple] = None) -> tuple[GbmParams, float]:
    """Random search over the grid, scored by inner subject-wise CV AUC.

    Candidates are drawn sequentially from the seeded stream, so a larger
    budget extends (never replaces) a smaller one and the best score is
    monotone in the budget. Returns the winning parameters and their score.
    """
    if search_budget < 1:
        raise ValueError("search budget must be >= 1")
    if grid is None:
        grid = DEFAULT_SEARCH_GRID
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    subject_ids = list(subject_ids)
    rng = np.random.default_rng(seed)
    assignment = evalstats.stratified_group_kfold(subject_ids, y, k=inner_folds, seed=seed)
    fold_of_row = np.array([assignment.fold_of[s] for s in subject_ids])

    best_params: Optional[GbmParams] = None
    best_auc = -np.inf
    for _ in range(search_budget):
        sampled = {name: choices[int(rng.integers(len(choices)))] for name, choices in grid.items()}
        params = GbmParams(seed=seed, **sampled)
        oof = np.full(len(y), np.nan)
        for fold in range(inner_folds):
            train_rows = fold_of_row != fold
            val_rows = ~train_rows
            if len(np.unique(y[train_rows])) < 2:
                continue
            model = fit_gbm(x[train_rows], y[train_rows], params)
            oof[val_rows] = predict_proba_gbm(model, x[val_rows])
        scored = ~np.isnan(oof)
        if len(np.unique(y[scored])) < 2:
            continue
        auc = evalstats.roc_auc(oof[scored], y[scored])
        if auc > best_auc:
            best_auc = auc
            best_params = params
    if best_params is None:
        raise ValueError("no candidate could be scored; check labels and folds")
    return best_params, float(best_auc)


# ---------------------------------------------------------------------------
# Clinical feature extraction and the reference / fusion models
# ---------------------------------------------------------------------------

def clinical_matrix(records: Sequence[KneeRecord], names: Sequence[str],
                    cnn_probs: Optional[Mapping[tuple, float]] = None) -> np.ndarray:
    """Feature matrix in schema order; missing values become NaN.

    Sex is encoded 0 (female) / 1 (male); other features are taken as-is.
    """
    rows = np.full((len(records), len(names)), np.nan)
    for i, r in enumerate(records):
        for j, name in enumerate(names):
            if name == "age":
                rows[i, j] = r.age
            elif name == "sex":
                rows[i, j] = 0.0 if r.sex == "F" else 1.0
            elif name == "bmi":
                rows[i, j] = np.nan if r.bmi is None else r.bmi
            elif name == "womac_total":
                rows[i, j] = np.nan if r.womac_total is None else r.womac_total
            elif name == "kl":
                rows[i, j] = np.nan if r.kl_grade is None else float(r.kl_grade)
            elif name == "cnn_prob":
                rows[i, j] = cnn_probs[r.key]
            else:
                raise ValueError(f"unknown feature {name!r}")
    return rows


def fit_reference_model(records: Sequence[KneeRecord], variant: int,
                        search_budget: int = 16, inner_folds: int = 3,
                        seed: int = 0) -> GbmModel:
    """Tune and fit reference model 1, 2 or 3 on exactly its feature subset."""
    if variant not in REFERENCE_FEATURES:
        raise ValueError(f"variant must be 1, 2 or 3, got {variant}")
    names = REFERENCE_FEATURES[variant]
    x = clinical_matrix(records, names)
    y = np.array([1 if r.pfoa else 0 for r in records], dtype=np.int64)
    subjects = [r.subject_id for r in records]
    params, _ = tune(x, y, subjects, search_budget=search_budget,
                     inner_folds=inner_folds, seed=seed)
    return fit_gbm(x, y, params, feature_names=names)


def fit_fusion_model(records: Sequence[KneeRecord],
                     cnn_probs: Mapping[tuple, float],
                     prob_train_subjects: Optional[Mapping[tuple, frozenset]] = None,
                     search_budget: int = 16, inner_folds: int = 3,
                     seed: int = 0) -> GbmModel:
    """Six-feature multi-modal model: clinical features plus the CNN probability.

    ``cnn_probs`` must be out-of-fold scores. When ``prob_train_subjects``
    maps each key to the subjects the scoring model was trained on, leakage
    (a record scored by a model that saw its subject) raises.
    """
    if prob_train_subjects is not None:
        for r in records:
            if r.subject_id in prob_train_subjects[r.key]:
                raise ValueError(
                    f"leakage: CNN probability for {r.key} comes from a model trained on its subject"
                )
    x = clinical_matrix(records, FUSION_FEATURES, cnn_probs=cnn_probs)
    y = np.array([1 if r.pfoa else 0 for r in records], dtype=np.int64)
    subjects = [r.subject_id for r in records]
    params, _ = tune(x, y, subjects, search_budget=search_budget,
                     inner_folds=inner_folds, seed=seed)
    return fit_gbm(x, y, params, feature_names=FUSION_FEATURES)


# ---------------------------------------------------------------------------
# Serialization: human-diffable JSON tree dump
# ---------------------------------------------------------------------------

def _tree_to_node_dict(tree: Tree, node: int = 0) -> dict:
    if tree.feature[node] < 0:
        return {"leaf": tree.value[node], "cover": tree.cover[node]}
    return {
        "feature": int(tree.feature[node]),
        "threshold": tree.threshold[node],
        "default": "left" if tree.default_left[node] else "right",
        "cover": tree.cover[node],
        "left": _tree_to_node_dict(tree, int(tree.left[node])),
        "right": _tree_to_node_dict(tree, int(tree.right[node])),
    }


def _tree_from_node_dict(d: dict) -> Tree:
    feature, threshold, default_left, left, right, value, cover = [], [], [], [], [], [], []

    def add(node: dict) -> int:
        idx = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        default_left.append(True)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        cover.append(float(node["cover"]))
        if "leaf" in node:
            value[idx] = float(node["leaf"])
        else:
            feature[idx] = int(node["feature"])
            threshold[idx] = float(node["threshold"])
            default_left[idx] = node["default"] == "left"
            left[idx] = add(node["left"])
            right[idx] = add(node["right"])
        return idx

    add(d)
    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        default_left=np.array(default_left, dtype=bool),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        cover=np.array(cover, dtype=np.float64),
    )


def save_gbm(model: GbmModel, path) -> None:
    doc = {
        "format_version": 1,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "feature_names": list(model.feature_names),
        "trees": [_tree_to_node_dict(t) for t in model.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_gbm(path) -> GbmModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported GBM file version {doc.get('format_version')}")
    return GbmModel(
        base_score=float(doc["base_score"]),
        learning_rate=float(doc["learning_rate"]),
        trees=[_tree_from_node_dict(t) for t in doc["trees"]],
        feature_names=tuple(doc["feature_names"]),
    )
