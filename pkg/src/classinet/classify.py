"""Downstream classification over expanded instances, plus evaluation
statistics: accuracy, cross-validation, out-degree, expansion ratios,
damping sweeps, and a paired t-test over fold accuracies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse, stats

from .expand import ExpandedInstance, GlobalExpansionConfig, expand_instances
from .predictor import LAMBDA_GRID, fit_logistic
from .util import json_render, substream


def expanded_to_csr(expanded: Sequence[ExpandedInstance]) -> sparse.csr_matrix:
    """Stack joint-space (original + namespaced expansion) rows."""
    if not expanded:
        raise ValueError("no instances")
    joints = [e.joint() for e in expanded]
    dim = joints[0].dim
    indptr = np.zeros(len(joints) + 1, dtype=np.int64)
    for i, v in enumerate(joints):
        indptr[i + 1] = indptr[i] + v.nnz
    indices = np.concatenate([v.indices for v in joints])
    data = np.concatenate([v.values for v in joints])
    return sparse.csr_matrix((data, indices, indptr), shape=(len(joints), dim))


@dataclass
class DownstreamModel:
    """Linear classifier over the joint feature space.

    Binary problems keep one weight vector and the sign rule; multiclass
    is one-vs-rest with argmax over class margins, ties resolved toward
    the smallest class id.
    """

    classes: list  # sorted ascending
    weights: np.ndarray  # (n_classes_or_1, joint_dim)
    biases: np.ndarray
    lam: float
    dev_accuracy: float | None = None

    @property
    def binary(self) -> bool:
        return len(self.classes) == 2

    def decision_scores(self, X: sparse.csr_matrix) -> np.ndarray:
        return np.asarray((X @ self.weights.T)) + self.biases

    def predict(self, X: sparse.csr_matrix) -> np.ndarray:
        scores = self.decision_scores(X)
        if self.binary:
            margin = scores[:, 0]
            picks = (margin > 0.0).astype(np.int64)
            return np.asarray(self.classes, dtype=np.int64)[picks]
        # argmax returns the first maximum; classes are ascending
        return np.asarray(self.classes, dtype=np.int64)[scores.argmax(axis=1)]


def _stratified_split(labels: np.ndarray, fraction: float,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(main, held_out) index arrays; held_out holds ~fraction per class."""
    held = []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rng = substream(seed, "dev", int(c))
        rows = rng.permutation(rows)
        take = min(int(np.ceil(rows.size * fraction)), rows.size - 1)
        if take > 0:
            held.append(rows[:take])
    held_idx = np.sort(np.concatenate(held)) if held else np.array([], dtype=np.int64)
    mask = np.ones(labels.size, dtype=bool)
    mask[held_idx] = False
    return np.flatnonzero(mask), held_idx


def _fit_ovr(X: sparse.csr_matrix, labels: np.ndarray, classes: np.ndarray,
             lam: float, max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    if classes.size == 2:
        y = np.where(labels == classes[1], 1.0, -1.0)
        w, b, _ = fit_logistic(X, y, lam, max_iter=max_iter)
        return w[None, :], np.array([b])
    weights, biases = [], []
    for c in classes:
        y = np.where(labels == c, 1.0, -1.0)
        w, b, _ = fit_logistic(X, y, lam, max_iter=max_iter)
        weights.append(w)
        biases.append(b)
    return np.stack(weights), np.array(biases)


def train_downstream(
    expanded: Sequence[ExpandedInstance],
    labels: Sequence[int],
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    seed: int = 0,
    dev_fraction: float = 0.1,
    max_iter: int = 300,
) -> DownstreamModel:
    """L2 logistic regression tuned on a stratified development split.

    The development split (default 10% of the training data, seeded,
    stratified) picks the regularization strength; ties prefer the
    smaller value; the final model refits on everything.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("degenerate labels: need at least two classes")
    X = expanded_to_csr(expanded)
    if X.shape[0] != labels.size:
        raise ValueError("labels do not align with instances")

    grid = sorted(float(l) for l in lambda_grid)
    train_idx, dev_idx = _stratified_split(labels, dev_fraction, seed)
    best_lam, best_acc = grid[0], -1.0
    if dev_idx.size and np.unique(labels[train_idx]).size == classes.size:
        for lam in grid:
            w, b = _fit_ovr(X[train_idx], labels[train_idx], classes, lam, max_iter)
            probe = DownstreamModel(list(classes), w, b, lam)
            acc = float((probe.predict(X[dev_idx]) == labels[dev_idx]).mean())
            if acc > best_acc:
                best_lam, best_acc = lam, acc
    else:
        best_acc = None

    w, b = _fit_ovr(X, labels, classes, best_lam, max_iter)
    return DownstreamModel(
        classes=[int(c) for c in classes],
        weights=w,
        biases=b,
        lam=best_lam,
        dev_accuracy=best_acc,
    )


MODEL_MAGIC = b"classinet-model"
MODEL_VERSION = b"v1"


def save_model(path, model: DownstreamModel) -> None:
    """Little-endian binary dump; byte-identical for identical models."""
    rows, dim = model.weights.shape
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + b" " + MODEL_VERSION +
                 f" {len(model.classes)} {rows} {dim}\n".encode("ascii"))
        fh.write(np.float64(model.lam).astype("<f8").tobytes())
        fh.write(np.asarray(model.classes, dtype="<i8").tobytes())
        fh.write(np.asarray(model.biases, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())


def load_model(path) -> DownstreamModel:
    with open(path, "rb") as fh:
        parts = fh.readline().split()
        if len(parts) != 5 or parts[0] != MODEL_MAGIC or parts[1] != MODEL_VERSION:
            raise ValueError(f"{path}: not a downstream model file")
        n_classes, rows, dim = int(parts[2]), int(parts[3]), int(parts[4])
        lam = float(np.frombuffer(fh.read(8), dtype="<f8")[0])
        classes = np.frombuffer(fh.read(8 * n_classes), dtype="<i8")
        biases = np.frombuffer(fh.read(8 * rows), dtype="<f8")
        weights = np.frombuffer(fh.read(8 * rows * dim), dtype="<f8").reshape(rows, dim)
    return DownstreamModel(
        classes=[int(c) for c in classes],
        weights=weights.copy(),
        biases=biases.copy(),
        lam=lam,
    )


def majority_accuracy(labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no labels")
    _, counts = np.unique(labels, return_counts=True)
    return float(counts.max() / labels.size)


@dataclass
class EvalReport:
    accuracy: float
    n_instances: int
    per_class: dict = field(default_factory=dict)
    majority_baseline: float | None = None
    fold_accuracies: list = field(default_factory=list)
    expansion_ratio_summary: dict | None = None
    out_degree: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_instances": self.n_instances,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "majority_baseline": self.majority_baseline,
            "fold_accuracies": list(self.fold_accuracies),
            "expansion_ratio_summary": self.expansion_ratio_summary,
            "out_degree": self.out_degree,
            "config": self.config,
        }


def save_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json_render(report.to_dict()) + "\n")


def load_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    return EvalReport(
        accuracy=d["accuracy"],
        n_instances=d["n_instances"],
        per_class={int(k): v for k, v in d.get("per_class", {}).items()},
        majority_baseline=d.get("majority_baseline"),
        fold_accuracies=d.get("fold_accuracies", []),
        expansion_ratio_summary=d.get("expansion_ratio_summary"),
        out_degree=d.get("out_degree"),
        config=d.get("config", {}),
    )


def evaluate(model: DownstreamModel, expanded: Sequence[ExpandedInstance],
             labels: Sequence[int]) -> EvalReport:
    """Accuracy = correct / total, with per-class and majority references."""
    labels = np.asarray(labels, dtype=np.int64)
    X = expanded_to_csr(expanded)
    pred = model.predict(X)
    correct = pred == labels
    per_class = {}
    for c in np.unique(labels):
        rows = labels == c
        per_class[int(c)] = float(correct[rows].mean())
    return EvalReport(
        accuracy=float(correct.mean()),
        n_instances=int(labels.size),
        per_class=per_class,
        majority_baseline=majority_accuracy(labels),
    )


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Deterministic stratified fold assignment; sizes differ by <= 1.

    Items are grouped by class, shuffled within the class, and dealt
    round-robin into folds with a cursor that carries across classes, so
    both the overall and per-class fold sizes stay balanced.
    """
    labels = np.asarray(labels)
    assignment = np.empty(labels.size, dtype=np.int64)
    cursor = 0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rng = substream(seed, "folds", int(c))
        rows = rng.permutation(rows)
        for r in rows:
            assignment[r] = cursor % folds
            cursor += 1
    return assignment


def cross_validate(
    expanded: Sequence[ExpandedInstance],
    labels: Sequence[int],
    folds: int = 5,
    seed: int = 0,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    max_iter: int = 300,
) -> EvalReport:
    """Stratified k-fold accuracy over pre-expanded instances.

    Expansion is instance-local (the net never sees labels), so
    instances are expanded once and folded afterwards.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    labels = np.asarray(labels, dtype=np.int64)
    assignment = stratified_folds(labels, folds, seed)
    fold_accs = []
    correct_total = 0
    for f in range(folds):
        test_mask = assignment == f
        train_rows = np.flatnonzero(~test_mask)
        test_rows = np.flatnonzero(test_mask)
        model = train_downstream(
            [expanded[r] for r in train_rows], labels[train_rows],
            lambda_grid=lambda_grid, seed=seed, max_iter=max_iter,
        )
        X_test = expanded_to_csr([expanded[r] for r in test_rows])
        pred = model.predict(X_test)
        hits = int((pred == labels[test_rows]).sum())
        correct_total += hits
        fold_accs.append(hits / test_rows.size)
    per_class: dict[int, float] = {}
    return EvalReport(
        accuracy=correct_total / labels.size,
        n_instances=int(labels.size),
        per_class=per_class,
        majority_baseline=majority_accuracy(labels),
        fold_accuracies=fold_accs,
    )


def out_degree(net) -> float:
    """Mean total outgoing weight per vertex: (1/N) sum_i sum_j w_ij."""
    if net.n_vertices == 0:
        return 0.0
    total = sum(w for edges in net.adjacency.values() for _, w in edges)
    return total / net.n_vertices


@dataclass
class RatioReport:
    ratios: np.ndarray
    histogram: np.ndarray
    bin_edges: np.ndarray
    mode_bin: tuple  # (low, high) edges of the most populated bin

    @property
    def mode_center(self) -> float:
        return (self.mode_bin[0] + self.mode_bin[1]) / 2.0

    def summary(self) -> dict:
        return {
            "mean": float(self.ratios.mean()) if self.ratios.size else 1.0,
            "median": float(np.median(self.ratios)) if self.ratios.size else 1.0,
            "mode_bin_low": float(self.mode_bin[0]),
            "mode_bin_high": float(self.mode_bin[1]),
            "n": int(self.ratios.size),
        }


def expansion_ratio(before: Sequence, after: Sequence[ExpandedInstance],
                    bins: int = 40) -> RatioReport:
    """Per-instance after/before feature counts plus a histogram.

    `before` supplies the pre-expansion feature counts (SparseVector or
    anything with .nnz); instances with no features before expansion are
    excluded from the ratio statistics.
    """
    if len(before) != len(after):
        raise ValueError("before/after lengths differ")
    ratios = []
    for b, a in zip(before, after):
        nb = b.nnz
        if nb == 0:
            continue
        ratios.append(a.n_after / nb)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        hist = np.array([0])
        edges = np.array([1.0, 1.0])
    else:
        hist, edges = np.histogram(ratios, bins=bins)
    top = int(hist.argmax())
    return RatioReport(
        ratios=ratios,
        histogram=hist,
        bin_edges=edges,
        mode_bin=(float(edges[top]), float(edges[top + 1])),
    )


def damping_sweep(
    vectors,
    labels: Sequence[int],
    net,
    gammas: Sequence[float],
    q: int = 4,
    seed: int = 0,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    val_fraction: float = 0.2,
    score_floor: float = 1e-4,
    max_iter: int = 300,
) -> list[tuple[float, float]]:
    """Validation accuracy of global expansion at each damping value.

    One expand + train + evaluate cycle per gamma on a fixed seeded
    stratified split. Rows come back sorted by gamma ascending.
    """
    if not gammas:
        raise ValueError("no gamma values given")
    labels = np.asarray(labels, dtype=np.int64)
    train_idx, val_idx = _stratified_split(labels, val_fraction, seed)
    if val_idx.size == 0:
        raise ValueError("validation split is empty")
    rows = []
    for gamma in sorted(float(g) for g in gammas):
        cfg = GlobalExpansionConfig(gamma=gamma, q=q, score_floor=score_floor)
        expanded = expand_instances("global", vectors, net=net, global_cfg=cfg)
        model = train_downstream(
            [expanded[r] for r in train_idx], labels[train_idx],
            lambda_grid=lambda_grid, seed=seed, max_iter=max_iter,
        )
        X_val = expanded_to_csr([expanded[r] for r in val_idx])
        acc = float((model.predict(X_val) == labels[val_idx]).mean())
        rows.append((gamma, acc))
    return rows


def best_gamma(rows: Sequence[tuple[float, float]]) -> float:
    """Argmax gamma of a sweep; ties prefer the smaller gamma."""
    return max(rows, key=lambda r: (r[1], -r[0]))[0]


def write_sweep(path, rows: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gamma\taccuracy\n")
        for gamma, acc in rows:
            fh.write(f"{gamma:.17g}\t{acc:.17g}\n")


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-tailed paired t-test over matched accuracy lists."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise ValueError("need two equal-length samples with n >= 2")
    t, p = stats.ttest_rel(a, b)
    return float(t), float(p)
