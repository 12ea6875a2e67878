"""Per-feature binary predictors.

A feature predictor is an L2-regularized logistic regression trained to
guess whether feature i occurs in an instance, from automatically
sampled positives (instances containing i, with i removed) and twice as
many negatives (instances lacking i). Training is deterministic
full-batch optimization so that downstream edge weights reproduce.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, sparse
from scipy.special import expit

from .corpus import SparseVector, to_csr
from .util import parallel_map, substream

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
MIN_POSITIVE_DEFAULT = 5
NEGATIVE_RATIO = 2

BANK_MAGIC = b"classinet-predictors"
BANK_VERSION = b"v1"
_REC_HEAD = struct.Struct("<IddI")
_REC_PAIR = struct.Struct("<Id")


class InsufficientPositivesError(ValueError):
    def __init__(self, feature_index: int, found: int, needed: int):
        self.feature_index = feature_index
        self.found = found
        self.needed = needed
        super().__init__(
            f"insufficient positives({feature_index}): "
            f"{found} usable, need {needed}"
        )


@dataclass
class PredictorSample:
    """Training material for one feature predictor."""

    feature_index: int
    positives: list  # SparseVector, feature_index zeroed
    negatives: list  # SparseVector, never contain feature_index
    positive_ids: np.ndarray  # positions in the source pool
    negative_ids: np.ndarray
    truncated: bool = False  # fewer negatives available than 2x positives

    def __post_init__(self):
        self.positive_ids = np.asarray(self.positive_ids, dtype=np.int64)
        self.negative_ids = np.asarray(self.negative_ids, dtype=np.int64)


def select_training_instances(
    vectors: Sequence[SparseVector],
    feature_index: int,
    seed: int,
    min_positive: int = MIN_POSITIVE_DEFAULT,
    max_positive: int | None = None,
    mean_nnz: float | None = None,
    containing: np.ndarray | None = None,
) -> PredictorSample:
    """Pick positives and negatives for feature `feature_index`.

    Positives are every instance containing the feature whose non-zero
    count exceeds the pool average (longer instances carry more context
    for predicting the removed feature); the feature itself is zeroed
    out of them. Negatives are 2x as many instances sampled uniformly
    without replacement from those lacking the feature, truncated when
    the pool runs short.

    mean_nnz and containing are optional precomputed values so bank
    builds do not rescan the pool per feature; max_positive caps the
    positive side (seeded subsample) for budget-bound runs.
    """
    if mean_nnz is None:
        mean_nnz = float(np.mean([v.nnz for v in vectors]))
    if containing is None:
        containing = np.array(
            [pos for pos, v in enumerate(vectors) if v.get(feature_index) != 0.0],
            dtype=np.int64,
        )
    pos_ids = np.array(
        [pos for pos in containing if vectors[pos].nnz > mean_nnz],
        dtype=np.int64,
    )
    if pos_ids.size < min_positive:
        raise InsufficientPositivesError(feature_index, int(pos_ids.size), min_positive)

    rng = substream(seed, "sample", feature_index)
    if max_positive is not None and pos_ids.size > max_positive:
        pos_ids = np.sort(rng.choice(pos_ids, size=max_positive, replace=False))

    lacking_mask = np.ones(len(vectors), dtype=bool)
    lacking_mask[containing] = False
    neg_pool = np.flatnonzero(lacking_mask)
    wanted = NEGATIVE_RATIO * int(pos_ids.size)
    truncated = neg_pool.size < wanted
    take = min(wanted, int(neg_pool.size))
    neg_ids = np.sort(rng.choice(neg_pool, size=take, replace=False))

    positives = [vectors[p].without(feature_index) for p in pos_ids]
    negatives = [vectors[p] for p in neg_ids]
    return PredictorSample(
        feature_index=feature_index,
        positives=positives,
        negatives=negatives,
        positive_ids=pos_ids,
        negative_ids=neg_ids,
        truncated=truncated,
    )


def logistic_loss_grad(
    w: np.ndarray,
    X: sparse.csr_matrix,
    y: np.ndarray,
    lam: float,
) -> tuple[float, np.ndarray]:
    """Averaged logistic loss with L2 penalty on weights (not bias).

    w is the packed parameter vector [weights..., bias]; y is +/-1.
    Returns (loss, gradient) with the analytic gradient the finite-
    difference tests check against.
    """
    weights, bias = w[:-1], w[-1]
    margin = X @ weights + bias
    ym = y * margin
    n = y.size
    loss = float(np.logaddexp(0.0, -ym).mean() + 0.5 * lam * np.dot(weights, weights))
    # d/dz log(1+e^(-yz)) = -y * sigmoid(-yz)
    coef = -y * expit(-ym) / n
    grad = np.empty_like(w)
    grad[:-1] = X.T @ coef + lam * weights
    grad[-1] = coef.sum()
    return loss, grad


def fit_logistic(
    X: sparse.csr_matrix,
    y: np.ndarray,
    lam: float,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> tuple[np.ndarray, float, bool]:
    """Deterministic full-batch fit; returns (weights, bias, converged).

    L-BFGS from a zero start. Non-convergence within the iteration cap
    returns the best iterate with converged=False.
    """
    x0 = np.zeros(X.shape[1] + 1)
    res = optimize.minimize(
        logistic_loss_grad,
        x0,
        args=(X, np.asarray(y, dtype=np.float64), lam),
        method="L-BFGS-B",
        jac=True,
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15},
    )
    return res.x[:-1], float(res.x[-1]), bool(res.success)


@dataclass
class FeaturePredictor:
    """Trained predictor for one feature: sparse weights + bias.

    weight_indices never include feature_index (the target feature is
    removed from its own inputs), so predictions ignore that dimension
    structurally.
    """

    feature_index: int
    weight_indices: np.ndarray  # int64, strictly increasing, over d
    weight_values: np.ndarray  # float64
    bias: float
    lam: float
    dim: int
    n_positive: int = 0
    n_negative: int = 0
    cv_accuracy: float | None = None
    converged: bool = True
    _col: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weight_indices = np.asarray(self.weight_indices, dtype=np.int64)
        self.weight_values = np.asarray(self.weight_values, dtype=np.float64)
        keep = (self.weight_values != 0.0) & (self.weight_indices != self.feature_index)
        if not keep.all():
            self.weight_indices = self.weight_indices[keep]
            self.weight_values = self.weight_values[keep]

    def margin(self, x: SparseVector) -> float:
        """mu . x + bias, ignoring dimension feature_index."""
        _, xi, wi = np.intersect1d(
            x.indices, self.weight_indices, assume_unique=True, return_indices=True
        )
        return float(np.dot(x.values[xi], self.weight_values[wi]) + self.bias)

    def predict(self, x: SparseVector) -> tuple[int, float]:
        """(label, sigmoid score); label 1 iff score strictly above 0.5."""
        if x.dim != self.dim:
            raise ValueError(
                f"dimension mismatch: x has {x.dim}, predictor expects {self.dim}"
            )
        m = self.margin(x)
        return (1 if m > 0.0 else 0), float(expit(m))

    def _weight_column(self) -> sparse.csr_matrix:
        if self._col is None:
            self._col = sparse.csr_matrix(
                (self.weight_values, (self.weight_indices, np.zeros_like(self.weight_indices))),
                shape=(self.dim, 1),
            )
        return self._col

    def margins_batch(self, X: sparse.csr_matrix) -> np.ndarray:
        if X.shape[1] != self.dim:
            raise ValueError("dimension mismatch in batch prediction")
        return np.asarray((X @ self._weight_column()).todense()).ravel() + self.bias

    def decide_batch(self, X: sparse.csr_matrix) -> np.ndarray:
        """Predicted labels (uint8) for each CSR row."""
        return (self.margins_batch(X) > 0.0).astype(np.uint8)

    def weight_norm(self) -> float:
        return float(np.linalg.norm(self.weight_values))


@dataclass
class IndicatorPredictor:
    """h_i(x) = 1[x_i != 0]; reduces the net to a co-occurrence graph."""

    feature_index: int
    dim: int

    def predict(self, x: SparseVector) -> tuple[int, float]:
        fired = x.get(self.feature_index) != 0.0
        return (1 if fired else 0), (1.0 if fired else 0.0)

    def decide_batch(self, X: sparse.csr_matrix) -> np.ndarray:
        col = X.getcol(self.feature_index)
        out = np.zeros(X.shape[0], dtype=np.uint8)
        out[col.nonzero()[0]] = 1
        return out

    def margins_batch(self, X: sparse.csr_matrix) -> np.ndarray:
        """Infinite margins, so sigmoid scores stay exactly 1 and 0."""
        fired = self.decide_batch(X).astype(bool)
        return np.where(fired, np.inf, -np.inf)


def _cv_folds(n: int, folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[f::folds] for f in range(folds)]


def train_predictor(
    sample: PredictorSample,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    folds: int = 5,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> FeaturePredictor:
    """Fit the predictor, tuning lambda by k-fold CV accuracy.

    Ties prefer the smaller lambda. The final model is refit on the
    whole sample at the chosen lambda. Weights are restricted to
    features that actually occur in the sample; everything else is an
    implicit zero.
    """
    if not sample.positives or not sample.negatives:
        raise ValueError("sample must contain both positives and negatives")
    all_vecs = list(sample.positives) + list(sample.negatives)
    y = np.concatenate([
        np.ones(len(sample.positives)),
        -np.ones(len(sample.negatives)),
    ])
    dim = all_vecs[0].dim

    # Compact the feature space to what the sample touches.
    seen = np.unique(np.concatenate([v.indices for v in all_vecs])) if all_vecs else np.array([], dtype=np.int64)
    seen = seen[seen != sample.feature_index]
    remap = {int(g): c for c, g in enumerate(seen)}
    rows = []
    for v in all_vecs:
        keep = v.indices != sample.feature_index
        rows.append(SparseVector(
            np.array([remap[int(i)] for i in v.indices[keep]], dtype=np.int64),
            v.values[keep],
            dim=len(seen),
        ))
    X = to_csr(rows, dim=len(seen))

    grid = sorted(float(l) for l in lambda_grid)
    if len(grid) == 1:
        # nothing to tune
        lam = grid[0]
        best_accuracy = None
    else:
        rng = substream(seed, "cv", sample.feature_index)
        fold_idx = _cv_folds(len(rows), folds, rng)
        accuracies = []
        for lam in grid:
            correct = 0
            for f in range(folds):
                test = fold_idx[f]
                if test.size == 0:
                    continue
                train = np.concatenate([fold_idx[g] for g in range(folds) if g != f])
                w, b, _ = fit_logistic(X[train], y[train], lam, max_iter=max_iter, tol=tol)
                pred = np.where((X[test] @ w + b) > 0.0, 1.0, -1.0)
                correct += int((pred == y[test]).sum())
            accuracies.append(correct / len(rows))
        best = int(np.argmax(accuracies))  # first max -> smaller lambda on ties
        lam = grid[best]
        best_accuracy = accuracies[best]

    w, b, converged = fit_logistic(X, y, lam, max_iter=max_iter, tol=tol)
    return FeaturePredictor(
        feature_index=sample.feature_index,
        weight_indices=seen,
        weight_values=w,
        bias=b,
        lam=lam,
        dim=dim,
        n_positive=len(sample.positives),
        n_negative=len(sample.negatives),
        cv_accuracy=best_accuracy,
        converged=converged,
    )


@dataclass
class PredictorBank:
    """All trained predictors for one build, ordered by feature index."""

    dim: int
    predictors: list
    skipped: dict = field(default_factory=dict)  # feature index -> reason

    def __post_init__(self):
        self.predictors = sorted(self.predictors, key=lambda p: p.feature_index)
        self._by_index = {p.feature_index: p for p in self.predictors}

    def __len__(self) -> int:
        return len(self.predictors)

    def __iter__(self):
        return iter(self.predictors)

    def get(self, feature_index: int):
        return self._by_index.get(feature_index)

    @property
    def feature_indices(self) -> list[int]:
        return [p.feature_index for p in self.predictors]


def train_bank(
    vectors: Sequence[SparseVector],
    feature_indices: Sequence[int],
    seed: int,
    min_positive: int = MIN_POSITIVE_DEFAULT,
    max_positive: int | None = None,
    lambda_grid: Sequence[float] = LAMBDA_GRID,
    folds: int = 5,
    workers: int = 1,
    max_iter: int = 200,
) -> PredictorBank:
    """Train one predictor per candidate feature; parallel across features.

    Features with too few usable positives are skipped and recorded.
    Each feature draws from its own seeded sub-stream, so results do not
    depend on the worker count.
    """
    if not vectors:
        raise ValueError("empty training pool")
    dim = vectors[0].dim
    pool_mean = float(np.mean([v.nnz for v in vectors]))
    postings: dict[int, list[int]] = {}
    for pos, v in enumerate(vectors):
        for i in v.indices:
            postings.setdefault(int(i), []).append(pos)

    def _train_one(feature_index: int):
        containing = np.array(postings.get(feature_index, []), dtype=np.int64)
        try:
            s = select_training_instances(
                vectors, feature_index, seed,
                min_positive=min_positive, max_positive=max_positive,
                mean_nnz=pool_mean, containing=containing,
            )
        except InsufficientPositivesError as exc:
            return feature_index, None, str(exc)
        pred = train_predictor(
            s, lambda_grid=lambda_grid, folds=folds, seed=seed, max_iter=max_iter
        )
        return feature_index, pred, None

    results = parallel_map(_train_one, list(feature_indices), workers=workers)
    predictors, skipped = [], {}
    for feature_index, pred, reason in results:
        if pred is None:
            skipped[feature_index] = reason
        else:
            predictors.append(pred)
    return PredictorBank(dim=dim, predictors=predictors, skipped=skipped)


def save_bank(path, bank: PredictorBank) -> None:
    """Binary bank file: ASCII magic header line, then little-endian records."""
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC + b" " + BANK_VERSION +
                 f" {bank.dim} {len(bank)}\n".encode("ascii"))
        for p in bank:
            nnz = int(p.weight_indices.size)
            fh.write(_REC_HEAD.pack(p.feature_index, p.bias, p.lam, nnz))
            for i, v in zip(p.weight_indices, p.weight_values):
                fh.write(_REC_PAIR.pack(int(i), float(v)))


def load_bank(path) -> PredictorBank:
    with open(path, "rb") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 4 or parts[0] != BANK_MAGIC or parts[1] != BANK_VERSION:
            raise ValueError(f"{path}: not a predictor bank file")
        dim, count = int(parts[2]), int(parts[3])
        predictors = []
        for _ in range(count):
            head = fh.read(_REC_HEAD.size)
            if len(head) != _REC_HEAD.size:
                raise ValueError(f"{path}: truncated record header")
            feature_index, bias, lam, nnz = _REC_HEAD.unpack(head)
            body = fh.read(_REC_PAIR.size * nnz)
            if len(body) != _REC_PAIR.size * nnz:
                raise ValueError(f"{path}: truncated record body")
            idx = np.empty(nnz, dtype=np.int64)
            val = np.empty(nnz, dtype=np.float64)
            for n in range(nnz):
                i, v = _REC_PAIR.unpack_from(body, n * _REC_PAIR.size)
                idx[n], val[n] = i, v
            predictors.append(FeaturePredictor(
                feature_index=feature_index,
                weight_indices=idx,
                weight_values=val,
                bias=bias,
                lam=lam,
                dim=dim,
            ))
    return PredictorBank(dim=dim, predictors=predictors)


def export_bank_text(path, bank: PredictorBank, vocab=None) -> None:
    """Human-readable dump of the bank for debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# predictor bank: dim={bank.dim} count={len(bank)}\n")
        for p in bank:
            name = vocab.term(p.feature_index) if vocab is not None else "?"
            fh.write(f"predictor {p.feature_index} ({name}) "
                     f"bias={p.bias!r} lambda={p.lam!r} nnz={p.weight_indices.size}\n")
            for i, v in zip(p.weight_indices, p.weight_values):
                tname = vocab.term(int(i)) if vocab is not None else "?"
                fh.write(f"  {int(i)}\t{tname}\t{v!r}\n")
