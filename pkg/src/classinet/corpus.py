"""Corpus handling: tokenization, vocabulary, sparse feature vectors.

Documents come in as JSONL ({"id": ..., "text": ..., "label": ...}),
get tokenized with a small deterministic tokenizer, and leave as sparse
vectors (binary, tf, or tf-idf) over a frequency-ordered vocabulary.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

_TOKEN_RE = re.compile(r"[a-z0-9]+")

VOCAB_MAGIC = "classinet-vocab"
VOCAB_VERSION = "v1"


def tokenize(text: str, lemma_heuristic: bool = False) -> list[str]:
    """Lowercase and split on non-alphanumeric boundaries.

    With lemma_heuristic on, a crude singularizer drops a trailing 's'
    from tokens of length >= 4 that do not end in 'ss' ("dogs" -> "dog",
    "class" stays "class"). Merges trivial plural variants without
    pulling in a real lemmatizer.
    """
    tokens = _TOKEN_RE.findall(text.lower())
    if not lemma_heuristic:
        return tokens
    out = []
    for tok in tokens:
        if len(tok) >= 4 and tok.endswith("s") and not tok.endswith("ss"):
            tok = tok[:-1]
        out.append(tok)
    return out


@dataclass
class Document:
    doc_id: str
    text: str
    label: int | None = None

    def tokens(self, lemma_heuristic: bool = False) -> list[str]:
        return tokenize(self.text, lemma_heuristic=lemma_heuristic)


def read_documents(path) -> list[Document]:
    """Load a JSONL corpus. Lines must carry "id" and "text"; "label" is optional."""
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            if "id" not in rec or "text" not in rec:
                raise ValueError(f"{path}:{lineno}: record needs 'id' and 'text'")
            label = rec.get("label")
            if label is not None:
                label = int(label)
            docs.append(Document(str(rec["id"]), rec["text"], label))
    return docs


def write_documents(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            rec = {"id": doc.doc_id, "text": doc.text}
            if doc.label is not None:
                rec["label"] = doc.label
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class Vocabulary:
    """Term <-> index mapping ordered by document frequency.

    Terms are sorted by descending document frequency, ties broken
    lexicographically, so index 0 is always the most common term and
    the ordering is reproducible from counts alone.
    """

    def __init__(self, terms: Sequence[str], doc_freqs: Sequence[int], n_docs: int):
        if len(terms) != len(doc_freqs):
            raise ValueError("terms and doc_freqs must have the same length")
        self.terms = list(terms)
        self.doc_freqs = np.asarray(doc_freqs, dtype=np.int64)
        self.n_docs = int(n_docs)
        self._index = {t: i for i, t in enumerate(self.terms)}
        if len(self._index) != len(self.terms):
            raise ValueError("duplicate terms in vocabulary")

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self._index

    def index(self, term: str) -> int:
        return self._index[term]

    def get(self, term: str) -> int | None:
        return self._index.get(term)

    def term(self, idx: int) -> str:
        return self.terms[idx]

    def idf(self, idx: int, smooth: bool = False) -> float:
        df = int(self.doc_freqs[idx])
        if smooth:
            return math.log((1.0 + self.n_docs) / (1.0 + df))
        return math.log(self.n_docs / df)


def build_vocabulary(
    docs: Sequence[Document],
    min_count: int = 1,
    max_terms: int | None = None,
    lemma_heuristic: bool = False,
) -> Vocabulary:
    """Count document frequencies and build the index.

    Keeps exactly the terms appearing in >= min_count documents;
    max_terms truncates after sorting, so the kept terms are always the
    most frequent ones.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not docs:
        raise ValueError("empty corpus")
    df: dict[str, int] = {}
    for doc in docs:
        for tok in set(doc.tokens(lemma_heuristic=lemma_heuristic)):
            df[tok] = df.get(tok, 0) + 1
    kept = [(term, count) for term, count in df.items() if count >= min_count]
    kept.sort(key=lambda item: (-item[1], item[0]))
    if max_terms is not None:
        kept = kept[:max_terms]
    return Vocabulary(
        [t for t, _ in kept], [c for _, c in kept], n_docs=len(docs)
    )


def save_vocabulary(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{VOCAB_MAGIC} {VOCAB_VERSION} {vocab.n_docs} {len(vocab)}\n")
        for term, df in zip(vocab.terms, vocab.doc_freqs):
            fh.write(f"{term}\t{int(df)}\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != VOCAB_MAGIC or header[1] != VOCAB_VERSION:
            raise ValueError(f"{path}: not a {VOCAB_MAGIC} {VOCAB_VERSION} file")
        n_docs, n_terms = int(header[2]), int(header[3])
        terms, freqs = [], []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            term, df = line.split("\t")
            terms.append(term)
            freqs.append(int(df))
    if len(terms) != n_terms:
        raise ValueError(f"{path}: header says {n_terms} terms, found {len(terms)}")
    return Vocabulary(terms, freqs, n_docs)


@dataclass
class SparseVector:
    """Sorted-index sparse vector; no stored zeros."""

    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise ValueError("indices/values length mismatch")
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ValueError("indices must be strictly increasing")
        if self.indices.size and int(self.indices[-1]) >= self.dim:
            raise ValueError("index out of range for dim")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def get(self, idx: int) -> float:
        pos = np.searchsorted(self.indices, idx)
        if pos < self.indices.size and self.indices[pos] == idx:
            return float(self.values[pos])
        return 0.0

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    @classmethod
    def from_dict(cls, entries: dict[int, float], dim: int) -> "SparseVector":
        items = sorted((i, v) for i, v in entries.items() if v != 0.0)
        idx = np.array([i for i, _ in items], dtype=np.int64)
        val = np.array([v for _, v in items], dtype=np.float64)
        return cls(idx, val, dim)

    def without(self, idx: int) -> "SparseVector":
        """Copy with one coordinate forced to zero."""
        keep = self.indices != idx
        return SparseVector(self.indices[keep], self.values[keep], self.dim)


WEIGHTINGS = ("binary", "tf", "tfidf")


def vectorize(
    tokens: Sequence[str],
    vocab: Vocabulary,
    weighting: str = "tfidf",
    smooth_idf: bool = False,
) -> SparseVector:
    """Turn a token list into a sparse vector over the vocabulary.

    Out-of-vocabulary tokens are dropped. "binary" stores 1.0 per
    present term, "tf" raw counts, "tfidf" tf * ln(N/df) (unsmoothed by
    default, so df == N terms come out as exact zeros and are elided).
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    counts: dict[int, float] = {}
    for tok in tokens:
        idx = vocab.get(tok)
        if idx is not None:
            counts[idx] = counts.get(idx, 0.0) + 1.0
    if weighting == "binary":
        counts = {i: 1.0 for i in counts}
    elif weighting == "tfidf":
        counts = {
            i: c * vocab.idf(i, smooth=smooth_idf) for i, c in counts.items()
        }
    return SparseVector.from_dict(counts, dim=len(vocab))


def vectorize_corpus(
    docs: Sequence[Document],
    vocab: Vocabulary,
    weighting: str = "tfidf",
    smooth_idf: bool = False,
    lemma_heuristic: bool = False,
) -> list[SparseVector]:
    return [
        vectorize(d.tokens(lemma_heuristic=lemma_heuristic), vocab,
                  weighting=weighting, smooth_idf=smooth_idf)
        for d in docs
    ]


def mean_nnz(vectors: Sequence[SparseVector]) -> float:
    """Average number of non-zero features per vector.

    This is the statistic the positive-instance length filter compares
    against, so it has to match what vectorization actually produced.
    """
    if not vectors:
        raise ValueError("empty vector collection")
    return float(np.mean([v.nnz for v in vectors]))


def to_csr(vectors: Sequence[SparseVector], dim: int | None = None) -> sparse.csr_matrix:
    """Stack sparse vectors into a CSR matrix, one row per vector."""
    if dim is None:
        if not vectors:
            raise ValueError("need dim for an empty collection")
        dim = vectors[0].dim
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dim != dim:
            raise ValueError("inconsistent vector dimensions")
        indptr[i + 1] = indptr[i] + v.nnz
    if vectors:
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.values for v in vectors])
    else:
        indices = np.array([], dtype=np.int64)
        data = np.array([], dtype=np.float64)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


@dataclass
class CorpusStats:
    n_docs: int
    n_terms: int
    mean_nnz: float
    median_nnz: float
    label_counts: dict = field(default_factory=dict)


def corpus_stats(docs: Sequence[Document], vectors: Sequence[SparseVector],
                 vocab: Vocabulary) -> CorpusStats:
    nnz = np.array([v.nnz for v in vectors], dtype=np.float64)
    labels: dict[int, int] = {}
    for d in docs:
        if d.label is not None:
            labels[d.label] = labels.get(d.label, 0) + 1
    return CorpusStats(
        n_docs=len(docs),
        n_terms=len(vocab),
        mean_nnz=float(nnz.mean()) if nnz.size else 0.0,
        median_nnz=float(np.median(nnz)) if nnz.size else 0.0,
        label_counts=labels,
    )
