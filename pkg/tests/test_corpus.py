import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from classinet import corpus
from classinet.corpus import (Document, SparseVector, build_vocabulary,
                              mean_nnz, to_csr, tokenize, vectorize)

LN2 = 0.6931471805599453


def test_tokenize_lemma_heuristic():
    assert tokenize("I love dogs", lemma_heuristic=True) == ["i", "love", "dog"]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_punctuation_and_case():
    assert tokenize("Bad, bad movie!") == ["bad", "bad", "movie"]


def test_tokenize_plural_rules():
    assert tokenize("class pass dogs as", lemma_heuristic=True) == \
        ["class", "pass", "dog", "as"]
    # heuristic defaults off
    assert tokenize("dogs") == ["dogs"]


def _docs(*texts):
    return [Document(str(i), t) for i, t in enumerate(texts)]


def test_build_vocabulary_min_count():
    vocab = build_vocabulary(_docs("a b", "a c", "a"), min_count=2)
    assert vocab.terms == ["a"]


def test_build_vocabulary_ordering():
    vocab = build_vocabulary(_docs("a b", "a c", "a"), min_count=1)
    assert vocab.terms == ["a", "b", "c"]
    assert vocab.doc_freqs.tolist() == [3, 1, 1]
    assert vocab.n_docs == 3


def test_build_vocabulary_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocabulary([], min_count=1)


def test_build_vocabulary_bad_min_count():
    with pytest.raises(ValueError):
        build_vocabulary(_docs("a"), min_count=0)


def test_vectorize_tfidf_hand_case():
    # two docs, df(a)=2 df(b)=1: a's idf is ln(1)=0 so it is elided
    vocab = build_vocabulary(_docs("a a b", "a"), min_count=1)
    v = vectorize(["a", "a", "b"], vocab, weighting="tfidf")
    assert v.nnz == 1
    assert v.get(vocab.index("b")) == pytest.approx(LN2, abs=1e-15)
    assert v.get(vocab.index("a")) == 0.0


def test_vectorize_binary_and_tf():
    vocab = build_vocabulary(_docs("a b", "a"), min_count=1)
    b = vectorize(["a", "a", "b"], vocab, weighting="binary")
    assert sorted(b.values.tolist()) == [1.0, 1.0]
    t = vectorize(["a", "a", "b"], vocab, weighting="tf")
    assert t.get(vocab.index("a")) == 2.0
    assert t.get(vocab.index("b")) == 1.0


def test_vectorize_empty_tokens():
    vocab = build_vocabulary(_docs("a"), min_count=1)
    assert vectorize([], vocab).nnz == 0


def test_vectorize_oov_dropped():
    vocab = build_vocabulary(_docs("a"), min_count=1)
    assert vectorize(["zzz", "a"], vocab, weighting="binary").nnz == 1


def test_vectorize_unknown_weighting():
    vocab = build_vocabulary(_docs("a"), min_count=1)
    with pytest.raises(ValueError, match="weighting"):
        vectorize(["a"], vocab, weighting="pmi")


def test_smooth_idf_flag():
    vocab = build_vocabulary(_docs("a b", "a"), min_count=1)
    v = vectorize(["a", "b"], vocab, weighting="tfidf", smooth_idf=True)
    # smooth idf: ln((1+N)/(1+df)); df(a)=N so a is still elided
    assert v.get(vocab.index("a")) == 0.0
    assert v.get(vocab.index("b")) == pytest.approx(math.log(3 / 2), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "dog", "x1"]), max_size=12))
def test_vectorize_idempotent_and_binary_values(tokens):
    vocab = build_vocabulary(_docs("a b c", "dog x1 a", "b dog"), min_count=1)
    v1 = vectorize(tokens, vocab, weighting="binary")
    v2 = vectorize(tokens, vocab, weighting="binary")
    assert v1.indices.tolist() == v2.indices.tolist()
    assert v1.values.tolist() == v2.values.tolist()
    assert all(x == 1.0 for x in v1.values)


def test_sparse_vector_validation():
    with pytest.raises(ValueError):
        SparseVector(np.array([3, 1]), np.array([1.0, 1.0]), dim=5)
    with pytest.raises(ValueError):
        SparseVector(np.array([1, 1]), np.array([1.0, 1.0]), dim=5)
    with pytest.raises(ValueError):
        SparseVector(np.array([5]), np.array([1.0]), dim=5)


def test_sparse_vector_from_dict_elides_zeros():
    v = SparseVector.from_dict({3: 0.0, 1: 2.0}, dim=5)
    assert v.indices.tolist() == [1]
    assert v.to_dict() == {1: 2.0}


def test_sparse_vector_without():
    v = SparseVector.from_dict({1: 2.0, 3: 1.0}, dim=5)
    w = v.without(3)
    assert w.to_dict() == {1: 2.0}
    assert v.nnz == 2  # original untouched


def test_vocabulary_round_trip(tmp_path):
    vocab = build_vocabulary(_docs("a b", "a c", "a dog"), min_count=1)
    path = tmp_path / "vocab.txt"
    corpus.save_vocabulary(path, vocab)
    back = corpus.load_vocabulary(path)
    assert back.terms == vocab.terms
    assert back.doc_freqs.tolist() == vocab.doc_freqs.tolist()
    assert back.n_docs == vocab.n_docs


def test_vocabulary_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("something else\n")
    with pytest.raises(ValueError):
        corpus.load_vocabulary(path)


def test_documents_round_trip(tmp_path):
    docs = [Document("a", "hello world", 1), Document("b", "no label")]
    path = tmp_path / "docs.jsonl"
    corpus.write_documents(path, docs)
    back = corpus.read_documents(path)
    assert [(d.doc_id, d.text, d.label) for d in back] == \
        [("a", "hello world", 1), ("b", "no label", None)]


def test_read_documents_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a"}\n')
    with pytest.raises(ValueError, match="id.*text|record needs"):
        corpus.read_documents(path)
    path.write_text("not json\n")
    with pytest.raises(ValueError, match="bad JSON"):
        corpus.read_documents(path)


def test_to_csr_matches_dense():
    vs = [
        SparseVector.from_dict({0: 1.0, 2: 3.0}, 4),
        SparseVector.from_dict({}, 4),
        SparseVector.from_dict({3: -1.0}, 4),
    ]
    X = to_csr(vs)
    dense = np.array([[1.0, 0, 3.0, 0], [0, 0, 0, 0], [0, 0, 0, -1.0]])
    assert np.array_equal(X.toarray(), dense)


def test_mean_nnz():
    vs = [SparseVector.from_dict({0: 1.0}, 3),
          SparseVector.from_dict({0: 1.0, 1: 1.0, 2: 1.0}, 3)]
    assert mean_nnz(vs) == 2.0
    with pytest.raises(ValueError):
        mean_nnz([])


def test_corpus_stats_labels():
    docs = [Document("1", "a", 0), Document("2", "a b", 0), Document("3", "b", 1)]
    vocab = build_vocabulary(docs, min_count=1)
    vecs = corpus.vectorize_corpus(docs, vocab, weighting="binary")
    st_ = corpus.corpus_stats(docs, vecs, vocab)
    assert st_.label_counts == {0: 2, 1: 1}
    assert st_.n_docs == 3
