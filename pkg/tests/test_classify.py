import numpy as np
import pytest

from classinet.classify import (DownstreamModel, EvalReport, best_gamma,
                                cross_validate, damping_sweep, evaluate,
                                expanded_to_csr, expansion_ratio, load_model,
                                load_report, majority_accuracy, out_degree,
                                paired_t_test, save_model, save_report,
                                stratified_folds, train_downstream,
                                write_sweep)
from classinet.corpus import SparseVector
from classinet.expand import ExpansionCandidate, render_expansion
from classinet.graph import ClassiNet


def _vec(entries, dim=8):
    return SparseVector.from_dict(entries, dim)


def _plain(x):
    return render_expansion(x, [], "none")


def _binary_data(n_per_class=30, dim=8, seed=0, flip=0.0):
    """Class 1 lights features {0,1}, class 0 lights {2,3}, plus noise."""
    rng = np.random.default_rng(seed)
    expanded, labels = [], []
    for _ in range(n_per_class):
        for label, base in ((1, (0, 1)), (0, (2, 3))):
            entries = {b: 1.0 for b in base if rng.random() > flip}
            entries[int(rng.integers(4, dim))] = 1.0
            expanded.append(_plain(_vec(entries, dim)))
            labels.append(label)
    return expanded, labels


def test_expanded_to_csr_joint_rows():
    x = _vec({1: 2.0}, dim=4)
    inst = render_expansion(x, [ExpansionCandidate(3, 0.5, "m")], "m")
    X = expanded_to_csr([inst, _plain(_vec({0: 1.0}, dim=4))])
    assert X.shape == (2, 8)
    assert X[0, 1] == 2.0 and X[0, 7] == 0.5
    assert X[1, 0] == 1.0
    with pytest.raises(ValueError):
        expanded_to_csr([])


def test_binary_sign_rule():
    model = DownstreamModel(classes=[3, 7], weights=np.array([[1.0, 0.0]]),
                            biases=np.array([0.0]), lam=0.1)
    X = expanded_to_csr([_plain(_vec({0: 1.0}, dim=1)),
                         _plain(_vec({}, dim=1))])
    # positive margin picks the larger class id; zero margin the smaller
    assert model.predict(X).tolist() == [7, 3]


def test_multiclass_argmax_tie_breaks_low():
    model = DownstreamModel(classes=[2, 5, 9], weights=np.zeros((3, 2)),
                            biases=np.zeros(3), lam=0.1)
    X = expanded_to_csr([_plain(_vec({0: 1.0}, dim=1))])
    assert model.predict(X).tolist() == [2]


def test_train_downstream_degenerate_labels():
    expanded, _ = _binary_data(n_per_class=3)
    with pytest.raises(ValueError, match="degenerate labels"):
        train_downstream(expanded, [1] * len(expanded))


def test_train_downstream_misaligned_labels():
    expanded, labels = _binary_data(n_per_class=3)
    with pytest.raises(ValueError, match="align"):
        train_downstream(expanded, labels[:-1])


def test_train_downstream_binary():
    expanded, labels = _binary_data()
    model = train_downstream(expanded, labels, lambda_grid=(1e-3, 1e-1), seed=1)
    assert model.binary
    assert model.classes == [0, 1]
    assert model.weights.shape == (1, 16)
    assert model.lam in (1e-3, 1e-1)
    assert model.dev_accuracy is not None and model.dev_accuracy > 0.9
    rep = evaluate(model, expanded, labels)
    assert rep.accuracy > 0.95


def test_train_downstream_no_dev_split():
    expanded, labels = _binary_data(n_per_class=5)
    model = train_downstream(expanded, labels, lambda_grid=(1e-3, 1e-1),
                             dev_fraction=0.0, seed=1)
    assert model.dev_accuracy is None
    assert model.lam == 1e-3  # falls back to the smallest


def test_train_downstream_deterministic():
    expanded, labels = _binary_data(seed=5)
    a = train_downstream(expanded, labels, lambda_grid=(1e-2, 1.0), seed=3)
    b = train_downstream(expanded, labels, lambda_grid=(1e-2, 1.0), seed=3)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.biases.tobytes() == b.biases.tobytes()
    assert a.lam == b.lam


def test_multiclass_one_vs_rest():
    # six one-hot classes: OvR must nail every training instance
    expanded, labels = [], []
    for c in range(6):
        for _ in range(8):
            expanded.append(_plain(_vec({c: 1.0}, dim=6)))
            labels.append(c)
    model = train_downstream(expanded, labels, lambda_grid=(1e-3,), seed=0)
    assert model.classes == list(range(6))
    assert model.weights.shape == (6, 12)
    X = expanded_to_csr(expanded)
    assert model.predict(X).tolist() == labels
    # predictions agree with a manual argmax over per-class scores
    scores = model.decision_scores(X)
    manual = np.asarray(model.classes)[scores.argmax(axis=1)]
    assert np.array_equal(model.predict(X), manual)


def test_random_model_near_chance():
    rng = np.random.default_rng(0)
    expanded = [_plain(_vec({int(i): 1.0 for i in
                             rng.choice(8, size=3, replace=False)}, dim=8))
                for _ in range(2000)]
    labels = rng.integers(0, 2, size=2000)
    model = DownstreamModel(classes=[0, 1],
                            weights=rng.normal(size=(1, 16)),
                            biases=np.array([0.0]), lam=0.1)
    rep = evaluate(model, expanded, labels.tolist())
    assert abs(rep.accuracy - 0.5) < 0.05


def test_majority_accuracy_spec_example():
    labels = [0] * 908 + [1] * 903
    acc = majority_accuracy(labels)
    assert acc == 908 / 1811
    assert round(acc, 4) == 0.5014
    with pytest.raises(ValueError):
        majority_accuracy([])


def test_evaluate_per_class():
    model = DownstreamModel(classes=[0, 1], weights=np.array([[1.0, 0.0]]),
                            biases=np.array([0.0]), lam=0.1)
    expanded = [_plain(_vec({0: 1.0}, dim=1)), _plain(_vec({0: 1.0}, dim=1)),
                _plain(_vec({}, dim=1)), _plain(_vec({0: 1.0}, dim=1))]
    labels = [1, 1, 0, 0]
    rep = evaluate(model, expanded, labels)
    assert rep.accuracy == 0.75
    assert rep.per_class == {1: 1.0, 0: 0.5}
    assert rep.majority_baseline == 0.5


def test_stratified_folds_balance():
    labels = np.array([0] * 13 + [1] * 9 + [2] * 5)
    assignment = stratified_folds(labels, folds=4, seed=2)
    sizes = np.bincount(assignment, minlength=4)
    assert sizes.max() - sizes.min() <= 1
    for c in (0, 1, 2):
        per = np.bincount(assignment[labels == c], minlength=4)
        assert per.max() - per.min() <= 1
    again = stratified_folds(labels, folds=4, seed=2)
    assert np.array_equal(assignment, again)


def test_cross_validate():
    expanded, labels = _binary_data(n_per_class=20, seed=7)
    with pytest.raises(ValueError, match="folds"):
        cross_validate(expanded, labels, folds=1)
    rep = cross_validate(expanded, labels, folds=4, seed=1,
                         lambda_grid=(1e-2,))
    assert len(rep.fold_accuracies) == 4
    assert rep.accuracy > 0.9
    assert rep.majority_baseline == 0.5
    # pooled accuracy equals total hits over total size
    n = len(labels)
    fold_sizes = np.bincount(stratified_folds(np.asarray(labels), 4, 1))
    hits = sum(a * s for a, s in zip(rep.fold_accuracies, fold_sizes))
    assert rep.accuracy == pytest.approx(hits / n, abs=1e-12)
    again = cross_validate(expanded, labels, folds=4, seed=1,
                           lambda_grid=(1e-2,))
    assert rep.fold_accuracies == again.fold_accuracies


def test_out_degree():
    empty = ClassiNet([0, 1], ["a", "b"], {}, k=1, d_prime=0, seed=0)
    assert out_degree(empty) == 0.0
    # total weight 1.0 spread over 4 vertices
    net = ClassiNet([0, 1, 2, 3], list("abcd"),
                    {0: [(1, 0.6)], 1: [(2, 0.4)]}, k=1, d_prime=0, seed=0)
    assert out_degree(net) == pytest.approx(0.25)


def test_expansion_ratio():
    before = [_vec({0: 1.0, 1: 1.0}, 4), _vec({0: 1.0}, 4), _vec({}, 4)]
    after = [
        render_expansion(before[0], [ExpansionCandidate(2, 1.0, "m"),
                                     ExpansionCandidate(3, 1.0, "m")], "m"),
        render_expansion(before[1], [], "m"),
        render_expansion(before[2], [ExpansionCandidate(2, 1.0, "m")], "m"),
    ]
    rep = expansion_ratio(before, after, bins=8)
    # empty instance excluded; ratios 2.0 and 1.0 survive
    assert sorted(rep.ratios.tolist()) == [1.0, 2.0]
    assert rep.summary()["n"] == 2
    assert rep.mode_bin[0] <= rep.mode_center <= rep.mode_bin[1]
    with pytest.raises(ValueError, match="lengths differ"):
        expansion_ratio(before[:1], after)


def test_expansion_ratio_identity():
    before = [_vec({0: 1.0, 2: 1.0}, 4) for _ in range(10)]
    after = [render_expansion(b, [], "none") for b in before]
    rep = expansion_ratio(before, after)
    assert np.all(rep.ratios == 1.0)
    assert rep.mode_bin[0] <= 1.0 <= rep.mode_bin[1]


def _sweep_fixture(seed=0):
    """Vectors whose labels follow feature cliques joined by a net."""
    rng = np.random.default_rng(seed)
    net = ClassiNet(
        list(range(6)), [f"t{v}" for v in range(6)],
        {0: [(1, 0.9)], 1: [(0, 0.9)], 2: [(3, 0.9)], 3: [(2, 0.9)]},
        k=2, d_prime=0, seed=0,
    )
    vectors, labels = [], []
    for _ in range(40):
        for label, base in ((1, (0, 1)), (0, (2, 3))):
            f = base[int(rng.integers(2))]
            vectors.append(_vec({f: 1.0, int(rng.integers(4, 6)): 1.0}, 6))
            labels.append(label)
    return vectors, labels, net


def test_damping_sweep_and_best_gamma():
    vectors, labels, net = _sweep_fixture()
    rows = damping_sweep(vectors, labels, net, gammas=[0.9, 0.3, 0.6],
                         q=2, seed=4, lambda_grid=(1e-2,))
    assert [g for g, _ in rows] == [0.3, 0.6, 0.9]
    assert all(0.0 <= acc <= 1.0 for _, acc in rows)
    again = damping_sweep(vectors, labels, net, gammas=[0.3, 0.6, 0.9],
                          q=2, seed=4, lambda_grid=(1e-2,))
    assert rows == again
    assert best_gamma([(0.3, 0.8), (0.6, 0.9), (0.9, 0.9)]) == 0.6
    assert best_gamma([(0.3, 0.8)]) == 0.3
    with pytest.raises(ValueError, match="no gamma"):
        damping_sweep(vectors, labels, net, gammas=[])


def test_write_sweep(tmp_path):
    path = tmp_path / "sweep.tsv"
    write_sweep(path, [(0.3, 0.75), (0.6, 0.825)])
    lines = path.read_text().splitlines()
    assert lines[0] == "gamma\taccuracy"
    # 17 significant digits parse back to the exact values
    parsed = [tuple(float(x) for x in line.split("\t")) for line in lines[1:]]
    assert parsed == [(0.3, 0.75), (0.6, 0.825)]


def test_paired_t_test():
    a = [0.82, 0.85, 0.81, 0.88, 0.84]
    b = [0.71, 0.74, 0.69, 0.73, 0.75]
    t, p = paired_t_test(a, b)
    assert t > 0
    assert 0.0 <= p <= 1.0
    assert p < 0.01
    t2, p2 = paired_t_test(b, a)
    assert t2 == pytest.approx(-t)
    assert p2 == pytest.approx(p)
    with pytest.raises(ValueError):
        paired_t_test([0.5], [0.6])
    with pytest.raises(ValueError):
        paired_t_test(a, b[:-1])


def test_model_round_trip(tmp_path):
    expanded, labels = _binary_data(seed=2)
    model = train_downstream(expanded, labels, lambda_grid=(1e-2,), seed=0)
    p1, p2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
    save_model(p1, model)
    save_model(p2, model)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_model(p1)
    assert back.classes == model.classes
    assert back.lam == model.lam
    assert back.weights.tobytes() == model.weights.tobytes()
    X = expanded_to_csr(expanded)
    assert np.array_equal(back.predict(X), model.predict(X))


def test_load_model_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        load_model(path)


def test_report_round_trip(tmp_path):
    rep = EvalReport(accuracy=0.75, n_instances=4, per_class={0: 0.5, 1: 1.0},
                     majority_baseline=0.5, fold_accuracies=[0.7, 0.8],
                     out_degree=0.25, config={"method": "global"})
    path = tmp_path / "report.json"
    save_report(path, rep)
    back = load_report(path)
    assert back.accuracy == rep.accuracy
    assert back.per_class == rep.per_class
    assert back.fold_accuracies == rep.fold_accuracies
    assert back.out_degree == rep.out_degree
    assert back.config == rep.config
