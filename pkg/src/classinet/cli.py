"""Command-line surface for the pipeline.

Subcommands: build-net, expand, train, eval, inspect, stats,
sweep-gamma. Every flag has a CLASSINET_* environment override
(flag wins over env wins over built-in default) and all randomness
flows from --seed through named sub-streams, so reruns are
byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import classify, corpus, expand, graph, predictor
from .util import json_render, substream


def _env(name: str, fallback, cast=str):
    raw = os.environ.get("CLASSINET_" + name)
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError as exc:
        raise SystemExit(f"bad CLASSINET_{name}={raw!r}: {exc}")


def _env_flag(name: str, fallback: bool = False) -> bool:
    raw = os.environ.get("CLASSINET_" + name)
    if raw is None:
        return fallback
    return raw.strip().lower() in ("1", "true", "yes", "on")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    p.add_argument("--workers", type=int,
                   default=_env("WORKERS", os.cpu_count() or 1, int))
    p.add_argument("--weighting", choices=corpus.WEIGHTINGS,
                   default=_env("WEIGHTING", "tfidf"))
    p.add_argument("--lemma-heuristic", action="store_true",
                   default=_env_flag("LEMMA_HEURISTIC"),
                   help="strip plural 's' from tokens (dogs -> dog)")


def _load_corpus(path, args, vocab=None):
    docs = corpus.read_documents(path)
    if vocab is None:
        vocab = corpus.build_vocabulary(
            docs, min_count=getattr(args, "min_count", 1),
            max_terms=getattr(args, "max_terms", None),
            lemma_heuristic=args.lemma_heuristic,
        )
    vectors = corpus.vectorize_corpus(
        docs, vocab, weighting=args.weighting,
        lemma_heuristic=args.lemma_heuristic,
    )
    return docs, vocab, vectors


def cmd_build_net(args) -> int:
    docs, vocab, vectors = _load_corpus(args.corpus, args)
    n = len(vectors)
    n_eval = int(round(n * args.eval_fraction))
    if n_eval < 3 or n - n_eval < 3:
        print("corpus too small to split into train and eval pools",
              file=sys.stderr)
        return 2
    # The eval pool must not overlap predictor training documents.
    order = substream(args.seed, "pool-split").permutation(n)
    eval_rows = np.sort(order[:n_eval])
    train_rows = np.sort(order[n_eval:])
    train_pool = [vectors[r] for r in train_rows]
    eval_pool = [vectors[r] for r in eval_rows]

    candidates = list(range(min(args.max_vertices, len(vocab))))
    bank = predictor.train_bank(
        train_pool, candidates, seed=args.seed,
        min_positive=args.min_positive, max_positive=args.max_positive,
        workers=args.workers,
    )
    if len(bank) == 0:
        print("no feature had enough positives to train a predictor",
              file=sys.stderr)
        return 2
    net = graph.build_classinet(
        bank, eval_pool, k=args.k, seed=args.seed,
        permutations=args.permutations, beam=args.beam,
        pair_cap=args.pair_cap,
        names=[vocab.term(p.feature_index) for p in bank],
        workers=args.workers,
    )
    corpus.save_vocabulary(args.vocab_out, vocab)
    predictor.save_bank(args.bank_out, bank)
    graph.save_classinet(args.graph_out, net)
    print(f"vertices\t{net.n_vertices}")
    print(f"edges\t{net.n_edges}")
    print(f"out_degree\t{classify.out_degree(net):.6f}")
    print(f"skipped_features\t{len(bank.skipped)}")
    return 0


def cmd_expand(args) -> int:
    vocab = corpus.load_vocabulary(args.vocab)
    docs, _, vectors = _load_corpus(args.corpus, args, vocab=vocab)
    bank = predictor.load_bank(args.bank) if args.bank else None
    net = graph.load_classinet(args.graph) if args.graph else None
    cfg = expand.GlobalExpansionConfig(
        gamma=args.gamma, q=args.q, score_floor=args.score_floor,
        prior="empirical" if args.empirical_prior else "uniform",
    )
    expanded = expand.expand_instances(
        args.method, vectors, bank=bank, net=net,
        use_posterior=args.use_posterior, max_hops=args.max_hops,
        mutual_k=args.mutual_k, global_cfg=cfg,
    )
    is_global = args.method == "global"
    expand.write_expanded(
        args.out, [d.doc_id for d in docs], expanded, vocab,
        gamma=cfg.gamma if is_global else None,
        q=cfg.q if is_global else None,
    )
    ratios = classify.expansion_ratio(vectors, expanded)
    print(f"instances\t{len(expanded)}")
    print(f"mean_ratio\t{ratios.summary()['mean']:.4f}")
    return 0


def _labels_for(ids, docs) -> np.ndarray:
    by_id = {d.doc_id: d.label for d in docs}
    labels = []
    for i in ids:
        if i not in by_id or by_id[i] is None:
            raise SystemExit(f"no label for instance id {i!r}")
        labels.append(by_id[i])
    return np.asarray(labels, dtype=np.int64)


def cmd_train(args) -> int:
    vocab = corpus.load_vocabulary(args.vocab)
    ids, expanded = expand.read_expanded(args.expanded, vocab)
    docs = corpus.read_documents(args.corpus)
    labels = _labels_for(ids, docs)
    model = classify.train_downstream(expanded, labels, seed=args.seed)
    classify.save_model(args.model_out, model)
    dev = model.dev_accuracy
    print(f"classes\t{len(model.classes)}")
    print(f"lambda\t{model.lam}")
    print(f"dev_accuracy\t{'n/a' if dev is None else f'{dev:.4f}'}")
    return 0


def cmd_eval(args) -> int:
    vocab = corpus.load_vocabulary(args.vocab)
    ids, expanded = expand.read_expanded(args.expanded, vocab)
    docs = corpus.read_documents(args.corpus)
    labels = _labels_for(ids, docs)

    if args.cv:
        report = classify.cross_validate(
            expanded, labels, folds=args.cv, seed=args.seed,
        )
    else:
        if not args.model:
            print("eval needs either --cv or --model", file=sys.stderr)
            return 2
        model = classify.load_model(args.model)
        report = classify.evaluate(model, expanded, labels)

    if args.ttest_against:
        other = classify.load_report(args.ttest_against)
        if not report.fold_accuracies or not other.fold_accuracies:
            print("t-test needs fold accuracies on both sides", file=sys.stderr)
            return 2
        t, p = classify.paired_t_test(report.fold_accuracies,
                                      other.fold_accuracies)
        # identical fold vectors give nan, which the report JSON refuses
        finite = bool(np.isfinite(t) and np.isfinite(p))
        report.config["ttest_t"] = t if finite else None
        report.config["ttest_p"] = p if finite else None
        print(f"ttest_p\t{p:.6g}")

    report.config.update({
        "seed": args.seed,
        "weighting": args.weighting,
        "expanded": os.path.basename(args.expanded),
    })
    if args.report:
        classify.save_report(args.report, report)
    print(f"accuracy\t{report.accuracy:.6f}")
    print(f"majority_baseline\t{report.majority_baseline:.6f}")
    for f, acc in enumerate(report.fold_accuracies):
        print(f"fold_{f}\t{acc:.6f}")
    return 0


def cmd_inspect(args) -> int:
    net = graph.load_classinet(args.graph)
    g = expand.build_mutual_knn(net, k=args.k)
    seeds = []
    for term in args.terms.split(","):
        term = term.strip()
        if not term:
            continue
        v = net.vertex_by_name(term)
        if v is None:
            print(f"warning: term {term!r} is not a vertex", file=sys.stderr)
            continue
        seeds.append(v)
    shown: set[int] = set(seeds)
    for v in seeds:
        shown.update(g.neighbors(v))
    lines = ["graph classinet {"]
    for v in sorted(shown):
        lines.append(f'  n{v} [label="{net.name(v)}"];')
    emitted = set()
    for v in sorted(shown):
        for u in g.neighbors(v):
            if u in shown and (min(u, v), max(u, v)) not in emitted:
                emitted.add((min(u, v), max(u, v)))
                lines.append(f"  n{min(u, v)} -- n{max(u, v)};")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_stats(args) -> int:
    out: dict = {}
    if args.corpus:
        vocab = corpus.load_vocabulary(args.vocab) if args.vocab else None
        docs, vocab, vectors = _load_corpus(args.corpus, args, vocab=vocab)
        st = corpus.corpus_stats(docs, vectors, vocab)
        out["corpus"] = {
            "documents": st.n_docs,
            "terms": st.n_terms,
            "mean_nnz": st.mean_nnz,
            "median_nnz": st.median_nnz,
            "label_counts": {str(k): v for k, v in sorted(st.label_counts.items())},
        }
    if args.graph:
        net = graph.load_classinet(args.graph)
        out["net"] = {
            "vertices": net.n_vertices,
            "edges": net.n_edges,
            "out_degree": classify.out_degree(net),
        }
    if args.expanded:
        if not args.vocab:
            print("--expanded stats need --vocab", file=sys.stderr)
            return 2
        vocab = corpus.load_vocabulary(args.vocab)
        _, expanded = expand.read_expanded(args.expanded, vocab)
        before = [e.original for e in expanded]
        rep = classify.expansion_ratio(before, expanded)
        out["expansion"] = rep.summary()
    sys.stdout.write(json_render(out) + "\n")
    return 0


def cmd_sweep_gamma(args) -> int:
    vocab = corpus.load_vocabulary(args.vocab)
    docs, _, vectors = _load_corpus(args.corpus, args, vocab=vocab)
    labels = _labels_for([d.doc_id for d in docs], docs)
    net = graph.load_classinet(args.graph)
    gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    rows = classify.damping_sweep(
        vectors, labels, net, gammas, q=args.q, seed=args.seed,
        score_floor=args.score_floor,
    )
    classify.write_sweep(args.out, rows)
    print(f"best_gamma\t{classify.best_gamma(rows)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classinet",
        description="Feature expansion for sparse short texts via a "
                    "directed graph of feature predictors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-net", help="train predictors and assemble the net")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-out", required=True)
    p.add_argument("--bank-out", required=True)
    p.add_argument("--graph-out", required=True)
    p.add_argument("--min-count", type=int, default=_env("MIN_COUNT", 2, int))
    p.add_argument("--max-terms", type=int, default=_env("MAX_TERMS", None, int))
    p.add_argument("--max-vertices", type=int,
                   default=_env("MAX_VERTICES", 700, int),
                   help="try this many of the most frequent terms as vertices")
    p.add_argument("--min-positive", type=int,
                   default=_env("MIN_POSITIVE", predictor.MIN_POSITIVE_DEFAULT, int))
    p.add_argument("--max-positive", type=int,
                   default=_env("MAX_POSITIVE", None, int))
    p.add_argument("--k", type=int, default=_env("K", graph.DEFAULT_K, int))
    p.add_argument("--permutations", type=int,
                   default=_env("PERMUTATIONS", graph.DEFAULT_PERMUTATIONS, int))
    p.add_argument("--beam", type=int, default=_env("BEAM", graph.DEFAULT_BEAM, int))
    p.add_argument("--pair-cap", type=int,
                   default=_env("PAIR_CAP", graph.DEFAULT_PAIR_CAP, int))
    p.add_argument("--eval-fraction", type=float,
                   default=_env("EVAL_FRACTION", 0.3, float))
    p.set_defaults(func=cmd_build_net)

    p = sub.add_parser("expand", help="expand instances over a trained net")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--bank")
    p.add_argument("--graph")
    p.add_argument("--method", choices=("none",) + expand.METHODS,
                   default=_env("METHOD", "global"))
    p.add_argument("--gamma", type=float,
                   default=_env("GAMMA", expand.GAMMA_DEFAULT, float))
    p.add_argument("--q", type=int, default=_env("Q", expand.HOP_CAP_DEFAULT, int))
    p.add_argument("--score-floor", type=float,
                   default=_env("SCORE_FLOOR", expand.SCORE_FLOOR_DEFAULT, float))
    p.add_argument("--use-posterior", action="store_true",
                   default=_env_flag("USE_POSTERIOR"))
    p.add_argument("--empirical-prior", action="store_true",
                   default=_env_flag("EMPIRICAL_PRIOR"))
    p.add_argument("--max-hops", type=int,
                   default=_env("MAX_HOPS", expand.MAX_HOPS_DEFAULT, int))
    p.add_argument("--mutual-k", type=int,
                   default=_env("MUTUAL_K", expand.MUTUAL_K_DEFAULT, int))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("train", help="train a downstream classifier")
    _add_common(p)
    p.add_argument("--expanded", required=True)
    p.add_argument("--corpus", required=True, help="source of labels, by id")
    p.add_argument("--vocab", required=True)
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model or cross-validate")
    _add_common(p)
    p.add_argument("--expanded", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--model")
    p.add_argument("--cv", type=int, default=None,
                   help="run stratified k-fold cross-validation instead")
    p.add_argument("--ttest-against",
                   help="report JSON to compare fold accuracies against")
    p.add_argument("--report", help="write the EvalReport JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect",
                       help="dump the mutual k-NN subgraph around seed terms")
    _add_common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--terms", required=True, help="comma-separated seed terms")
    p.add_argument("--k", type=int, default=_env("MUTUAL_K", expand.MUTUAL_K_DEFAULT, int))
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("stats", help="corpus / net / expansion statistics")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--graph")
    p.add_argument("--expanded")
    p.add_argument("--min-count", type=int, default=_env("MIN_COUNT", 1, int))
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep-gamma",
                       help="validation accuracy across damping values")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--gammas", required=True,
                   help="comma-separated damping values")
    p.add_argument("--q", type=int, default=_env("Q", expand.HOP_CAP_DEFAULT, int))
    p.add_argument("--score-floor", type=float,
                   default=_env("SCORE_FLOOR", expand.SCORE_FLOOR_DEFAULT, float))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_gamma)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
