"""Feature expansion over a trained ClassiNet.

Local methods (independent, local-path, all-neighbour, mutual-neighbour)
add predicted features around what the instance already contains; the
global method propagates scores through the whole net with per-hop
damping. Expanded features live in a namespaced index range disjoint
from the original vocabulary, so downstream models can weight an
expanded feature differently from its original.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .corpus import SparseVector, to_csr
from .util import json_render

MAX_HOPS_DEFAULT = 3
MUTUAL_K_DEFAULT = 4
GAMMA_DEFAULT = 0.85
HOP_CAP_DEFAULT = 4
SCORE_FLOOR_DEFAULT = 1e-4
CLOSED_FORM_VERTEX_LIMIT = 2000

_UNREACHABLE = np.iinfo(np.int16).max

METHODS = ("independent", "local-path", "all-nn", "mutual-nn", "global")


@dataclass(frozen=True)
class ExpansionCandidate:
    vertex: int  # feature index in the original vocabulary
    score: float
    method: str

    def __post_init__(self):
        if not self.score > 0.0:
            raise ValueError(f"candidate score must be positive, got {self.score}")


@dataclass
class ExpandedInstance:
    """An instance plus its rendered expansion features.

    Expansion feature ids are original-id + dim, so the joint space has
    dimensionality 2*dim and never collides with the vocabulary.
    """

    original: SparseVector
    candidates: list  # ExpansionCandidate, sorted by vertex, merged
    method: str

    @property
    def dim(self) -> int:
        return self.original.dim

    def exp_index(self, vertex: int) -> int:
        return self.original.dim + vertex

    def joint(self) -> SparseVector:
        d = self.original.dim
        idx = np.concatenate([
            self.original.indices,
            np.array([d + c.vertex for c in self.candidates], dtype=np.int64),
        ])
        val = np.concatenate([
            self.original.values,
            np.array([c.score for c in self.candidates], dtype=np.float64),
        ])
        return SparseVector(idx, val, dim=2 * d)

    @property
    def n_before(self) -> int:
        return self.original.nnz

    @property
    def n_after(self) -> int:
        return self.original.nnz + len(self.candidates)


def render_expansion(x: SparseVector, candidates: Sequence[ExpansionCandidate],
                     method: str = "") -> ExpandedInstance:
    """Merge candidates into an ExpandedInstance.

    Duplicate vertex ids are merged by summing their scores, so each
    expansion feature appears once. Candidates are ordered by vertex id.
    """
    merged: dict[int, float] = {}
    tag = method
    for c in candidates:
        merged[c.vertex] = merged.get(c.vertex, 0.0) + c.score
        tag = tag or c.method
    out = [
        ExpansionCandidate(v, s, tag)
        for v, s in sorted(merged.items())
        if s > 0.0
    ]
    return ExpandedInstance(original=x, candidates=out, method=tag)


def expand_independent(bank, x: SparseVector,
                       use_posterior: bool = False) -> ExpandedInstance:
    """Fire every predictor on x independently.

    A fired predictor whose feature is absent becomes an expansion
    candidate with value 1 (or the posterior score when flagged). A
    fired predictor whose feature is already present increments the
    original value by the same amount instead.
    """
    return _independent_batch(bank, [x], use_posterior)[0]


def fired_vertices(bank, x: SparseVector) -> list[int]:
    """Feature indices whose predictors fire on x."""
    return [p.feature_index for p in bank if p.predict(x)[0] == 1]


class PathIndex:
    """Dense hop-count distance matrix for a net, truncated at max_hops.

    Dense nv x nv storage, intended for nets up to a few thousand
    vertices. dist[u, v] is the smallest number of directed edges on a
    path u -> v, or a large sentinel when none exists within max_hops.
    """

    def __init__(self, net, max_hops: int = MAX_HOPS_DEFAULT):
        self.net = net
        self.max_hops = max_hops
        nv = net.n_vertices
        adj = (net.transition_matrix() != 0)
        dist = np.full((nv, nv), _UNREACHABLE, dtype=np.int16)
        np.fill_diagonal(dist, 0)
        reach = sparse.identity(nv, dtype=bool, format="csr")
        for hop in range(1, max_hops + 1):
            reach = (reach @ adj).astype(bool)
            newly = reach.toarray() & (dist == _UNREACHABLE)
            dist[newly] = hop
        self.dist = dist

    def on_shortest_path(self, src_pos: int, dst_pos: int) -> np.ndarray:
        """Vertex positions lying on any shortest src -> dst path."""
        d = int(self.dist[src_pos, dst_pos])
        if d >= _UNREACHABLE:
            return np.array([], dtype=np.int64)
        through = self.dist[src_pos, :].astype(np.int64) + \
            self.dist[:, dst_pos].astype(np.int64)
        return np.flatnonzero(through == d)


def expand_local_path(net, bank, x: SparseVector,
                      max_hops: int = MAX_HOPS_DEFAULT,
                      path_index: PathIndex | None = None) -> ExpandedInstance:
    """Independent expansion plus vertices along shortest connecting paths.

    For every (original feature, fired feature) pair, every vertex on a
    hop-count-shortest directed path original -> fired of length at most
    max_hops joins the candidate set. The result always contains the
    independent expansion's candidates, so it can only grow.
    """
    if path_index is None or path_index.max_hops != max_hops:
        path_index = PathIndex(net, max_hops=max_hops)
    return _local_path_one(net, x, fired_vertices(bank, x), path_index)


def _net_fingerprint(net) -> str:
    if net.fingerprint:
        return net.fingerprint
    h = hashlib.sha256()
    for v in net.vertices:
        h.update(str(v).encode())
        for t, w in net.adjacency[v]:
            h.update(f"{t}:{w!r}".encode())
    return h.hexdigest()[:16]


@dataclass
class MutualKnnGraph:
    """Undirected top-k agreement graph over a ClassiNet.

    An edge joins i and j only when each is in the other's top-k
    out-neighbors by weight; all edges count 1.
    """

    k: int
    adjacency: dict  # vertex -> sorted list of neighbor vertices
    source_fingerprint: str

    def neighbors(self, vertex: int) -> list[int]:
        return self.adjacency.get(vertex, [])

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.adjacency.values()) // 2


def build_mutual_knn(net, k: int = MUTUAL_K_DEFAULT) -> MutualKnnGraph:
    if k < 1:
        raise ValueError("k must be >= 1")
    topk = {
        v: set(t for t, _ in net.out_neighbors(v)[:k])
        for v in net.vertices
    }
    adjacency: dict[int, list[int]] = {v: [] for v in net.vertices}
    for v in net.vertices:
        for t in topk[v]:
            if v in topk.get(t, ()):
                adjacency[v].append(t)
    for v in adjacency:
        adjacency[v].sort()
    return MutualKnnGraph(k=k, adjacency=adjacency,
                          source_fingerprint=_net_fingerprint(net))


def expand_all_neighbours(g: MutualKnnGraph, x: SparseVector) -> ExpandedInstance:
    """Union of mutual-graph neighbors of the instance's features."""
    method = "all-nn"
    present = set(int(i) for i in x.indices)
    chosen: set[int] = set()
    for i in present:
        chosen.update(g.neighbors(i))
    candidates = [
        ExpansionCandidate(v, 1.0, method)
        for v in sorted(chosen)
        if v not in present
    ]
    return render_expansion(x, candidates, method)


def expand_mutual_neighbours(g: MutualKnnGraph, x: SparseVector) -> ExpandedInstance:
    """Neighbors witnessed by at least two distinct features of x."""
    method = "mutual-nn"
    present = set(int(i) for i in x.indices)
    witness: dict[int, int] = {}
    for i in present:
        for v in g.neighbors(i):
            witness[v] = witness.get(v, 0) + 1
    candidates = [
        ExpansionCandidate(v, 1.0, method)
        for v in sorted(witness)
        if witness[v] >= 2 and v not in present
    ]
    return render_expansion(x, candidates, method)


@dataclass(frozen=True)
class GlobalExpansionConfig:
    gamma: float = GAMMA_DEFAULT
    q: int = HOP_CAP_DEFAULT
    score_floor: float = SCORE_FLOOR_DEFAULT
    prior: str = "uniform"  # or "empirical": keep the stored feature values

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.score_floor < 0.0:
            raise ValueError("score_floor must be non-negative")
        if self.prior not in ("uniform", "empirical"):
            raise ValueError(f"unknown prior mode {self.prior!r}")


def _seed_vector(net, x: SparseVector, prior: str) -> np.ndarray:
    x0 = np.zeros(net.n_vertices)
    for i, v in zip(x.indices, x.values):
        i = int(i)
        if net.has_vertex(i):
            x0[net.position(i)] = 1.0 if prior == "uniform" else float(v)
    return x0


def propagate_scores(net, x0: np.ndarray, gamma: float, q: int) -> np.ndarray:
    """Damped truncated propagation: sum over hops 1..q of gamma^h * x0 W^h.

    Row h of the recursion treats W[u, v] as the weight of edge u -> v,
    so scores flow along edge direction from the seeded vertices.
    """
    W = net.transition_matrix()
    cur = np.asarray(x0, dtype=np.float64)
    out = np.zeros_like(cur)
    for _ in range(q):
        cur = gamma * (cur @ W)
        out += cur
    return out


def expand_global(net, x: SparseVector,
                  cfg: GlobalExpansionConfig | None = None) -> ExpandedInstance:
    """Propagate scores from the instance's in-net features.

    Seeds carry value 1 (uniform prior; "empirical" keeps stored
    values), scores attenuate by gamma per hop, and every vertex whose
    accumulated score reaches the floor becomes a candidate. Original
    vertices may score too; they stay untouched on the original side and
    appear only as namespaced expansion features.
    """
    if cfg is None:
        cfg = GlobalExpansionConfig()
    method = "global"
    x0 = _seed_vector(net, x, cfg.prior)
    scores = propagate_scores(net, x0, cfg.gamma, cfg.q)
    candidates = [
        ExpansionCandidate(net.vertices[pos], float(s), method)
        for pos, s in enumerate(scores)
        if s >= cfg.score_floor
    ]
    return render_expansion(x, candidates, method)


def spectral_radius(net, iterations: int = 200, tol: float = 1e-10):
    """Power-iteration estimate of the transition matrix's spectral radius.

    Returns (radius, damping_suggestion, converged); the suggestion is
    1/(1 + radius), the largest damping with a convergent infinite
    series under the radius bound.
    """
    W = net.transition_matrix()
    n = W.shape[0]
    if n == 0 or W.nnz == 0:
        return 0.0, 1.0, True
    x = np.ones(n)
    log_norms: list[float] = []
    prev_est = None
    converged = False
    est = 0.0
    for _ in range(iterations):
        x = x @ W
        norm = float(np.linalg.norm(x))
        if norm == 0.0:
            # nilpotent: every long-enough product vanishes
            return 0.0, 1.0, True
        x /= norm
        log_norms.append(float(np.log(norm)))
        # Geometric mean of the later half of the growth ratios: the
        # window discards the startup transient and averages out the
        # oscillation a dominant complex pair produces.
        window = log_norms[len(log_norms) // 2:]
        est = float(np.exp(np.mean(window)))
        if prev_est is not None and abs(est - prev_est) < tol:
            converged = True
            break
        prev_est = est
    return est, 1.0 / (1.0 + est), converged


def closed_form_scores(net, x: SparseVector, gamma: float,
                       q: int | None) -> np.ndarray:
    """Dense closed form of the damped propagation series.

    For finite q this evaluates the partial geometric sum
    (I - gW)^-1 (I - (gW)^(q+1)) x0 - x0; q=None takes the series to its
    limit (I - gW)^-1 x0 - x0. Requires gamma * rho(W) < 1 and refuses
    nets above the dense-solve size limit. Oracle for propagate_scores.
    """
    n = net.n_vertices
    if n > CLOSED_FORM_VERTEX_LIMIT:
        raise ValueError(
            f"closed form limited to {CLOSED_FORM_VERTEX_LIMIT} vertices, net has {n}"
        )
    radius, _, _ = spectral_radius(net)
    # the estimated radius can sit a few ulps under a true radius of 1,
    # where the solve below would be singular anyway
    if gamma * radius >= 1.0 - 1e-9:
        raise ValueError(
            f"series diverges: gamma*radius = {gamma * radius:.6f} >= 1"
        )
    A = gamma * net.transition_matrix().toarray()
    x0 = _seed_vector(net, x, "uniform")
    eye = np.eye(n)
    if q is None:
        # x0^T ((I-A)^-1 - I)  ==  solve((I-A)^T, x0) - x0
        return np.linalg.solve((eye - A).T, x0) - x0
    if q < 1:
        raise ValueError("q must be >= 1 or None")
    partial = np.linalg.solve(eye - A, eye - np.linalg.matrix_power(A, q + 1))
    return x0 @ (partial - eye)


def predictor_margin_matrix(bank, X: sparse.csr_matrix) -> np.ndarray:
    """Raw margins mu_i . x (no bias) for every instance and predictor.

    Column order follows the bank. This is the linear map whose rows
    make score-valued expansion a linear transform of the input, which
    the decomposition tests exercise.
    """
    cols = []
    for p in bank:
        col = sparse.csr_matrix(
            (p.weight_values, (p.weight_indices, np.zeros(p.weight_indices.size, dtype=np.int64))),
            shape=(X.shape[1], 1),
        )
        cols.append(np.asarray((X @ col).todense()).ravel())
    return np.stack(cols, axis=1) if cols else np.zeros((X.shape[0], 0))


# ---------------------------------------------------------------------------
# Batch pipeline

def _independent_batch(bank, vectors: Sequence[SparseVector],
                       use_posterior: bool) -> list[ExpandedInstance]:
    if not vectors:
        return []
    X = to_csr(vectors)
    predictors = list(bank)
    out_candidates: list[list[ExpansionCandidate]] = [[] for _ in vectors]
    bumps: list[dict[int, float]] = [{} for _ in vectors]
    for p in predictors:
        margins = p.margins_batch(X)
        fired = np.flatnonzero(margins > 0.0)
        if fired.size == 0:
            continue
        if use_posterior:
            values = expit(margins[fired])
        else:
            values = np.ones(fired.size)
        for row, val in zip(fired, values):
            x = vectors[row]
            if x.get(p.feature_index) != 0.0:
                bumps[row][p.feature_index] = float(val)
            else:
                out_candidates[row].append(
                    ExpansionCandidate(p.feature_index, float(val), "independent")
                )
    result = []
    for row, x in enumerate(vectors):
        original = x
        if bumps[row]:
            entries = x.to_dict()
            for i, v in bumps[row].items():
                entries[i] = entries[i] + v
            original = SparseVector.from_dict(entries, x.dim)
        result.append(render_expansion(original, out_candidates[row], "independent"))
    return result


def _fired_batch(bank, vectors: Sequence[SparseVector]) -> list[list[int]]:
    if not vectors:
        return []
    X = to_csr(vectors)
    fired: list[list[int]] = [[] for _ in vectors]
    for p in bank:
        for row in np.flatnonzero(p.margins_batch(X) > 0.0):
            fired[row].append(p.feature_index)
    return fired


def _global_batch(net, vectors: Sequence[SparseVector],
                  cfg: GlobalExpansionConfig) -> list[ExpandedInstance]:
    nv = net.n_vertices
    X0 = np.zeros((len(vectors), nv))
    for row, x in enumerate(vectors):
        X0[row] = _seed_vector(net, x, cfg.prior)
    W = net.transition_matrix()
    cur = X0
    scores = np.zeros_like(X0)
    for _ in range(cfg.q):
        cur = cfg.gamma * (cur @ W)
        scores += cur
    out = []
    for row, x in enumerate(vectors):
        candidates = [
            ExpansionCandidate(net.vertices[pos], float(s), "global")
            for pos, s in enumerate(scores[row])
            if s >= cfg.score_floor
        ]
        out.append(render_expansion(x, candidates, "global"))
    return out


def expand_instances(
    method: str,
    vectors: Sequence[SparseVector],
    bank=None,
    net=None,
    use_posterior: bool = False,
    max_hops: int = MAX_HOPS_DEFAULT,
    mutual_k: int = MUTUAL_K_DEFAULT,
    global_cfg: GlobalExpansionConfig | None = None,
) -> list[ExpandedInstance]:
    """Expand a batch of instances with the selected method.

    "none" passes instances through with empty candidate lists, which
    keeps the no-expansion control on the same code path.
    """
    if method == "none":
        return [render_expansion(x, [], "none") for x in vectors]
    if method == "independent":
        if bank is None:
            raise ValueError("independent expansion needs a predictor bank")
        return _independent_batch(bank, vectors, use_posterior)
    if method == "local-path":
        if bank is None or net is None:
            raise ValueError("local-path expansion needs a bank and a net")
        index = PathIndex(net, max_hops=max_hops)
        fired = _fired_batch(bank, vectors)
        out = []
        for x, f in zip(vectors, fired):
            out.append(_local_path_one(net, x, f, index))
        return out
    if method == "all-nn":
        if net is None:
            raise ValueError("all-nn expansion needs a net")
        g = build_mutual_knn(net, k=mutual_k)
        return [expand_all_neighbours(g, x) for x in vectors]
    if method == "mutual-nn":
        if net is None:
            raise ValueError("mutual-nn expansion needs a net")
        g = build_mutual_knn(net, k=mutual_k)
        return [expand_mutual_neighbours(g, x) for x in vectors]
    if method == "global":
        if net is None:
            raise ValueError("global expansion needs a net")
        return _global_batch(net, vectors, global_cfg or GlobalExpansionConfig())
    raise ValueError(f"unknown expansion method {method!r}")


def write_expanded(path, doc_ids: Sequence[str],
                   expanded: Sequence[ExpandedInstance], vocab,
                   gamma: float | None = None, q: int | None = None) -> None:
    """Expanded-instance stream: one JSON object per line.

    Feature maps are keyed by term; expansion features live in their own
    map (the namespaced range). Scores print at 17 significant digits so
    the file is byte-stable and parses back exactly.
    """
    if len(doc_ids) != len(expanded):
        raise ValueError("ids and expanded instances must align")
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, inst in zip(doc_ids, expanded):
            rec = {
                "id": str(doc_id),
                "features": {
                    vocab.term(int(i)): float(v)
                    for i, v in zip(inst.original.indices, inst.original.values)
                },
                "exp_features": {
                    vocab.term(c.vertex): float(c.score)
                    for c in inst.candidates
                },
                "method": inst.method,
                "gamma": gamma,
                "q": q,
            }
            fh.write(json_render(rec) + "\n")


def read_expanded(path, vocab) -> tuple[list[str], list[ExpandedInstance]]:
    """Parse an expanded-instance stream back into joint-space objects."""
    ids: list[str] = []
    out: list[ExpandedInstance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                entries = {
                    vocab.index(t): float(v) for t, v in rec["features"].items()
                }
                original = SparseVector.from_dict(entries, dim=len(vocab))
                method = rec.get("method", "")
                candidates = [
                    ExpansionCandidate(vocab.index(t), float(s), method)
                    for t, s in rec["exp_features"].items()
                ]
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown term {exc}") from exc
            ids.append(str(rec["id"]))
            out.append(render_expansion(original, candidates, method))
    return ids, out


def _local_path_one(net, x: SparseVector, fired: Sequence[int],
                    index: PathIndex) -> ExpandedInstance:
    method = "local-path"
    fired = [f for f in fired if net.has_vertex(f)]
    originals = [int(i) for i in x.indices if net.has_vertex(int(i))]
    chosen: set[int] = set(fired)
    present = set(int(i) for i in x.indices)
    for o in originals:
        src = net.position(o)
        for f in fired:
            if f == o:
                continue
            for pos in index.on_shortest_path(src, net.position(f)):
                chosen.add(net.vertices[int(pos)])
    candidates = [
        ExpansionCandidate(v, 1.0, method)
        for v in sorted(chosen)
        if v not in present
    ]
    return render_expansion(x, candidates, method)
