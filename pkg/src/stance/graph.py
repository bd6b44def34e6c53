"""Co-retweet networks and Louvain community detection."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from xml.sax.saxutils import quoteattr, escape

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .incidence import IncidenceMatrix

NOISE = -1


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Undirected graph without self-loops; ``edges`` holds ``(i, j, w)`` node-index triples with ``i < j``."""

    nodes: tuple
    edges: np.ndarray
    node_attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64).reshape(-1, 3)
        if e.size:
            i, j, w = e[:, 0].astype(np.int64), e[:, 1].astype(np.int64), e[:, 2]
            if (i >= j).any():
                raise DataError("edges must satisfy i < j (no self-loops)")
            if (w <= 0).any():
                raise DataError("edge weights must be positive")
            if j.max() >= len(self.nodes):
                raise DataError("edge endpoint outside node list")
            if len({(a, b) for a, b in zip(i.tolist(), j.tolist())}) != len(i):
                raise DataError("duplicate edges")
        object.__setattr__(self, "edges", e)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        i = self.edges[:, 0].astype(np.int64)
        j = self.edges[:, 1].astype(np.int64)
        w = self.edges[:, 2]
        a = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
        a.sort_indices()
        return a

    def edge_list(self):
        return [(self.nodes[int(a)], self.nodes[int(b)], float(w)) for a, b, w in self.edges]


@dataclass(frozen=True, eq=False)
class Partition:
    nodes: tuple
    membership: np.ndarray
    modularity: float

    def as_dict(self) -> dict:
        return dict(zip(self.nodes, self.membership.tolist()))

    @property
    def n_communities(self) -> int:
        return int(self.membership.max()) + 1 if self.membership.size else 0


def _shared_counts(C: sp.csr_matrix) -> sp.csr_matrix:
    """Sum over influencers of min(count_u, count_v) for every user pair."""
    cc = C.tocsc()
    n = C.shape[0]
    rows, cols, vals = [], [], []
    for j in range(cc.shape[1]):
        lo, hi = cc.indptr[j], cc.indptr[j + 1]
        if hi - lo < 2:
            continue
        idx = cc.indices[lo:hi]
        c = cc.data[lo:hi].astype(np.float64)
        mins = np.minimum.outer(c, c)
        a, b = np.triu_indices(idx.size, 1)
        rows.append(idx[a])
        cols.append(idx[b])
        vals.append(mins[a, b])
    if not rows:
        return sp.csr_matrix((n, n))
    r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    lo, hi = np.minimum(r, c), np.maximum(r, c)
    return sp.coo_matrix((v, (lo, hi)), shape=(n, n)).tocsr()


def co_retweet_graph(
    m: IncidenceMatrix,
    members,
    level: str = "user",
    assignment: dict | None = None,
    weighting: str = "binary",
) -> WeightedGraph:
    """Co-retweet network over ``members``.

    At user level the weight of (u, v) is the number of influencers both
    retweeted (``weighting="counts"`` uses the summed smaller retweet count
    per shared influencer instead). At cluster level, user weights are summed
    between clusters; totals inside a cluster are kept as the node attribute
    ``within_weight``. Noise users are left out at cluster level.
    """
    members = list(members)
    if not members:
        raise DataError("co-retweet graph needs at least one member")
    if level not in ("user", "cluster"):
        raise ConfigError(f"unknown graph level {level!r}")
    if level == "cluster":
        if assignment is None:
            raise ConfigError("cluster-level graph requires an assignment")
        members = [u for u in members if assignment.get(u, NOISE) != NOISE]
        if not members:
            raise DataError("no clustered members for a cluster-level graph")
    missing = [u for u in members if u not in m.row_index]
    if missing:
        raise DataError(f"{len(missing)} members are not rows of the matrix, e.g. {missing[0]!r}")
    sub = m.select_rows(members)
    if weighting == "binary":
        B = sub.binary
        G = sp.triu(B @ B.T, k=1).tocsr()
    elif weighting == "counts":
        G = _shared_counts(sub.counts)
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    G.eliminate_zeros()
    coo = G.tocoo()

    if level == "user":
        order = np.lexsort((coo.col, coo.row))
        edges = np.column_stack([coo.row[order], coo.col[order], coo.data[order]]).astype(np.float64)
        attrs = {}
        if assignment is not None:
            attrs = {u: {"cluster": _label_str(assignment.get(u, NOISE))} for u in members}
        return WeightedGraph(tuple(members), edges, attrs)

    labels = np.array([assignment[u] for u in members])
    clusters = sorted(set(labels.tolist()))
    pos = {c: i for i, c in enumerate(clusters)}
    ci = np.array([pos[l] for l in labels[coo.row]], dtype=np.int64)
    cj = np.array([pos[l] for l in labels[coo.col]], dtype=np.int64)
    k = len(clusters)
    within = np.zeros(k)
    np.add.at(within, ci[ci == cj], coo.data[ci == cj])
    lo, hi = np.minimum(ci, cj), np.maximum(ci, cj)
    off = lo != hi
    W = sp.coo_matrix((coo.data[off], (lo[off], hi[off])), shape=(k, k)).tocsr()
    W.sum_duplicates()
    W.eliminate_zeros()
    wc = W.tocoo()
    order = np.lexsort((wc.col, wc.row))
    edges = np.column_stack([wc.row[order], wc.col[order], wc.data[order]]).astype(np.float64)
    sizes = np.bincount([pos[l] for l in labels], minlength=k)
    attrs = {
        str(c): {"cluster": str(c), "within_weight": float(within[i]), "size": int(sizes[i])}
        for i, c in enumerate(clusters)
    }
    return WeightedGraph(tuple(str(c) for c in clusters), edges, attrs)


def _label_str(label) -> str:
    return "noise" if label == NOISE else str(label)


# -- modularity & Louvain ---------------------------------------------------


def _modularity_adj(A: sp.csr_matrix, membership: np.ndarray, resolution: float) -> float:
    k = np.asarray(A.sum(axis=1)).ravel()
    two_m = k.sum()
    if two_m == 0:
        return 0.0
    c = membership
    n_c = int(c.max()) + 1
    coo = A.tocoo()
    same = c[coo.row] == c[coo.col]
    inside = np.bincount(c[coo.row[same]], weights=coo.data[same], minlength=n_c)
    tot = np.bincount(c, weights=k, minlength=n_c)
    return float(inside.sum() / two_m - resolution * np.sum((tot / two_m) ** 2))


def modularity(g: WeightedGraph, p, resolution: float = 1.0) -> float:
    """Q = (1/2m) sum_ij (A_ij - resolution * k_i k_j / 2m) [c_i == c_j]; 0 for an edgeless graph.

    ``p`` is a :class:`Partition`, a node -> community dict or an array aligned with ``g.nodes``.
    """
    membership = _membership_array(g, p)
    return _modularity_adj(g.adjacency(), membership, resolution)


def _membership_array(g: WeightedGraph, p) -> np.ndarray:
    if isinstance(p, Partition):
        if p.nodes != g.nodes:
            p = p.as_dict()
        else:
            return _dense(np.asarray(p.membership))
    if isinstance(p, dict):
        missing = [v for v in g.nodes if v not in p]
        if missing:
            raise DataError(f"partition does not cover node {missing[0]!r}")
        return _dense(np.array([p[v] for v in g.nodes]))
    arr = np.asarray(p)
    if arr.shape != (g.n_nodes,):
        raise DataError("partition does not cover every node")
    return _dense(arr)


def _dense(labels: np.ndarray) -> np.ndarray:
    """Relabel communities 0..k-1 in order of first appearance."""
    out = np.empty(labels.size, dtype=np.int64)
    seen = {}
    for i, l in enumerate(labels.tolist()):
        out[i] = seen.setdefault(l, len(seen))
    return out


def _local_moves(A: sp.csr_matrix, resolution: float, rng) -> tuple[np.ndarray, bool]:
    n = A.shape[0]
    k = np.asarray(A.sum(axis=1)).ravel()
    two_m = k.sum()
    comm = np.arange(n)
    tot = k.copy()
    indptr, indices, data = A.indptr, A.indices, A.data
    order = rng.permutation(n)
    improved = False
    moved = True
    while moved:
        moved = False
        for i in order:
            lo, hi = indptr[i], indptr[i + 1]
            nbr = indices[lo:hi]
            w = data[lo:hi]
            keep = nbr != i
            nbr, w = nbr[keep], w[keep]
            ci = comm[i]
            tot[ci] -= k[i]
            if nbr.size:
                cands, inv = np.unique(comm[nbr], return_inverse=True)
                k_in = np.bincount(inv, weights=w)
            else:
                cands, k_in = np.zeros(0, dtype=np.int64), np.zeros(0)
            gain = k_in - resolution * tot[cands] * k[i] / two_m
            own = np.flatnonzero(cands == ci)
            best_c = ci
            best_gain = gain[own[0]] if own.size else -resolution * tot[ci] * k[i] / two_m
            if gain.size:
                j = int(np.argmax(gain))
                if gain[j] > best_gain + 1e-12 * max(1.0, abs(best_gain)):
                    best_c, best_gain = cands[j], gain[j]
            comm[i] = best_c
            tot[best_c] += k[i]
            if best_c != ci:
                moved = improved = True
    return _dense(comm), improved


def _louvain_once(A: sp.csr_matrix, seed, resolution: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    membership = np.arange(A.shape[0])
    cur = A
    while True:
        comm, improved = _local_moves(cur, resolution, rng)
        if not improved:
            break
        membership = comm[membership]
        P = sp.csr_matrix((np.ones(comm.size), (np.arange(comm.size), comm)), shape=(comm.size, comm.max() + 1))
        cur = (P.T @ cur @ P).tocsr()
        cur.sort_indices()
        if cur.shape[0] == 1:
            break
    return _dense(membership)


def louvain(g: WeightedGraph, seed: int = 0, resolution: float = 1.0, restarts: int = 10) -> Partition:
    """Two-phase Louvain: greedy local moves, then aggregation, until no move helps.

    Node visiting order is shuffled at every level from a generator seeded by
    ``(seed, restart)``. The best of ``restarts`` runs is returned (first run
    wins ties). Self-loops created by aggregation carry the full internal
    weight in the node degree.
    """
    n = g.n_nodes
    if n == 0:
        return Partition((), np.zeros(0, dtype=np.int64), 0.0)
    A = g.adjacency()
    if A.nnz == 0:
        return Partition(g.nodes, np.arange(n), 0.0)
    best, best_q = None, -np.inf
    for r in range(max(1, restarts)):
        membership = _louvain_once(A, [seed, r], resolution)
        q = _modularity_adj(A, membership, resolution)
        if q > best_q + 1e-12:
            best, best_q = membership, q
    return Partition(g.nodes, best, best_q)


# -- files ------------------------------------------------------------------


def write_graphml(g: WeightedGraph, path, extra_node_attrs: dict | None = None) -> None:
    """GraphML with an edge ``weight`` key and every node attribute found (``cluster``, ...)."""
    attrs = {v: dict(g.node_attrs.get(v, {})) for v in g.nodes}
    for key, mapping in (extra_node_attrs or {}).items():
        for v in g.nodes:
            if v in mapping:
                attrs[v][key] = mapping[v]
    keys = {}
    for d in attrs.values():
        for kname, val in d.items():
            t = "int" if isinstance(val, (int, np.integer)) and not isinstance(val, bool) else (
                "double" if isinstance(val, float) else "string")
            keys.setdefault(kname, t)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write('<?xml version="1.0" encoding="UTF-8"?>\n')
        fh.write('<graphml xmlns="http://graphml.graphdrawing.org/xmlns">\n')
        for kname in sorted(keys):
            fh.write(f'  <key id={quoteattr(kname)} for="node" attr.name={quoteattr(kname)} attr.type="{keys[kname]}"/>\n')
        fh.write('  <key id="weight" for="edge" attr.name="weight" attr.type="double"/>\n')
        fh.write('  <graph id="G" edgedefault="undirected">\n')
        for v in g.nodes:
            d = attrs[v]
            if not d:
                fh.write(f"    <node id={quoteattr(str(v))}/>\n")
                continue
            fh.write(f"    <node id={quoteattr(str(v))}>")
            for kname in sorted(d):
                val = d[kname]
                text = repr(float(val)) if keys[kname] == "double" else str(val)
                fh.write(f'<data key={quoteattr(kname)}>{escape(text)}</data>')
            fh.write("</node>\n")
        for a, b, w in g.edge_list():
            fh.write(
                f"    <edge source={quoteattr(str(a))} target={quoteattr(str(b))}>"
                f'<data key="weight">{w!r}</data></edge>\n'
            )
        fh.write("  </graph>\n</graphml>\n")


def write_edge_csv(g: WeightedGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "weight"])
        for a, b, wt in g.edge_list():
            w.writerow([a, b, repr(wt)])


def write_partition_csv(p: Partition, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "community"])
        for v, c in zip(p.nodes, p.membership):
            w.writerow([v, int(c)])
