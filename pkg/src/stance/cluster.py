"""Distance-percentile filtering, cosine distances and HDBSCAN on precomputed distances.

The HDBSCAN here is the exact O(n^2) variant: core distances, mutual
reachability, Prim's MST on the dense graph, single-linkage merge tree,
condensed tree and excess-of-mass (or leaf) selection. Merges at equal
distance are treated as simultaneous, which makes the hierarchy (and the
labels) independent of input order when distances tie.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError
from .pca import ScoreMatrix

log = logging.getLogger(__name__)

NOISE = -1


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    user_ids: tuple
    d: np.ndarray


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    user_ids: tuple
    labels: np.ndarray
    stabilities: np.ndarray
    sizes: np.ndarray
    condensed_tree: np.ndarray = None
    min_cluster_size: int = 20
    min_samples: int = 20

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    def label_of(self) -> dict:
        return dict(zip(self.user_ids, self.labels.tolist()))


def percentile_filter(scores: ScoreMatrix, percentile: float = 90.0) -> ScoreMatrix:
    """Keep users whose distance from the origin is at least the nearest-rank percentile."""
    if not 0 <= percentile < 100:
        raise ConfigError(f"percentile must lie in [0, 100), got {percentile}")
    n = len(scores.user_ids)
    if n == 0:
        raise DegenerateError("no users to filter")
    norms = np.linalg.norm(scores.scores, axis=1)
    rank = max(1, math.ceil(round(percentile / 100 * n, 9)))
    cut = np.sort(norms)[rank - 1]
    keep = np.flatnonzero(norms >= cut)
    return ScoreMatrix(
        tuple(scores.user_ids[i] for i in keep), scores.scores[keep], scores.provenance, scores.pc_labels
    )


def cosine_distances(scores: ScoreMatrix, dtype=np.float64) -> DistanceMatrix:
    X = np.asarray(scores.scores, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateError(f"user {scores.user_ids[zero[0]]!r} has a zero score vector; cosine distance undefined")
    U = X / norms[:, None]
    d = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    np.clip(d, 0.0, 2.0, out=d)
    return DistanceMatrix(tuple(scores.user_ids), d.astype(dtype, copy=False))


# -- HDBSCAN pieces -------------------------------------------------------------


def core_distances(d: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the ``min_samples``-th nearest point, the point itself counting as the first."""
    k = min(min_samples, d.shape[0]) - 1
    return np.partition(d, k, axis=1)[:, k].astype(np.float64)


def mutual_reachability(d: np.ndarray, core: np.ndarray) -> np.ndarray:
    mr = np.maximum(np.asarray(d, dtype=np.float64), np.maximum.outer(core, core))
    np.fill_diagonal(mr, 0.0)
    return mr


def prim_mst(w: np.ndarray) -> np.ndarray:
    """Minimum spanning tree of a dense symmetric weight matrix.

    Returns ``(n-1, 3)`` rows ``(a, b, weight)`` with ``a < b``, sorted by
    weight, then ``a``, then ``b``.
    """
    n = w.shape[0]
    if n < 2:
        return np.zeros((0, 3))
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.zeros(n, dtype=np.int64)
    edges = np.zeros((n - 1, 3))
    v = 0
    for i in range(n - 1):
        in_tree[v] = True
        row = w[v]
        better = (row < best) & ~in_tree
        best[better] = row[better]
        parent[better] = v
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        a, b = sorted((int(parent[nxt]), nxt))
        edges[i] = (a, b, cand[nxt])
        v = nxt
    order = np.lexsort((edges[:, 1], edges[:, 0], edges[:, 2]))
    return edges[order]


def single_linkage(mst: np.ndarray, n: int) -> list:
    """Merge tree from sorted MST edges, with equal-distance merges collapsed.

    Edges of one weight are applied together, so several components joining
    at the same distance become children of a single node. The result is
    independent of how ties were ordered. Returns a list of nodes
    ``(children, distance, size)``; node ``i`` has id ``n + i`` and the last
    node is the root. Children are ordered by their smallest point index.
    """
    parent = list(range(n))
    node_of = list(range(n))  # union-find root -> current tree node id
    first = list(range(n))  # smallest point index under each union-find root
    size = [1] * n
    nodes = []

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    i = 0
    while i < len(mst):
        j = i
        while j < len(mst) and mst[j, 2] == mst[i, 2]:
            j += 1
        dist = float(mst[i, 2])
        groups = {}
        local = {}

        def lfind(x):
            while local[x] != x:
                local[x] = local[local[x]]
                x = local[x]
            return x

        for a, b, _ in mst[i:j]:
            ra, rb = find(int(a)), find(int(b))
            local.setdefault(ra, ra)
            local.setdefault(rb, rb)
            la, lb = lfind(ra), lfind(rb)
            if la != lb:
                local[max(la, lb)] = min(la, lb)
        for r in local:
            groups.setdefault(lfind(r), []).append(r)
        for key in sorted(groups, key=lambda g: min(first[r] for r in groups[g])):
            members = sorted(groups[key], key=lambda r: first[r])
            new_root = members[0]
            children = [node_of[r] for r in members]
            total = sum(size[r] for r in members)
            for r in members[1:]:
                parent[r] = new_root
            size[new_root] = total
            first[new_root] = min(first[r] for r in members)
            node_of[new_root] = n + len(nodes)
            nodes.append((children, dist, total))
        i = j
    return nodes


def _lambda(dist: float) -> float:
    return 1.0 / dist if dist > 0 else math.inf


def condense_tree(tree: list, n: int, min_cluster_size: int) -> np.ndarray:
    """Condensed cluster tree as rows ``(parent, child, lambda, child_size)``.

    Points keep ids ``0..n-1``; clusters are numbered from ``n`` (the root).
    At each merge node, children of at least ``min_cluster_size`` points become
    new clusters when there are two or more of them; a single large child
    continues its parent cluster; points of small children fall out.
    """
    if not tree:
        return np.zeros((0, 4))
    root = n + len(tree) - 1

    def size_of(node):
        return 1 if node < n else tree[node - n][2]

    def leaves(node):
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                stack.extend(tree[x - n][0])
        return sorted(out)

    relabel = {root: n}
    next_label = n + 1
    rows = []
    queue = deque([root])
    while queue:
        node = queue.popleft()
        if node < n:
            continue
        children, dist, _ = tree[node - n]
        lam = _lambda(dist)
        parent = relabel[node]
        big = [c for c in children if size_of(c) >= min_cluster_size]
        for c in children:
            if size_of(c) < min_cluster_size:
                rows.extend((parent, p, lam, 1) for p in leaves(c))
            elif len(big) >= 2:
                relabel[c] = next_label
                rows.append((parent, next_label, lam, size_of(c)))
                next_label += 1
                queue.append(c)
            else:
                relabel[c] = parent
                queue.append(c)
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def cluster_stabilities(tree: np.ndarray) -> dict:
    """Excess of mass per cluster: sum over leaving members of (lambda_leave - lambda_birth)."""
    if tree.size == 0:
        return {}
    parents = tree[:, 0].astype(np.int64)
    children = tree[:, 1].astype(np.int64)
    root = int(parents.min())
    birth = {root: 0.0}
    for p, c, lam in zip(parents, children, tree[:, 2]):
        if c >= root:
            birth[int(c)] = lam
    terms = {c: [] for c in birth}
    for p, lam, size in zip(parents, tree[:, 2], tree[:, 3]):
        b = birth[int(p)]
        # inf - inf: members leaving at the same zero-distance level add nothing
        gain = 0.0 if lam == b else lam - b
        terms[int(p)].extend([gain] * int(size))
    # one term per leaving point, summed exactly: independent of row order
    return {c: math.fsum(t) for c, t in terms.items()}


def _cluster_children(tree: np.ndarray, root: int) -> dict:
    kids = {}
    for p, c in zip(tree[:, 0].astype(np.int64), tree[:, 1].astype(np.int64)):
        kids.setdefault(int(p), [])
        if c >= root:
            kids[int(p)].append(int(c))
    return kids


def select_clusters(tree: np.ndarray, stabilities: dict, method: str = "eom", allow_single_cluster: bool = False) -> list:
    """Flat cluster ids chosen from the condensed tree."""
    if not stabilities:
        return []
    root = min(stabilities)
    kids = _cluster_children(tree, root)
    for c in stabilities:
        kids.setdefault(c, [])
    nodes = sorted(stabilities, reverse=True)
    if not allow_single_cluster:
        nodes = [c for c in nodes if c != root]
    if method == "leaf":
        leaves = [c for c in nodes if not kids[c]]
        if not leaves and allow_single_cluster:
            return [root]
        return sorted(leaves)
    if method != "eom":
        raise ConfigError(f"unknown cluster selection method {method!r}")
    stab = dict(stabilities)
    selected = {c: True for c in nodes}
    for c in nodes:
        child_sum = sum(stab[k] for k in kids[c])
        if child_sum > stab[c]:
            selected[c] = False
            stab[c] = child_sum
        else:
            stack = list(kids[c])
            while stack:
                x = stack.pop()
                if x in selected:
                    selected[x] = False
                stack.extend(kids[x])
    return sorted(c for c, ok in selected.items() if ok)


def label_points(tree: np.ndarray, chosen: list, n: int) -> np.ndarray:
    """Each point gets its nearest selected ancestor cluster, renumbered 0..k-1, or NOISE."""
    parent_of = {int(c): int(p) for p, c in zip(tree[:, 0], tree[:, 1])}
    relabel = {c: i for i, c in enumerate(sorted(chosen))}
    labels = np.full(n, NOISE, dtype=np.int64)
    for p in range(n):
        x = parent_of.get(p)
        while x is not None:
            if x in relabel:
                labels[p] = relabel[x]
                break
            x = parent_of.get(x)
    return labels


def hdbscan(
    dm: DistanceMatrix,
    min_cluster_size: int = 20,
    min_samples: int | None = None,
    selection: str = "eom",
    allow_single_cluster: bool = False,
) -> ClusterAssignment:
    """HDBSCAN on a precomputed distance matrix.

    ``min_samples`` defaults to ``min_cluster_size``; the point itself counts
    toward it. Returns labels with ``NOISE`` (-1) for unclustered points and
    cluster ids dense from 0 in condensed-tree order.
    """
    min_samples = min_cluster_size if min_samples is None else min_samples
    if min_cluster_size < 2 or min_samples < 1:
        raise ConfigError("min_cluster_size must be >= 2 and min_samples >= 1")
    d = dm.d
    n = d.shape[0]
    if n < min_cluster_size:
        log.warning("stage=cluster event=too_few_points n=%d min_cluster_size=%d", n, min_cluster_size)
        return ClusterAssignment(
            dm.user_ids, np.full(n, NOISE, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64),
            np.zeros((0, 4)), min_cluster_size, min_samples,
        )
    core = core_distances(d, min_samples)
    mr = mutual_reachability(d, core)
    mst = prim_mst(mr)
    tree = condense_tree(single_linkage(mst, n), n, min_cluster_size)
    stab = cluster_stabilities(tree)
    chosen = select_clusters(tree, stab, selection, allow_single_cluster)
    labels = label_points(tree, chosen, n)
    sizes = np.bincount(labels[labels >= 0], minlength=len(chosen)).astype(np.int64)
    stabilities = np.array([stab[c] for c in sorted(chosen)], dtype=np.float64)
    return ClusterAssignment(dm.user_ids, labels, stabilities, sizes, tree, min_cluster_size, min_samples)


# -- files ------------------------------------------------------------------


def save_assignments(a: ClusterAssignment, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "cluster", "probability_placeholder"])
        for u, lab in zip(a.user_ids, a.labels):
            w.writerow([u, "noise" if lab == NOISE else int(lab), "0.0" if lab == NOISE else "1.0"])


def load_assignments(path) -> dict:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            out[rec["user_id"]] = NOISE if rec["cluster"] == "noise" else int(rec["cluster"])
    return out


def save_condensed_tree(tree: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parent", "child", "lambda", "size"])
        for p, c, lam, s in tree:
            w.writerow([int(p), int(c), repr(float(lam)), int(s)])


def cluster_summary_json(a: ClusterAssignment) -> dict:
    return {
        "n_points": len(a.user_ids),
        "n_clusters": a.n_clusters,
        "n_noise": int(np.sum(a.labels == NOISE)),
        "min_cluster_size": a.min_cluster_size,
        "min_samples": a.min_samples,
        "clusters": [
            {"cluster": i, "size": int(s), "stability": float(st)}
            for i, (s, st) in enumerate(zip(a.sizes, a.stabilities))
        ],
    }


def write_summary(a: ClusterAssignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cluster_summary_json(a), fh, indent=2, sort_keys=True)
