import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_hdbscan, brute_mst_weight, same_partition, tree_point_sets
from stance.cluster import (
    NOISE,
    DistanceMatrix,
    cluster_stabilities,
    cosine_distances,
    hdbscan,
    load_assignments,
    mutual_reachability,
    core_distances,
    percentile_filter,
    prim_mst,
    save_assignments,
    save_condensed_tree,
    write_summary,
)
from stance.errors import ConfigError, DegenerateError
from stance.pca import ScoreMatrix
from stance.synth import adjusted_rand_index


def scores(X, ids=None):
    X = np.asarray(X, dtype=float)
    ids = ids or [f"u{i:03d}" for i in range(len(X))]
    return ScoreMatrix(tuple(ids), X, "common", tuple(f"common/PC{i + 1}" for i in range(X.shape[1])))


def dm(P):
    P = np.asarray(P, dtype=float)
    d = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
    return DistanceMatrix(tuple(map(str, range(len(P)))), d)


def test_percentile_nearest_rank():
    s = scores(np.arange(1, 11, dtype=float)[:, None])
    kept = percentile_filter(s, 90)
    assert sorted(kept.scores[:, 0]) == [9.0, 10.0]
    assert len(percentile_filter(s, 0).user_ids) == 10
    assert len(percentile_filter(scores(np.ones((7, 2))), 90).user_ids) == 7
    with pytest.raises(ConfigError):
        percentile_filter(s, 100)
    with pytest.raises(ConfigError):
        percentile_filter(s, -1)


def test_percentile_ten_thousand():
    X = np.random.default_rng(0).normal(size=(10_000, 6))
    frac = len(percentile_filter(scores(X), 90).user_ids) / 10_000
    assert 0.094 <= frac <= 0.106


def test_cosine_examples():
    d = cosine_distances(scores([[1, 0], [2, 0], [0, 3], [-1, 0]])).d
    assert d[0, 1] == 0 and d[0, 2] == pytest.approx(1) and d[0, 3] == 2
    with pytest.raises(DegenerateError, match="u001"):
        cosine_distances(scores([[1, 0], [0, 0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_bounds_symmetry(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(2, 40)), int(rng.integers(1, 6))))
    d = cosine_distances(scores(X)).d
    assert np.all(d >= 0) and np.all(d <= 2) and np.all(np.isfinite(d))
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)


def test_cosine_scale_invariance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(120, 3))
    base = cosine_distances(scores(X)).d
    for c in (0.25, 2.0, 1024.0):
        assert cosine_distances(scores(X * c)).d.tobytes() == base.tobytes()
    a0 = hdbscan(DistanceMatrix(tuple(map(str, range(120))), base), 10)
    for c in (0.3, 7.0, 1e3):
        d = cosine_distances(scores(X * c)).d
        assert np.abs(d - base).max() < 1e-12
        a = hdbscan(DistanceMatrix(tuple(map(str, range(120))), d), 10)
        assert np.array_equal(a.labels, a0.labels)


def test_two_blobs():
    rng = np.random.default_rng(2)
    P = np.vstack([rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + [10, 0]])
    truth = np.repeat([0, 1], 50)
    a = hdbscan(dm(P), 20)
    assert a.n_clusters == 2 and np.all(a.labels != NOISE)
    assert adjusted_rand_index(a.labels, truth) == 1.0


def test_too_few_points():
    P = np.random.default_rng(3).normal(size=(12, 2))
    a = hdbscan(dm(P), 20)
    assert np.all(a.labels == NOISE) and a.n_clusters == 0


def point_sets_stabilities(a, n):
    sets = tree_point_sets(a.condensed_tree, n)
    return {sets[c]: v for c, v in cluster_stabilities(a.condensed_tree).items() if c in sets}


@pytest.mark.parametrize("ties", [False, True])
def test_brute_force_oracle(ties):
    rng = np.random.default_rng(4 + ties)
    for _ in range(150):
        n = int(rng.integers(3, 13))
        P = rng.integers(0, 4, size=(n, 2)).astype(float) if ties else rng.normal(size=(n, 2))
        ms = int(rng.integers(1, 4))
        d = dm(P)
        stab, labels = brute_hdbscan(d.d, 3, ms)
        a = hdbscan(d, 3, ms)
        assert same_partition(labels, a.labels)
        mine = point_sets_stabilities(a, n) if a.condensed_tree.size else {}
        assert mine == stab


def test_matches_sklearn_without_ties():
    sk = pytest.importorskip("sklearn.cluster")
    rng = np.random.default_rng(5)
    for _ in range(40):
        n = int(rng.integers(20, 80))
        P = np.vstack([rng.normal(size=(n // 2, 2)), rng.normal(size=(n - n // 2, 2)) + rng.uniform(2, 6)])
        d = dm(P)
        ref = sk.HDBSCAN(min_cluster_size=5, min_samples=1, metric="precomputed").fit(d.d)
        assert same_partition(ref.labels_, hdbscan(d, 5, 1).labels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = 60
    P = np.vstack([rng.normal(size=(30, 2)), rng.normal(size=(30, 2)) + 4])
    if seed % 2:
        P = np.round(P)  # plenty of ties
    perm = rng.permutation(n)
    a = hdbscan(dm(P), 8, 4)
    b = hdbscan(dm(P[perm]), 8, 4)
    assert same_partition(a.labels[perm], b.labels)
    assert sorted(a.stabilities.tolist()) == sorted(b.stabilities.tolist())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_cluster_sizes_respect_minimum(seed, mcs):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(int(rng.integers(mcs, 90)), 3))
    a = hdbscan(dm(P), mcs)
    assert np.all(a.sizes >= mcs)
    ids = sorted(set(a.labels.tolist()) - {NOISE})
    assert ids == list(range(len(ids)))


def test_mst_against_kruskal():
    rng = np.random.default_rng(6)
    for n in (2, 5, 30, 200):
        d = dm(rng.normal(size=(n, 3))).d
        mr = mutual_reachability(d, core_distances(d, 4))
        mst = prim_mst(mr)
        assert mst.shape == (n - 1, 3)
        assert mst[:, 2].sum() == pytest.approx(brute_mst_weight(mr), rel=1e-12)


def test_mst_tie_order():
    w = np.ones((4, 4)) - np.eye(4)
    mst = prim_mst(w)
    assert [tuple(map(int, e[:2])) for e in mst] == sorted(tuple(map(int, e[:2])) for e in mst)


def test_core_distance_counts_self():
    d = dm(np.array([[0.0], [1.0], [3.0]])).d
    assert core_distances(d, 1).tolist() == [0, 0, 0]
    assert core_distances(d, 2).tolist() == [1, 1, 2]


def test_float32_mode_same_partition():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(size=(40, 2)) + [5, 0], rng.normal(size=(40, 2)) + [0, 5]])
    s = scores(X)
    a = hdbscan(cosine_distances(s), 20)
    b = hdbscan(cosine_distances(s, dtype=np.float32), 20)
    assert cosine_distances(s, dtype=np.float32).d.dtype == np.float32
    assert adjusted_rand_index(a.labels, b.labels) == 1.0


def test_leaf_selection_matches_sklearn():
    sk = pytest.importorskip("sklearn.cluster")
    rng = np.random.default_rng(8)
    for _ in range(15):
        P = np.vstack([rng.normal(size=(30, 2)) + c for c in ([0, 0], [4, 0], [0, 9])])
        ref = sk.HDBSCAN(min_cluster_size=6, min_samples=1, metric="precomputed",
                         cluster_selection_method="leaf").fit(dm(P).d)
        assert same_partition(ref.labels_, hdbscan(dm(P), 6, 1, selection="leaf").labels)


def test_single_blob_needs_allow_single_cluster():
    P = np.random.default_rng(8).normal(size=(60, 2))
    assert hdbscan(dm(P), 50).n_clusters == 0
    one = hdbscan(dm(P), 50, allow_single_cluster=True)
    assert one.n_clusters == 1


def test_files(tmp_path):
    rng = np.random.default_rng(9)
    P = np.vstack([rng.normal(size=(25, 2)), rng.normal(size=(25, 2)) + 8, [[100, 100]]])
    a = hdbscan(dm(P), 10)
    save_assignments(a, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "user_id,cluster,probability_placeholder"
    assert lines[-1].startswith("50,noise,")
    back = load_assignments(tmp_path / "a.csv")
    assert [back[u] for u in a.user_ids] == a.labels.tolist()
    save_condensed_tree(a.condensed_tree, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "parent,child,lambda,size"
    write_summary(a, tmp_path / "s.json")
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["n_clusters"] == 2 and summary["n_noise"] == 1
