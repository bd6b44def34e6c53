import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import best_modularity, naive_modularity
from stance.errors import DataError
from stance.graph import (
    Partition,
    WeightedGraph,
    co_retweet_graph,
    louvain,
    modularity,
    write_edge_csv,
    write_graphml,
    write_partition_csv,
)
from stance.incidence import build_incidence
from stance.ingest import RetweetEvent


def ev(u, v):
    return RetweetEvent(u, v, 0, "s")


def graph_from_dense(A):
    n = A.shape[0]
    iu = np.triu_indices(n, 1)
    w = A[iu]
    keep = w > 0
    return WeightedGraph(tuple(str(i) for i in range(n)), np.column_stack([iu[0][keep], iu[1][keep], w[keep]]))


def random_graph(rng, n, p=None, weights=(1, 6)):
    p = rng.uniform(0.2, 0.9) if p is None else p
    A = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < p:
            A[i, j] = A[j, i] = rng.integers(*weights)
    return A


def cliques(sizes, bridge=None):
    n = sum(sizes)
    A = np.zeros((n, n))
    start = 0
    for s in sizes:
        A[start : start + s, start : start + s] = 1
        start += s
    np.fill_diagonal(A, 0)
    if bridge:
        i, j = bridge
        A[i, j] = A[j, i] = 1
    return A


def test_shared_influencer_count():
    m = build_incidence([ev("u", "i1"), ev("u", "i2"), ev("v", "i1"), ev("v", "i2"), ev("w", "i3")])
    g = co_retweet_graph(m, ["u", "v", "w"])
    assert g.edge_list() == [("u", "v", 2.0)]


def test_disjoint_sets_no_edges():
    m = build_incidence([ev(f"u{i}", f"i{i}") for i in range(5)])
    assert co_retweet_graph(m, m.rows).edges.shape == (0, 3)


def test_weights_match_set_intersections():
    rng = np.random.default_rng(0)
    events = [ev(f"u{i:03d}", f"i{j}") for i in range(200) for j in range(30) if rng.random() < 0.08]
    m = build_incidence(events)
    sets = {u: set() for u in m.rows}
    for e in events:
        sets[e.retweeter_id].add(e.influencer_id)
    g = co_retweet_graph(m, m.rows)
    got = {(a, b): w for a, b, w in g.edge_list()}
    expect = {}
    for a, b in itertools.combinations(m.rows, 2):
        k = len(sets[a] & sets[b])
        if k:
            expect[(a, b)] = float(k)
    assert got == expect
    B = m.binary.toarray()
    G = B @ B.T
    A = g.adjacency().toarray()
    assert np.array_equal(A, A.T)
    off = ~np.eye(len(m.rows), dtype=bool)
    assert np.array_equal(A[off], G[off])


def test_counts_weighting_uses_smaller_multiplicity():
    m = build_incidence([ev("u", "i")] * 3 + [ev("v", "i")] * 2 + [ev("v", "j"), ev("u", "j")])
    g = co_retweet_graph(m, ["u", "v"], weighting="counts")
    assert g.edge_list() == [("u", "v", 3.0)]


def test_cluster_level():
    events = [ev("a1", "x"), ev("a2", "x"), ev("b1", "x"), ev("b1", "y"), ev("b2", "y"), ev("n", "x")]
    m = build_incidence(events)
    assign = {"a1": 0, "a2": 0, "b1": 1, "b2": 1, "n": -1}
    g = co_retweet_graph(m, m.rows, "cluster", assign)
    assert g.nodes == ("0", "1")
    assert g.edge_list() == [("0", "1", 2.0)]  # a1-b1 and a2-b1 share x
    assert g.node_attrs["0"]["within_weight"] == 1.0 and g.node_attrs["1"]["within_weight"] == 1.0
    assert g.node_attrs["1"]["size"] == 2


def test_graph_errors():
    m = build_incidence([ev("a", "x")])
    with pytest.raises(DataError):
        co_retweet_graph(m, [])
    with pytest.raises(DataError):
        co_retweet_graph(m, ["zz"])
    with pytest.raises(DataError):
        WeightedGraph(("a", "b"), np.array([[1, 0, 1.0]]))
    with pytest.raises(DataError):
        WeightedGraph(("a", "b"), np.array([[0, 1, 0.0]]))


def test_two_cliques_bridge():
    A = cliques([5, 5], bridge=(4, 5))
    p = louvain(graph_from_dense(A), seed=0)
    assert p.membership.tolist() == [0] * 5 + [1] * 5


def test_two_disconnected_cliques_q_half():
    A = cliques([4, 4])
    g = graph_from_dense(A)
    assert modularity(g, [0] * 4 + [1] * 4) == pytest.approx(0.5, abs=1e-12)
    assert louvain(g).modularity == pytest.approx(0.5, abs=1e-12)


def test_single_node_and_empty():
    p = louvain(WeightedGraph(("a",), np.zeros((0, 3))))
    assert p.membership.tolist() == [0] and p.modularity == 0
    p = louvain(WeightedGraph(("a", "b", "c"), np.zeros((0, 3))))
    assert p.membership.tolist() == [0, 1, 2] and p.modularity == 0


def test_complete_graph_close_to_optimum():
    for n in range(2, 9):
        A = np.ones((n, n)) - np.eye(n)
        opt, _ = best_modularity(A)
        assert louvain(graph_from_dense(A)).modularity >= opt - 0.02


def test_louvain_vs_brute_force_small():
    rng = np.random.default_rng(1)
    for _ in range(40):
        A = random_graph(rng, int(rng.integers(3, 9)))
        opt, _ = best_modularity(A)
        assert louvain(graph_from_dense(A), seed=0).modularity >= opt - 0.02


def test_modularity_trivial_partition_zero():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = graph_from_dense(random_graph(rng, 12))
        assert abs(modularity(g, [0] * 12)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 2.0))
def test_modularity_naive_agreement(seed, gamma):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    A = random_graph(rng, n, weights=(1, 10))
    memb = rng.integers(0, 4, size=n)
    g = graph_from_dense(A)
    assert abs(modularity(g, memb, gamma) - naive_modularity(A, memb, gamma)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.001, 0.37, 3.0, 1e4]))
def test_modularity_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 25))
    A = random_graph(rng, n)
    memb = rng.integers(0, 3, size=n)
    assert abs(modularity(graph_from_dense(A), memb) - modularity(graph_from_dense(A * c), memb)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_louvain_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    g = graph_from_dense(random_graph(rng, n, p=rng.uniform(0.05, 0.5)))
    p = louvain(g, seed=seed)
    ids = sorted(set(p.membership.tolist()))
    assert ids == list(range(len(ids)))
    assert -0.5 <= p.modularity <= 1
    assert p.modularity >= modularity(g, np.arange(n)) - 1e-12
    assert p.modularity == pytest.approx(modularity(g, p), abs=1e-12)


def test_louvain_deterministic():
    g = graph_from_dense(random_graph(np.random.default_rng(3), 30, p=0.2))
    a, b = louvain(g, seed=5), louvain(g, seed=5)
    assert np.array_equal(a.membership, b.membership)


def test_uncovered_node_rejected():
    g = graph_from_dense(cliques([3]))
    with pytest.raises(DataError):
        modularity(g, {"0": 0, "1": 0})


def test_graphml_parsed_by_networkx(tmp_path):
    nx = pytest.importorskip("networkx")
    events = [ev(f"a{i}", "x") for i in range(3)] + [ev(f"b{i}", "y") for i in range(3)] + [ev("a0", "y")]
    m = build_incidence(events)
    assign = {u: (0 if u.startswith("a") else 1) for u in m.rows}
    g = co_retweet_graph(m, m.rows, "user", assign)
    p = louvain(g)
    write_graphml(g, tmp_path / "g.graphml", {"community": p.as_dict()})
    h = nx.read_graphml(tmp_path / "g.graphml")
    assert set(h.nodes) == set(m.rows)
    assert h.nodes["a1"]["cluster"] == "0" and h.nodes["b2"]["cluster"] == "1"
    assert h.edges["a0", "b1"]["weight"] == 1.0
    assert h.number_of_edges() == g.edges.shape[0]
    write_edge_csv(g, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "source,target,weight"
    write_partition_csv(p, tmp_path / "p.csv")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == len(m.rows) + 1


def test_networkx_modularity_agrees():
    nx = pytest.importorskip("networkx")
    rng = np.random.default_rng(4)
    A = random_graph(rng, 15)
    g = graph_from_dense(A)
    p = louvain(g)
    h = nx.Graph()
    h.add_nodes_from(g.nodes)
    h.add_weighted_edges_from(g.edge_list())
    comms = [{v for v, c in p.as_dict().items() if c == k} for k in range(p.n_communities)]
    assert nx.community.modularity(h, comms) == pytest.approx(p.modularity, abs=1e-12)
