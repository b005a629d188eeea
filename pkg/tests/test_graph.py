import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_attention.graph import (
    Dataset,
    Graph,
    GraphError,
    GraphSizeError,
    brute_force_isomorphic,
    community_sizes,
    degree_vector,
    disjoint_union,
    enumerate_small_graphs,
    gen_complete,
    gen_cycle,
    gen_path,
    gen_random_connected,
    gen_ring_pair,
    gen_sbm,
    gen_sbm_cluster,
    is_connected,
    sbm_cluster_dataset,
)


def test_degree_vector_small_graphs():
    assert degree_vector(gen_path(2)).tolist() == [1, 1]
    assert degree_vector(gen_complete(3)).tolist() == [2, 2, 2]
    assert degree_vector(Graph(3)).tolist() == [0, 0, 0]


def test_edges_are_normalized_and_validated():
    g = Graph(4, [(2, 1), (0, 3), (1, 0)])
    assert g.edges == ((0, 1), (0, 3), (1, 2))
    with pytest.raises(GraphError, match="self-loop"):
        Graph(3, [(1, 1)])
    with pytest.raises(GraphError, match="duplicate"):
        Graph(3, [(0, 1), (1, 0)])
    with pytest.raises(GraphError, match="outside"):
        Graph(3, [(0, 3)])
    with pytest.raises(GraphError):
        Graph(0)


def test_edge_features_follow_sorted_edge_order():
    g = Graph(3, [(1, 2), (0, 1)], edge_features=[[12.0], [1.0]])
    assert g.edges == ((0, 1), (1, 2))
    assert g.edge_features[:, 0].tolist() == [1.0, 12.0]


def test_feature_widths_are_checked():
    with pytest.raises(GraphError):
        Graph(3, [(0, 1)], node_features=np.ones((2, 2)))
    with pytest.raises(GraphError):
        Graph(3, [(0, 1)], edge_features=np.ones((2, 1)))
    with pytest.raises(GraphError):
        Graph(3, node_labels=[0, 1])


def test_default_features_are_constant_ones():
    g = gen_cycle(4)
    assert g.node_feature_matrix().shape == (4, 1)
    assert np.all(g.edge_feature_matrix() == 1.0)


def test_graph_is_immutable():
    g = Graph(2, [(0, 1)], node_features=[[1.0], [2.0]])
    with pytest.raises(Exception):
        g.num_nodes = 3
    with pytest.raises(ValueError):
        g.node_features[0, 0] = 5.0


def test_generators_small_cases():
    assert gen_cycle(4).edges == ((0, 1), (0, 3), (1, 2), (2, 3))
    assert gen_complete(3).num_edges == 3
    rp = gen_ring_pair(3, 3)
    assert (rp.num_nodes, rp.num_edges) == (6, 7)
    assert is_connected(rp)
    with pytest.raises(GraphError):
        gen_cycle(2)
    with pytest.raises(GraphError):
        gen_complete(0)


def test_sbm_degenerate_probabilities_give_two_triangles():
    g = gen_sbm(6, 2, 1.0, 0.0, seed=123)
    assert g.node_labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert g.edges == ((0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5))


def test_sbm_intra_fraction_exceeds_inter_fraction():
    g = gen_sbm(40, 4, 0.9, 0.05, seed=7)
    lab = g.node_labels
    intra = sum(lab[i] == lab[j] for i, j in g.edges)
    n_intra_pairs = 4 * (10 * 9 // 2)
    n_inter_pairs = 40 * 39 // 2 - n_intra_pairs
    assert intra / n_intra_pairs > (g.num_edges - intra) / n_inter_pairs


def test_sbm_is_deterministic_and_rejects_bad_args():
    assert gen_sbm(20, 3, 0.5, 0.1, seed=4) == gen_sbm(20, 3, 0.5, 0.1, seed=4)
    assert gen_sbm(20, 3, 0.5, 0.1, seed=4) != gen_sbm(20, 3, 0.5, 0.1, seed=5)
    with pytest.raises(GraphError):
        gen_sbm(3, 4, 0.5, 0.1, seed=0)
    with pytest.raises(GraphError):
        gen_sbm(10, 2, 0.1, 0.5, seed=0)


def test_community_sizes_differ_by_at_most_one():
    for n in range(1, 30):
        for c in range(1, n + 1):
            sizes = community_sizes(n, c)
            assert sum(sizes) == n and max(sizes) - min(sizes) <= 1


def test_sbm_with_equal_probabilities_matches_erdos_renyi_density():
    n, p, seeds = 20, 0.3, 100
    pairs = n * (n - 1) // 2
    edges = sum(gen_sbm(n, 4, p, p, seed=s).num_edges for s in range(seeds))
    total = pairs * seeds
    sigma = np.sqrt(total * p * (1 - p))
    assert abs(edges - total * p) < 3 * sigma


def test_sbm_cluster_features_reveal_one_seed_per_community():
    g = gen_sbm_cluster(40, 4, 0.5, 0.05, seed=[3, 1])
    x = g.node_features
    assert x.shape == (40, 5)
    assert np.all(x.sum(axis=1) == 1.0)
    seeds = np.flatnonzero(x[:, 0] == 0)
    assert len(seeds) == 4
    for s in seeds:
        assert x[s].argmax() == g.node_labels[s] + 1


def test_sbm_cluster_dataset_splits():
    ds = sbm_cluster_dataset(5, 2, 3, num_nodes=12, num_communities=3, seed=1)
    assert len(ds) == 10 and ds.task == "node-classification"
    assert ds.split == {"train": [0, 1, 2, 3, 4], "val": [5, 6], "test": [7, 8, 9]}
    assert ds == sbm_cluster_dataset(5, 2, 3, num_nodes=12, num_communities=3, seed=1)


def test_random_connected_is_connected_and_seeded():
    for s in range(20):
        g = gen_random_connected(2 + s % 9, 0.2, seed=s)
        assert is_connected(g)
    assert gen_random_connected(9, 0.3, seed=5) == gen_random_connected(9, 0.3, seed=5)


def test_dataset_validation():
    g = gen_path(3)
    with pytest.raises(GraphError, match="more than one split"):
        Dataset([g, g], None, {"train": [0], "val": [0]})
    with pytest.raises(GraphError, match="out of range"):
        Dataset([g], None, {"train": [1]})
    with pytest.raises(GraphError, match="node_labels"):
        Dataset([g], "node-classification")
    with pytest.raises(GraphError, match="graph_label"):
        Dataset([g], "graph-regression")
    with pytest.raises(GraphError, match="unknown task"):
        Dataset([g], "ranking")


def test_enumerate_small_graphs_counts_connected_classes():
    # connected graphs up to isomorphism on 1..6 nodes: 1, 1, 2, 6, 21, 112
    graphs = enumerate_small_graphs(6)
    counts = [sum(g.num_nodes == n for g in graphs) for n in range(1, 7)]
    assert counts == [1, 1, 2, 6, 21, 112]
    with pytest.raises(GraphSizeError):
        enumerate_small_graphs(8)


def test_isomorphism_examples():
    c4 = gen_cycle(4)
    assert brute_force_isomorphic(c4, c4.relabel([2, 0, 3, 1]))
    assert not brute_force_isomorphic(gen_cycle(6), disjoint_union(gen_cycle(3), gen_cycle(3)))
    k4_minus = Graph(4, [(0, 1), (0, 2), (0, 3), (1, 2), (2, 3)])
    assert not brute_force_isomorphic(k4_minus, gen_path(4))
    with pytest.raises(GraphSizeError):
        brute_force_isomorphic(gen_cycle(11), gen_cycle(11))


def test_relabel_moves_features_and_labels():
    g = Graph(3, [(0, 1)], node_features=[[10.0], [11.0], [12.0]], node_labels=[0, 1, 2])
    h = g.relabel([2, 0, 1])
    assert h.edges == ((0, 2),)
    assert h.node_features[:, 0].tolist() == [11.0, 12.0, 10.0]
    assert h.node_labels.tolist() == [1, 2, 0]


@st.composite
def small_graphs(draw, max_nodes=6):
    n = draw(st.integers(1, max_nodes))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return Graph(n, [p for p, keep in zip(pairs, mask) if keep])


@settings(max_examples=60, deadline=None)
@given(small_graphs(), st.randoms(use_true_random=False))
def test_isomorphism_is_reflexive_and_relabel_invariant(g, rnd):
    perm = list(range(g.num_nodes))
    rnd.shuffle(perm)
    h = g.relabel(perm)
    assert brute_force_isomorphic(g, g)
    assert brute_force_isomorphic(g, h) and brute_force_isomorphic(h, g)


@settings(max_examples=40, deadline=None)
@given(small_graphs(5), small_graphs(5), small_graphs(5))
def test_isomorphism_is_symmetric_and_transitive(a, b, c):
    ab, ba = brute_force_isomorphic(a, b), brute_force_isomorphic(b, a)
    assert ab == ba
    if ab and brute_force_isomorphic(b, c):
        assert brute_force_isomorphic(a, c)
