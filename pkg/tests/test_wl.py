import numpy as np
import pytest

from spectral_attention.graph import (
    Graph,
    GraphSizeError,
    disjoint_union,
    enumerate_small_graphs,
    gen_cycle,
    gen_path,
    gen_ring_pair,
)
from spectral_attention.wl import (
    discrimination_report,
    spectra_distinguish,
    wl1_distinguishes,
    wl1_refine,
)

C6 = gen_cycle(6)
TWO_C3 = disjoint_union(gen_cycle(3), gen_cycle(3))


def test_regular_graphs_stay_one_color():
    col = wl1_refine(C6)
    assert set(col.colors) == {0}
    assert col.rounds_to_stabilize == 0


def test_path_refines_by_distance_to_the_ends():
    col = wl1_refine(gen_path(5))
    c = col.colors
    assert c[0] == c[4] and c[1] == c[3]
    assert len({c[0], c[1], c[2]}) == 3
    assert col.rounds_to_stabilize == 2
    assert sum(n for _, n in col.histogram) == 5


def test_max_rounds_caps_refinement():
    assert wl1_refine(gen_path(7), max_rounds=1).rounds_to_stabilize == 1


def test_node_features_seed_the_colors():
    g = Graph(3, [(0, 1), (1, 2)], node_features=[[1.0], [1.0], [2.0]])
    assert len(set(wl1_refine(g).colors)) == 3


def test_wl_is_blind_to_c6_versus_two_triangles_but_spectra_are_not():
    assert not wl1_distinguishes(C6, TWO_C3)
    assert spectra_distinguish(C6, TWO_C3)


def test_wl_separates_non_regular_pair():
    star = Graph(4, [(0, 1), (0, 2), (0, 3)])
    assert wl1_distinguishes(star, gen_path(4))
    assert wl1_distinguishes(gen_path(3), gen_path(4))


def test_report_on_cycle_pair():
    rep = discrimination_report([C6, TWO_C3], names=["C6", "2xC3"])
    assert rep.wl_blind_spectra_distinct == 1
    assert rep.unsound == 0
    assert rep.to_csv().splitlines() == [
        "g1,g2,isomorphic,wl1_distinct,spectra_distinct",
        "C6,2xC3,false,false,true",
    ]


def test_report_flags_isomorphic_copies_as_sound():
    g = gen_ring_pair(3, 3)
    h = g.relabel([5, 4, 3, 2, 1, 0])
    rep = discrimination_report([g, h])
    assert rep.rows[0].isomorphic and rep.unsound == 0


def test_report_rejects_large_graphs():
    with pytest.raises(GraphSizeError):
        discrimination_report([gen_cycle(11), gen_cycle(11)])


def test_small_corpus_contains_cospectral_non_isomorphic_pair():
    graphs = enumerate_small_graphs(6)
    six = [g for g in graphs if g.num_nodes == 6]
    rep = discrimination_report(six)
    assert rep.unsound == 0
    assert rep.isospectral_non_isomorphic >= 1
    for row in rep.rows:
        if not row.spectra_distinct:
            a, b = six[int(row.g1)], six[int(row.g2)]
            assert np.allclose(np.sort(np.linalg.eigvalsh(np.diag(a.adjacency().sum(1)) - a.adjacency())),
                               np.sort(np.linalg.eigvalsh(np.diag(b.adjacency().sum(1)) - b.adjacency())),
                               atol=1e-6)
