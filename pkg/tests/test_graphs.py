"""Scene graphs: IoU oracle, prompt binding, subgraph filtering, padding."""
import numpy as np
import pytest

from segcap.graphs import (CapacityError, Edge, GraphError, Node, PromptBox,
                           PromptUnmatchedError, SceneGraph,
                           adjacency_matrices, box_iou, coarse_subgraph,
                           graph_from_dict, graph_to_dict, loads_graph,
                           dumps_graph, locate_prompt_node, pad_to_slots)


def rng(seed=0):
    return np.random.default_rng(np.random.SeedSequence([seed, 17]))


def random_box(r, size=16):
    x0, y0 = r.integers(0, size - 2, size=2)
    x1 = r.integers(x0 + 1, size)
    y1 = r.integers(y0 + 1, size)
    return (int(x0), int(y0), int(x1), int(y1))


def pixel_iou(a, b, size=16):
    """Rasterized IoU oracle: paint both boxes and count pixels."""
    ga = np.zeros((size, size), dtype=bool)
    gb = np.zeros((size, size), dtype=bool)
    ga[a[1]:a[3], a[0]:a[2]] = True
    gb[b[1]:b[3], b[0]:b[2]] = True
    union = (ga | gb).sum()
    return (ga & gb).sum() / union if union else 0.0


def random_graph(r, n_nodes=None, dim=4):
    if n_nodes is None:
        n_nodes = int(r.integers(1, 7))
    nodes = tuple(
        Node(i, "obj", random_box(r), r.normal(size=dim))
        for i in range(n_nodes)
    )
    edges = []
    for s in range(n_nodes):
        for o in range(n_nodes):
            if s != o and r.random() < 0.3:
                edges.append(Edge(s, o, "rel", r.normal(size=dim)))
    return SceneGraph(nodes, tuple(edges))


def test_box_iou_matches_pixel_oracle():
    r = rng(1)
    for _ in range(300):
        a, b = random_box(r), random_box(r)
        assert box_iou(a, b) == pytest.approx(pixel_iou(a, b), abs=1e-12)


def test_box_iou_identity_and_disjoint():
    assert box_iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert box_iou((0, 0, 2, 2), (5, 5, 8, 8)) == 0.0


def test_locate_prompt_exact_overlap():
    g = SceneGraph(
        (Node(0, "a", (0, 0, 4, 4), np.zeros(2)),
         Node(1, "b", (8, 8, 12, 12), np.zeros(2))), ())
    assert locate_prompt_node(g, PromptBox((7, 7, 12, 12))) == 1


def test_locate_prompt_tie_prefers_smaller_id():
    g = SceneGraph(
        (Node(3, "a", (0, 0, 4, 4), np.zeros(2)),
         Node(5, "b", (0, 0, 4, 4), np.zeros(2))), ())
    assert locate_prompt_node(g, PromptBox((0, 0, 4, 4))) == 3


def test_locate_prompt_below_threshold():
    g = SceneGraph((Node(0, "a", (0, 0, 2, 2), np.zeros(2)),), ())
    with pytest.raises(PromptUnmatchedError):
        locate_prompt_node(g, PromptBox((10, 10, 14, 14)))


def test_coarse_subgraph_keeps_one_hop_only():
    boxes = [(i * 3, 0, i * 3 + 2, 2) for i in range(4)]
    nodes = tuple(Node(i, "o", boxes[i], np.zeros(2)) for i in range(4))
    edges = (
        Edge(0, 1, "r", np.zeros(2)),   # incident to prompt 0
        Edge(2, 0, "r", np.zeros(2)),   # incident to prompt 0
        Edge(2, 3, "r", np.zeros(2)),   # not incident
    )
    sub = coarse_subgraph(SceneGraph(nodes, edges), 0)
    assert [n.id for n in sub.nodes] == [0, 1, 2]
    assert all(0 in (e.subject_id, e.object_id) for e in sub.edges)
    assert len(sub.edges) == 2


def test_coarse_subgraph_idempotent_on_500_graphs():
    r = rng(2)
    for _ in range(500):
        g = random_graph(r)
        prompt = int(r.integers(0, len(g.nodes)))
        once = coarse_subgraph(g, prompt)
        twice = coarse_subgraph(once, prompt)
        assert [n.id for n in once.nodes] == [n.id for n in twice.nodes]
        assert [(e.subject_id, e.object_id) for e in once.edges] == \
               [(e.subject_id, e.object_id) for e in twice.edges]


def test_adjacency_one_hot_rows():
    r = rng(3)
    for _ in range(50):
        g = random_graph(r)
        a_ps, a_po = adjacency_matrices(g)
        assert a_ps.shape == a_po.shape == (len(g.edges), len(g.nodes))
        if len(g.edges):
            assert np.array_equal(a_ps.sum(axis=1), np.ones(len(g.edges)))
            assert np.array_equal(a_po.sum(axis=1), np.ones(len(g.edges)))
            index = {n.id: i for i, n in enumerate(g.nodes)}
            for row, e in enumerate(g.edges):
                assert a_ps[row, index[e.subject_id]] == 1.0
                assert a_po[row, index[e.object_id]] == 1.0


def test_pad_to_slots_mask_and_overflow():
    feats = np.ones((3, 4))
    padded, mask = pad_to_slots(feats, 5)
    assert padded.shape == (5, 4)
    assert np.array_equal(mask, [1, 1, 1, 0, 0])
    assert np.array_equal(padded[3:], np.zeros((2, 4)))
    with pytest.raises(CapacityError):
        pad_to_slots(np.ones((6, 4)), 5)


def test_structural_validation():
    with pytest.raises(GraphError):
        Node(0, "a", (4, 0, 2, 2), np.zeros(2))  # inverted box
    with pytest.raises(GraphError):
        Edge(1, 1, "r", np.zeros(2))  # self loop
    n = Node(0, "a", (0, 0, 2, 2), np.zeros(2))
    with pytest.raises(GraphError):
        SceneGraph((n,), (Edge(0, 9, "r", np.zeros(2)),))  # dangling
    with pytest.raises(GraphError):
        SceneGraph((n, Node(0, "b", (0, 0, 1, 1), np.zeros(2))), ())


def test_json_roundtrip():
    r = rng(4)
    for _ in range(20):
        g = random_graph(r)
        back = loads_graph(dumps_graph(g))
        assert graph_to_dict(back) == graph_to_dict(g)
        for a, b in zip(g.nodes, back.nodes):
            assert np.allclose(a.feature, b.feature)
