"""Per-frame scene graphs: data model, prompt binding, subgraph filtering.

A frame graph holds detected objects (nodes) and directed predicate edges
between them. The user's first-frame box is bound to the node it overlaps
most, a 1-hop subgraph around that node is cut out, and edge incidence is
exposed as predicate-subject / predicate-object one-hot matrices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Structural violation: dangling edge, unknown node, bad box."""


class PromptUnmatchedError(GraphError):
    """No graph node overlaps the prompt box with IoU >= 0.1."""


class CapacityError(GraphError):
    """More nodes than feature slots; truncation is never applied silently."""


@dataclass(frozen=True)
class Node:
    id: int
    class_label: str
    box: tuple  # (x0, y0, x1, y1), exclusive end
    feature: np.ndarray

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise GraphError(f"degenerate box {self.box} on node {self.id}")


@dataclass(frozen=True)
class Edge:
    subject_id: int
    object_id: int
    predicate: str
    feature: np.ndarray

    def __post_init__(self):
        if self.subject_id == self.object_id:
            raise GraphError("self-loop edge")


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple
    edges: tuple
    frame_index: int = 0

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise GraphError("duplicate node ids")
        known = set(ids)
        for e in self.edges:
            if e.subject_id not in known or e.object_id not in known:
                raise GraphError(
                    f"dangling edge {e.subject_id}->{e.object_id}"
                )

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"unknown node id {node_id}")


@dataclass(frozen=True)
class PromptBox:
    box: tuple
    frame_index: int = 0


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def locate_prompt_node(graph, prompt, min_iou=0.1):
    """Bind the prompt box to the max-IoU node; ties go to the smaller id."""
    if not graph.nodes:
        raise GraphError("empty graph")
    best_id, best_iou = None, -1.0
    for n in sorted(graph.nodes, key=lambda n: n.id):
        iou = box_iou(n.box, prompt.box)
        if iou > best_iou:
            best_id, best_iou = n.id, iou
    if best_iou < min_iou:
        raise PromptUnmatchedError(
            f"best IoU {best_iou:.3f} below threshold {min_iou}"
        )
    return best_id


def coarse_subgraph(graph, prompt_id):
    """Prompt node plus 1-hop neighbors, with only prompt-incident edges.

    Output node and edge order is deterministic: nodes sorted by id, edges
    sorted by (subject, object, predicate).
    """
    known = {n.id for n in graph.nodes}
    if prompt_id not in known:
        raise GraphError(f"prompt node {prompt_id} absent")
    incident = [
        e for e in graph.edges
        if e.subject_id == prompt_id or e.object_id == prompt_id
    ]
    keep = {prompt_id}
    for e in incident:
        keep.add(e.subject_id)
        keep.add(e.object_id)
    nodes = tuple(sorted(
        (n for n in graph.nodes if n.id in keep), key=lambda n: n.id
    ))
    edges = tuple(sorted(
        incident, key=lambda e: (e.subject_id, e.object_id, e.predicate)
    ))
    return SceneGraph(nodes, edges, graph.frame_index)


def adjacency_matrices(graph):
    """One-hot (edges x nodes) incidence for subjects and objects."""
    index = {n.id: i for i, n in enumerate(graph.nodes)}
    n_nodes, n_edges = len(graph.nodes), len(graph.edges)
    a_ps = np.zeros((n_edges, n_nodes))
    a_po = np.zeros((n_edges, n_nodes))
    for row, e in enumerate(graph.edges):
        a_ps[row, index[e.subject_id]] = 1.0
        a_po[row, index[e.object_id]] = 1.0
    return a_ps, a_po


def pad_to_slots(features, slots):
    """Zero-pad row features up to a fixed slot count, with a validity mask.

    Consumers must exclude invalid slots from attention (masked to -inf
    logits); overflow is a hard error, never silent truncation.
    """
    features = np.asarray(features, dtype=np.float64)
    n, dim = features.shape
    if n > slots:
        raise CapacityError(f"{n} rows exceed {slots} slots")
    padded = np.zeros((slots, dim))
    padded[:n] = features
    mask = np.zeros(slots)
    mask[:n] = 1.0
    return padded, mask


# ---------------------------------------------------------------------------
# JSON serialization


def graph_to_dict(graph):
    return {
        "frame_index": graph.frame_index,
        "nodes": [
            {
                "id": n.id,
                "class_label": n.class_label,
                "box": list(n.box),
                "feature": np.asarray(n.feature).tolist(),
            }
            for n in graph.nodes
        ],
        "edges": [
            {
                "subject_id": e.subject_id,
                "object_id": e.object_id,
                "predicate": e.predicate,
                "feature": np.asarray(e.feature).tolist(),
            }
            for e in graph.edges
        ],
    }


def graph_from_dict(doc):
    nodes = tuple(
        Node(n["id"], n["class_label"], tuple(n["box"]),
             np.asarray(n["feature"], dtype=np.float64))
        for n in doc["nodes"]
    )
    edges = tuple(
        Edge(e["subject_id"], e["object_id"], e["predicate"],
             np.asarray(e["feature"], dtype=np.float64))
        for e in doc["edges"]
    )
    return SceneGraph(nodes, edges, doc["frame_index"])


def dumps_graph(graph):
    return json.dumps(graph_to_dict(graph))


def loads_graph(text):
    return graph_from_dict(json.loads(text))
