"""Iterative graph-guided query former with a bounded context memory.

Three cross-attention stages per pass: graph slots query the frame's visual
tokens, a learnable text query reads the context memory, and the resulting
visual feature retrieves from the context-language feature to produce the
caption-conditioning embedding. Passes after the first re-query the visual
stage with the previous pass's output.

The context memory is a bounded token store: each frame appends one
mean-pooled summary token and, at capacity, the most similar adjacent pair
is averaged until the bound holds again.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor


@dataclass
class QueryFormerParams:
    visual_graph: AttentionParams
    textual_query: AttentionParams
    visual_language: AttentionParams
    query: Tensor       # slots x dim, learnable
    iterations: int = 2

    @classmethod
    def init(cls, rng, dim, heads, slots, iterations=2):
        if iterations < 1:
            raise ValueError("need at least one pass")
        return cls(
            AttentionParams.init(rng, dim, heads),
            AttentionParams.init(rng, dim, heads),
            AttentionParams.init(rng, dim, heads),
            ad.uniform_init(rng, (slots, dim), dim),
            iterations,
        )

    def named(self, prefix="query_former"):
        out = self.visual_graph.named(f"{prefix}.visual_graph")
        out.update(self.textual_query.named(f"{prefix}.textual_query"))
        out.update(self.visual_language.named(f"{prefix}.visual_language"))
        out[f"{prefix}.query"] = self.query
        return out


@dataclass
class ContextMemory:
    """Bounded store of per-frame summary tokens, oldest first."""

    capacity: int
    tokens: list = field(default_factory=list)

    @property
    def occupancy(self):
        return len(self.tokens)

    def as_matrix(self):
        """capacity x dim view with unoccupied rows zero (numpy)."""
        if not self.tokens:
            raise ValueError("empty memory has no defined width")
        dim = self.tokens[0].shape[0]
        out = np.zeros((self.capacity, dim))
        for i, tok in enumerate(self.tokens):
            out[i] = tok.data
        return out


def visual_graph_attend(values, valid_mask, f_v, params):
    """Graph slots query the visual tokens; invalid slots output zero rows.

    The attention output is added residually to the querying slots so each
    output row keeps the identity of its graph node.
    """
    f_v = ad._lift(f_v)
    if f_v.shape[0] == 0:
        raise ad.ShapeError("empty visual feature")
    values = ad._lift(values)
    out = ad.add(values, ad.mhca(values, f_v, f_v, params))
    mask = np.asarray(valid_mask, dtype=np.float64).reshape(-1, 1)
    return ad.mul(out, Tensor(mask))


def textual_query_attend(f_q, memory, params):
    """Read the context memory; an empty memory passes the query through."""
    f_q = ad._lift(f_q)
    if memory.occupancy == 0:
        return f_q
    keys = ad.concat([ad.reshape(t, (1, t.shape[0])) for t in memory.tokens])
    return ad.mhca(f_q, keys, keys, params)


def visual_language_attend(f_vg, f_cq, params):
    """Visual feature retrieves from the context-language feature, residually."""
    f_vg = ad._lift(f_vg)
    f_cq = ad._lift(f_cq)
    return ad.add(f_vg, ad.mhca(f_vg, f_cq, f_cq, params))


def former_forward(graph_feature, f_v, memory, params):
    """Run all passes for one frame; returns (f_vl, final f_vg)."""
    seed = graph_feature.values
    mask = graph_feature.valid_mask
    f_vl = f_vg = None
    for r in range(params.iterations):
        query = seed if r == 0 else f_vl
        f_vg = visual_graph_attend(query, mask, f_v, params.visual_graph)
        f_cq = textual_query_attend(params.query, memory, params.textual_query)
        f_vl = visual_language_attend(f_vg, f_cq, params.visual_language)
    return f_vl, f_vg


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def memory_update(memory, f_vl, valid_mask):
    """Append a mean-pooled summary of the valid rows, then enforce the bound.

    Returns a new ContextMemory; occupancy never exceeds capacity.
    """
    mask = np.asarray(valid_mask, dtype=np.float64)
    n_valid = mask.sum()
    if n_valid < 1:
        raise ValueError("cannot summarize a frame with no valid slots")
    col = ad.reshape(Tensor(mask / n_valid), (mask.size, 1))
    summary = ad.reshape(
        ad.tsum(ad.mul(ad._lift(f_vl), col), axis=0), (f_vl.shape[1],)
    )
    tokens = list(memory.tokens) + [summary]
    while len(tokens) > memory.capacity:
        sims = [
            _cosine(tokens[i].data, tokens[i + 1].data)
            for i in range(len(tokens) - 1)
        ]
        i = int(np.argmax(sims))
        merged = ad.mul(ad.add(tokens[i], tokens[i + 1]), 0.5)
        tokens = tokens[:i] + [merged] + tokens[i + 2:]
    return ContextMemory(memory.capacity, tokens)
