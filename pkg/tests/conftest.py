"""Shared test helpers: seeded rngs and a loop-based attention oracle."""
import numpy as np


def seeded_rng(*entropy):
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def oracle_mhca(q, k, v, p, key_mask=None, causal=False):
    """Independent re-implementation of multi-head attention with loops."""
    d = p.dim
    heads = p.heads
    hd = d // heads
    qp = q @ p.w_q.data + p.b_q.data
    kp = k @ p.w_k.data + p.b_k.data
    vp = v @ p.w_v.data + p.b_v.data
    outs = np.zeros((q.shape[0], d))
    for h in range(heads):
        qh = qp[:, h * hd:(h + 1) * hd]
        kh = kp[:, h * hd:(h + 1) * hd]
        vh = vp[:, h * hd:(h + 1) * hd]
        logits = qh @ kh.T / np.sqrt(hd)
        if causal:
            for i in range(logits.shape[0]):
                logits[i, i + 1:] = -1e30
        if key_mask is not None:
            logits[:, ~np.asarray(key_mask, dtype=bool)] = -1e30
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        att = e / e.sum(axis=1, keepdims=True)
        outs[:, h * hd:(h + 1) * hd] = att @ vh
    return outs @ p.w_o.data + p.b_o.data


def oracle_mlp(x, p):
    h = x @ p.w1.data + p.b1.data
    if p.activation == "relu":
        h = np.maximum(h, 0)
    elif p.activation == "sigmoid":
        h = 1 / (1 + np.exp(-h))
    return h @ p.w2.data + p.b2.data
