"""Finite-difference verification registry.

One named check per differentiable op and per loss, each comparing the
reverse-mode gradient against central differences at a fixed random point,
plus a whole-model check that probes sampled coordinates of every parameter
through the total objective on a tiny synthetic video.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, MlpParams, Tensor, grad_check
from .data import GenConfig, gen_video
from .losses import (ContrastiveBatch, caption_ce, fa_loss, init_log_tau,
                     mask_loss, mc_loss, total_loss)
from .model import Model, ModelConfig
from .query_former import ContextMemory, memory_update, textual_query_attend
from .temporal_graph import (AdaptorParams, FusionParams, TemporalParams,
                             association_scores, fuse, reinforce,
                             temporal_update)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def _rng(tag):
    return np.random.default_rng(np.random.SeedSequence([hash(tag) % (2**31), 11]))


def op_checks():
    """(name, scalar_fn, point) triples covering every registered op."""
    checks = []
    r = np.random.default_rng(12345)

    def add_check(name, fn, point):
        checks.append((name, fn, np.asarray(point, dtype=np.float64)))

    a = r.normal(size=(3, 4))
    b = r.normal(size=(3, 4))
    m = r.normal(size=(4, 3))

    add_check("add", lambda x: ad.tsum(ad.mul(ad.add(x, Tensor(b)), Tensor(b))), a)
    add_check("sub", lambda x: ad.tsum(ad.mul(ad.sub(x, Tensor(b)), Tensor(b))), a)
    add_check("mul", lambda x: ad.tsum(ad.mul(ad.mul(x, Tensor(b)), Tensor(b))), a)
    add_check("div", lambda x: ad.tsum(ad.div(x, Tensor(np.abs(b) + 1.0))), a)
    add_check("matmul", lambda x: ad.tsum(ad.mul(ad.matmul(x, Tensor(m)),
                                                 Tensor(a @ m))), a)
    add_check("transpose", lambda x: ad.tsum(ad.mul(ad.transpose(x), Tensor(a.T))), a)
    add_check("reshape", lambda x: ad.tsum(ad.mul(ad.reshape(x, (4, 3)),
                                                  Tensor(m))), a)
    add_check("exp", lambda x: ad.tsum(ad.exp(ad.mul(x, 0.5))), a)
    add_check("log", lambda x: ad.tsum(ad.log(ad.add(ad.mul(x, x), 1.0))), a)
    add_check("sqrt", lambda x: ad.tsum(ad.sqrt(ad.add(ad.mul(x, x), 1.0))), a)
    add_check("sigmoid", lambda x: ad.tsum(ad.sigmoid(x)), a)
    add_check("relu", lambda x: ad.tsum(ad.relu(x)), a + 0.05)
    add_check("clamp", lambda x: ad.tsum(ad.clamp(x, -0.9, 0.9)),
              a * 0.5 + 0.01)
    add_check("tsum", lambda x: ad.tsum(ad.mul(ad.tsum(x, axis=1), 2.0)), a)
    add_check("tmean", lambda x: ad.tsum(ad.mul(ad.tmean(x, axis=0), 3.0)), a)
    add_check("concat", lambda x: ad.tsum(ad.mul(
        ad.concat([x, Tensor(b)]), ad.concat([Tensor(b), Tensor(a)]))), a)
    add_check("narrow", lambda x: ad.tsum(ad.narrow(x, 1, 1, 2)), a)
    add_check("take_rows", lambda x: ad.tsum(ad.take_rows(x, [0, 2, 2])), a)
    add_check("softmax_rows", lambda x: ad.tsum(ad.mul(
        ad.softmax_rows(x), Tensor(b))), a)

    dim, heads = 6, 2
    pr = np.random.default_rng(99)
    attn = AttentionParams.init(pr, dim, heads)
    x6 = pr.normal(size=(3, dim)) * 0.5
    k6 = pr.normal(size=(4, dim)) * 0.5
    add_check("mhsa", lambda x: ad.tsum(ad.mul(ad.mhsa(x, attn), Tensor(x6))), x6)
    add_check("mhca", lambda x: ad.tsum(ad.mhca(x, Tensor(k6), Tensor(k6), attn)), x6)
    mp = MlpParams.init(pr, dim, 5, 4, activation="sigmoid")
    add_check("mlp", lambda x: ad.tsum(ad.mlp(x, mp)), x6)
    return checks


def module_checks():
    """Checks for the graph-encoder and query-former stage functions."""
    checks = []
    dim, heads = 8, 2
    pr = np.random.default_rng(7)
    adaptor = AdaptorParams.init(pr, dim, heads)
    temporal = TemporalParams.init(pr, dim, heads)
    fusion = FusionParams.init(pr, dim, activation="sigmoid")
    attn = AttentionParams.init(pr, dim, heads)
    f_o = pr.normal(size=(3, dim)) * 0.5
    f_e = pr.normal(size=(2, dim)) * 0.5
    a_ps = np.array([[1, 0, 0], [0, 1, 0]], dtype=float)
    a_po = np.array([[0, 1, 0], [0, 0, 1]], dtype=float)

    checks.append((
        "association_scores",
        lambda x: ad.tsum(association_scores(x, Tensor(f_e), adaptor)),
        f_o,
    ))
    alpha = np.array([0.2, 0.5, 0.8])
    checks.append((
        "reinforce",
        lambda x: ad.tsum(ad.mul(reinforce(x, Tensor(alpha)), Tensor(f_o))),
        f_o,
    ))
    checks.append((
        "temporal_update",
        lambda x: ad.tsum(temporal_update(x, Tensor(f_o + 0.1), temporal)),
        f_o,
    ))
    checks.append((
        "fuse",
        lambda x: ad.tsum(fuse(Tensor(f_o), x, a_ps, a_po, fusion)),
        f_e,
    ))
    mem = ContextMemory(3, [Tensor(row) for row in pr.normal(size=(2, dim)) * 0.4])
    checks.append((
        "textual_query_attend",
        lambda x: ad.tsum(textual_query_attend(x, mem, attn)),
        f_o,
    ))

    def through_memory(x):
        updated = memory_update(ContextMemory(2, list(mem.tokens)), x,
                                np.ones(3))
        return ad.tsum(ad.concat(
            [ad.reshape(t, (1, dim)) for t in updated.tokens]
        ))

    checks.append(("memory_update", through_memory, f_o))
    return checks


def loss_checks():
    checks = []
    r = np.random.default_rng(31)

    ids = np.array([1, 3, 0, 2])
    checks.append((
        "caption_ce",
        lambda x: caption_ce(x, ids, pad_id=0),
        r.normal(size=(4, 5)),
    ))
    gt = (r.random(size=(2, 9)) > 0.5).astype(float)
    checks.append(("mask_loss", lambda x: mask_loss(x, gt), r.normal(size=(2, 9))))
    y = (r.random(size=(2, 4)) > 0.5).astype(float)
    checks.append((
        "fa_loss",
        lambda x: fa_loss(ad.sigmoid(x), y),
        r.normal(size=(2, 4)),
    ))

    words = r.normal(size=(3, 5)) * 0.5
    tau = init_log_tau()
    mask_pos = [[0], [1, 2], [2]]
    word_pos = [[0], [1], [1, 2]]

    def mc_fn(x):
        return mc_loss(ContrastiveBatch(x, Tensor(words), mask_pos,
                                        word_pos, tau))

    checks.append(("mc_loss", mc_fn, r.normal(size=(3, 5)) * 0.5))

    def total_fn(x):
        parts = [ad.tsum(ad.mul(ad.narrow(x, 0, i, 1), float(i + 1)))
                 for i in range(4)]
        return total_loss(*parts, lam=2.0)

    checks.append(("total_loss", total_fn, r.normal(size=(4,))))
    return checks


def run_registered(step=DEFAULT_STEP, tol=DEFAULT_TOL):
    """Run every registered check; returns [(name, max_rel_err, passed)]."""
    results = []
    for name, fn, point in op_checks() + module_checks() + loss_checks():
        err = grad_check(fn, point, step=step)
        results.append((name, err, err <= tol))
    return results


def model_parameter_check(coords_per_param=3, step=1e-4, seed=0,
                          floor=1e-6):
    """FD-probe sampled coordinates of every model parameter through the
    total objective on one tiny synthetic video; returns max relative error.

    The relative-error denominator is floored at `floor` and the default
    step is larger than the per-op checks': central differences on a loss of
    magnitude ~10 in float64 carry absolute noise around |loss|*eps/step, so
    gradients near or below that noise level cannot be resolved relatively
    and are compared against the floor instead.
    """
    cfg = GenConfig(seed=seed, frames=2, height=16, width=16,
                    min_objects=2, max_objects=3, min_size=3, max_size=5,
                    feature_dim=16)
    video = gen_video(cfg)
    model = Model(ModelConfig(dim=16, slots=6, heads=2, memory=2,
                              iterations=1, patch=4), seed=seed)

    def loss_value():
        return model.video_losses(video)["total"]

    total = loss_value()
    grads = ad.backward(total)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    worst = 0.0
    for name, p in model.params().items():
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(coords_per_param, n), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value().item()
            flat[i] = orig - step
            lo = loss_value().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            analytic = g.reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric),
                                                floor)
            worst = max(worst, err)
    return worst
