"""Training objectives.

Caption cross-entropy, mask BCE+dice, the referring-matrix alignment BCE,
the multi-entity contrastive loss over mask and word embeddings, and the
weighted total. All are scalar Tensor outputs so the whole objective stays
finite-difference checkable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-7


class LossInputError(ValueError):
    pass


def _log_softmax_rows(logits):
    shift = logits.data.max(axis=1, keepdims=True)
    z = ad.sub(logits, shift)
    lse = ad.log(ad.tsum(ad.exp(z), axis=1, keepdims=True))
    return ad.sub(z, lse)


def caption_ce(logits, target_ids, pad_id=None):
    """Mean token-level NLL over non-pad positions."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    logits = ad._lift(logits)
    if logits.shape[0] != target_ids.size:
        raise ad.ShapeError("one logit row per target token required")
    keep = np.ones(target_ids.size, dtype=bool)
    if pad_id is not None:
        keep = target_ids != pad_id
    if not keep.any():
        raise LossInputError("all-pad target")
    pick = np.zeros(logits.shape)
    pick[np.arange(target_ids.size)[keep], target_ids[keep]] = 1.0
    logp = _log_softmax_rows(logits)
    total = ad.tsum(ad.mul(logp, Tensor(pick)))
    return ad.mul(total, -1.0 / keep.sum())


def _softplus(x):
    # log(1 + e^x) = relu(x) + log(1 + e^{-|x|}), stable for large |x|
    sabs = ad.mul(x, Tensor(np.sign(x.data)))
    return ad.add(ad.relu(x), ad.log(ad.add(ad.exp(ad.mul(sabs, -1.0)), 1.0)))


def mask_loss(pred_logits, gt_masks, smooth=1.0):
    """Mean over slots of pixel-mean BCE plus (1 - smoothed dice).

    pred_logits: slots x pixels (Tensor), gt_masks: matching binary array.
    Call on matched slots only.
    """
    pred_logits = ad._lift(pred_logits)
    gt = np.asarray(gt_masks, dtype=np.float64).reshape(pred_logits.shape)
    n, pixels = pred_logits.shape
    if n < 1:
        raise LossInputError("empty slot set")
    # BCE from logits: softplus(l) - l * g, averaged per slot
    bce = ad.tmean(
        ad.sub(_softplus(pred_logits), ad.mul(pred_logits, Tensor(gt)))
    )
    probs = ad.sigmoid(pred_logits)
    inter = ad.tsum(ad.mul(probs, Tensor(gt)), axis=1)
    sums = ad.add(ad.tsum(probs, axis=1), gt.sum(axis=1))
    dice = ad.div(ad.add(ad.mul(inter, 2.0), smooth), ad.add(sums, smooth))
    return ad.add(bce, ad.tmean(ad.sub(1.0, dice)))


def fa_loss(referring, target):
    """Mean binary cross-entropy between the referring matrix and its target."""
    referring = ad._lift(referring)
    y = np.asarray(target, dtype=np.float64)
    if referring.shape != y.shape:
        raise ad.ShapeError(
            f"referring {referring.shape} vs target {y.shape}"
        )
    if np.any(referring.data <= 0) or np.any(referring.data >= 1):
        raise LossInputError("referring probabilities must lie in (0,1)")
    v = ad.clamp(referring, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(ad.log(v), Tensor(y))
    neg = ad.mul(ad.log(ad.sub(1.0, v)), Tensor(1.0 - y))
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


@dataclass
class ContrastiveBatch:
    """Embeddings plus positive index sets for the multi-entity loss.

    mask_positive[i] lists positive word indices for mask i; word_positive[i]
    lists positive mask indices for word i. Temperature is carried as a
    log-parameter and clamped to [0.05, 1] after exponentiation.
    """

    mask_embeddings: Tensor   # masks x dim
    word_embeddings: Tensor   # words x dim
    mask_positive: list
    word_positive: list
    log_tau: Tensor
    include_positive_in_denominator: bool = False


def _directional_terms(sims, positives, include_positive):
    """Sum over anchors of the averaged -log(num/denom) terms.

    sims: anchors x candidates similarity Tensor (already divided by tau).
    The candidate sharing the anchor's index is excluded from the
    denominator unless include_positive is set.
    """
    n, m = sims.shape
    excl = np.ones((n, m))
    if not include_positive:
        k = min(n, m)
        excl[np.arange(k), np.arange(k)] = 0.0
    denom = ad.tsum(ad.mul(ad.exp(sims), Tensor(excl)), axis=1, keepdims=True)
    pick = np.zeros((n, m))
    for i, pos in enumerate(positives):
        if not pos:
            raise LossInputError(f"anchor {i} has an empty positive set")
        for j in pos:
            pick[i, j] = 1.0 / len(pos)
    return ad.tsum(ad.mul(ad.sub(ad.log(denom), sims), Tensor(pick)))


def mc_loss(batch):
    """Multi-entity contrastive loss, symmetric over masks and words.

    Default form excludes the same-index candidate from each denominator
    (and so can go negative); the flag switches to the standard normalized
    variant whose denominator ranges over all candidates.
    """
    m = ad._lift(batch.mask_embeddings)
    s = ad._lift(batch.word_embeddings)
    if m.shape[0] < 2 or s.shape[0] < 2:
        raise LossInputError("need at least two masks and two words")
    if len(batch.mask_positive) != m.shape[0]:
        raise LossInputError("one positive set per mask required")
    if len(batch.word_positive) != s.shape[0]:
        raise LossInputError("one positive set per word required")
    tau = ad.clamp(ad.exp(ad._lift(batch.log_tau)), 0.05, 1.0)
    sims = ad.div(ad.matmul(m, ad.transpose(s)), tau)
    mask_side = _directional_terms(
        sims, batch.mask_positive, batch.include_positive_in_denominator
    )
    word_side = _directional_terms(
        ad.transpose(sims), batch.word_positive,
        batch.include_positive_in_denominator,
    )
    return ad.add(mask_side, word_side)


def total_loss(l_caption, l_mask, l_fa, l_mc, lam=2.0):
    """Caption + (mask + alignment) + lam * contrastive."""
    seg = ad.add(ad._lift(l_mask), ad._lift(l_fa))
    return ad.add(ad.add(ad._lift(l_caption), seg),
                  ad.mul(ad._lift(l_mc), float(lam)))


def init_log_tau(value=0.07):
    return Tensor(np.asarray(math.log(value)), requires_grad=True)
