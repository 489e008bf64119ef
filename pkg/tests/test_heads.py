"""Decoding heads: caption decoder, mask scoring, referring branch, matching."""
import itertools

import numpy as np
import pytest

from conftest import seeded_rng

from segcap import autodiff as ad
from segcap.autodiff import Tensor
from segcap.heads import (BOS, EOS, PAD, SPECIAL_TOKENS, CaptionHeadParams,
                          HeadParams, MaskHeadParams, Vocabulary,
                          VocabularyError, caption_logits, compute_pixel_features,
                          decode_caption, decode_masks, hungarian_match,
                          pair_cost, prediction_to_dict, refer_probs,
                          slot_queries, solve_assignment, Prediction)

DIM = 8


def test_vocabulary_specials_first():
    v = Vocabulary(["cat", "dog"])
    assert tuple(v.tokens[:len(SPECIAL_TOKENS)]) == SPECIAL_TOKENS
    assert v.decode(v.encode(["cat", "dog"])) == ["cat", "dog"]
    assert v.pad_id == 0
    with pytest.raises(VocabularyError):
        v.encode(["unknown-token"])


# ---------------------------------------------------------------------------
# caption head


def test_caption_head_overfits_one_sequence():
    """A few hundred Adam steps memorize a single caption exactly."""
    from segcap.model import Adam
    vocab = Vocabulary(["a", "b", "c", "d"])
    seq = vocab.encode([BOS, "a", "b", "c", "a", EOS])
    rng = seeded_rng(1, 21)
    params = CaptionHeadParams.init(rng, len(vocab), DIM, 2, 12)
    f_vl = Tensor(rng.normal(size=(3, DIM)))
    named = params.named("cap")
    opt = Adam(named, lr=3e-2)
    from segcap.losses import caption_ce
    for _ in range(300):
        logits = caption_logits(f_vl, seq[:-1], params)
        loss = caption_ce(logits, np.array(seq[1:]), pad_id=vocab.pad_id)
        opt.step(ad.backward(loss))
    assert decode_caption(f_vl, params, vocab, 12) == seq


def test_decode_caption_deterministic_and_bounded():
    rng = seeded_rng(2, 21)
    vocab = Vocabulary(["x", "y"])
    params = CaptionHeadParams.init(rng, len(vocab), DIM, 2, 6)
    f_vl = Tensor(rng.normal(size=(2, DIM)))
    a = decode_caption(f_vl, params, vocab, 6)
    b = decode_caption(f_vl, params, vocab, 6)
    assert a == b
    assert len(a) <= 6
    assert a[0] == vocab.bos_id
    with pytest.raises(ValueError):
        decode_caption(f_vl, params, vocab, 1)


def test_caption_logits_causal():
    """Changing a later input token leaves earlier logits unchanged."""
    rng = seeded_rng(3, 21)
    vocab = Vocabulary(["x", "y", "z"])
    params = CaptionHeadParams.init(rng, len(vocab), DIM, 2, 8)
    f_vl = Tensor(rng.normal(size=(2, DIM)))
    ids = vocab.encode([BOS, "x", "y"])
    base = caption_logits(f_vl, ids, params).data
    ids2 = vocab.encode([BOS, "x", "z"])
    again = caption_logits(f_vl, ids2, params).data
    assert np.allclose(base[:2], again[:2], atol=1e-12)
    assert not np.allclose(base[2], again[2])


# ---------------------------------------------------------------------------
# mask head


def test_decode_masks_matches_double_loop_oracle():
    """4x4 image, 2 slots: explicit per-pixel dot-product oracle."""
    rng = seeded_rng(4, 21)
    params = MaskHeadParams.init(rng, DIM)
    frame = rng.random(size=(4, 4, 3))
    slots = rng.normal(size=(2, DIM))
    pix = compute_pixel_features(frame, params)
    logits, conf = decode_masks(Tensor(slots), pix, params, 4, 4)
    assert logits.shape == (2, 16)
    queries = slots @ params.w_query.data + params.b_query.data
    h, w = 4, 4
    for s in range(2):
        for y in range(h):
            for x in range(w):
                raw = np.concatenate([
                    frame[y, x], [x / (w - 1)], [y / (h - 1)]
                ])
                hidden = np.maximum(
                    raw @ params.pixel_mlp.w1.data + params.pixel_mlp.b1.data, 0
                )
                feat = hidden @ params.pixel_mlp.w2.data + params.pixel_mlp.b2.data
                want = queries[s] @ feat / np.sqrt(DIM)
                assert logits.data[s, y * w + x] == pytest.approx(want, abs=1e-10)


def test_decode_masks_confidence_definition():
    rng = seeded_rng(5, 21)
    params = MaskHeadParams.init(rng, DIM)
    # craft logits via a slot far from everything: all probs < 0.5 -> conf 0
    pix = compute_pixel_features(np.zeros((2, 2, 3)), params)
    strong_neg = Tensor(np.full((1, DIM), 0.0))
    logits, conf = decode_masks(strong_neg, pix, params, 2, 2)
    probs = 1 / (1 + np.exp(-logits.data[0]))
    fg = probs[probs > 0.5]
    want = fg.mean() if fg.size else 0.0
    assert conf[0] == pytest.approx(want, abs=1e-12)


def test_refer_probs_range_and_truncation():
    rng = seeded_rng(6, 21)
    heads = HeadParams.init(rng, 12, DIM, 2, 10, 6)
    slots = Tensor(rng.normal(size=(3, DIM)))
    v = refer_probs(slots, heads.refer, 7)
    assert v.shape == (3, 7)
    assert ((v.data > 0) & (v.data < 1)).all()
    with pytest.raises(ad.ShapeError):
        refer_probs(slots, heads.refer, 99)
    with pytest.raises(ad.ShapeError):
        refer_probs(slots, heads.refer, 0)


def test_refer_probs_zero_weights_half():
    from segcap.autodiff import MlpParams
    p = MlpParams(
        Tensor(np.zeros((DIM, 4))), Tensor(np.zeros(4)),
        Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)), "relu",
    )
    v = refer_probs(Tensor(np.ones((2, DIM))), p, 5)
    assert np.allclose(v.data, 0.5)


# ---------------------------------------------------------------------------
# assignment


def test_identity_assignment_on_identical_sets():
    gt = (seeded_rng(7, 21).random(size=(3, 25)) > 0.6).astype(float)
    pred = np.clip(gt, 1e-6, 1 - 1e-6)
    assert hungarian_match(pred, gt) == [(0, 0), (1, 1), (2, 2)]


def test_fixed_2x2_cost():
    assert solve_assignment([[1.0, 10.0], [10.0, 1.0]]) == [(0, 0), (1, 1)]


def test_hungarian_equals_enumeration_up_to_5():
    r = seeded_rng(8, 21)
    for n in range(2, 6):
        for _ in range(20):
            cost = r.random(size=(n, n))
            got = solve_assignment(cost)
            got_cost = sum(cost[i, j] for i, j in got)
            best = min(
                sum(cost[p[j], j] for j in range(n))
                for p in itertools.permutations(range(n))
            )
            assert got_cost == pytest.approx(best, abs=1e-12)


def test_hungarian_rectangular_and_capacity():
    r = seeded_rng(9, 21)
    pred = r.random(size=(4, 9))
    gt = (r.random(size=(2, 9)) > 0.5).astype(float)
    match = hungarian_match(pred, gt)
    assert len(match) == 2
    assert [c for _, c in match] == [0, 1]
    with pytest.raises(ValueError):
        hungarian_match(pred[:1], gt)


def test_pair_cost_perfect_overlap_near_zero():
    gt = np.array([1.0, 0.0, 1.0, 0.0])
    pred = np.clip(gt, 1e-7, 1 - 1e-7)
    assert pair_cost(pred, gt) <= 1e-5


def test_prediction_to_dict_schema():
    vocab = Vocabulary(["a"])
    pred = Prediction(
        caption=[vocab.bos_id, vocab.encode(["a"])[0], vocab.eos_id],
        masks=np.random.default_rng(0).random(size=(2, 3, 4, 4)),
        referring=np.full((2, 5), 0.5),
        confidences=np.array([0.7, 0.2]),
    )
    doc = prediction_to_dict(pred, vocab)
    assert doc["caption"] == [BOS, "a", EOS]
    assert len(doc["masks"]) == 2 and len(doc["masks"][0]) == 3
    assert doc["mask_shape"] == [4, 4]
    assert len(doc["referring"]) == 2
