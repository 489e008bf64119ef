"""Decoding heads: caption, mask, and referring-probability branches.

The caption head is a small autoregressive decoder (token embeddings, one
causal self-attention layer, cross-attention over the conditioning feature,
vocab projection). The mask head scores each slot query against per-pixel
features by scaled dot product. The referring branch maps each slot through
a two-layer MLP to independent per-caption-position probabilities, since one
mask may cover several words.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import AttentionParams, MlpParams, Tensor
from .rle import rle_encode

PAD = "⟨PAD⟩"
BOS = "⟨BOS⟩"
EOS = "⟨EOS⟩"
SEG_C_OPEN = "⟨SEG_C⟩"
SEG_C_CLOSE = "⟨/SEG_C⟩"
SEG_S_OPEN = "⟨SEG_S⟩"
SEG_S_CLOSE = "⟨/SEG_S⟩"

SPECIAL_TOKENS = (PAD, BOS, EOS, SEG_C_OPEN, SEG_C_CLOSE, SEG_S_OPEN, SEG_S_CLOSE)


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Ordered token list with the tag/control specials always present."""

    def __init__(self, words):
        tokens = list(SPECIAL_TOKENS)
        for w in words:
            if w not in tokens:
                tokens.append(w)
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise VocabularyError("duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens):
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"unknown token {exc.args[0]!r}") from exc

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]


@dataclass
class CaptionHeadParams:
    embed: Tensor      # vocab x dim
    pos: Tensor        # max_len x dim
    self_attn: AttentionParams
    cross_attn: AttentionParams
    w_out: Tensor      # dim x vocab
    b_out: Tensor

    @classmethod
    def init(cls, rng, vocab_size, dim, heads, max_len):
        return cls(
            ad.uniform_init(rng, (vocab_size, dim), dim),
            ad.uniform_init(rng, (max_len, dim), dim),
            AttentionParams.init(rng, dim, heads),
            AttentionParams.init(rng, dim, heads),
            ad.uniform_init(rng, (dim, vocab_size), dim),
            ad.uniform_init(rng, (vocab_size,), dim),
        )

    def named(self, prefix):
        out = self.self_attn.named(f"{prefix}.self_attn")
        out.update(self.cross_attn.named(f"{prefix}.cross_attn"))
        out[f"{prefix}.embed"] = self.embed
        out[f"{prefix}.pos"] = self.pos
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out


@dataclass
class MaskHeadParams:
    pixel_mlp: MlpParams  # per-pixel (r,g,b,x,y) -> dim
    w_query: Tensor       # dim x dim slot projection
    b_query: Tensor

    @classmethod
    def init(cls, rng, dim, pixel_hidden=16):
        return cls(
            MlpParams.init(rng, 5, pixel_hidden, dim, activation="relu"),
            ad.uniform_init(rng, (dim, dim), dim),
            ad.uniform_init(rng, (dim,), dim),
        )

    def named(self, prefix):
        out = self.pixel_mlp.named(f"{prefix}.pixel_mlp")
        out[f"{prefix}.w_query"] = self.w_query
        out[f"{prefix}.b_query"] = self.b_query
        return out


@dataclass
class HeadParams:
    caption: CaptionHeadParams
    mask: MaskHeadParams
    refer: MlpParams          # dim -> dim/2 -> max caption length
    contrast: MlpParams       # dim -> dim -> dim, mask-side embedding
    contrast_text: MlpParams  # dim -> dim -> dim, word-side embedding
    cond_pos: Tensor          # slots x dim, caption-conditioning row tags

    @classmethod
    def init(cls, rng, vocab_size, dim, heads, max_len, slots):
        return cls(
            CaptionHeadParams.init(rng, vocab_size, dim, heads, max_len),
            MaskHeadParams.init(rng, dim),
            MlpParams.init(rng, dim, dim // 2, max_len, activation="relu"),
            MlpParams.init(rng, dim, dim, dim, activation="relu"),
            MlpParams.init(rng, dim, dim, dim, activation="relu"),
            ad.uniform_init(rng, (slots, dim), dim),
        )

    def named(self, prefix="heads"):
        out = self.caption.named(f"{prefix}.caption")
        out.update(self.mask.named(f"{prefix}.mask"))
        out.update(self.refer.named(f"{prefix}.refer"))
        out.update(self.contrast.named(f"{prefix}.contrast"))
        out.update(self.contrast_text.named(f"{prefix}.contrast_text"))
        out[f"{prefix}.cond_pos"] = self.cond_pos
        return out


@dataclass
class Prediction:
    """One video's decoded output."""

    caption: list                 # token ids incl. BOS/EOS
    masks: np.ndarray             # slots x frames x H x W probabilities
    referring: np.ndarray         # slots x caption positions, in (0,1)
    confidences: np.ndarray       # per-slot


# ---------------------------------------------------------------------------
# caption head


def caption_logits(f_vl, token_ids, params):
    """Teacher-forced logits: position i predicts token i+1."""
    ids = np.asarray(token_ids, dtype=np.int64)
    x = ad.add(ad.take_rows(params.embed, ids),
               ad.narrow(params.pos, 0, 0, len(ids)))
    x = ad.add(x, ad.mhsa(x, params.self_attn, causal=True))
    f_vl = ad._lift(f_vl)
    x = ad.add(x, ad.mhca(x, f_vl, f_vl, params.cross_attn))
    return ad.add(ad.matmul(x, params.w_out), params.b_out)


def decode_caption(f_vl, params, vocab, max_len):
    """Greedy autoregressive decoding; stops at EOS or max_len tokens."""
    if max_len < 2:
        raise ValueError("max_len must allow BOS plus one token")
    seq = [vocab.bos_id]
    while len(seq) < max_len:
        logits = caption_logits(f_vl, seq, params)
        nxt = int(np.argmax(logits.data[-1]))
        seq.append(nxt)
        if nxt == vocab.eos_id:
            break
    return seq


# ---------------------------------------------------------------------------
# mask head


def raw_pixel_grid(frame):
    """Per-pixel (r,g,b,x,y) attributes as a (H*W) x 5 numpy array."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w, _ = frame.shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.concatenate(
        [
            frame.reshape(h * w, 3),
            (xs / max(w - 1, 1)).reshape(-1, 1),
            (ys / max(h - 1, 1)).reshape(-1, 1),
        ],
        axis=1,
    )


def compute_pixel_features(frame, params):
    """Per-pixel (r,g,b,x,y) through the two-layer MLP; returns (H*W) x dim."""
    return ad.mlp(Tensor(raw_pixel_grid(frame)), params.pixel_mlp)


def slot_queries(slot_features, params):
    """Project slot features into the mask/embedding query space."""
    return ad.add(ad.matmul(ad._lift(slot_features), params.w_query),
                  params.b_query)


def decode_masks(slot_features, pixel_features, params, height, width):
    """Scaled dot-product mask logits per slot.

    Returns (logits Tensor slots x (H*W), confidences numpy). Confidence is
    the mean foreground probability over pixels whose sigmoid exceeds 0.5,
    or 0 when no pixel does.
    """
    slot_features = ad._lift(slot_features)
    n = slot_features.shape[0]
    if n < 1:
        raise ad.ShapeError("no valid slots to decode")
    dim = slot_features.shape[1]
    queries = slot_queries(slot_features, params)
    logits = ad.mul(ad.matmul(queries, ad.transpose(ad._lift(pixel_features))),
                    1.0 / math.sqrt(dim))
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    confidences = np.zeros(n)
    for i in range(n):
        fg = probs[i][probs[i] > 0.5]
        confidences[i] = fg.mean() if fg.size else 0.0
    return logits, confidences


# ---------------------------------------------------------------------------
# referring branch


def refer_probs(slot_features, params, caption_len):
    """Independent per-position sigmoid probabilities for each slot."""
    if caption_len < 1:
        raise ad.ShapeError("caption length must be positive")
    # clamp away from {0, 1}: the sigmoid saturates exactly in float64 for
    # |x| beyond ~37, which the alignment loss rejects
    out = ad.clamp(ad.sigmoid(ad.mlp(ad._lift(slot_features), params)),
                   1e-7, 1 - 1e-7)
    if caption_len > out.shape[1]:
        raise ad.ShapeError(
            f"caption length {caption_len} exceeds head width {out.shape[1]}"
        )
    return ad.narrow(out, 1, 0, caption_len)


# ---------------------------------------------------------------------------
# slot assignment


def pair_cost(pred_probs, gt_mask, eps=1e-7):
    """Pixel-mean BCE plus one minus smoothed dice, as a matching cost."""
    p = np.clip(np.asarray(pred_probs, dtype=np.float64).reshape(-1), eps, 1 - eps)
    g = np.asarray(gt_mask, dtype=np.float64).reshape(-1)
    bce = -(g * np.log(p) + (1 - g) * np.log(1 - p)).mean()
    dice = (2 * (p * g).sum() + 1.0) / (p.sum() + g.sum() + 1.0)
    return bce + (1.0 - dice)


def solve_assignment(cost):
    """Minimum-cost one-to-one assignment; returns [(row, col)] sorted by col."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def hungarian_match(pred_masks, gt_masks):
    """Assign each ground-truth mask to a distinct prediction slot.

    pred_masks: slots x ... probabilities, gt_masks: targets x ... binary.
    Requires at least as many slots as targets. Returns [(slot, target)].
    """
    pred_masks = np.asarray(pred_masks, dtype=np.float64)
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    if pred_masks.shape[0] < gt_masks.shape[0]:
        raise ValueError(
            f"{pred_masks.shape[0]} slots cannot cover "
            f"{gt_masks.shape[0]} targets"
        )
    cost = np.array([
        [pair_cost(p, g) for g in gt_masks] for p in pred_masks
    ]).reshape(pred_masks.shape[0], gt_masks.shape[0])
    return solve_assignment(cost)


def prediction_to_dict(pred, vocab, threshold=0.5):
    """JSON-ready form: token strings, RLE masks at the threshold, V, scores."""
    return {
        "caption": vocab.decode(pred.caption),
        "masks": [
            [rle_encode(frame >= threshold) for frame in slot]
            for slot in pred.masks
        ],
        "mask_shape": list(pred.masks.shape[2:]),
        "referring": pred.referring.tolist(),
        "confidences": pred.confidences.tolist(),
    }
