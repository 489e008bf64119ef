"""Evaluation protocol: region/boundary quality, AP, phrase grounding.

Region quality J is mask IoU; boundary quality F matches boundary pixels
bipartitely within a Chebyshev tolerance. Class-level AP ranks predictions
by confidence against same-class ground truth at spatio-temporal IoU
thresholds; instance-level AP additionally requires the grounded phrase to
match. Caption quality is a token-level F1 stand-in.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .heads import SPECIAL_TOKENS


@dataclass
class PredInstance:
    masks: np.ndarray       # frames x H x W bool
    confidence: float
    phrase: list            # grounded tokens for this mask

    @property
    def class_label(self):
        return self.phrase[-1] if self.phrase else ""


@dataclass
class GtInstance:
    masks: np.ndarray
    class_label: str
    phrase: list


@dataclass
class EvalRecord:
    """One video's predictions and ground truth, frame counts agreeing."""

    preds: list
    gts: list

    def __post_init__(self):
        frames = {p.masks.shape[0] for p in self.preds}
        frames |= {g.masks.shape[0] for g in self.gts}
        if len(frames) > 1:
            raise ValueError("frame counts disagree within a record")


def region_j(pred, gt):
    """Mask IoU; defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum()) / float(union)


def st_iou(pred, gt):
    """Spatio-temporal IoU: summed per-frame intersections over unions."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum()) / float(union)


def boundary_pixels(mask):
    """Foreground minus its 1-px erosion under the 4-neighborhood."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
        & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def default_boundary_tolerance(shape):
    diag = float(np.hypot(*shape))
    return max(1, round(0.0075 * diag))


def boundary_f(pred, gt, tolerance_px=None):
    """Boundary F-measure via maximum bipartite matching within tolerance."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if tolerance_px is None:
        tolerance_px = default_boundary_tolerance(pred.shape)
    pb = np.argwhere(boundary_pixels(pred))
    gb = np.argwhere(boundary_pixels(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    tree = cKDTree(gb)
    pairs = tree.query_ball_point(pb, r=tolerance_px + 1e-9, p=np.inf)
    rows, cols = [], []
    for i, neighbors in enumerate(pairs):
        rows.extend([i] * len(neighbors))
        cols.extend(neighbors)
    if not rows:
        return 0.0
    graph = csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(pb), len(gb))
    )
    matching = maximum_bipartite_matching(graph, perm_type="column")
    matched = int((matching >= 0).sum())
    precision = matched / len(pb)
    recall = matched / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _match_video(record, threshold=None, require_class=False):
    """Greedy confidence-ordered pred->gt matching on spatio-temporal IoU.

    Returns {pred_index: gt_index}; a gt is used at most once.
    """
    order = sorted(
        range(len(record.preds)),
        key=lambda i: (-record.preds[i].confidence, i),
    )
    taken = set()
    out = {}
    for pi in order:
        pred = record.preds[pi]
        best_gi, best_iou = None, -1.0
        for gi, gt in enumerate(record.gts):
            if gi in taken:
                continue
            if require_class and gt.class_label != pred.class_label:
                continue
            iou = st_iou(pred.masks, gt.masks)
            if iou > best_iou:
                best_gi, best_iou = gi, iou
        if best_gi is None:
            continue
        if threshold is not None and best_iou < threshold:
            continue
        taken.add(best_gi)
        out[pi] = best_gi
    return out


def jf_mean(records, tolerance_px=None):
    """Flat (video, object, frame) averages of J and F; returns (J&F, J, F)."""
    if not records:
        raise ValueError("empty record set")
    j_vals, f_vals = [], []
    for record in records:
        assigned = _match_video(record)
        gt_to_pred = {g: p for p, g in assigned.items()}
        for gi, gt in enumerate(record.gts):
            pred = record.preds[gt_to_pred[gi]] if gi in gt_to_pred else None
            for t in range(gt.masks.shape[0]):
                pm = pred.masks[t] if pred is not None else np.zeros_like(gt.masks[t])
                j_vals.append(region_j(pm, gt.masks[t]))
                f_vals.append(boundary_f(pm, gt.masks[t], tolerance_px))
    j = float(np.mean(j_vals))
    f = float(np.mean(f_vals))
    return (j + f) / 2.0, j, f


def _eleven_point_ap(flags, total_gt):
    """11-point interpolated AP over confidence-ranked correctness flags."""
    if total_gt == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / total_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


def _ranked_flags(records, correct_fn):
    """Pool predictions across videos, rank by confidence, flag correctness.

    correct_fn(record, pred_index) -> bool, evaluated in rank order with
    per-video ground-truth bookkeeping handled by the caller's closure.
    """
    pool = []
    for ri, record in enumerate(records):
        for pi, pred in enumerate(record.preds):
            pool.append((-pred.confidence, ri, pi))
    pool.sort()
    return [correct_fn(records[ri], ri, pi) for _, ri, pi in pool]


def class_ap(records, iou_thresholds=None):
    """Class-level AP; returns (AP averaged over thresholds, AP50, AP75)."""
    if iou_thresholds is None:
        iou_thresholds = np.arange(0.50, 0.96, 0.05)
    total_gt = sum(len(r.gts) for r in records)
    per_threshold = {}
    for theta in iou_thresholds:
        matched = [set() for _ in records]

        def correct(record, ri, pi, theta=theta, matched=matched):
            pred = record.preds[pi]
            best_gi, best_iou = None, -1.0
            for gi, gt in enumerate(record.gts):
                if gi in matched[ri] or gt.class_label != pred.class_label:
                    continue
                iou = st_iou(pred.masks, gt.masks)
                if iou > best_iou:
                    best_gi, best_iou = gi, iou
            if best_gi is not None and best_iou >= theta:
                matched[ri].add(best_gi)
                return True
            return False

        flags = _ranked_flags(records, correct)
        per_threshold[round(float(theta), 2)] = _eleven_point_ap(flags, total_gt)
    ap = float(np.mean(list(per_threshold.values())))
    return ap, per_threshold.get(0.5, 0.0), per_threshold.get(0.75, 0.0)


def phrase_similarity(a, b):
    """Jaccard index over lowercased token sets; 1.0 when both empty."""
    sa = {t.lower() for t in a}
    sb = {t.lower() for t in b}
    if not sa and not sb:
        return 1.0
    union = sa | sb
    return len(sa & sb) / len(union)


def instance_map(records, iou_threshold=0.5, similarity_threshold=0.5):
    """Instance-level AP: mask overlap and grounded-phrase match required."""
    total_gt = sum(len(r.gts) for r in records)
    matched = [set() for _ in records]

    def correct(record, ri, pi):
        pred = record.preds[pi]
        best_gi, best_iou = None, -1.0
        for gi, gt in enumerate(record.gts):
            if gi in matched[ri]:
                continue
            iou = st_iou(pred.masks, gt.masks)
            if iou > best_iou:
                best_gi, best_iou = gi, iou
        if best_gi is None or best_iou < iou_threshold:
            return False
        gt = record.gts[best_gi]
        if phrase_similarity(pred.phrase, gt.phrase) <= similarity_threshold:
            return False
        matched[ri].add(best_gi)
        return True

    flags = _ranked_flags(records, correct)
    return _eleven_point_ap(flags, total_gt)


def caption_overlap(pred_tokens, gt_tokens):
    """Token-level F1 excluding tag/control tokens; 1.0 when both empty."""
    specials = set(SPECIAL_TOKENS)
    pa = Counter(t for t in pred_tokens if t not in specials)
    pb = Counter(t for t in gt_tokens if t not in specials)
    if not pa and not pb:
        return 1.0
    common = sum((pa & pb).values())
    denom = sum(pa.values()) + sum(pb.values())
    return 2.0 * common / denom if denom else 0.0


def write_metrics(metrics, json_path=None, csv_path=None, split="eval", seed=0):
    """Emit {metric: value} as JSON and CSV rows (metric, split, seed, value)."""
    rows = [
        {"metric": k, "split": split, "seed": seed, "value": float(v)}
        for k, v in metrics.items()
    ]
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["metric", "split", "seed", "value"]
            )
            writer.writeheader()
            writer.writerows(rows)
    return rows
