"""Evaluation metrics against brute-force oracles."""
import numpy as np
import pytest

from conftest import seeded_rng

from segcap.metrics import (EvalRecord, GtInstance, PredInstance,
                            boundary_f, boundary_pixels, caption_overlap,
                            class_ap, default_boundary_tolerance,
                            instance_map, jf_mean, phrase_similarity,
                            region_j, st_iou, write_metrics)


def random_mask(r, size=16, p=0.35):
    return r.random(size=(size, size)) < p


def random_blob(r, size=12):
    mask = np.zeros((size, size), dtype=bool)
    cy, cx = r.integers(3, size - 3, size=2)
    h, w = r.integers(2, 5, size=2)
    mask[max(0, cy - h):cy + h, max(0, cx - w):cx + w] = True
    return mask


# ---------------------------------------------------------------------------
# region J


def test_region_j_matches_pixel_count_oracle_200_pairs():
    r = seeded_rng(1, 31)
    for _ in range(200):
        a, b = random_mask(r), random_mask(r)
        inter = int(np.sum(a & b))
        union = int(np.sum(a | b))
        want = 1.0 if union == 0 else inter / union
        assert region_j(a, b) == want


def test_region_j_edge_cases():
    empty = np.zeros((4, 4), dtype=bool)
    full = np.ones((4, 4), dtype=bool)
    assert region_j(empty, empty) == 1.0
    assert region_j(full, full) == 1.0
    assert region_j(empty, full) == 0.0
    with pytest.raises(ValueError):
        region_j(np.zeros((2, 2)), np.zeros((3, 3)))


def test_st_iou_pools_over_frames():
    a = np.zeros((2, 4, 4), dtype=bool)
    b = np.zeros((2, 4, 4), dtype=bool)
    a[0, :2, :2] = True   # 4 px, frame 0
    b[1, :2, :2] = True   # 4 px, frame 1
    assert st_iou(a, b) == 0.0
    b[0, :2, :2] = True
    assert st_iou(a, b) == pytest.approx(4 / 8)


# ---------------------------------------------------------------------------
# boundary F


def oracle_boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                    out[y, x] = True
                    break
    return out


def oracle_max_matching(pb, gb, tol):
    """Augmenting-path maximum bipartite matching over explicit pairs."""
    adj = [
        [j for j, g in enumerate(gb)
         if max(abs(p[0] - g[0]), abs(p[1] - g[1])) <= tol]
        for p in pb
    ]
    match_g = {}

    def augment(i, seen):
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in match_g or augment(match_g[j], seen):
                match_g[j] = i
                return True
        return False

    return sum(augment(i, set()) for i in range(len(pb)))


def oracle_boundary_f(pred, gt, tol):
    pb = np.argwhere(oracle_boundary(pred))
    gb = np.argwhere(oracle_boundary(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    matched = oracle_max_matching(pb.tolist(), gb.tolist(), tol)
    precision = matched / len(pb)
    recall = matched / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def test_boundary_pixels_4_neighborhood():
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    got = boundary_pixels(mask)
    assert np.array_equal(got, oracle_boundary(mask))
    assert not got[2, 2]  # interior


def test_boundary_f_matches_exhaustive_oracle_50_pairs():
    r = seeded_rng(2, 31)
    for _ in range(50):
        a, b = random_blob(r), random_blob(r)
        tol = 1
        assert boundary_f(a, b, tolerance_px=tol) == pytest.approx(
            oracle_boundary_f(a, b, tol), abs=1e-9
        )


def test_boundary_f_offset_squares():
    a = np.zeros((12, 12), dtype=bool)
    b = np.zeros((12, 12), dtype=bool)
    a[3:8, 3:8] = True
    b[4:9, 4:9] = True  # same square offset by 1 px
    got = boundary_f(a, b, tolerance_px=1)
    assert got == pytest.approx(oracle_boundary_f(a, b, 1), abs=1e-9)
    assert boundary_f(a, a, tolerance_px=1) == 1.0


def test_default_boundary_tolerance():
    assert default_boundary_tolerance((64, 64)) == 1
    assert default_boundary_tolerance((480, 854)) == round(
        0.0075 * np.hypot(480, 854)
    )


# ---------------------------------------------------------------------------
# aggregate J&F and AP


def simple_record(iou_good=True):
    gt = np.zeros((2, 8, 8), dtype=bool)
    gt[:, 2:6, 2:6] = True
    pred = gt.copy() if iou_good else np.zeros_like(gt)
    return EvalRecord(
        preds=[PredInstance(pred, 0.9, ["the", "red", "circle"])],
        gts=[GtInstance(gt, "circle", ["the", "red", "circle"])],
    )


def test_perfect_oracle_scores_one():
    records = [simple_record() for _ in range(3)]
    jf, j, f = jf_mean(records)
    assert (jf, j, f) == (1.0, 1.0, 1.0)
    ap, ap50, ap75 = class_ap(records)
    assert ap == ap50 == ap75 == 1.0
    assert instance_map(records) == 1.0


def test_jf_mean_flat_average_oracle():
    """Mixed records: hand-enumerate the flat per-(object, frame) average."""
    good = simple_record(True)
    bad = simple_record(False)
    jf, j, f = jf_mean([good, bad])
    # good: J=F=1 on both frames; bad: empty pred vs nonempty gt -> 0
    assert j == pytest.approx((1 + 1 + 0 + 0) / 4)
    assert f == pytest.approx((1 + 1 + 0 + 0) / 4)
    assert jf == pytest.approx((j + f) / 2)


def test_class_ap_hand_pr_curve():
    """One TP at conf 0.9, one FP at conf 0.8, one missed gt."""
    gt1 = np.zeros((1, 8, 8), dtype=bool)
    gt1[:, 1:5, 1:5] = True
    gt2 = np.zeros((1, 8, 8), dtype=bool)
    gt2[:, 5:8, 5:8] = True
    record = EvalRecord(
        preds=[
            PredInstance(gt1.copy(), 0.9, ["the", "red", "circle"]),
            PredInstance(np.zeros_like(gt1), 0.8, ["the", "red", "circle"]),
        ],
        gts=[
            GtInstance(gt1, "circle", ["the", "red", "circle"]),
            GtInstance(gt2, "circle", ["the", "blue", "circle"]),
        ],
    )
    ap, ap50, ap75 = class_ap([record])
    # ranked flags: [TP, FP]; recall levels reached: 0.5 with precision 1.0
    # 11-point AP: levels 0.0..0.5 take precision 1.0, rest 0 -> 6/11
    assert ap50 == pytest.approx(6 / 11)
    assert ap == pytest.approx(6 / 11)


def test_instance_map_requires_phrase_match():
    gt = np.zeros((1, 8, 8), dtype=bool)
    gt[:, 2:6, 2:6] = True
    right = EvalRecord(
        preds=[PredInstance(gt.copy(), 0.9, ["the", "red", "circle"])],
        gts=[GtInstance(gt, "circle", ["the", "red", "circle"])],
    )
    wrong = EvalRecord(
        preds=[PredInstance(gt.copy(), 0.9, ["blue", "square"])],
        gts=[GtInstance(gt, "circle", ["the", "red", "circle"])],
    )
    assert instance_map([right]) == 1.0
    assert instance_map([wrong]) == 0.0


def test_record_frame_count_validation():
    gt = np.zeros((2, 4, 4), dtype=bool)
    with pytest.raises(ValueError):
        EvalRecord(
            preds=[PredInstance(np.zeros((3, 4, 4), dtype=bool), 0.5, ["x"])],
            gts=[GtInstance(gt, "x", ["x"])],
        )


# ---------------------------------------------------------------------------
# text metrics


def test_phrase_similarity_jaccard():
    assert phrase_similarity(["red", "circle"], ["red", "circle"]) == 1.0
    assert phrase_similarity(["red", "circle"], ["blue", "circle"]) == pytest.approx(1 / 3)
    assert phrase_similarity([], []) == 1.0
    assert phrase_similarity(["Red"], ["red"]) == 1.0


def test_caption_overlap_excludes_specials():
    from segcap.heads import BOS, EOS, SEG_C_OPEN
    pred = [BOS, SEG_C_OPEN, "red", "circle", EOS]
    gt = ["red", "circle"]
    assert caption_overlap(pred, gt) == 1.0
    assert caption_overlap(["red"], ["red", "circle"]) == pytest.approx(2 / 3)
    assert caption_overlap([BOS], [EOS]) == 1.0


def test_write_metrics_schema(tmp_path):
    rows = write_metrics(
        {"jf": 0.5, "ap": 0.25},
        json_path=tmp_path / "m.json",
        csv_path=tmp_path / "m.csv",
        split="eval", seed=3,
    )
    assert rows[0] == {"metric": "jf", "split": "eval", "seed": 3, "value": 0.5}
    import csv as csv_mod
    with open(tmp_path / "m.csv") as fh:
        got = list(csv_mod.DictReader(fh))
    assert [r["metric"] for r in got] == ["jf", "ap"]
    import json as json_mod
    assert json_mod.loads((tmp_path / "m.json").read_text())[1]["value"] == 0.25
