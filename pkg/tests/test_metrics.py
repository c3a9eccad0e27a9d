"""Evaluation metrics against brute-force oracles and hand-built fixtures."""

import json
from collections import deque

import numpy as np
import pytest

from labelfield.cameras import Camera, look_at
from labelfield.errors import ConfigError
from labelfield.metrics import (
    confusion_matrix,
    depth_metrics,
    metric_report,
    miou_acc,
    multiview_consistency,
    panoptic_quality,
    small_area_threshold,
    write_report,
)

# ---------------------------------------------------------------------------
# Semantic IoU / accuracy


def oracle_iou_acc(pred, gt, n, ignore):
    """Pixel-by-pixel double loop, no vectorization."""
    tp = np.zeros(n)
    fp = np.zeros(n)
    fn = np.zeros(n)
    correct = 0
    valid = 0
    h, w = gt.shape
    for y in range(h):
        for x in range(w):
            g = int(gt[y, x])
            p = int(pred[y, x])
            if g < 0 or g >= n or g in ignore:
                continue
            valid += 1
            if p == g:
                tp[g] += 1
                correct += 1
            else:
                fn[g] += 1
                if 0 <= p < n:
                    fp[p] += 1
    iou = np.full(n, np.nan)
    for k in range(n):
        denom = tp[k] + fp[k] + fn[k]
        if denom > 0:
            iou[k] = tp[k] / denom
    present = [k for k in range(n) if tp[k] + fn[k] > 0]
    miou = float(np.mean([iou[k] for k in present])) if present else float("nan")
    acc = correct / valid if valid else float("nan")
    return iou, miou, acc


def test_miou_matches_double_loop_oracle():
    rng = np.random.default_rng(11)
    n = 6
    gt = rng.integers(-1, n + 1, size=(48, 48))     # includes void and overflow
    pred = rng.integers(-1, n + 1, size=(48, 48))
    ignore = {4}
    want_iou, want_miou, want_acc = oracle_iou_acc(pred, gt, n, ignore)
    iou, miou, acc = miou_acc(pred, gt, n, ignore=ignore)
    np.testing.assert_allclose(iou, want_iou, rtol=0, atol=1e-12)
    assert miou == pytest.approx(want_miou, abs=1e-12)
    assert acc == pytest.approx(want_acc, abs=1e-12)


def test_miou_perfect_prediction():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 5, size=(20, 20))
    iou, miou, acc = miou_acc(gt, gt, 5)
    assert miou == 1.0 and acc == 1.0
    present = np.unique(gt)
    assert np.all(iou[present] == 1.0)


def test_miou_half_mislabeled_hand_case():
    gt = np.zeros((10, 10), np.int64)
    pred = gt.copy()
    pred[:5] = 1                       # 50 of 100 road pixels called sidewalk
    iou, miou, acc = miou_acc(pred, gt, 3)
    assert iou[0] == pytest.approx(0.5)
    assert iou[1] == 0.0               # pure false positives
    assert np.isnan(iou[2])
    assert miou == pytest.approx(0.5)  # only road is present in GT
    assert acc == pytest.approx(0.5)


def test_miou_void_pixels_excluded():
    gt = np.zeros((8, 8), np.int64)
    gt[0] = -1
    gt[1] = 2                          # ignored below
    pred = np.zeros((8, 8), np.int64)
    pred[:2] = 1                       # wrong only where GT is void
    iou, miou, acc = miou_acc(pred, gt, 3, ignore={2})
    assert miou == 1.0 and acc == 1.0
    conf = confusion_matrix(pred, gt, 3, ignore={2})
    assert conf.void == 16


def test_miou_out_of_range_prediction_counts_against():
    gt = np.zeros((4, 4), np.int64)
    pred = np.zeros((4, 4), np.int64)
    pred[0, :2] = -1
    iou, miou, acc = miou_acc(pred, gt, 2)
    assert iou[0] == pytest.approx(14 / 16)
    assert acc == pytest.approx(14 / 16)


def test_miou_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        miou_acc(np.zeros((4, 4), int), np.zeros((4, 5), int), 3)


# ---------------------------------------------------------------------------
# Multi-view consistency


def mc_camera(shift=0.0, width=20, height=15):
    return Camera(
        kind="pinhole", width=width, height=height,
        pose_r=look_at((shift, 0.0, 0.0), (shift, 0.0, 6.0)),
        pose_t=np.array([shift, 0.0, 0.0]),
        fx=12.0, fy=12.0, cx=width / 2.0, cy=height / 2.0,
    )


def test_consistency_identical_views_is_one():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 6, size=(15, 20))
    depth = np.full((15, 20), 5.0)
    cams = [mc_camera(), mc_camera()]
    assert multiview_consistency([labels, labels], [depth, depth], cams) == 1.0


def test_consistency_all_flipped_is_zero():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 6, size=(15, 20))
    flipped = (labels + 1) % 6
    depth = np.full((15, 20), 5.0)
    cams = [mc_camera(), mc_camera()]
    assert multiview_consistency([labels, flipped], [depth, depth], cams) == 0.0


def test_consistency_planted_flip_fraction():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 6, size=(15, 20))
    flipped = labels.copy()
    idx = rng.choice(300, size=30, replace=False)
    flipped.flat[idx] = (flipped.flat[idx] + 1) % 6
    depth = np.full((15, 20), 5.0)
    cams = [mc_camera(), mc_camera()]
    mc = multiview_consistency([labels, flipped], [depth, depth], cams)
    assert mc == pytest.approx(0.9, abs=1e-12)


def test_consistency_no_pairs_returns_none():
    labels = np.zeros((15, 20), np.int64)
    depth = np.full((15, 20), 5.0)
    cams = [mc_camera(0.0), mc_camera(1000.0)]   # clouds 1 km apart
    assert multiview_consistency([labels, labels], [depth, depth], cams) is None


def test_consistency_chains_consecutive_pairs():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 6, size=(15, 20))
    flipped = (labels + 1) % 6
    depth = np.full((15, 20), 5.0)
    cams = [mc_camera(), mc_camera(), mc_camera()]
    mc = multiview_consistency([labels, labels, flipped], [depth] * 3, cams)
    assert mc == pytest.approx(0.5)              # 300 of 600 pairs agree


def test_consistency_respects_valid_masks():
    # Mask out the disagreeing pixels in the second view; at 5 m the next
    # pixel over sits ~0.4 m away, beyond the 0.1 m gate, so those rays
    # simply stop pairing instead of mismatching.
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 6, size=(15, 20))
    flipped = labels.copy()
    idx = rng.choice(300, size=30, replace=False)
    flipped.flat[idx] = (flipped.flat[idx] + 1) % 6
    mask2 = np.ones(300, bool)
    mask2[idx] = False
    depth = np.full((15, 20), 5.0)
    cams = [mc_camera(), mc_camera()]
    mc = multiview_consistency(
        [labels, flipped], [depth, depth], cams,
        valid_masks=[np.ones(300, bool), mask2],
    )
    assert mc == 1.0


def test_consistency_length_mismatch_rejected():
    depth = np.full((15, 20), 5.0)
    with pytest.raises(ConfigError):
        multiview_consistency([depth], [depth, depth], [mc_camera()])


# ---------------------------------------------------------------------------
# Panoptic quality

N_CLASSES = 6
THINGS = (2, 3)
SKY = 5


def pq_setup(h=40, w=40):
    gt_c = np.zeros((h, w), np.int64)            # road everywhere
    gt_i = np.zeros((h, w), np.int64)
    return gt_c, gt_i


def test_pq_perfect_prediction_is_one():
    gt_c, gt_i = pq_setup()
    gt_c[:6] = SKY
    gt_c[20:28, 5:13] = 3
    gt_i[20:28, 5:13] = 1
    gt_c[20:28, 20:28] = 3
    gt_i[20:28, 20:28] = 2
    res = panoptic_quality(gt_c, gt_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)
    assert res["pq"] == 1.0 and res["sq"] == 1.0 and res["rq"] == 1.0
    assert res["pq_dagger"] == 1.0
    for row in res["per_class"].values():
        assert row["pq"] == 1.0 and row["fp"] == 0 and row["fn"] == 0


def test_pq_shifted_car_hand_case():
    # Car of 8 rows x 16 cols, prediction shifted 4 columns:
    # IoU = 12/20 = 0.6 exactly, so PQ=SQ=0.6 with RQ=1 for the car class.
    gt_c, gt_i = pq_setup()
    gt_c[10:18, 10:26] = 3
    gt_i[10:18, 10:26] = 1
    pr_c, pr_i = pq_setup()
    pr_c[10:18, 14:30] = 3
    pr_i[10:18, 14:30] = 1
    res = panoptic_quality(pr_c, pr_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)
    car = res["per_class"][3]
    assert car["pq"] == pytest.approx(0.6, abs=1e-12)
    assert car["sq"] == pytest.approx(0.6, abs=1e-12)
    assert car["rq"] == 1.0
    road = res["per_class"][0]
    road_iou = 1440 / 1504                        # overlap of the road masks
    assert road["pq"] == pytest.approx(road_iou, abs=1e-12)
    assert res["pq"] == pytest.approx((0.6 + road_iou) / 2, abs=1e-12)
    # Stuff term in the dagger variant is the plain semantic IoU.
    assert res["pq_dagger"] == pytest.approx((0.6 + road_iou) / 2, abs=1e-12)


def flood_segments(class_map, inst_map):
    """Independent 4-connected segmentation by breadth-first search."""
    h, w = class_map.shape
    seen = np.zeros((h, w), bool)
    segs = []
    for y0 in range(h):
        for x0 in range(w):
            if seen[y0, x0]:
                continue
            key = (class_map[y0, x0], inst_map[y0, x0])
            queue = deque([(y0, x0)])
            seen[y0, x0] = True
            pix = []
            while queue:
                y, x = queue.popleft()
                pix.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not seen[yy, xx]:
                        if (class_map[yy, xx], inst_map[yy, xx]) == key:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
            segs.append((int(key[0]), frozenset(pix)))
    return segs


def oracle_pq_counts(pr_c, pr_i, gt_c, gt_i, n_classes):
    gsegs = flood_segments(gt_c, gt_i)
    psegs = flood_segments(pr_c, pr_i)
    matches = []
    for gi, (gc, gpix) in enumerate(gsegs):
        for pi, (pc, ppix) in enumerate(psegs):
            if gc != pc:
                continue
            inter = len(gpix & ppix)
            if inter and inter / len(gpix | ppix) > 0.5:
                matches.append((gi, pi))
    counts = {}
    for k in range(n_classes):
        tp = sum(1 for g, p in matches if gsegs[g][0] == k)
        fn = sum(1 for i, (c, _) in enumerate(gsegs)
                 if c == k and i not in {g for g, _ in matches})
        fp = sum(1 for i, (c, _) in enumerate(psegs)
                 if c == k and i not in {p for _, p in matches})
        if tp + fp + fn:
            counts[k] = (tp, fp, fn)
    return counts, matches


def test_pq_counts_match_flood_fill_oracle_and_matching_is_unique():
    rng = np.random.default_rng(17)
    gt_c = np.where(rng.random((24, 24)) < 0.5, 0, 3).astype(np.int64)
    gt_i = np.where(gt_c == 3, rng.integers(1, 4, (24, 24)), 0)
    pr_c = np.where(rng.random((24, 24)) < 0.5, 0, 3).astype(np.int64)
    pr_i = np.where(pr_c == 3, rng.integers(1, 4, (24, 24)), 0)
    res = panoptic_quality(
        pr_c, pr_i, gt_c, gt_i, N_CLASSES, THINGS, SKY, small_threshold=1
    )
    want, want_matches = oracle_pq_counts(pr_c, pr_i, gt_c, gt_i, N_CLASSES)
    got = {k: (r["tp"], r["fp"], r["fn"]) for k, r in res["per_class"].items()}
    assert got == want
    gts = [g for g, _, _ in res["matches"]]
    prs = [p for _, p, _ in res["matches"]]
    assert len(gts) == len(set(gts)) and len(prs) == len(set(prs))
    assert len(res["matches"]) == len(want_matches)
    assert all(i > 0.5 for _, _, i in res["matches"])


def test_pq_equals_dagger_without_things():
    gt_c, gt_i = pq_setup()
    gt_c[:10] = SKY
    gt_c[10:20] = 1
    res = panoptic_quality(gt_c, gt_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)
    assert res["pq"] == 1.0
    assert res["pq_dagger"] == 1.0


def test_pq_small_gt_segment_becomes_void():
    gt_c, gt_i = pq_setup(20, 20)
    gt_c[5, 5:8] = 3                              # 3 px < threshold of 4
    gt_i[5, 5:8] = 1
    res = panoptic_quality(gt_c, gt_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)
    assert res["small_threshold"] == 4
    assert 3 not in res["per_class"]
    assert res["pq"] == 1.0


def test_pq_small_prediction_reassigned_to_sky():
    gt_c, gt_i = pq_setup(20, 20)
    gt_c[2:8, 2:8] = SKY
    pr_c, pr_i = gt_c.copy(), gt_i.copy()
    pr_c[3, 3:5] = 3                              # spurious 2 px car
    pr_i[3, 3:5] = 1
    res = panoptic_quality(pr_c, pr_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)
    assert 3 not in res["per_class"]
    assert set(res["per_class"]) == {0, SKY}
    assert res["pq"] == 1.0


def test_pq_void_gt_excluded():
    gt_c, gt_i = pq_setup(20, 20)
    gt_c[:4] = -1
    pr_c = np.zeros((20, 20), np.int64)
    pr_c[:4] = SKY                                # differs only on void rows
    res = panoptic_quality(pr_c, gt_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)
    assert res["pq"] == 1.0


def test_pq_missing_thing_instance_rejected():
    gt_c, gt_i = pq_setup(20, 20)
    gt_c[5:15, 5:15] = 3                          # car without an instance id
    with pytest.raises(ConfigError):
        panoptic_quality(gt_c, gt_i, gt_c, gt_i, N_CLASSES, THINGS, SKY)


def test_pq_shape_mismatch_rejected():
    a = np.zeros((8, 8), np.int64)
    b = np.zeros((8, 9), np.int64)
    with pytest.raises(ConfigError):
        panoptic_quality(a, a, b, b, N_CLASSES, THINGS, SKY)


def test_small_area_threshold_scaling():
    assert small_area_threshold(188, 704) == 100
    assert small_area_threshold(94, 352) == 25
    assert small_area_threshold(10, 10) == 4      # floor


# ---------------------------------------------------------------------------
# Depth


def test_depth_exact_prediction():
    gt = np.linspace(1.0, 50.0, 200)
    rmse, delta = depth_metrics(gt, gt)
    assert rmse == 0.0 and delta == 1.0


def test_depth_scaled_by_1p3():
    gt = np.linspace(1.0, 50.0, 200)
    rmse, delta = depth_metrics(1.3 * gt, gt)
    assert delta == 0.0                           # ratio 1.3 misses the 1.25 bar
    assert rmse == pytest.approx(0.3 * np.sqrt(np.mean(gt**2)), rel=1e-12)


def test_depth_unit_noise_on_flat_plane():
    rng = np.random.default_rng(8)
    gt = np.full(20000, 10.0)
    pred = gt + rng.normal(0.0, 1.0, size=20000)
    rmse, delta = depth_metrics(pred, gt)
    assert rmse == pytest.approx(1.0, abs=0.03)
    assert 0.95 < delta < 1.0                     # |err|>2.5 m fails the ratio


def test_depth_range_and_mask_filtering():
    gt = np.array([10.0, 0.0, -5.0, 150.0, np.inf, 10.0])
    pred = np.array([10.0, 999.0, 999.0, 999.0, 999.0, 999.0])
    valid = np.array([True, True, True, True, True, False])
    rmse, delta = depth_metrics(pred, gt, valid=valid)
    assert rmse == 0.0 and delta == 1.0           # only the first pixel counts


def test_depth_empty_selection_not_available():
    gt = np.array([0.0, 200.0])
    rmse, delta = depth_metrics(gt, gt)
    assert rmse is None and delta is None


# ---------------------------------------------------------------------------
# Report assembly


def test_metric_report_is_json_ready(tmp_path):
    report = metric_report(
        config={"seed": 1, "scene": "demo"},
        semantic={"miou": np.float64(0.5), "iou": np.array([1.0, np.nan])},
        consistency=None,
        depth={"rmse": None, "delta": 1.0},
    )
    text = json.dumps(report)
    parsed = json.loads(text)
    assert parsed["config"]["seed"] == 1
    assert parsed["semantic"]["iou"] == [1.0, None]
    assert parsed["consistency"] is None
    path = tmp_path / "report.json"
    write_report(path, report)
    assert json.loads(path.read_text())["depth"]["delta"] == 1.0
