"""Evaluation: semantic overlap, label consistency across views, panoptic
quality, and depth accuracy.

Conventions shared by all metrics here: class ids are integers in
[0, n_classes); negative or explicitly ignored ground-truth pixels are void
and excluded everywhere; instance id 0 means "no instance".
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .cameras import camera_rays
from .errors import ConfigError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# ---------------------------------------------------------------------------
# Semantic segmentation


@dataclass
class ConfusionMatrix:
    """Per-class pixel counts: counts[gt, pred], plus out-of-range tallies."""

    counts: np.ndarray        # (M, M) int64
    invalid_pred: np.ndarray  # (M,) predictions outside [0, M) per GT class
    void: int                 # GT pixels excluded from evaluation

    @property
    def n_classes(self):
        return self.counts.shape[0]

    def present(self):
        """Classes that occur in the ground truth."""
        return np.nonzero(self.counts.sum(axis=1) + self.invalid_pred > 0)[0]

    def iou(self):
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp + self.invalid_pred
        denom = tp + fp + fn
        out = np.full(self.n_classes, np.nan)
        ok = denom > 0
        out[ok] = tp[ok] / denom[ok]
        return out

    def accuracy(self):
        total = self.counts.sum() + self.invalid_pred.sum()
        if total == 0:
            return float("nan")
        return float(np.diag(self.counts).sum() / total)


def confusion_matrix(pred, gt, n_classes, ignore=()):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    gt = gt.reshape(-1)
    pred = pred.reshape(-1)
    valid = (gt >= 0) & (gt < n_classes)
    for v in ignore:
        valid &= gt != v
    void = int(np.count_nonzero(~valid))
    g = gt[valid]
    p = pred[valid]
    in_range = (p >= 0) & (p < n_classes)
    counts = np.bincount(
        g[in_range] * n_classes + p[in_range], minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)
    invalid_pred = np.bincount(g[~in_range], minlength=n_classes)
    return ConfusionMatrix(counts=counts, invalid_pred=invalid_pred, void=void)


def miou_acc(pred, gt, n_classes, ignore=()):
    """(per-class IoU, mIoU over GT-present classes, pixel accuracy)."""
    conf = confusion_matrix(pred, gt, n_classes, ignore)
    iou = conf.iou()
    present = conf.present()
    miou = float(np.nanmean(iou[present])) if present.size else float("nan")
    return iou, miou, conf.accuracy()


# ---------------------------------------------------------------------------
# Multi-view label consistency


def _unproject(camera, depth, labels, valid=None):
    origins, dirs, ray_ok = camera_rays(camera)
    depth = np.asarray(depth, np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    ok = ray_ok & np.isfinite(depth) & (depth > 0) & (labels >= 0)
    if valid is not None:
        ok &= np.asarray(valid, bool).reshape(-1)
    pts = origins[ok] + depth[ok, None] * dirs[ok]
    return pts, labels[ok]


def multiview_consistency(label_maps, depth_maps, cameras, valid_masks=None,
                          match_dist=0.1):
    """Fraction of matched pixel pairs between consecutive views that agree.

    Each valid pixel is lifted to 3D through its depth; a pixel of view t
    pairs with its nearest neighbor in view t+1 when they lie within
    match_dist meters.  Returns None when no pair forms.
    """
    n = len(label_maps)
    if not (len(depth_maps) == n and len(cameras) == n):
        raise ConfigError("label, depth, and camera lists must align")
    total = 0
    consistent = 0
    for t in range(n - 1):
        mask_t = valid_masks[t] if valid_masks is not None else None
        mask_n = valid_masks[t + 1] if valid_masks is not None else None
        pts_t, lab_t = _unproject(cameras[t], depth_maps[t], label_maps[t], mask_t)
        pts_n, lab_n = _unproject(cameras[t + 1], depth_maps[t + 1], label_maps[t + 1], mask_n)
        if pts_t.shape[0] == 0 or pts_n.shape[0] == 0:
            continue
        tree = cKDTree(pts_n)
        dist, j = tree.query(pts_t, k=1)
        hit = dist <= match_dist
        total += int(hit.sum())
        consistent += int((lab_t[hit] == lab_n[j[hit]]).sum())
    if total == 0:
        return None
    return consistent / total


# ---------------------------------------------------------------------------
# Panoptic quality


def small_area_threshold(height, width):
    """Resolution-scaled minimum segment size (floor 4 pixels)."""
    return max(4, int(round(100.0 * height * width / (704.0 * 188.0))))


def _label_segments(class_map, inst_map, void):
    """4-connected components per (class, instance): id map and tables."""
    seg_id = np.full(class_map.shape, -1, np.int64)
    seg_class = []
    seg_area = []
    live = ~void
    pairs = np.unique(
        np.stack([class_map[live], inst_map[live]], axis=1), axis=0
    ) if live.any() else np.zeros((0, 2), np.int64)
    next_id = 0
    for c, i in pairs:
        mask = (class_map == c) & (inst_map == i) & live
        comps, n = ndimage.label(mask, structure=_CROSS)
        for k in range(1, n + 1):
            sel = comps == k
            seg_id[sel] = next_id
            seg_class.append(int(c))
            seg_area.append(int(sel.sum()))
            next_id += 1
    return seg_id, np.array(seg_class, np.int64), np.array(seg_area, np.int64)


def panoptic_quality(
    pred_class,
    pred_inst,
    gt_class,
    gt_inst,
    n_classes,
    thing_classes,
    sky_class,
    ignore=(),
    small_threshold=None,
):
    """PQ family over 4-connected (class, instance) segments.

    Ground-truth segments below the size threshold become void; predicted
    segments below it are relabeled sky before matching.  Segments match
    when their IoU exceeds 0.5, which makes every match unique.  The PQ†
    aggregate swaps each stuff class's term for its plain semantic IoU.
    """
    pred_class = np.asarray(pred_class, np.int64).copy()
    pred_inst = np.asarray(pred_inst, np.int64).copy()
    gt_class = np.asarray(gt_class, np.int64)
    gt_inst = np.asarray(gt_inst, np.int64)
    if not (pred_class.shape == pred_inst.shape == gt_class.shape == gt_inst.shape):
        raise ConfigError("panoptic maps must share one shape")
    h, w = gt_class.shape
    if small_threshold is None:
        small_threshold = small_area_threshold(h, w)
    thing_classes = set(int(c) for c in thing_classes)

    void = gt_class < 0
    for v in ignore:
        void |= gt_class == v

    things_gt = np.isin(gt_class, list(thing_classes)) & ~void
    if (things_gt & (gt_inst <= 0)).any():
        raise ConfigError("ground-truth thing pixels need instance ids")

    # Undersized GT segments become void.
    gseg, _, gareas = _label_segments(gt_class, gt_inst, void)
    for s in np.nonzero(gareas < small_threshold)[0]:
        void |= gseg == s
    # Undersized predicted segments turn into sky.
    pseg, _, pareas = _label_segments(pred_class, pred_inst, void)
    for s in np.nonzero(pareas < small_threshold)[0]:
        sel = pseg == s
        pred_class[sel] = sky_class
        pred_inst[sel] = 0

    gt_seg, gt_cls, gt_area = _label_segments(gt_class, gt_inst, void)
    pr_seg, pr_cls, pr_area = _label_segments(pred_class, pred_inst, void)

    both = (gt_seg >= 0) & (pr_seg >= 0)
    n_pr = max(pr_cls.size, 1)
    inter = np.bincount(
        gt_seg[both] * n_pr + pr_seg[both],
        minlength=max(gt_cls.size, 1) * n_pr,
    )

    matches = []
    gt_matched = np.zeros(gt_cls.size, bool)
    pr_matched = np.zeros(pr_cls.size, bool)
    for flat in np.nonzero(inter)[0]:
        g, p = divmod(int(flat), n_pr)
        if gt_cls[g] != pr_cls[p]:
            continue
        iou = inter[flat] / (gt_area[g] + pr_area[p] - inter[flat])
        if iou > 0.5:
            matches.append((g, p, float(iou)))
            gt_matched[g] = True
            pr_matched[p] = True

    per_class = {}
    for k in range(n_classes):
        tp = sum(1 for g, p, _ in matches if gt_cls[g] == k)
        iou_sum = sum(i for g, p, i in matches if gt_cls[g] == k)
        fn = int(((gt_cls == k) & ~gt_matched).sum())
        fp = int(((pr_cls == k) & ~pr_matched).sum())
        if tp + fp + fn == 0:
            continue
        denom = tp + 0.5 * fp + 0.5 * fn
        per_class[k] = {
            "pq": iou_sum / denom,
            "sq": iou_sum / tp if tp else 0.0,
            "rq": tp / denom,
            "tp": tp,
            "fp": fp,
            "fn": fn,
        }

    sem_iou = confusion_matrix(
        np.where(void, -1, pred_class), np.where(void, -1, gt_class), n_classes
    ).iou()
    dagger_terms = []
    for k, row in per_class.items():
        if k in thing_classes:
            dagger_terms.append(row["pq"])
        else:
            term = sem_iou[k]
            dagger_terms.append(0.0 if np.isnan(term) else float(term))

    def agg(key):
        vals = [row[key] for row in per_class.values()]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "per_class": per_class,
        "pq": agg("pq"),
        "sq": agg("sq"),
        "rq": agg("rq"),
        "pq_dagger": float(np.mean(dagger_terms)) if dagger_terms else float("nan"),
        "matches": matches,
        "small_threshold": int(small_threshold),
    }


# ---------------------------------------------------------------------------
# Depth


def depth_metrics(pred, gt, valid=None, lo=0.0, hi=100.0):
    """(RMSE, delta<1.25) over valid pixels with GT depth inside (lo, hi)."""
    pred = np.asarray(pred, np.float64).reshape(-1)
    gt = np.asarray(gt, np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ConfigError("depth maps must share one shape")
    sel = (gt > lo) & (gt < hi) & np.isfinite(gt) & np.isfinite(pred)
    if valid is not None:
        sel &= np.asarray(valid, bool).reshape(-1)
    if not sel.any():
        return None, None
    p, g = pred[sel], gt[sel]
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(np.isfinite(ratio), ratio, np.inf)
    delta = float(np.mean(ratio < 1.25))
    return rmse, delta


# ---------------------------------------------------------------------------
# Report assembly


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def metric_report(config=None, **sections):
    """JSON-ready report: one key per metric family plus the config echo."""
    report = {"config": _jsonable(config or {})}
    for name, value in sections.items():
        report[name] = _jsonable(value)
    return report


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
