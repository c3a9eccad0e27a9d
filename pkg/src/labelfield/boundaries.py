"""Straightening of rendered instance boundaries between adjacent buildings.

Rendered instance maps separate neighboring buildings with a jagged seam.
Because real building walls meet along a vertical plane, the seam in an
upright view is a near-vertical straight line: we sample the seam pixels,
fit column = slope * row + intercept by least squares (ignoring the top of
the seam, where eaves and vegetation corrupt it, and a sliver at the
bottom), and reassign the two instances' pixels to the fitted line's sides.
The result is the pseudo instance target used during finetuning.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class BoundaryFit:
    """Fitted seam between one instance pair: column = slope * row + intercept."""

    pair: tuple
    points: np.ndarray      # (N, 2) rows, cols of sampled boundary pixels
    slope: float
    intercept: float
    exclude_top: float
    exclude_bottom: float
    rms: float
    n_used: int

    def column_at(self, rows):
        return self.slope * np.asarray(rows, np.float64) + self.intercept


def extract_boundary(instance_map, pair):
    """Pixels of either instance with a 4-neighbor of the other; (N, 2) array."""
    m = np.asarray(instance_map)
    a, b = pair
    is_a = m == a
    is_b = m == b

    def touches(src, other):
        near = np.zeros_like(src)
        near[:-1, :] |= other[1:, :]
        near[1:, :] |= other[:-1, :]
        near[:, :-1] |= other[:, 1:]
        near[:, 1:] |= other[:, :-1]
        return src & near

    on_seam = touches(is_a, is_b) | touches(is_b, is_a)
    rows, cols = np.nonzero(on_seam)
    return np.stack([rows, cols], axis=1)


def fit_boundary_line(points, exclude_top=0.3, exclude_bottom=0.1, pair=()):
    """Least-squares seam line through boundary pixels, or None when rejected.

    The top `exclude_top` and bottom `exclude_bottom` fractions of the
    seam's row extent are dropped before fitting.  Horizontal residuals are
    minimized, which keeps near-vertical seams well conditioned.  Fewer than
    two remaining points, or points on a single row, reject the fit.
    """
    pts = np.asarray(points)
    if pts.shape[0] < 2:
        return None
    rows = pts[:, 0].astype(np.float64)
    cols = pts[:, 1].astype(np.float64)
    lo, hi = rows.min(), rows.max()
    extent = hi - lo
    keep = (rows >= lo + exclude_top * extent) & (rows <= hi - exclude_bottom * extent)
    rows_k, cols_k = rows[keep], cols[keep]
    if rows_k.size < 2 or np.unique(rows_k).size < 2:
        return None
    design = np.stack([rows_k, np.ones_like(rows_k)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, cols_k, rcond=None)
    resid = cols_k - (slope * rows_k + intercept)
    rms = float(np.sqrt(np.mean(resid**2)))
    if not np.isfinite(rms):
        return None
    return BoundaryFit(
        pair=tuple(pair),
        points=pts,
        slope=float(slope),
        intercept=float(intercept),
        exclude_top=float(exclude_top),
        exclude_bottom=float(exclude_bottom),
        rms=rms,
        n_used=int(rows_k.size),
    )


def remap_pair(instance_map, fit, pair=None):
    """Reassign one pair's pixels to the sides of the fitted seam.

    The instance whose original centroid lies left of the line keeps the
    left side.  A line that passes through a centroid (or leaves both
    centroids on one side) is degenerate: the map is returned unchanged
    with a warning.  Pixels outside the pair's support are untouched.
    """
    m = np.asarray(instance_map)
    a, b = pair if pair is not None else fit.pair
    out = m.copy()
    support = (m == a) | (m == b)
    if not support.any():
        return out

    def offset(instance):
        rows, cols = np.nonzero(m == instance)
        return cols.mean() - fit.column_at(rows.mean())

    off_a, off_b = offset(a), offset(b)
    if off_a == 0.0 or off_b == 0.0 or (off_a < 0) == (off_b < 0):
        warnings.warn(f"seam between {a} and {b} does not separate the centroids")
        return out
    left_id, right_id = (a, b) if off_a < 0 else (b, a)
    rows, cols = np.nonzero(support)
    left = cols < fit.column_at(rows)
    out[rows[left], cols[left]] = left_id
    out[rows[~left], cols[~left]] = right_id
    return out


def adjacent_pairs(instance_map):
    """All instance pairs with a shared seam, with their seam pixel counts."""
    m = np.asarray(instance_map)
    ids = np.unique(m[m > 0])
    out = []
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            n = extract_boundary(m, (int(a), int(b))).shape[0]
            if n > 0:
                out.append(((int(a), int(b)), n))
    return out


def refine_all(
    instance_map,
    min_boundary=20,
    exclude_top=0.3,
    exclude_bottom=0.1,
    max_rms=8.0,
    debug_csv=None,
    return_fits=False,
):
    """Straighten every adjacent instance pair's seam; returns the new map.

    Pairs are processed in descending seam-length order.  A pair is left
    unmodified when its seam is shorter than min_boundary, the fit is
    rejected, the residual RMS exceeds max_rms, or the remap would delete
    one of the instances.  The set of instance ids present never changes,
    and zero-labeled pixels are never written.
    """
    out = np.asarray(instance_map, np.int64).copy()
    pairs = adjacent_pairs(out)
    pairs.sort(key=lambda item: (-item[1], item[0]))
    records = []
    for (a, b), _ in pairs:
        points = extract_boundary(out, (a, b))
        fit = (
            fit_boundary_line(points, exclude_top, exclude_bottom, pair=(a, b))
            if points.shape[0] >= min_boundary
            else None
        )
        applied = False
        if fit is not None and fit.rms <= max_rms:
            candidate = remap_pair(out, fit)
            if (candidate == a).any() and (candidate == b).any():
                out = candidate
                applied = True
        records.append((fit, applied, (a, b), points.shape[0]))
    if debug_csv is not None:
        _write_debug_csv(debug_csv, records)
    if return_fits:
        return out, [(fit, applied) for fit, applied, _, _ in records]
    return out


def _write_debug_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id_a", "id_b", "boundary_pixels", "slope", "intercept",
                         "rms", "n_used", "applied"])
        for fit, applied, (a, b), n_pixels in records:
            if fit is None:
                writer.writerow([a, b, n_pixels, "", "", "", "", False])
            else:
                writer.writerow([a, b, n_pixels, fit.slope, fit.intercept,
                                 fit.rms, fit.n_used, applied])


def make_refiner(
    building_class,
    band=6.0,
    min_boundary=20,
    exclude_top=0.3,
    exclude_bottom=0.1,
    max_rms=8.0,
):
    """Training callback: rendered label maps -> per-pixel instance targets.

    Only pixels of the building class participate.  Supervision is limited
    to a horizontal band of `band` pixels around each applied seam, where
    the refined labels actually disagree with the renderer's; elsewhere the
    target stays -1.  Targets use instance channel indices (map id - 1).
    Returns None when the view offers no seams to refine.
    """

    def refiner(class_map, instance_map):
        class_map = np.asarray(class_map)
        instance_map = np.asarray(instance_map)
        building = (class_map == building_class) & (instance_map > 0)
        masked = np.where(building, instance_map, 0)
        refined, fits = refine_all(
            masked,
            min_boundary=min_boundary,
            exclude_top=exclude_top,
            exclude_bottom=exclude_bottom,
            max_rms=max_rms,
            return_fits=True,
        )
        applied = [fit for fit, ok in fits if ok and fit is not None]
        if not applied:
            return None
        target = np.full(instance_map.shape, -1, np.int64)
        rows, cols = np.indices(instance_map.shape)
        for fit in applied:
            a, b = fit.pair
            support = (refined == a) | (refined == b)
            near = np.abs(cols - fit.column_at(rows)) <= band
            sel = support & near
            target[sel] = refined[sel] - 1
        if not (target >= 0).any():
            return None
        return target

    return refiner
