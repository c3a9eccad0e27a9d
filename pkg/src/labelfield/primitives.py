"""Convex bounding primitives and ray sampling.

Three primitive kinds: oriented cuboids, ellipsoids, and convex polygons
extruded along their local y axis.  All are convex, so a ray intersects
each in at most one interval, and a sample at distance t lies inside a
primitive exactly when t falls inside that primitive's ray interval.  The
sampler exploits this: per-sample membership is interval containment, no
point tests needed on the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_EPS = 1e-12


def _identity_rotation():
    return np.eye(3, dtype=np.float64)


@dataclass
class Primitive:
    """One bounding primitive with a semantic class and optional instance id.

    kind: "cuboid" (half_extents), "ellipsoid" (semi_axes), or "polygon"
    (convex footprint in the local x-z plane, extruded over y_range).
    instance_id < 0 marks a stuff primitive.
    """

    kind: str
    class_id: int
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=_identity_rotation)
    instance_id: int = -1
    half_extents: np.ndarray | None = None
    semi_axes: np.ndarray | None = None
    footprint: np.ndarray | None = None
    y_range: tuple | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.center.shape != (3,):
            raise ConfigError("center must be a 3-vector")
        if self.rotation.shape != (3, 3) or not np.allclose(
            self.rotation @ self.rotation.T, np.eye(3), atol=1e-8
        ):
            raise ConfigError("rotation must be a 3x3 orthonormal matrix")
        if self.kind == "cuboid":
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
            if self.half_extents.shape != (3,) or not (self.half_extents > 0).all():
                raise ConfigError("cuboid needs three positive half extents")
        elif self.kind == "ellipsoid":
            self.semi_axes = np.asarray(self.semi_axes, dtype=np.float64)
            if self.semi_axes.shape != (3,) or not (self.semi_axes > 0).all():
                raise ConfigError("ellipsoid needs three positive semi axes")
        elif self.kind == "polygon":
            self.footprint = np.asarray(self.footprint, dtype=np.float64)
            if self.footprint.ndim != 2 or self.footprint.shape[0] < 3 or self.footprint.shape[1] != 2:
                raise ConfigError("polygon footprint needs at least 3 2D vertices")
            if self.y_range is None or not self.y_range[1] > self.y_range[0]:
                raise ConfigError("polygon needs a nonempty y_range")
            self._orient_and_check_convex()
        else:
            raise ConfigError(f"unknown primitive kind {self.kind!r}")
        self._planes = self._build_planes()

    def _orient_and_check_convex(self):
        v = self.footprint
        nxt = np.roll(v, -1, axis=0)
        area2 = np.sum(v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1])
        if abs(area2) < _EPS:
            raise ConfigError("polygon footprint is degenerate")
        if area2 < 0:
            self.footprint = v = v[::-1].copy()
            nxt = np.roll(v, -1, axis=0)
        e = nxt - v
        e2 = np.roll(e, -1, axis=0)
        cross = e[:, 0] * e2[:, 1] - e[:, 1] * e2[:, 0]
        if not (cross > _EPS).all():
            raise ConfigError("polygon footprint must be strictly convex")

    def _build_planes(self):
        """Local half-spaces n . u <= c whose intersection is the primitive."""
        if self.kind == "ellipsoid":
            return None
        planes = []
        if self.kind == "cuboid":
            for axis in range(3):
                for sign in (1.0, -1.0):
                    n = np.zeros(3)
                    n[axis] = sign
                    planes.append((n, self.half_extents[axis]))
        else:
            y0, y1 = self.y_range
            planes.append((np.array([0.0, 1.0, 0.0]), float(y1)))
            planes.append((np.array([0.0, -1.0, 0.0]), -float(y0)))
            v = self.footprint
            nxt = np.roll(v, -1, axis=0)
            # CCW footprint: outward edge normal is the edge direction rotated
            # clockwise in the x-z plane
            for (x1, z1), (x2, z2) in zip(v, nxt):
                n2 = np.array([z2 - z1, -(x2 - x1)])
                n2 /= np.linalg.norm(n2)
                n = np.array([n2[0], 0.0, n2[1]])
                planes.append((n, n2 @ np.array([x1, z1])))
        return [(n, float(c)) for n, c in planes]

    # -- queries ------------------------------------------------------------

    def to_local(self, points):
        return (np.atleast_2d(points) - self.center) @ self.rotation

    def contains(self, points):
        """Closed-set membership for world points, shape (N, 3) -> (N,)."""
        u = self.to_local(points)
        if self.kind == "ellipsoid":
            return ((u / self.semi_axes) ** 2).sum(axis=1) <= 1.0
        ok = np.ones(u.shape[0], dtype=bool)
        for n, c in self._planes:
            ok &= u @ n <= c + 1e-9
        return ok

    def ray_interval(self, origin, direction):
        """Entry/exit distances clipped to t >= 0, or None on a miss."""
        o = self.rotation.T @ (np.asarray(origin, np.float64) - self.center)
        d = self.rotation.T @ np.asarray(direction, np.float64)
        if self.kind == "ellipsoid":
            p0 = o / self.semi_axes
            pd = d / self.semi_axes
            a = pd @ pd
            b = 2.0 * (p0 @ pd)
            c = p0 @ p0 - 1.0
            disc = b * b - 4.0 * a * c
            if disc <= 0:
                return None
            sq = np.sqrt(disc)
            lo = (-b - sq) / (2.0 * a)
            hi = (-b + sq) / (2.0 * a)
        else:
            lo, hi = -np.inf, np.inf
            for n, c in self._planes:
                dn = n @ d
                dist = c - n @ o
                if abs(dn) < _EPS:
                    if dist < 0:
                        return None
                    continue
                t = dist / dn
                if dn > 0:
                    hi = min(hi, t)
                else:
                    lo = max(lo, t)
        lo = max(lo, 0.0)
        if hi <= lo:
            return None
        return float(lo), float(hi)

    def max_distance(self, origin):
        """Upper bound on the exit distance of any ray from `origin`."""
        o = np.asarray(origin, np.float64)
        if self.kind == "ellipsoid":
            return float(np.linalg.norm(self.center - o) + self.semi_axes.max())
        corners = self._corners()
        return float(np.linalg.norm(corners - o, axis=1).max())

    def _corners(self):
        if self.kind == "cuboid":
            signs = np.array(
                [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                dtype=np.float64,
            )
            local = signs * self.half_extents
        else:
            y0, y1 = self.y_range
            local = np.array(
                [[x, y, z] for (x, z) in self.footprint for y in (y0, y1)],
                dtype=np.float64,
            )
        return local @ self.rotation.T + self.center

    def aabb(self):
        """World axis-aligned bounding box (lo, hi)."""
        if self.kind == "ellipsoid":
            ext = np.sqrt(((self.rotation * self.semi_axes) ** 2).sum(axis=1))
            return self.center - ext, self.center + ext
        corners = self._corners()
        return corners.min(axis=0), corners.max(axis=0)

    def transformed(self, rot, shift):
        """Copy with the rigid transform x -> rot @ x + shift applied."""
        rot = np.asarray(rot, np.float64)
        return Primitive(
            kind=self.kind,
            class_id=self.class_id,
            center=rot @ self.center + np.asarray(shift, np.float64),
            rotation=rot @ self.rotation,
            instance_id=self.instance_id,
            half_extents=None if self.half_extents is None else self.half_extents.copy(),
            semi_axes=None if self.semi_axes is None else self.semi_axes.copy(),
            footprint=None if self.footprint is None else self.footprint.copy(),
            y_range=self.y_range,
        )


SKY_INDEX = -1


@dataclass(frozen=True)
class RayInterval:
    prim: int
    t_near: float
    t_far: float


def scene_t_max(primitives, origin):
    """Farthest primitive exit distance from `origin`, 0 for an empty scene."""
    if not primitives:
        return 0.0
    return max(p.max_distance(origin) for p in primitives)


def ray_intervals(origin, direction, primitives, max_keep=10, sky_span=None, t_max=None):
    """Sorted entry/exit intervals along one ray, nearest first.

    Keeps at most `max_keep` primitive intervals; when fewer are kept, a sky
    interval [t_max, t_max + sky_span] is appended.  sky_span defaults to
    0.25 * t_max (1.0 for an empty scene).
    """
    hits = []
    for i, p in enumerate(primitives):
        iv = p.ray_interval(origin, direction)
        if iv is not None:
            hits.append(RayInterval(i, iv[0], iv[1]))
    hits.sort(key=lambda h: (h.t_near, h.prim))
    kept = hits[:max_keep]
    if len(kept) < max_keep:
        if t_max is None:
            t_max = scene_t_max(primitives, origin)
        if sky_span is None:
            sky_span = 0.25 * t_max if t_max > 0 else 1.0
        kept.append(RayInterval(SKY_INDEX, float(t_max), float(t_max + sky_span)))
    return kept


def _allocate(lengths, budget):
    """Proportional largest-remainder split; every interval gets >= 1.

    If the budget cannot cover one sample per interval, the longest
    intervals win (deterministic tie-break by index).
    """
    k = len(lengths)
    lengths = np.asarray(lengths, dtype=np.float64)
    if k == 0 or budget <= 0:
        return np.zeros(k, dtype=np.int64)
    if budget < k:
        counts = np.zeros(k, dtype=np.int64)
        order = np.lexsort((np.arange(k), -lengths))
        counts[order[:budget]] = 1
        return counts
    total = lengths.sum()
    if total <= 0:
        quota = np.full(k, budget / k)
    else:
        quota = budget * lengths / total
    counts = np.maximum(np.floor(quota).astype(np.int64), 1)
    rem = quota - np.floor(quota)
    while counts.sum() > budget:
        cand = np.where(counts > 1)[0]
        j = cand[np.lexsort((cand, rem[cand]))[0]]
        counts[j] -= 1
    while counts.sum() < budget:
        j = np.lexsort((np.arange(k), -rem))[0]
        counts[j] += 1
        rem[j] -= 1.0
    return counts


@dataclass
class RayBundle:
    """Static per-ray sampling structure, reusable across jitter draws.

    Interval arrays are padded to a common width K; stratum arrays are padded
    to a common sample count S.  `stratum_itv` is -1 on padding samples.
    """

    origins: np.ndarray        # (R, 3)
    directions: np.ndarray     # (R, 3)
    itv_lo: np.ndarray         # (R, K)
    itv_hi: np.ndarray         # (R, K)
    itv_prim: np.ndarray       # (R, K) scene primitive index, SKY_INDEX for sky
    itv_class: np.ndarray      # (R, K) class id, -1 for sky/padding
    itv_instance: np.ndarray   # (R, K) instance id, -1 for none
    itv_valid: np.ndarray      # (R, K) bool
    itv_is_sky: np.ndarray     # (R, K) bool
    base: np.ndarray           # (R, S) stratum start distances
    scale: np.ndarray          # (R, S) stratum widths
    stratum_itv: np.ndarray    # (R, S) local interval index, -1 padding

    @property
    def n_rays(self):
        return self.origins.shape[0]

    @property
    def n_samples(self):
        return self.base.shape[1]


def build_ray_bundle(
    origins,
    directions,
    primitives,
    n_primitive_samples,
    n_sky_samples,
    max_keep=10,
    sky_span=None,
    t_max=None,
):
    """Intersect rays with the scene and lay out per-interval strata."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    per_ray = [
        ray_intervals(origins[r], directions[r], primitives, max_keep, sky_span, t_max)
        for r in range(n_rays)
    ]
    k_max = max((len(iv) for iv in per_ray), default=1)
    s_max = n_primitive_samples + n_sky_samples

    itv_lo = np.zeros((n_rays, k_max))
    itv_hi = np.zeros((n_rays, k_max))
    itv_prim = np.full((n_rays, k_max), -1, dtype=np.int64)
    itv_class = np.full((n_rays, k_max), -1, dtype=np.int64)
    itv_instance = np.full((n_rays, k_max), -1, dtype=np.int64)
    itv_valid = np.zeros((n_rays, k_max), dtype=bool)
    itv_is_sky = np.zeros((n_rays, k_max), dtype=bool)
    base = np.full((n_rays, s_max), 1e30)
    scale = np.zeros((n_rays, s_max))
    stratum_itv = np.full((n_rays, s_max), -1, dtype=np.int64)

    for r, intervals in enumerate(per_ray):
        prim_lengths = [iv.t_far - iv.t_near for iv in intervals if iv.prim != SKY_INDEX]
        counts = _allocate(prim_lengths, n_primitive_samples)
        col = 0
        prim_pos = 0
        for k, iv in enumerate(intervals):
            itv_lo[r, k] = iv.t_near
            itv_hi[r, k] = iv.t_far
            itv_valid[r, k] = True
            if iv.prim == SKY_INDEX:
                itv_is_sky[r, k] = True
                n_here = n_sky_samples
            else:
                itv_prim[r, k] = iv.prim
                itv_class[r, k] = primitives[iv.prim].class_id
                itv_instance[r, k] = primitives[iv.prim].instance_id
                n_here = int(counts[prim_pos])
                prim_pos += 1
            if n_here <= 0:
                continue
            width = (iv.t_far - iv.t_near) / n_here
            idx = np.arange(n_here)
            base[r, col : col + n_here] = iv.t_near + idx * width
            scale[r, col : col + n_here] = width
            stratum_itv[r, col : col + n_here] = k
            col += n_here

    return RayBundle(
        origins=origins,
        directions=directions,
        itv_lo=itv_lo,
        itv_hi=itv_hi,
        itv_prim=itv_prim,
        itv_class=itv_class,
        itv_instance=itv_instance,
        itv_valid=itv_valid,
        itv_is_sky=itv_is_sky,
        base=base,
        scale=scale,
        stratum_itv=stratum_itv,
    )


@dataclass
class SampleBatch:
    """One draw of sample positions from a RayBundle."""

    t: np.ndarray          # (R, S) distances, 0 on padding
    delta: np.ndarray      # (R, S) forward differences, 0 on padding
    positions: np.ndarray  # (R, S, 3) world points
    pad: np.ndarray        # (R, S) bool, True where no real sample
    member: np.ndarray     # (R, S, K) bool, containment in primitive intervals
    is_sky: np.ndarray     # (R, S) bool, drawn from the sky interval


def draw_samples(bundle, u=None):
    """Place one sample per stratum and sort per ray.

    u is a (R, S) uniform draw in [0, 1); None uses midpoints (0.5).  Delta
    is the distance to the next sample; the last real sample keeps its own
    stratum width.  Padding rows sort to the back and get t = 0, delta = 0.
    """
    r, s = bundle.base.shape
    if u is None:
        u = 0.5
    t_raw = bundle.base + bundle.scale * u
    order = np.argsort(t_raw, axis=1, kind="stable")
    t = np.take_along_axis(t_raw, order, axis=1)
    widths = np.take_along_axis(bundle.scale, order, axis=1)
    itv = np.take_along_axis(bundle.stratum_itv, order, axis=1)
    pad = itv < 0

    t_next = np.concatenate([t[:, 1:], np.full((r, 1), np.inf)], axis=1)
    pad_next = np.concatenate([pad[:, 1:], np.ones((r, 1), dtype=bool)], axis=1)
    delta = np.where(pad_next, widths, t_next - t)
    delta = np.where(pad, 0.0, delta)
    t = np.where(pad, 0.0, t)

    member = (
        bundle.itv_valid[:, None, :]
        & ~bundle.itv_is_sky[:, None, :]
        & (t[:, :, None] >= bundle.itv_lo[:, None, :])
        & (t[:, :, None] <= bundle.itv_hi[:, None, :])
        & ~pad[:, :, None]
    )
    sky_col = bundle.itv_is_sky.argmax(axis=1)
    has_sky = bundle.itv_is_sky.any(axis=1)
    is_sky = (itv == sky_col[:, None]) & has_sky[:, None] & ~pad

    positions = bundle.origins[:, None, :] + t[:, :, None] * bundle.directions[:, None, :]
    return SampleBatch(t=t, delta=delta, positions=positions, pad=pad, member=member, is_sky=is_sky)


def sample_along_ray(
    origin,
    direction,
    primitives,
    n_primitive_samples,
    n_sky_samples,
    max_keep=10,
    sky_span=None,
    rng=None,
):
    """Single-ray convenience wrapper over the batched sampler."""
    bundle = build_ray_bundle(
        np.asarray(origin)[None],
        np.asarray(direction)[None],
        primitives,
        n_primitive_samples,
        n_sky_samples,
        max_keep=max_keep,
        sky_span=sky_span,
    )
    u = None if rng is None else rng.random(bundle.base.shape)
    return bundle, draw_samples(bundle, u)


# ---------------------------------------------------------------------------
# Overlap statistics

_VOLUME_BINS = (1.0, 5.0, 10.0, 100.0)


@dataclass
class OverlapPair:
    index_a: int
    index_b: int
    kind: str       # "stuff-stuff" | "stuff-thing" | "thing-thing"
    volume: float


@dataclass
class OverlapReport:
    pairs: list
    counts_by_kind: dict
    counts_by_volume_bin: dict
    n_primitives: int

    def as_dict(self):
        return {
            "n_primitives": self.n_primitives,
            "n_intersecting_pairs": len(self.pairs),
            "counts_by_kind": dict(self.counts_by_kind),
            "counts_by_volume_bin": dict(self.counts_by_volume_bin),
            "pairs": [
                {"a": p.index_a, "b": p.index_b, "kind": p.kind, "volume": p.volume}
                for p in self.pairs
            ],
        }


def _volume_bin(v):
    if v < _VOLUME_BINS[0]:
        return "0-1"
    if v < _VOLUME_BINS[1]:
        return "1-5"
    if v < _VOLUME_BINS[2]:
        return "5-10"
    if v < _VOLUME_BINS[3]:
        return "10-100"
    return ">100"


def primitive_overlap_stats(primitives, mc_samples=20000, rng=None):
    """Pairwise intersection census via Monte Carlo in the shared AABB.

    A pair counts as intersecting when any sample lands inside both; its
    volume estimate is (hit fraction) * (shared AABB volume).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    boxes = [p.aabb() for p in primitives]
    pairs = []
    kinds = {"stuff-stuff": 0, "stuff-thing": 0, "thing-thing": 0}
    bins = {"0-1": 0, "1-5": 0, "5-10": 0, "10-100": 0, ">100": 0}
    for i in range(len(primitives)):
        for j in range(i + 1, len(primitives)):
            lo = np.maximum(boxes[i][0], boxes[j][0])
            hi = np.minimum(boxes[i][1], boxes[j][1])
            if (hi <= lo).any():
                continue
            pts = rng.uniform(lo, hi, size=(mc_samples, 3))
            inside = primitives[i].contains(pts) & primitives[j].contains(pts)
            frac = inside.mean()
            if frac <= 0:
                continue
            volume = float(frac * np.prod(hi - lo))
            a_thing = primitives[i].instance_id >= 0
            b_thing = primitives[j].instance_id >= 0
            kind = ("thing-thing" if a_thing and b_thing
                    else "stuff-stuff" if not a_thing and not b_thing
                    else "stuff-thing")
            pairs.append(OverlapPair(i, j, kind, volume))
            kinds[kind] += 1
            bins[_volume_bin(volume)] += 1
    return OverlapReport(
        pairs=pairs,
        counts_by_kind=kinds,
        counts_by_volume_bin=bins,
        n_primitives=len(primitives),
    )
