"""Scene bundles: raster file formats, a procedural street generator with an
analytic first-hit renderer, pseudo-label corruption, and disk persistence.

A bundle directory looks like:

    scene.json            geometry, cameras, class table, exposures
    views/<name>.rgb.ppm  training image (8-bit P6)
    views/<name>.sem.pgm  pseudo semantic labels (16-bit P5, 65535 = unlabeled)
    views/<name>.depth.lfdp   pseudo depth (raw f32; 0 = invalid), optional
    gt/<name>.sem.pgm     analytic ground truth, optional
    gt/<name>.inst.pgm
    gt/<name>.depth.lfdp
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cameras import Camera, camera_rays, look_at
from .errors import ConfigError, ParseError
from .primitives import Primitive
from .training import SceneData, TrainView

# Default street taxonomy.  Sky must stay last: rays that miss everything
# report it, and small spurious predictions collapse into it.
ROAD, SIDEWALK, BUILDING, CAR, VEGETATION, SKY = range(6)

_LABEL_SENTINEL = 65535          # encodes label -1 inside 16-bit rasters
_PANOPTIC_BASE = 1024            # packed value = class * base + instance


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    thing: bool
    color: tuple


def default_classes():
    return [
        ClassDef(ROAD, "road", False, (90, 90, 90)),
        ClassDef(SIDEWALK, "sidewalk", False, (170, 170, 170)),
        ClassDef(BUILDING, "building", True, (200, 120, 60)),
        ClassDef(CAR, "car", True, (40, 80, 200)),
        ClassDef(VEGETATION, "vegetation", False, (60, 160, 60)),
        ClassDef(SKY, "sky", False, (140, 190, 240)),
    ]


# ---------------------------------------------------------------------------
# Raster formats


def _next_token(data, off, path):
    n = len(data)
    while off < n:
        c = data[off:off + 1]
        if c == b"#":
            while off < n and data[off:off + 1] != b"\n":
                off += 1
        elif c.isspace():
            off += 1
        else:
            break
    start = off
    while off < n and not data[off:off + 1].isspace():
        off += 1
    if start == off:
        raise ParseError(f"{path}: missing header token at offset {start}")
    return data[start:off], off


def _read_header(data, path, magic):
    if data[:2] != magic:
        raise ParseError(f"{path}: expected {magic.decode()} at offset 0")
    off = 2
    vals = []
    for _ in range(3):
        tok, off = _next_token(data, off, path)
        try:
            vals.append(int(tok))
        except ValueError:
            raise ParseError(f"{path}: bad header token {tok!r} at offset {off}")
    return vals[0], vals[1], vals[2], off + 1   # one whitespace ends the header


def write_ppm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ConfigError("PPM writer needs a uint8 (H, W, 3) array")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, path, b"P6")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    if len(data) - off < need:
        raise ParseError(f"{path}: truncated payload at offset {off}: "
                         f"need {need} bytes, have {len(data) - off}")
    return np.frombuffer(data[off:off + need], np.uint8).reshape(h, w, 3).copy()


def write_pgm16(path, values):
    values = np.asarray(values)
    if values.dtype != np.uint16 or values.ndim != 2:
        raise ConfigError("PGM writer needs a uint16 (H, W) array")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(values.astype(">u2").tobytes())


def read_pgm16(path):
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, path, b"P5")
    if maxval != 65535:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 2
    if len(data) - off < need:
        raise ParseError(f"{path}: truncated payload at offset {off}: "
                         f"need {need} bytes, have {len(data) - off}")
    return np.frombuffer(data[off:off + need], ">u2").reshape(h, w).astype(np.uint16)


_DEPTH_MAGIC = b"LFDP"


def write_depth_raster(path, depth):
    depth = np.asarray(depth, np.float32)
    if depth.ndim != 2:
        raise ConfigError("depth writer needs a 2D array")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(np.ascontiguousarray(depth, "<f4").tobytes())


def read_depth_raster(path):
    data = Path(path).read_bytes()
    if data[:4] != _DEPTH_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r} at offset 0")
    if len(data) < 16:
        raise ParseError(f"{path}: truncated header at offset {len(data)}")
    w, h, _ = struct.unpack_from("<III", data, 4)
    need = w * h * 4
    if len(data) - 16 < need:
        raise ParseError(f"{path}: truncated payload at offset 16: "
                         f"need {need} bytes, have {len(data) - 16}")
    return np.frombuffer(data[16:16 + need], "<f4").reshape(h, w).copy()


def encode_labels(labels):
    """int labels (may be -1) -> uint16 raster values."""
    labels = np.asarray(labels, np.int64)
    if labels.max(initial=0) >= _LABEL_SENTINEL:
        raise ConfigError("label id too large for 16-bit storage")
    out = labels.astype(np.int64).copy()
    out[out < 0] = _LABEL_SENTINEL
    return out.astype(np.uint16)


def decode_labels(values):
    out = np.asarray(values).astype(np.int64)
    out[out == _LABEL_SENTINEL] = -1
    return out


def pack_panoptic(class_map, instance_map):
    """(class, instance) -> one uint16 value; invalid class -> 65535."""
    cls = np.asarray(class_map, np.int64)
    inst = np.asarray(instance_map, np.int64)
    if (inst < 0).any() or inst.max(initial=0) >= _PANOPTIC_BASE:
        raise ConfigError(f"instance ids must lie in [0, {_PANOPTIC_BASE})")
    packed = cls * _PANOPTIC_BASE + inst
    if packed.max(initial=0) >= _LABEL_SENTINEL:
        raise ConfigError("class id too large to pack")
    packed = np.where(cls < 0, _LABEL_SENTINEL, packed)
    return packed.astype(np.uint16)


def unpack_panoptic(values):
    v = np.asarray(values).astype(np.int64)
    invalid = v == _LABEL_SENTINEL
    cls = np.where(invalid, -1, v // _PANOPTIC_BASE)
    inst = np.where(invalid, 0, v % _PANOPTIC_BASE)
    return cls, inst


# ---------------------------------------------------------------------------
# Bundle


@dataclass
class SceneBundle:
    """Primitive annotations, cameras, training rasters, and optional
    analytic ground truth (filled by the generator, absent for real data)."""

    classes: list
    sky_class: int
    primitives: list
    cameras: list
    exposures: list
    images: dict = field(default_factory=dict)        # name -> uint8 (H,W,3)
    pseudo_sem: dict = field(default_factory=dict)    # name -> int64 (H,W)
    pseudo_depth: dict = field(default_factory=dict)  # name -> f32, 0 invalid
    gt_sem: dict = field(default_factory=dict)
    gt_inst: dict = field(default_factory=dict)
    gt_depth: dict = field(default_factory=dict)
    building_class: int | None = None

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def thing_classes(self):
        return tuple(c.id for c in self.classes if c.thing)

    @property
    def palette(self):
        out = np.zeros((self.n_classes, 3), np.uint8)
        for c in self.classes:
            out[c.id] = c.color
        return out

    @property
    def has_gt(self):
        return bool(self.gt_sem)

    def camera_by_name(self, name):
        for cam in self.cameras:
            if cam.name == name:
                return cam
        raise ConfigError(f"no camera named {name!r}")

    def validate(self):
        ids = sorted(c.id for c in self.classes)
        if ids != list(range(len(ids))):
            raise ConfigError(f"class ids must be contiguous from 0, got {ids}")
        known = set(ids)
        for slot, cid in (("sky_class", self.sky_class),
                          ("building_class", self.building_class)):
            if cid is not None and cid not in known:
                raise ConfigError(f"{slot} references undefined class id {cid}")
        for p in self.primitives:
            if p.class_id not in known:
                raise ConfigError(
                    f"primitive references undefined class id {p.class_id}")
        seen = set()
        for cam in self.cameras:
            if not cam.name:
                raise ConfigError("every camera needs a name")
            if cam.name in seen:
                raise ConfigError(f"duplicate camera name {cam.name!r}")
            seen.add(cam.name)
            if not 0 <= cam.frame_index < max(len(self.exposures), 1):
                raise ConfigError(f"camera {cam.name!r} frame index out of range")
            shape = (cam.height, cam.width)
            for store, want in ((self.images, shape + (3,)),
                                (self.pseudo_sem, shape),
                                (self.pseudo_depth, shape),
                                (self.gt_sem, shape), (self.gt_inst, shape),
                                (self.gt_depth, shape)):
                if cam.name in store and store[cam.name].shape != want:
                    raise ConfigError(
                        f"raster for {cam.name!r} has shape "
                        f"{store[cam.name].shape}, camera expects {want}")
        keyed = {}
        for cam in self.cameras:
            key = (cam.role, cam.frame_index)
            if key in keyed:
                raise ConfigError(f"two cameras share role/frame {key}")
            keyed[key] = cam.name
        for label_map in list(self.pseudo_sem.values()) + list(self.gt_sem.values()):
            bad = np.setdiff1d(np.unique(label_map), np.arange(-1, self.n_classes))
            if bad.size:
                raise ConfigError(f"raster references undefined class id {bad[0]}")
        return self

    def to_scene_data(self):
        views = []
        for cam in self.cameras:
            if cam.name not in self.images:
                raise ConfigError(f"camera {cam.name!r} has no image")
            depth = self.pseudo_depth.get(cam.name)
            views.append(TrainView(
                camera=cam,
                rgb=self.images[cam.name].astype(np.float32) / 255.0,
                sem=self.pseudo_sem.get(cam.name),
                depth=None if depth is None else depth.astype(np.float64),
            ))
        return SceneData(
            primitives=self.primitives,
            n_classes=self.n_classes,
            sky_class=self.sky_class,
            views=views,
            thing_classes=self.thing_classes,
            building_class=self.building_class,
        )


# ---------------------------------------------------------------------------
# Analytic first-hit renderer


def _checker(points):
    """0.7 / 1.0 texture from 1 m (0.5 m vertical) world-space cells."""
    cells = (np.floor(points[:, 0]) + np.floor(2.0 * points[:, 1])
             + np.floor(points[:, 2]))
    return np.where(cells.astype(np.int64) % 2 == 0, 1.0, 0.7)


def oracle_render(primitives, camera, palette, sky_class, exposure=1.0):
    """Per-pixel first hit over opaque primitives (smallest entry distance).

    Returns rgb (uint8), depth (f32, 0 on sky/invalid), sem (int64, -1 on
    invalid rays), inst (int64, 0 where no instance).
    """
    origins, dirs, valid = camera_rays(camera)
    n = origins.shape[0]
    depth = np.zeros(n, np.float64)
    sem = np.full(n, -1, np.int64)
    inst = np.zeros(n, np.int64)
    hit_prim = np.full(n, -1, np.int64)
    for i in range(n):
        if not valid[i]:
            continue
        best_t = np.inf
        best = -1
        for j, prim in enumerate(primitives):
            iv = prim.ray_interval(origins[i], dirs[i])
            if iv is not None and iv[0] < best_t:
                best_t = iv[0]
                best = j
        if best >= 0:
            depth[i] = best_t
            sem[i] = primitives[best].class_id
            inst[i] = primitives[best].instance_id + 1 \
                if primitives[best].instance_id >= 0 else 0
            hit_prim[i] = best
        else:
            sem[i] = sky_class

    palette = np.asarray(palette, np.float64) / 255.0
    rgb = np.zeros((n, 3), np.float64)
    hit = hit_prim >= 0
    if hit.any():
        pts = origins[hit] + depth[hit, None] * dirs[hit]
        rgb[hit] = palette[sem[hit]] * _checker(pts)[:, None]
    no_hit = valid & ~hit
    rgb[no_hit] = palette[sky_class]
    rgb = np.clip(rgb * exposure, 0.0, 1.0)
    h, w = camera.height, camera.width
    return {
        "rgb": np.round(rgb * 255.0).astype(np.uint8).reshape(h, w, 3),
        "depth": depth.astype(np.float32).reshape(h, w),
        "sem": sem.reshape(h, w),
        "inst": inst.reshape(h, w),
    }


# ---------------------------------------------------------------------------
# Procedural street scenes


@dataclass(frozen=True)
class SceneSpec:
    """Layout knobs for the procedural street."""

    n_buildings: int = 2
    n_cars: int = 1
    n_trees: int = 1
    adjacent: bool = False      # first two buildings share a wall plane
    overlap: bool = False       # first car box sinks flush into the road box
    n_frames: int = 2
    width: int = 64
    height: int = 64

    def __post_init__(self):
        for name in ("n_buildings", "n_cars", "n_trees"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_frames < 1:
            raise ConfigError("need at least one frame")
        if self.width < 8 or self.height < 8:
            raise ConfigError("resolution too small")

    def with_overrides(self, **kw):
        return replace(self, **kw)


def _street_primitives(spec, rng):
    prims = [Primitive(
        kind="polygon", class_id=ROAD, center=(0.0, 0.0, 0.0),
        footprint=[(-3.0, -4.0), (-2.85, 34.0), (2.85, 34.0), (3.0, -4.0)],
        y_range=(-0.25, 0.0),
    )]
    for side in (-1.0, 1.0):
        prims.append(Primitive(
            kind="cuboid", class_id=SIDEWALK,
            center=(side * 4.0, -0.075, 15.0),
            half_extents=(1.0, 0.15, 19.0),
        ))

    next_instance = 0
    z = 3.0
    start = 0
    if spec.adjacent and spec.n_buildings >= 2:
        # Two equal buildings share the straight party wall z = 14.5, placed
        # deep enough that the seam falls inside the forward cameras' view
        # cone (the boundary refiner only fits undistorted perspective
        # views).  Near the roof the first building's box drifts over the
        # wall the way hand-drawn boxes absorb an eave, so the instance
        # seam is bent at the top while the wall itself stays straight.
        eave_y, eave_dz = 3.7, 2.2
        boxes = [
            (10.5, 14.5, 0.0, eave_y),
            (10.5, 14.5 + eave_dz, eave_y, 5.0),
            (14.5, 18.5, 0.0, eave_y),
            (14.5 + eave_dz, 18.5, eave_y, 5.0),
        ]
        for inst, (z0, z1, y0, y1) in zip((0, 0, 1, 1), boxes):
            prims.append(Primitive(
                kind="cuboid", class_id=BUILDING, instance_id=inst,
                center=(7.0, (y0 + y1) / 2.0, (z0 + z1) / 2.0),
                half_extents=(1.5, (y1 - y0) / 2.0, (z1 - z0) / 2.0),
            ))
        next_instance = 2
        start = 2
        z = 21.0
    for k in range(start, spec.n_buildings):
        height = 3.0 + 1.5 * rng.random()
        side = -1.0 if k % 2 else 1.0
        prims.append(Primitive(
            kind="cuboid", class_id=BUILDING, instance_id=next_instance,
            center=(side * 7.0, height / 2.0, z),
            half_extents=(1.5, height / 2.0, 2.0),
        ))
        next_instance += 1
        z += 4.5

    for k in range(spec.n_cars):
        if spec.overlap and k == 0:
            # Coarse box over plain road: buried with its top flush at the
            # road surface, so visible surface samples sit in both boxes.
            prims.append(Primitive(
                kind="cuboid", class_id=CAR, instance_id=next_instance,
                center=(0.9, -0.4, 6.0), half_extents=(0.9, 0.4, 1.5),
            ))
        else:
            side = -1.2 if k % 2 else 1.2
            prims.append(Primitive(
                kind="cuboid", class_id=CAR, instance_id=next_instance,
                center=(side, 0.45, 4.0 + 5.0 * k),
                half_extents=(0.8, 0.45, 1.6),
            ))
        next_instance += 1

    for k in range(spec.n_trees):
        side = -1.0 if k % 2 else 1.0
        r = 0.7 + 0.3 * rng.random()
        prims.append(Primitive(
            kind="ellipsoid", class_id=VEGETATION,
            center=(side * 5.6, 2.0, 5.0 + 6.0 * k),
            semi_axes=(r, 1.4 * r, r),
        ))
    return prims


def _frame_cameras(spec, frame):
    z = 1.5 * frame
    w, h = spec.width, spec.height
    cams = []
    for role, dx in (("persp_left", -0.25), ("persp_right", 0.25)):
        pos = (dx, 1.2, z)
        cams.append(Camera(
            kind="pinhole", width=w, height=h,
            pose_r=look_at(pos, (dx, 0.9, z + 8.0)), pose_t=np.array(pos),
            fx=0.75 * w, fy=0.75 * w, cx=w / 2.0, cy=h / 2.0,
            frame_index=frame, role=role, name=f"{role}_{frame:02d}",
        ))
    for role, sx in (("fisheye_left", -1.0), ("fisheye_right", 1.0)):
        pos = (sx * 0.3, 1.2, z)
        target = (sx * 8.0, 0.2, z + 1.0)
        cams.append(Camera(
            kind="fisheye", width=w, height=h,
            pose_r=look_at(pos, target), pose_t=np.array(pos),
            focal=(w / 2.0) / 1.45, cx=w / 2.0, cy=h / 2.0, max_theta=1.45,
            frame_index=frame, role=role, name=f"{role}_{frame:02d}",
        ))
    return cams


def gen_scene(seed, spec=None):
    """Deterministic street scene with analytic ground truth for every view."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    primitives = _street_primitives(spec, rng)
    cameras = []
    for f in range(spec.n_frames):
        cameras.extend(_frame_cameras(spec, f))
    exposures = [1.0 + 0.12 * np.sin(1.7 * f + 0.4) for f in range(spec.n_frames)]

    bundle = SceneBundle(
        classes=default_classes(), sky_class=SKY, primitives=primitives,
        cameras=cameras, exposures=exposures, building_class=BUILDING,
    )
    for cam in cameras:
        out = oracle_render(primitives, cam, bundle.palette, SKY,
                            exposure=exposures[cam.frame_index])
        bundle.images[cam.name] = out["rgb"]
        bundle.gt_sem[cam.name] = out["sem"]
        bundle.gt_inst[cam.name] = out["inst"]
        bundle.gt_depth[cam.name] = out["depth"]
        bundle.pseudo_sem[cam.name] = out["sem"].copy()
        bundle.pseudo_depth[cam.name] = out["depth"].copy()
    return bundle.validate()


# ---------------------------------------------------------------------------
# Pseudo-label corruption


@dataclass(frozen=True)
class NoiseSpec:
    boundary_dilate_px: int = 0
    flip_rate: float = 0.0
    region_swap_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ConfigError("flip_rate must lie in [0, 1]")
        if self.boundary_dilate_px < 0 or self.region_swap_count < 0:
            raise ConfigError("noise counts must be >= 0")


def confusable_classes(n_classes):
    """Default confusion partners: road<->sidewalk, building<->car, the rest
    map to an adjacent id."""
    table = np.arange(n_classes)
    table = (table + 1) % n_classes
    for a, b in ((ROAD, SIDEWALK), (BUILDING, CAR)):
        if a < n_classes and b < n_classes:
            table[a], table[b] = b, a
    return table


def corrupt_labels(labels, noise, rng, n_classes, confusable=None):
    """Boundary dilation, confusable flips, and blob swaps, seed-driven."""
    out = np.asarray(labels, np.int64).copy()
    h, w = out.shape
    if confusable is None:
        confusable = confusable_classes(n_classes)

    for _ in range(noise.boundary_dilate_px):
        dy, dx = ((0, 1), (0, -1), (1, 0), (-1, 0))[rng.integers(4)]
        shifted = np.roll(out, (dy, dx), axis=(0, 1))
        adopt = (shifted != out) & (shifted >= 0) & (out >= 0)
        adopt &= rng.random((h, w)) < 0.5
        out[adopt] = shifted[adopt]

    if noise.flip_rate > 0:
        flip = (rng.random((h, w)) < noise.flip_rate) & (out >= 0)
        out[flip] = np.asarray(confusable)[out[flip]]

    for _ in range(noise.region_swap_count):
        cy = int(rng.integers(h))
        cx = int(rng.integers(w))
        radius = int(rng.integers(2, 7))
        target = int(rng.integers(n_classes))
        yy, xx = np.mgrid[0:h, 0:w]
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius) & (out >= 0)
        if out[cy, cx] == target:
            target = (target + 1) % n_classes
        out[blob] = target
    return out


# ---------------------------------------------------------------------------
# Persistence


def primitive_to_dict(p):
    d = {"kind": p.kind, "class_id": p.class_id, "instance_id": p.instance_id,
         "center": p.center.tolist(), "rotation": p.rotation.tolist()}
    if p.kind == "cuboid":
        d["half_extents"] = p.half_extents.tolist()
    elif p.kind == "ellipsoid":
        d["semi_axes"] = p.semi_axes.tolist()
    else:
        d["footprint"] = p.footprint.tolist()
        d["y_range"] = list(p.y_range)
    return d


def primitive_from_dict(d):
    kw = dict(kind=d["kind"], class_id=d["class_id"],
              instance_id=d.get("instance_id", -1),
              center=np.array(d["center"]), rotation=np.array(d["rotation"]))
    if d["kind"] == "cuboid":
        kw["half_extents"] = np.array(d["half_extents"])
    elif d["kind"] == "ellipsoid":
        kw["semi_axes"] = np.array(d["semi_axes"])
    else:
        kw["footprint"] = np.array(d["footprint"])
        kw["y_range"] = tuple(d["y_range"])
    return Primitive(**kw)


def save_bundle(bundle, path):
    bundle.validate()
    root = Path(path)
    (root / "views").mkdir(parents=True, exist_ok=True)
    doc = {
        "version": 1,
        "classes": [{"id": c.id, "name": c.name, "thing": c.thing,
                     "color": list(c.color)} for c in bundle.classes],
        "sky_class": bundle.sky_class,
        "building_class": bundle.building_class,
        "exposures": list(map(float, bundle.exposures)),
        "primitives": [primitive_to_dict(p) for p in bundle.primitives],
        "cameras": [cam.as_dict() for cam in bundle.cameras],
    }
    with open(root / "scene.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name, img in bundle.images.items():
        write_ppm(root / "views" / f"{name}.rgb.ppm", img)
    for name, sem in bundle.pseudo_sem.items():
        write_pgm16(root / "views" / f"{name}.sem.pgm", encode_labels(sem))
    for name, d in bundle.pseudo_depth.items():
        write_depth_raster(root / "views" / f"{name}.depth.lfdp", d)
    if bundle.has_gt:
        (root / "gt").mkdir(exist_ok=True)
        for name in bundle.gt_sem:
            write_pgm16(root / "gt" / f"{name}.sem.pgm",
                        encode_labels(bundle.gt_sem[name]))
            write_pgm16(root / "gt" / f"{name}.inst.pgm",
                        bundle.gt_inst[name].astype(np.uint16))
            write_depth_raster(root / "gt" / f"{name}.depth.lfdp",
                               bundle.gt_depth[name])


def load_bundle(path):
    root = Path(path)
    doc_path = root / "scene.json"
    if not doc_path.exists():
        raise ParseError(f"{doc_path}: not found")
    try:
        doc = json.loads(doc_path.read_text())
    except json.JSONDecodeError as err:
        raise ParseError(f"{doc_path}: {err}") from err
    for key in ("version", "classes", "sky_class", "primitives", "cameras"):
        if key not in doc:
            raise ParseError(f"{doc_path}: missing key {key!r}")
    if doc["version"] != 1:
        raise ParseError(f"{doc_path}: unsupported version {doc['version']}")
    bundle = SceneBundle(
        classes=[ClassDef(c["id"], c["name"], bool(c["thing"]),
                          tuple(c["color"])) for c in doc["classes"]],
        sky_class=doc["sky_class"],
        building_class=doc.get("building_class"),
        exposures=doc.get("exposures", [1.0]),
        primitives=[primitive_from_dict(d) for d in doc["primitives"]],
        cameras=[Camera.from_dict(d) for d in doc["cameras"]],
    )
    for cam in bundle.cameras:
        rgb = root / "views" / f"{cam.name}.rgb.ppm"
        if rgb.exists():
            bundle.images[cam.name] = read_ppm(rgb)
        sem = root / "views" / f"{cam.name}.sem.pgm"
        if sem.exists():
            bundle.pseudo_sem[cam.name] = decode_labels(read_pgm16(sem))
        dep = root / "views" / f"{cam.name}.depth.lfdp"
        if dep.exists():
            bundle.pseudo_depth[cam.name] = read_depth_raster(dep)
        gsem = root / "gt" / f"{cam.name}.sem.pgm"
        if gsem.exists():
            bundle.gt_sem[cam.name] = decode_labels(read_pgm16(gsem))
            bundle.gt_inst[cam.name] = read_pgm16(
                root / "gt" / f"{cam.name}.inst.pgm").astype(np.int64)
            bundle.gt_depth[cam.name] = read_depth_raster(
                root / "gt" / f"{cam.name}.depth.lfdp")
    return bundle.validate()
