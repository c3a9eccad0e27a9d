"""Supervision batching, loss terms, and the two-stage optimization loop.

Stage 1 jointly fits density, color, and the learned semantic head from
photometric, semantic, and depth supervision; stage 2 adds an instance term
whose per-ray targets come from a label-refinement callback applied to
renders of the stage-1 model.  All reductions run in a fixed order so a
fixed seed reproduces the loss curve bit for bit.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .cameras import Camera, camera_rays
from .errors import ConfigError, NumericError
from .field import fixed_instance_probs, fixed_semantic_probs, unique_class_labels
from .primitives import RayBundle, build_ray_bundle, draw_samples
from .rendering import (
    RenderConfig,
    accumulate,
    instance_class_table,
    render_color,
    render_depth,
    render_view,
    render_weights,
)

# Which camera roles feed which loss terms.  Photometric supervision uses
# every view; semantic labels are trusted on the left perspective view and
# both fisheyes; depth only on the left perspective view; instance targets
# only on perspective views, where straight boundaries stay straight.
SEMANTIC_ROLES = frozenset({"persp_left", "fisheye_left", "fisheye_right"})
DEPTH_ROLES = frozenset({"persp_left"})
INSTANCE_ROLES = frozenset({"persp_left", "persp_right"})

_TERM_ORDER = ("photo", "fixed_sem", "learned_sem", "sem3d", "depth", "instance")


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights, batch shape, and schedule for both stages."""

    lam_photo: float = 1.0
    lam_fixed_sem: float = 2.0
    lam_learned_sem: float = 1.0
    lam_sem3d: float = 1.0
    lam_depth: float = 0.1
    lam_instance: float = 2.0
    sigma_threshold: float = 0.1
    stage1_iters: int = 30000
    stage2_iters: int = 4000
    rays_per_batch: int = 1024
    primitive_samples: int = 64
    sky_samples: int = 8
    max_keep: int = 10
    sky_span: float | None = None
    tau: float = 0.05
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_floor: float = 0.05
    checkpoint_interval: int = 0
    refresh_interval: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lam_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
        if self.sigma_threshold <= 0:
            raise ConfigError("sigma_threshold must be > 0")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.rays_per_batch < 1:
            raise ConfigError("rays_per_batch must be >= 1")
        if self.primitive_samples < 1 or self.sky_samples < 0:
            raise ConfigError("sample counts must be positive")
        if not 0.0 <= self.weight_floor <= 1.0:
            raise ConfigError("weight_floor must lie in [0, 1]")

    @classmethod
    def desk(cls, **overrides):
        """Small preset sized for single-core synthetic scenes."""
        base = dict(
            stage1_iters=1500,
            stage2_iters=500,
            rays_per_batch=512,
            primitive_samples=24,
            sky_samples=4,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides):
        """Minimal preset for fast tests."""
        base = dict(
            stage1_iters=25,
            stage2_iters=10,
            rays_per_batch=64,
            primitive_samples=8,
            sky_samples=2,
        )
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Dataset containers


@dataclass
class TrainView:
    """One training image with its camera and optional pseudo labels.

    sem uses -1 for unlabeled pixels; depth_valid marks pixels whose pseudo
    depth can be trusted.
    """

    camera: Camera
    rgb: np.ndarray
    sem: np.ndarray | None = None
    depth: np.ndarray | None = None
    depth_valid: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        self.rgb = np.asarray(self.rgb, np.float32)
        if self.rgb.shape != (h, w, 3):
            raise ConfigError(f"rgb shape {self.rgb.shape} does not match camera {(h, w, 3)}")
        if self.sem is not None:
            self.sem = np.asarray(self.sem, np.int64)
            if self.sem.shape != (h, w):
                raise ConfigError("sem shape does not match camera")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, np.float64)
            if self.depth.shape != (h, w):
                raise ConfigError("depth shape does not match camera")
            if self.depth_valid is None:
                self.depth_valid = self.depth > 0
            self.depth_valid = np.asarray(self.depth_valid, bool)
            if self.depth_valid.shape != (h, w):
                raise ConfigError("depth_valid shape does not match camera")


@dataclass
class SceneData:
    """Scene annotation plus all training views."""

    primitives: list
    n_classes: int
    sky_class: int
    views: list = field(default_factory=list)
    thing_classes: tuple = ()
    building_class: int | None = None

    def __post_init__(self):
        if not 0 <= self.sky_class < self.n_classes:
            raise ConfigError("sky_class must be a valid class index")

    @property
    def n_frames(self):
        return max((v.camera.frame_index for v in self.views), default=0) + 1


# ---------------------------------------------------------------------------
# Ray pool: cached per-pixel geometry and supervision for the whole dataset


@dataclass
class RayPool:
    """All supervised rays of a scene, ready for random batching."""

    bundle: RayBundle
    rgb: np.ndarray          # (N, 3)
    sem: np.ndarray          # (N,) int64, -1 unlabeled
    sem_mask: np.ndarray     # (N,) bool, semantic losses apply
    match: np.ndarray        # (N,) bool, label matches a primitive on the ray
    depth: np.ndarray        # (N,)
    depth_mask: np.ndarray   # (N,) bool
    inst_mask: np.ndarray    # (N,) bool, instance loss may apply
    inst_target: np.ndarray  # (N,) int64, -1 unsupervised
    frame: np.ndarray        # (N,) int64
    view_id: np.ndarray      # (N,) int64
    pixel: np.ndarray        # (N,) int64 flat pixel index within the view

    @property
    def n(self):
        return self.rgb.shape[0]

    def take(self, idx):
        idx = np.asarray(idx)
        return RayPool(
            bundle=bundle_subset(self.bundle, idx),
            rgb=self.rgb[idx],
            sem=self.sem[idx],
            sem_mask=self.sem_mask[idx],
            match=self.match[idx],
            depth=self.depth[idx],
            depth_mask=self.depth_mask[idx],
            inst_mask=self.inst_mask[idx],
            inst_target=self.inst_target[idx],
            frame=self.frame[idx],
            view_id=self.view_id[idx],
            pixel=self.pixel[idx],
        )


def bundle_subset(bundle, idx):
    """Row-sliced copy of a RayBundle."""
    return RayBundle(
        origins=bundle.origins[idx],
        directions=bundle.directions[idx],
        itv_lo=bundle.itv_lo[idx],
        itv_hi=bundle.itv_hi[idx],
        itv_prim=bundle.itv_prim[idx],
        itv_class=bundle.itv_class[idx],
        itv_instance=bundle.itv_instance[idx],
        itv_valid=bundle.itv_valid[idx],
        itv_is_sky=bundle.itv_is_sky[idx],
        base=bundle.base[idx],
        scale=bundle.scale[idx],
        stratum_itv=bundle.stratum_itv[idx],
    )


def _pad_intervals(bundle, k_max):
    k = bundle.itv_lo.shape[1]
    if k == k_max:
        return bundle
    extra = k_max - k
    n = bundle.itv_lo.shape[0]

    def pad(a, value):
        block = np.full((n, extra), value, dtype=a.dtype)
        return np.concatenate([a, block], axis=1)

    return RayBundle(
        origins=bundle.origins,
        directions=bundle.directions,
        itv_lo=pad(bundle.itv_lo, 0.0),
        itv_hi=pad(bundle.itv_hi, 0.0),
        itv_prim=pad(bundle.itv_prim, -1),
        itv_class=pad(bundle.itv_class, -1),
        itv_instance=pad(bundle.itv_instance, -1),
        itv_valid=pad(bundle.itv_valid, False),
        itv_is_sky=pad(bundle.itv_is_sky, False),
        base=bundle.base,
        scale=bundle.scale,
        stratum_itv=bundle.stratum_itv,
    )


def ray_mask(bundle, labels, sky_class):
    """Per-ray gate: the pseudo label matches some primitive along the ray.

    A sky label matches when the ray carries a sky interval.  Rays without a
    label (-1) never match.
    """
    labels = np.asarray(labels, np.int64)
    solid = bundle.itv_valid & ~bundle.itv_is_sky
    hit = ((bundle.itv_class == labels[:, None]) & solid).any(axis=1)
    sky = (labels == sky_class) & (bundle.itv_valid & bundle.itv_is_sky).any(axis=1)
    return (hit | sky) & (labels >= 0)


def build_ray_pool(scene, cfg):
    """Precompute bundles and per-ray supervision for every valid pixel."""
    if not scene.views:
        raise ConfigError("scene has no training views")
    parts = []
    for vid, view in enumerate(scene.views):
        cam = view.camera
        origins, dirs, valid = camera_rays(cam)
        live = np.nonzero(valid)[0]
        bundle = build_ray_bundle(
            origins[live], dirs[live], scene.primitives,
            cfg.primitive_samples, cfg.sky_samples,
            max_keep=cfg.max_keep, sky_span=cfg.sky_span,
        )
        n = live.size
        rgb = view.rgb.reshape(-1, 3)[live]
        sem = (
            view.sem.reshape(-1)[live]
            if view.sem is not None
            else np.full(n, -1, np.int64)
        )
        sem_mask = (cam.role in SEMANTIC_ROLES) & (sem >= 0)
        depth = (
            view.depth.reshape(-1)[live]
            if view.depth is not None
            else np.zeros(n)
        )
        depth_ok = (
            view.depth_valid.reshape(-1)[live]
            if view.depth_valid is not None
            else np.zeros(n, bool)
        )
        parts.append(dict(
            bundle=bundle,
            rgb=rgb,
            sem=sem,
            sem_mask=sem_mask,
            match=ray_mask(bundle, sem, scene.sky_class),
            depth=depth.astype(np.float64),
            depth_mask=depth_ok & (cam.role in DEPTH_ROLES),
            inst_mask=np.full(n, cam.role in INSTANCE_ROLES),
            frame=np.full(n, cam.frame_index, np.int64),
            view_id=np.full(n, vid, np.int64),
            pixel=live.astype(np.int64),
        ))
    k_max = max(p["bundle"].itv_lo.shape[1] for p in parts)
    for p in parts:
        p["bundle"] = _pad_intervals(p["bundle"], k_max)

    def cat(key):
        return np.concatenate([p[key] for p in parts], axis=0)

    merged = RayBundle(*[
        np.concatenate([getattr(p["bundle"], name) for p in parts], axis=0)
        for name in (
            "origins", "directions", "itv_lo", "itv_hi", "itv_prim",
            "itv_class", "itv_instance", "itv_valid", "itv_is_sky",
            "base", "scale", "stratum_itv",
        )
    ])
    n_total = merged.origins.shape[0]
    return RayPool(
        bundle=merged,
        rgb=cat("rgb"),
        sem=cat("sem"),
        sem_mask=cat("sem_mask"),
        match=cat("match"),
        depth=cat("depth"),
        depth_mask=cat("depth_mask"),
        inst_mask=cat("inst_mask"),
        inst_target=np.full(n_total, -1, np.int64),
        frame=cat("frame"),
        view_id=cat("view_id"),
        pixel=cat("pixel"),
    )


# ---------------------------------------------------------------------------
# Class balance weights


def class_weights(label_maps, n_classes, floor=0.05):
    """Inverse-sqrt frequency weights in [floor, 1]; absent classes get 1.

    w(k) = clamp(sqrt(f_min / f_k), floor, 1) with f_min the smallest
    nonzero class frequency, so the rarest observed class always weighs 1.
    """
    counts = np.zeros(n_classes, np.float64)
    maps = label_maps if isinstance(label_maps, (list, tuple)) else [label_maps]
    for m in maps:
        if m is None:
            continue
        flat = np.asarray(m, np.int64).reshape(-1)
        flat = flat[(flat >= 0) & (flat < n_classes)]
        counts += np.bincount(flat, minlength=n_classes)
    total = counts.sum()
    if total == 0:
        raise ConfigError("class weight corpus has no labeled pixels")
    freq = counts / total
    present = counts > 0
    w = np.ones(n_classes)
    w[present] = np.clip(np.sqrt(freq[present].min() / freq[present]), floor, 1.0)
    return w


# ---------------------------------------------------------------------------
# Loss terms.  Semantic losses take the pre-normalization accumulation; the
# rendered distribution is its softmax, so -log of the distribution equals
# -log_softmax of the accumulation, which never underflows.


def _zero_scalar(dtype=np.float32):
    return ad.constant(np.asarray(0.0, dtype))


def _masked_mean(values, mask, weights=None):
    """Mean over mask of (weights * values); empty mask contributes 0.

    The denominator is the mask count, not the weight sum, so per-ray
    weights scale individual terms without renormalizing the batch.
    """
    count = int(np.count_nonzero(mask))
    if count == 0:
        return _zero_scalar(values.data.dtype)
    sel = mask.astype(values.data.dtype)
    if weights is not None:
        sel = sel * np.asarray(weights, values.data.dtype)
    return ad.scale(ad.tsum(ad.mul(values, sel)), 1.0 / count)


def _nll(acc, labels):
    """Per-row -log softmax(acc)[label]; labels < 0 read class 0 harmlessly."""
    safe = np.where(labels >= 0, labels, 0)
    lp = ad.log_softmax(acc, axis=-1)
    g = ad.take_along_last(lp, safe)
    return ad.scale(ad.reshape(g, (acc.data.shape[0],)), -1.0)


def loss_photometric(color, target):
    """Squared color error, summed over channels, averaged over rays."""
    per_ray = ad.tsum(ad.square(ad.sub(color, np.asarray(target, color.data.dtype))), axis=-1)
    return ad.tmean(per_ray)


def loss_depth(depth, target, valid):
    """Squared depth error over rays with trusted pseudo depth."""
    err = ad.square(ad.sub(depth, np.asarray(target, depth.data.dtype)))
    return _masked_mean(err, np.asarray(valid, bool))


def loss_fixed_semantic(fixed_acc, labels, valid, tau=0.05):
    """Cross-entropy of the membership-rendered class distribution.

    The accumulated fixed field carries no parameters, so this term can only
    move the density.  No class weights and no match gate apply here.
    """
    nll = _nll(ad.scale(fixed_acc, 1.0 / float(tau)), labels)
    return _masked_mean(nll, np.asarray(valid, bool) & (labels >= 0))


def loss_learned_semantic(sem_acc, labels, valid, match, weight_table):
    """Cross-entropy of the learned class distribution.

    Each ray is gated by `match` (its label must agree with some primitive
    it crosses) and scaled by the label's class-balance weight; the mean
    runs over all labeled rays.
    """
    mask = np.asarray(valid, bool) & (labels >= 0)
    safe = np.where(labels >= 0, labels, 0)
    w = np.asarray(weight_table)[safe] * np.asarray(match, np.float64)
    nll = _nll(sem_acc, labels)
    return _masked_mean(nll, mask, weights=w)


def loss_semantic_3d(sem_logits, labels, selected):
    """Per-sample cross-entropy against the unique membership class.

    `selected` should already restrict to samples with a unique label and
    detached density above threshold; the mean runs over selected samples.
    """
    count = int(np.count_nonzero(selected))
    if count == 0:
        return _zero_scalar(sem_logits.data.dtype)
    r, s, m = sem_logits.data.shape
    flat = ad.reshape(sem_logits, (r * s, m))
    idx = np.flatnonzero(selected)
    rows = ad.take_rows(flat, idx)
    lp = ad.log_softmax(rows, axis=-1)
    g = ad.take_along_last(lp, labels.reshape(-1)[idx])
    return ad.scale(ad.tsum(g), -1.0 / count)


def loss_instance(inst_acc, targets, valid, eps=1e-6):
    """Negative log of the normalized instance mass at the target channel."""
    mask = np.asarray(valid, bool) & (targets >= 0)
    if not mask.any() or inst_acc.data.shape[-1] == 0:
        return _zero_scalar(inst_acc.data.dtype)
    safe = np.where(targets >= 0, targets, 0)
    gathered = ad.reshape(ad.take_along_last(inst_acc, safe), (inst_acc.data.shape[0],))
    total = ad.tsum(inst_acc, axis=-1)
    nll = ad.sub(ad.log(ad.add(total, eps)), ad.log(ad.add(gathered, eps)))
    return _masked_mean(nll, mask)


# ---------------------------------------------------------------------------
# Batch loss assembly


def compute_losses(model, scene, sub, cfg, weight_table, rng, include_instance=False):
    """All loss terms for one ray batch; returns ({name: Tensor}, total Tensor).

    The total is the weighted sum of the terms in a fixed order, so it
    decomposes bit-exactly.  `rng` draws the per-iteration stratified jitter.
    """
    bundle = sub.bundle
    u = rng.random(bundle.base.shape)
    batch = draw_samples(bundle, u)
    codes = model.appearance_codes(sub.frame)
    out = model.forward(
        batch.positions,
        view_dirs=bundle.directions,
        appearance=codes,
        want_sem=True,
        want_color=True,
    )
    weights, _ = render_weights(out.sigma, batch.delta)

    terms = {}
    terms["photo"] = loss_photometric(render_color(weights, out.color), sub.rgb)

    s_hat = fixed_semantic_probs(batch, bundle, scene.n_classes, scene.sky_class)
    fixed_acc = accumulate(weights, s_hat)
    terms["fixed_sem"] = loss_fixed_semantic(fixed_acc, sub.sem, sub.sem_mask, cfg.tau)

    sem_acc = accumulate(weights, out.sem_logits)
    terms["learned_sem"] = loss_learned_semantic(
        sem_acc, sub.sem, sub.sem_mask, sub.match, weight_table
    )

    labels3d, unique = unique_class_labels(batch, bundle, scene.n_classes, scene.sky_class)
    selected = unique & (out.sigma.data > cfg.sigma_threshold)
    terms["sem3d"] = loss_semantic_3d(out.sem_logits, labels3d, selected)

    terms["depth"] = loss_depth(render_depth(weights, batch.t), sub.depth, sub.depth_mask)

    lams = {
        "photo": cfg.lam_photo,
        "fixed_sem": cfg.lam_fixed_sem,
        "learned_sem": cfg.lam_learned_sem,
        "sem3d": cfg.lam_sem3d,
        "depth": cfg.lam_depth,
        "instance": cfg.lam_instance,
    }
    if include_instance:
        n_things = instance_class_table(scene.primitives).shape[0]
        t_hat = fixed_instance_probs(
            batch, bundle, n_things, allowed_class=scene.building_class
        )
        inst_acc = accumulate(weights, t_hat)
        terms["instance"] = loss_instance(inst_acc, sub.inst_target, sub.inst_mask)

    total = None
    for name in _TERM_ORDER:
        if name not in terms:
            continue
        piece = ad.scale(terms[name], lams[name])
        total = piece if total is None else ad.add(total, piece)
    return terms, total


# ---------------------------------------------------------------------------
# Optimization loops


def write_loss_csv(path, curves):
    """Loss curve rows -> CSV with one column per term plus the total."""
    if not curves:
        return
    keys = list(curves[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(curves)


def _snapshot(model, curves, checkpoint_dir, stage):
    if checkpoint_dir is None:
        return None
    os.makedirs(checkpoint_dir, exist_ok=True)
    path = os.path.join(checkpoint_dir, f"{stage}_diagnostic.lfck")
    ad.save_checkpoint(path, model.store)
    write_loss_csv(os.path.join(checkpoint_dir, f"{stage}_diagnostic_losses.csv"), curves)
    return path


def _run_loop(model, scene, pool, cfg, weight_table, rng, n_iters, stage,
              include_instance, checkpoint_dir=None):
    curves = []
    for it in range(n_iters):
        idx = rng.integers(0, pool.n, size=min(cfg.rays_per_batch, pool.n))
        sub = pool.take(idx)
        tape = ad.Tape()
        with ad.recording(tape):
            terms, total = compute_losses(
                model, scene, sub, cfg, weight_table, rng,
                include_instance=include_instance,
            )
        row = {"iteration": it}
        for name in _TERM_ORDER:
            if name in terms:
                row[name] = float(terms[name].data)
        row["total"] = float(total.data)
        curves.append(row)
        if not np.isfinite(total.data):
            snap = _snapshot(model, curves, checkpoint_dir, stage)
            hint = f" (snapshot: {snap})" if snap else ""
            raise NumericError(
                f"non-finite loss at {stage} iteration {it}: {row}{hint}"
            )
        ad.backward(tape, total)
        grads = model.store.gradients()
        model.store.zero_grad()
        try:
            ad.adam_step(
                model.store, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps, grads=grads
            )
        except NumericError:
            _snapshot(model, curves, checkpoint_dir, stage)
            raise
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_interval > 0
            and (it + 1) % cfg.checkpoint_interval == 0
        ):
            os.makedirs(checkpoint_dir, exist_ok=True)
            ad.save_checkpoint(
                os.path.join(checkpoint_dir, f"{stage}_{it + 1:06d}.lfck"),
                model.store,
            )
    return curves


def default_weight_table(scene, cfg):
    maps = [v.sem for v in scene.views if v.sem is not None]
    if not maps:
        return np.ones(scene.n_classes)
    return class_weights(maps, scene.n_classes, cfg.weight_floor)


def train_stage1(model, scene, cfg, seed=0, weight_table=None, checkpoint_dir=None,
                 pool=None):
    """Joint radiance + semantic optimization; returns the loss curve rows."""
    if pool is None:
        pool = build_ray_pool(scene, cfg)
    if weight_table is None:
        weight_table = default_weight_table(scene, cfg)
    rng = np.random.default_rng(seed)
    return _run_loop(
        model, scene, pool, cfg, weight_table, rng,
        cfg.stage1_iters, "stage1", include_instance=False,
        checkpoint_dir=checkpoint_dir,
    )


def _refresh_instance_targets(model, scene, pool, cfg, refiner):
    """Render instance maps per eligible view, refine them, attach targets."""
    render_cfg = RenderConfig(
        n_primitive_samples=cfg.primitive_samples,
        n_sky_samples=cfg.sky_samples,
        max_keep=cfg.max_keep,
        sky_span=cfg.sky_span,
        tau=cfg.tau,
        want_color=False,
        want_learned_sem=True,
        want_fixed_sem=True,
        want_instances=True,
    )
    pool.inst_target[:] = -1
    found = False
    for vid, view in enumerate(scene.views):
        if view.camera.role not in INSTANCE_ROLES:
            continue
        rendered = render_view(
            model, view.camera, scene.primitives, render_cfg,
            sky_class=scene.sky_class, thing_classes=scene.thing_classes,
        )
        target = refiner(rendered["class_map"], rendered["instance_map"])
        if target is None:
            continue
        target = np.asarray(target, np.int64).reshape(-1)
        rows = pool.view_id == vid
        values = target[pool.pixel[rows]]
        pool.inst_target[rows] = values
        found = found or (values >= 0).any()
    return found


def train_stage2(model, scene, cfg, refiner, seed=1, weight_table=None,
                 checkpoint_dir=None, pool=None):
    """Instance-boundary finetuning on top of a stage-1 model.

    `refiner` maps a rendered (class_map, instance_map) pair to per-pixel
    instance targets (-1 where unsupervised, instance channel index
    elsewhere) or None when the view offers nothing to refine.  When no view
    yields a target the stage warns and leaves the model untouched.
    """
    if pool is None:
        pool = build_ray_pool(scene, cfg)
    if weight_table is None:
        weight_table = default_weight_table(scene, cfg)
    if not _refresh_instance_targets(model, scene, pool, cfg, refiner):
        warnings.warn("no instance boundaries to refine; skipping the finetune stage")
        return []
    rng = np.random.default_rng(seed)
    curves = []
    done = 0
    while done < cfg.stage2_iters:
        if cfg.refresh_interval > 0:
            span = min(cfg.refresh_interval, cfg.stage2_iters - done)
        else:
            span = cfg.stage2_iters - done
        curves.extend(_run_loop(
            model, scene, pool, cfg, weight_table, rng,
            span, "stage2", include_instance=True,
            checkpoint_dir=checkpoint_dir,
        ))
        done += span
        if done < cfg.stage2_iters and cfg.refresh_interval > 0:
            if not _refresh_instance_targets(model, scene, pool, cfg, refiner):
                warnings.warn("instance targets vanished on refresh; stopping finetune")
                break
    for i, row in enumerate(curves):
        row["iteration"] = i
    return curves
