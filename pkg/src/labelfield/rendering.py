"""Volume rendering: transmittance weights, per-ray accumulation, image assembly.

The weight of sample i along a ray is w_i = T_i * (1 - exp(-sigma_i * delta_i))
with transmittance T_i = exp(-sum_{j<i} sigma_j delta_j).  For any positive
deltas the weights and the residual transmittance after the last sample sum
to one, which makes them usable as a distribution over ray termination.
Semantic and instance outputs are rendered by accumulating per-sample
distributions with these weights.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cameras import camera_rays
from .errors import ConfigError
from .field import fixed_instance_probs, fixed_semantic_probs
from .primitives import build_ray_bundle, draw_samples

# Instance label reserved for pixels that belong to no instance.
UNASSIGNED = 0


def worker_count(default=None):
    """Fan-out for per-view rendering; LABELFIELD_THREADS overrides."""
    if default is None:
        default = os.cpu_count() or 1
    raw = os.environ.get("LABELFIELD_THREADS")
    if raw is None:
        return max(1, int(default))
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LABELFIELD_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError("LABELFIELD_THREADS must be >= 1")
    return value


# ---------------------------------------------------------------------------
# Core accumulation ops (differentiable)


def render_weights(sigma, delta):
    """Per-sample rendering weights and residual transmittance.

    sigma is a (R, S) Tensor of densities, delta a (R, S) array of segment
    lengths.  Returns (weights (R, S) Tensor, residual (R,) Tensor) where
    residual is the transmittance left after the last sample, so that
    weights.sum(axis=1) + residual == 1 up to round-off.  Padding samples
    with delta == 0 get exactly zero weight.
    """
    delta = np.asarray(delta, dtype=sigma.data.dtype)
    sd = ad.mul(sigma, delta)
    trans = ad.exp(ad.scale(ad.cumsum_exclusive(sd, axis=-1), -1.0))
    alpha = ad.sub(1.0, ad.exp(ad.scale(sd, -1.0)))
    weights = ad.mul(trans, alpha)
    residual = ad.exp(ad.scale(ad.tsum(sd, axis=-1), -1.0))
    return weights, residual


def accumulate(weights, values):
    """Weighted sum over samples: (R, S) x (R, S[, C]) -> (R[, C])."""
    ndim = values.data.ndim if isinstance(values, ad.Tensor) else np.ndim(values)
    if ndim == 3:
        r, s = weights.data.shape
        weights = ad.reshape(weights, (r, s, 1))
    return ad.tsum(ad.mul(weights, values), axis=1)


def render_depth(weights, t):
    """Expected termination distance along the (unit-norm) ray."""
    return accumulate(weights, np.asarray(t, dtype=weights.data.dtype))


def render_color(weights, color):
    return accumulate(weights, color)


def fixed_semantic_distribution(weights, s_hat, tau=0.05):
    """Render the membership-derived class field: softmax(sum w s_hat / tau).

    The temperature only sharpens the distribution; it never changes the
    argmax, so label maps are invariant to tau while the training loss
    gradient is not.
    """
    acc = accumulate(weights, np.asarray(s_hat, dtype=weights.data.dtype))
    return ad.softmax(ad.scale(acc, 1.0 / float(tau)), axis=-1)


def learned_semantic_distribution(weights, sem_logits):
    """Render the learned class field: softmax over accumulated logits."""
    return ad.softmax(accumulate(weights, sem_logits), axis=-1)


def instance_accumulation(weights, t_hat):
    """Unnormalized instance mass per ray: sum w t_hat, shape (R, n_things)."""
    return accumulate(weights, np.asarray(t_hat, dtype=weights.data.dtype))


def normalize_instance(acc, eps=1e-12):
    """Normalize instance mass rows to a distribution; all-zero rows stay zero."""
    acc = np.asarray(acc)
    total = acc.sum(axis=-1, keepdims=True)
    return np.where(total > eps, acc / np.maximum(total, eps), 0.0)


# ---------------------------------------------------------------------------
# Label composition


def instance_class_table(primitives, n_things=None):
    """Map instance id -> class id from the scene primitives (-1 unused)."""
    ids = [p.instance_id for p in primitives if p.instance_id >= 0]
    if n_things is None:
        n_things = max(ids) + 1 if ids else 0
    table = np.full(n_things, -1, dtype=np.int64)
    for p in primitives:
        if p.instance_id >= 0:
            table[p.instance_id] = p.class_id
    return table


def compose_panoptic(sem_probs, inst_probs, instance_classes, thing_classes):
    """Combine class and instance distributions into label maps.

    Every pixel takes the argmax class (lowest index on ties).  Pixels of a
    thing class take the best instance channel of that same class, numbered
    from 1; pixels with no instance mass in their class stay UNASSIGNED (0),
    as do all stuff pixels.
    """
    sem_probs = np.asarray(sem_probs)
    inst_probs = np.asarray(inst_probs)
    cls = sem_probs.argmax(axis=-1)
    instance = np.full(cls.shape, UNASSIGNED, dtype=np.int64)
    thing_classes = np.asarray(sorted(set(int(c) for c in thing_classes)), dtype=np.int64)
    if inst_probs.shape[-1] == 0 or thing_classes.size == 0:
        return cls.astype(np.int64), instance
    is_thing = np.isin(cls, thing_classes)
    allowed = np.asarray(instance_classes)[None, :] == cls[:, None]
    masked = np.where(allowed, inst_probs, 0.0)
    best = masked.argmax(axis=-1)
    mass = masked.max(axis=-1)
    instance = np.where(is_thing & (mass > 0.0), best + 1, UNASSIGNED)
    return cls.astype(np.int64), instance.astype(np.int64)


# ---------------------------------------------------------------------------
# Density injection (renders labels straight from the coarse 3D annotation)


def opaque_first_hit_sigma(bundle, batch, sigma_value=1e3):
    """Density that makes the nearest annotated region fully opaque.

    Samples inside the first (closest) primitive interval of each ray get
    sigma_value; rays that hit no primitive get it on their sky samples.
    This bypasses the learned density so label rendering can be checked
    against ray geometry alone.
    """
    first_is_prim = bundle.itv_valid[:, 0] & ~bundle.itv_is_sky[:, 0]
    inside_first = batch.member[:, :, 0] & first_is_prim[:, None]
    sky_fill = batch.is_sky & ~first_is_prim[:, None]
    return np.where(inside_first | sky_fill, float(sigma_value), 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Full-view rendering


@dataclass(frozen=True)
class RenderConfig:
    """Knobs for whole-image rendering."""

    n_primitive_samples: int = 24
    n_sky_samples: int = 4
    max_keep: int = 10
    sky_span: float | None = None
    tau: float = 0.05
    chunk: int = 2048
    want_color: bool = True
    want_learned_sem: bool = True
    want_fixed_sem: bool = True
    want_instances: bool = True
    fuse_far: float | None = None
    density_source: str = "model"  # "model" or "first_hit"
    sigma_opaque: float = 1e3

    def __post_init__(self):
        if self.density_source not in ("model", "first_hit"):
            raise ConfigError(f"unknown density source {self.density_source!r}")
        if self.n_primitive_samples < 1 or self.n_sky_samples < 0:
            raise ConfigError("sample counts must be positive")
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")


def _view_codes(model, camera, dirs, pano_anchors):
    if pano_anchors is not None:
        left, right = pano_anchors
        return model.interpolated_codes(
            dirs, left.frame_index, right.frame_index,
            left.optical_axis, right.optical_axis,
        )
    z = model.store.get("appearance.z").data[camera.frame_index]
    return np.broadcast_to(z, (dirs.shape[0], z.shape[0])).copy()


def render_view(
    model,
    camera,
    primitives,
    cfg,
    sky_class,
    n_classes=None,
    thing_classes=(),
    pano_anchors=None,
):
    """Render one camera view to label, color and depth maps.

    model may be None when cfg.density_source == "first_hit" and no learned
    output is requested; n_classes must then be given.  Returns a dict of
    (H, W, ...) arrays: valid, depth, residual, rgb, sem_probs,
    fixed_sem_probs, inst_probs, class_map, instance_map.  class_map is -1
    on invalid pixels; far fusion (cfg.fuse_far) swaps the learned class
    distribution for the membership-derived one beyond that depth before
    composition.
    """
    if cfg.density_source == "first_hit" and (cfg.want_color or cfg.want_learned_sem):
        raise ConfigError("injected density renders membership labels only")
    if model is not None:
        n_classes = model.n_classes
    elif cfg.want_color or cfg.want_learned_sem:
        raise ConfigError("learned outputs need a model")
    elif n_classes is None:
        raise ConfigError("n_classes is required when rendering without a model")

    inst_table = instance_class_table(primitives)
    n_things = inst_table.shape[0]
    origins, dirs, valid = camera_rays(camera)
    h, w = camera.height, camera.width
    n = h * w

    buffers = {
        "valid": valid.reshape(h, w),
        "depth": np.zeros(n, np.float32),
        "residual": np.ones(n, np.float32),
    }
    if cfg.want_color:
        buffers["rgb"] = np.zeros((n, 3), np.float32)
    if cfg.want_learned_sem:
        buffers["sem_probs"] = np.zeros((n, n_classes), np.float32)
    if cfg.want_fixed_sem:
        buffers["fixed_sem_probs"] = np.zeros((n, n_classes), np.float32)
    if cfg.want_instances:
        buffers["inst_probs"] = np.zeros((n, n_things), np.float32)

    live = np.nonzero(valid)[0]
    chunks = [live[i : i + cfg.chunk] for i in range(0, live.size, cfg.chunk)]

    def run_chunk(idx):
        bundle = build_ray_bundle(
            origins[idx], dirs[idx], primitives,
            cfg.n_primitive_samples, cfg.n_sky_samples,
            max_keep=cfg.max_keep, sky_span=cfg.sky_span,
        )
        batch = draw_samples(bundle)
        if cfg.density_source == "first_hit":
            sigma = ad.constant(opaque_first_hit_sigma(bundle, batch, cfg.sigma_opaque))
            out = None
        else:
            codes = _view_codes(model, camera, dirs[idx], pano_anchors)
            out = model.forward(
                batch.positions,
                view_dirs=dirs[idx],
                appearance=codes,
                want_sem=cfg.want_learned_sem,
                want_color=cfg.want_color,
            )
            sigma = out.sigma
        weights, residual = render_weights(sigma, batch.delta)
        wd = weights.data

        buffers["depth"][idx] = render_depth(weights, batch.t).data
        buffers["residual"][idx] = residual.data
        if cfg.want_color:
            buffers["rgb"][idx] = render_color(weights, out.color).data
        if cfg.want_learned_sem:
            buffers["sem_probs"][idx] = learned_semantic_distribution(
                weights, out.sem_logits
            ).data
        if cfg.want_fixed_sem:
            s_hat = fixed_semantic_probs(batch, bundle, n_classes, sky_class)
            buffers["fixed_sem_probs"][idx] = fixed_semantic_distribution(
                weights, s_hat, cfg.tau
            ).data
        if cfg.want_instances:
            t_hat = fixed_instance_probs(batch, bundle, n_things)
            acc = instance_accumulation(weights, t_hat).data
            buffers["inst_probs"][idx] = normalize_instance(acc)

    workers = worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, chunks))
    else:
        for idx in chunks:
            run_chunk(idx)

    out = {"valid": buffers["valid"]}
    out["depth"] = buffers["depth"].reshape(h, w)
    out["residual"] = buffers["residual"].reshape(h, w)
    if cfg.want_color:
        out["rgb"] = buffers["rgb"].reshape(h, w, 3)
    if cfg.want_learned_sem:
        out["sem_probs"] = buffers["sem_probs"].reshape(h, w, n_classes)
    if cfg.want_fixed_sem:
        out["fixed_sem_probs"] = buffers["fixed_sem_probs"].reshape(h, w, n_classes)
    if cfg.want_instances:
        out["inst_probs"] = buffers["inst_probs"].reshape(h, w, n_things)

    sem = out.get("sem_probs", out.get("fixed_sem_probs"))
    if sem is not None:
        sem_flat = sem.reshape(n, n_classes)
        if (
            cfg.fuse_far is not None
            and "sem_probs" in out
            and "fixed_sem_probs" in out
        ):
            far = buffers["depth"] > cfg.fuse_far
            sem_flat = np.where(
                far[:, None],
                out["fixed_sem_probs"].reshape(n, n_classes),
                sem_flat,
            )
        inst_flat = (
            out["inst_probs"].reshape(n, n_things)
            if cfg.want_instances
            else np.zeros((n, n_things), np.float32)
        )
        cls, inst = compose_panoptic(sem_flat, inst_flat, inst_table, thing_classes)
        cls[~valid] = -1
        inst[~valid] = UNASSIGNED
        out["class_map"] = cls.reshape(h, w)
        out["instance_map"] = inst.reshape(h, w)
    return out
