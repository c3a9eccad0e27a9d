"""Scene representation: hybrid feature field plus fixed label fields.

The learned field combines a deep MLP trunk on positionally encoded
coordinates with a multi-resolution hash grid; their features concatenate
into one vector that feeds density, color, and semantic heads.  Density
reads the feature alone, so it cannot depend on view direction or
appearance codes.

The fixed fields need no parameters: per-sample class and instance
probabilities come straight from bounding-primitive membership.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .cameras import appearance_alpha
from .errors import ConfigError

_HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the full-scale configuration; desk() is sized for CPU
    training on small scenes and tiny() for gradient checks.
    """

    trunk_width: int = 256
    trunk_depth: int = 8
    skip_at: int = 4
    feature_dim: int = 128
    pe_x_levels: int = 15
    pe_d_levels: int = 4
    grid_levels: int = 16
    grid_features: int = 2
    grid_table_size: int = 2**19
    grid_n_min: int = 16
    grid_n_max: int = 524288
    grid_hidden: int = 64
    color_hidden: int = 128
    sem_hidden: int = 128
    appearance_dim: int = 12

    def __post_init__(self):
        if not 0 < self.skip_at < self.trunk_depth:
            raise ConfigError("skip_at must lie strictly inside the trunk")
        for name in ("trunk_width", "feature_dim", "pe_x_levels", "pe_d_levels",
                     "grid_levels", "grid_features", "grid_table_size",
                     "grid_n_min", "grid_n_max", "grid_hidden", "color_hidden",
                     "sem_hidden", "appearance_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.grid_n_max < self.grid_n_min:
            raise ConfigError("grid_n_max must be >= grid_n_min")

    @classmethod
    def desk(cls):
        return cls(
            trunk_width=64, trunk_depth=8, skip_at=4, feature_dim=32,
            pe_x_levels=8, pe_d_levels=4, grid_levels=8, grid_features=2,
            grid_table_size=2**14, grid_n_min=16, grid_n_max=2048,
            grid_hidden=32, color_hidden=64, sem_hidden=64, appearance_dim=12,
        )

    @classmethod
    def tiny(cls):
        return cls(
            trunk_width=16, trunk_depth=3, skip_at=2, feature_dim=8,
            pe_x_levels=3, pe_d_levels=2, grid_levels=2, grid_features=2,
            grid_table_size=2**8, grid_n_min=4, grid_n_max=16,
            grid_hidden=8, color_hidden=16, sem_hidden=16, appearance_dim=4,
        )

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_overrides(self, **kw):
        return replace(self, **kw)


def positional_encode(x, levels):
    """(sin 2^l pi x, cos 2^l pi x) per level, concatenated over levels.

    Inputs are expected in roughly [-1, 1]; values beyond that (far sky
    samples) are still well defined, just aliased by the periodic basis.
    """
    x = np.asarray(x)
    n, d = x.shape
    out = np.empty((n, 2 * d * levels), dtype=x.dtype)
    for l in range(levels):
        arg = (np.pi * (2.0**l)) * x
        out[:, 2 * d * l : 2 * d * l + d] = np.sin(arg)
        out[:, 2 * d * l + d : 2 * d * (l + 1)] = np.cos(arg)
    return out


def grid_resolutions(cfg):
    """Per-level lattice resolutions, geometric from n_min to n_max."""
    L = cfg.grid_levels
    if L == 1:
        return np.array([cfg.grid_n_min], dtype=np.int64)
    b = np.exp((np.log(cfg.grid_n_max) - np.log(cfg.grid_n_min)) / (L - 1))
    return np.floor(cfg.grid_n_min * b ** np.arange(L)).astype(np.int64)


def hash_corners(x, cfg):
    """Corner rows and trilinear weights for all levels.

    x is (N, 3) in [-1, 1] (clamped here).  Returns int row indices
    (N, levels, 8) into the concatenated per-level table and matching
    weights.  The hash is fixed, never seeded: rows are
    (ix*p1 xor iy*p2 xor iz*p3) mod table_size, offset by level.
    """
    x = np.clip(np.asarray(x, np.float64), -1.0, 1.0)
    n = x.shape[0]
    res = grid_resolutions(cfg)
    t_size = np.uint64(cfg.grid_table_size)
    # Table sizes are powers of two in practice, where the modulo reduces to a
    # mask; fall back to the (much slower) uint64 division otherwise.
    pow2 = cfg.grid_table_size & (cfg.grid_table_size - 1) == 0
    mask = np.uint64(cfg.grid_table_size - 1)
    u = ((x + 1.0) * 0.5)[:, None, :] * res[None, :, None].astype(np.float64)  # (N, L, 3)
    base = np.floor(u)
    frac = u - base
    omf = 1.0 - frac
    base = base.astype(np.uint64)
    level_off = (np.arange(cfg.grid_levels, dtype=np.int64) * cfg.grid_table_size)[None, :]
    idx = np.empty((n, cfg.grid_levels, 8), dtype=np.int64)
    w = np.empty((n, cfg.grid_levels, 8), dtype=np.float64)
    for c in range(8):
        bits = ((c >> 2) & 1, (c >> 1) & 1, c & 1)
        h = (base[..., 0] + np.uint64(bits[0])) * _HASH_PRIMES[0]
        h ^= (base[..., 1] + np.uint64(bits[1])) * _HASH_PRIMES[1]
        h ^= (base[..., 2] + np.uint64(bits[2])) * _HASH_PRIMES[2]
        h = h & mask if pow2 else h % t_size
        idx[:, :, c] = h.astype(np.int64) + level_off
        parts = [frac[..., a] if bits[a] else omf[..., a] for a in range(3)]
        w[:, :, c] = parts[0] * parts[1] * parts[2]
    return idx, w


@dataclass
class FieldOutput:
    sigma: ad.Tensor          # (R, S)
    sem_logits: ad.Tensor | None    # (R, S, M)
    color: ad.Tensor | None   # (R, S, 3)


class SceneModel:
    """Owns the parameter store and runs the field forward pass."""

    def __init__(self, cfg, n_frames, n_classes, seed=0, store=None, dtype=np.float32):
        self.cfg = cfg
        self.n_frames = int(n_frames)
        self.n_classes = int(n_classes)
        pe_x = 6 * cfg.pe_x_levels
        pe_d = 6 * cfg.pe_d_levels
        w, dep, skip = cfg.trunk_width, cfg.trunk_depth, cfg.skip_at
        self._pre_spec = ad.StackSpec(
            widths=(w,) * skip, activations=("relu",) * skip
        )
        self._post_spec = ad.StackSpec(
            widths=(w,) * (dep - skip) + (cfg.feature_dim,),
            activations=("relu",) * (dep - skip) + ("linear",),
        )
        self._grid_spec = ad.StackSpec(
            widths=(cfg.grid_hidden, cfg.feature_dim), activations=("relu", "linear")
        )
        self._density_spec = ad.StackSpec(widths=(1,), activations=("softplus",))
        self._sem_spec = ad.StackSpec(
            widths=(cfg.sem_hidden, n_classes), activations=("relu", "linear")
        )
        self._color_spec = ad.StackSpec(
            widths=(cfg.color_hidden, 3), activations=("relu", "sigmoid")
        )
        feat = 2 * cfg.feature_dim
        if store is None:
            rng = np.random.default_rng(seed)
            store = ad.ParamStore(dtype)
            ad.init_dense_stack(store, "trunk.pre", pe_x, self._pre_spec, rng)
            ad.init_dense_stack(store, "trunk.post", w + pe_x, self._post_spec, rng)
            store.create(
                "grid.table",
                rng.uniform(-1e-4, 1e-4,
                            size=(cfg.grid_levels * cfg.grid_table_size, cfg.grid_features)),
            )
            ad.init_dense_stack(
                store, "grid.head", cfg.grid_levels * cfg.grid_features, self._grid_spec, rng
            )
            ad.init_dense_stack(
                store, "density", feat, self._density_spec, rng, zero_last=True, last_bias=0.2
            )
            ad.init_dense_stack(store, "sem", feat, self._sem_spec, rng)
            ad.init_dense_stack(
                store, "color", feat + pe_d + cfg.appearance_dim, self._color_spec, rng
            )
            store.create(
                "appearance.z", rng.normal(0.0, 0.01, size=(n_frames, cfg.appearance_dim))
            )
            store.create("norm.center", np.zeros(3), trainable=False)
            store.create("norm.scale", np.ones(3), trainable=False)
        else:
            needed = ["trunk.pre.w0", "trunk.post.w0", "grid.table", "grid.head.w0",
                      "density.w0", "sem.w0", "color.w0", "appearance.z",
                      "norm.center", "norm.scale"]
            for name in needed:
                if name not in store:
                    raise ConfigError(f"checkpoint is missing block {name!r}")
            tbl = store.get("grid.table").data
            want = (cfg.grid_levels * cfg.grid_table_size, cfg.grid_features)
            if tbl.shape != want:
                raise ConfigError(f"grid.table shape {tbl.shape} does not match config {want}")
            if store.get("appearance.z").data.shape != (n_frames, cfg.appearance_dim):
                raise ConfigError("appearance.z shape does not match frames/config")
        self.store = store

    # -- scene normalization --------------------------------------------

    def set_normalizer(self, lo, hi, margin=0.05):
        lo = np.asarray(lo, np.float64)
        hi = np.asarray(hi, np.float64)
        span = np.maximum(hi - lo, 1e-6)
        lo = lo - margin * span
        hi = hi + margin * span
        self.store.get("norm.center").data[:] = ((lo + hi) / 2.0).astype(self.store.dtype)
        self.store.get("norm.scale").data[:] = ((hi - lo) / 2.0).astype(self.store.dtype)

    def set_normalizer_from_primitives(self, primitives, margin=0.05):
        boxes = [p.aabb() for p in primitives]
        if not boxes:
            self.set_normalizer(-np.ones(3), np.ones(3), margin=0.0)
            return
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        self.set_normalizer(lo, hi, margin)

    def normalize(self, x):
        c = self.store.get("norm.center").data
        s = self.store.get("norm.scale").data
        return ((np.asarray(x) - c) / s).astype(self.store.dtype)

    # -- appearance -------------------------------------------------------

    def appearance_codes(self, frame_idx):
        """Trainable per-frame codes gathered per ray (differentiable)."""
        frame_idx = np.asarray(frame_idx, dtype=np.int64)
        if (frame_idx < 0).any() or (frame_idx >= self.n_frames).any():
            raise ConfigError("frame index out of range")
        return ad.take_rows(self.store.get("appearance.z"), frame_idx)

    def interpolated_codes(self, dirs, left_frame, right_frame, d_left, d_right):
        """Per-ray codes blended between two anchor views by angle."""
        z = self.store.get("appearance.z").data
        alpha = appearance_alpha(dirs, d_left, d_right).astype(self.store.dtype)
        return alpha[:, None] * z[left_frame] + (1.0 - alpha[:, None]) * z[right_frame]

    # -- forward ----------------------------------------------------------

    def features(self, positions_flat):
        """Unified feature for N flat positions (Tensor, (N, 2 * feature_dim))."""
        cfg = self.cfg
        xn = self.normalize(positions_flat)
        pe = ad.constant(positional_encode(xn, cfg.pe_x_levels))
        h = ad.apply_dense_stack(self.store, "trunk.pre", pe, self._pre_spec)
        h = ad.concat([h, pe], axis=-1)
        f1 = ad.apply_dense_stack(self.store, "trunk.post", h, self._post_spec)
        idx, w = hash_corners(xn, cfg)
        n = xn.shape[0]
        g = ad.weighted_gather(
            self.store.get("grid.table"),
            idx.reshape(n * cfg.grid_levels, 8),
            w.reshape(n * cfg.grid_levels, 8).astype(self.store.dtype),
        )
        g = ad.reshape(g, (n, cfg.grid_levels * cfg.grid_features))
        f2 = ad.apply_dense_stack(self.store, "grid.head", g, self._grid_spec)
        return ad.concat([f1, f2], axis=-1)

    def forward(self, positions, view_dirs=None, appearance=None,
                want_sem=True, want_color=True):
        """Field evaluation over (R, S, 3) sample positions.

        view_dirs is (R, 3) per ray; appearance is a Tensor or array of
        per-ray codes (R, appearance_dim).  Both may be omitted when color
        is not requested.  Density depends on position features alone.
        """
        r, s, _ = positions.shape
        flat = positions.reshape(r * s, 3)
        f = self.features(flat)
        sigma = ad.apply_dense_stack(self.store, "density", f, self._density_spec)
        sigma = ad.reshape(sigma, (r, s))
        sem = None
        if want_sem:
            sem = ad.apply_dense_stack(self.store, "sem", f, self._sem_spec)
            sem = ad.reshape(sem, (r, s, self.n_classes))
        color = None
        if want_color:
            if view_dirs is None or appearance is None:
                raise ConfigError("color rendering needs view_dirs and appearance codes")
            pe_d = positional_encode(
                np.asarray(view_dirs, self.store.dtype), self.cfg.pe_d_levels
            )
            pe_d_rep = ad.constant(np.repeat(pe_d, s, axis=0))
            if isinstance(appearance, ad.Tensor):
                z_rep = ad.repeat_rows(appearance, s)
            else:
                z_rep = ad.constant(np.repeat(np.asarray(appearance, self.store.dtype), s, axis=0))
            cin = ad.concat([f, pe_d_rep, z_rep], axis=-1)
            color = ad.apply_dense_stack(self.store, "color", cin, self._color_spec)
            color = ad.reshape(color, (r, s, 3))
        return FieldOutput(sigma=sigma, sem_logits=sem, color=color)


# ---------------------------------------------------------------------------
# Fixed fields from membership


def class_presence(batch, bundle, n_classes):
    """(R, S, n_classes) bool: does any member interval carry this class."""
    r, k = bundle.itv_class.shape
    onehot = np.zeros((r, k, n_classes), dtype=np.float32)
    valid = bundle.itv_class >= 0
    rr, kk = np.nonzero(valid)
    onehot[rr, kk, bundle.itv_class[valid]] = 1.0
    counts = np.einsum("rsk,rkm->rsm", batch.member.astype(np.float32), onehot)
    return counts > 0.5


def fixed_semantic_probs(batch, bundle, n_classes, sky_class):
    """Per-sample fixed class distribution s_hat.

    Uniform over the member classes; samples with no member primitive are
    sky.  Padding samples also read as sky, which is harmless since their
    rendering weight is exactly zero.
    """
    presence = class_presence(batch, bundle, n_classes).astype(np.float32)
    total = presence.sum(axis=-1, keepdims=True)
    empty = total[..., 0] <= 0
    probs = np.divide(presence, np.maximum(total, 1.0))
    probs[empty] = 0.0
    probs[empty, sky_class] = 1.0
    return probs


def unique_class_labels(batch, bundle, n_classes, sky_class):
    """(labels (R, S), unique (R, S)): the single member class where defined.

    Sky samples count as unique with the sky label; overlap samples (two or
    more member classes) and padding are not unique.
    """
    presence = class_presence(batch, bundle, n_classes)
    count = presence.sum(axis=-1)
    labels = presence.argmax(axis=-1)
    sky = ~batch.pad & (count == 0)
    labels = np.where(sky, sky_class, labels)
    unique = (count == 1) | sky
    unique &= ~batch.pad
    return labels.astype(np.int64), unique


def fixed_instance_probs(batch, bundle, n_things, allowed_class=None):
    """Per-sample fixed instance distribution t_hat over thing ids.

    Only intervals whose primitive carries an instance id contribute; when
    allowed_class is given, other classes are masked out.  Samples with no
    member thing get an all-zero row.
    """
    r, k = bundle.itv_instance.shape
    use = bundle.itv_instance >= 0
    if allowed_class is not None:
        use &= bundle.itv_class == allowed_class
    onehot = np.zeros((r, k, n_things), dtype=np.float32)
    rr, kk = np.nonzero(use)
    onehot[rr, kk, bundle.itv_instance[use]] = 1.0
    counts = np.einsum("rsk,rkm->rsm", batch.member.astype(np.float32), onehot)
    presence = (counts > 0.5).astype(np.float32)
    total = presence.sum(axis=-1, keepdims=True)
    return np.divide(presence, np.maximum(total, 1.0))
