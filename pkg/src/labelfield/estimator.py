"""Scikit-learn-style facade over scene fitting and label-map prediction.

    est = PanopticLabelTransfer(preset="desk", stage2=True)
    est.fit("path/to/bundle")
    class_map = est.predict("persp_left_00")[0]

The estimator wraps the full pipeline: ray-pool construction, two-stage
optimization, and per-view rendering of panoptic label maps.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .boundaries import make_refiner
from .cameras import Camera
from .errors import ConfigError
from .field import ModelConfig, SceneModel
from .metrics import miou_acc
from .rendering import RenderConfig, render_view
from .scene import SceneBundle, load_bundle
from .training import SceneData, TrainConfig, train_stage1, train_stage2

_PRESETS = {
    "tiny": (ModelConfig.tiny, TrainConfig.tiny),
    "desk": (ModelConfig.desk, TrainConfig.desk),
    "full": (ModelConfig, TrainConfig),
}


class PanopticLabelTransfer(BaseEstimator):
    """Fits the joint radiance/semantic field on one scene and predicts
    dense per-view class and instance maps.

    Parameters mirror the command-line surface: `preset` picks the model
    and schedule size, `stage1_iters`/`stage2_iters` override the preset
    schedule, `stage2` enables instance-boundary finetuning, and
    `fuse_far` switches far pixels to membership-derived labels at render
    time.
    """

    def __init__(self, preset="desk", stage1_iters=None, stage2=False,
                 stage2_iters=None, seed=0, fuse_far=None, samples=24,
                 sky_samples=4, refiner_band=6.0):
        self.preset = preset
        self.stage1_iters = stage1_iters
        self.stage2 = stage2
        self.stage2_iters = stage2_iters
        self.seed = seed
        self.fuse_far = fuse_far
        self.samples = samples
        self.sky_samples = sky_samples
        self.refiner_band = refiner_band

    # -- fitting ---------------------------------------------------------

    def _resolve_scene(self, X):
        if isinstance(X, (str, Path)):
            X = load_bundle(X)
        if isinstance(X, SceneBundle):
            return X.to_scene_data(), X
        if isinstance(X, SceneData):
            return X, None
        raise ConfigError(
            f"cannot fit on {type(X).__name__}; expected a bundle directory, "
            "SceneBundle, or SceneData")

    def fit(self, X, y=None):
        """X: bundle directory path, SceneBundle, or SceneData."""
        if self.preset not in _PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; "
                              f"choose from {sorted(_PRESETS)}")
        data, bundle = self._resolve_scene(X)
        model_cfg, train_cfg = (f() for f in _PRESETS[self.preset])
        overrides = {}
        if self.stage1_iters is not None:
            overrides["stage1_iters"] = self.stage1_iters
        if self.stage2_iters is not None:
            overrides["stage2_iters"] = self.stage2_iters
        if overrides:
            train_cfg = train_cfg.with_overrides(**overrides)

        model = SceneModel(model_cfg, n_frames=data.n_frames,
                           n_classes=data.n_classes, seed=self.seed)
        model.set_normalizer_from_primitives(data.primitives)
        rows = train_stage1(model, data, train_cfg, seed=self.seed)
        if self.stage2:
            if data.building_class is None:
                raise ConfigError("stage2 needs a building class in the scene")
            refiner = make_refiner(data.building_class, band=self.refiner_band)
            rows += train_stage2(model, data, train_cfg, refiner,
                                 seed=self.seed + 1)
        self.model_ = model
        self.scene_data_ = data
        self.bundle_ = bundle
        self.loss_curve_ = rows
        self.n_classes_ = data.n_classes
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This PanopticLabelTransfer instance is not fitted yet; "
                "call fit before predicting.")

    # -- prediction ------------------------------------------------------

    def _cameras_for(self, X):
        if X is None:
            return [v.camera for v in self.scene_data_.views]
        if isinstance(X, (str, Camera)):
            X = [X]
        out = []
        for item in X:
            if isinstance(item, Camera):
                out.append(item)
            else:
                matches = [v.camera for v in self.scene_data_.views
                           if v.camera.name == item]
                if not matches:
                    raise ConfigError(f"no camera named {item!r}")
                out.append(matches[0])
        return out

    def render(self, camera, want_color=True):
        """Full render dict for one camera of the fitted scene."""
        self._check_fitted()
        cfg = RenderConfig(
            n_primitive_samples=self.samples, n_sky_samples=self.sky_samples,
            fuse_far=self.fuse_far, want_color=want_color,
        )
        return render_view(
            self.model_, camera, self.scene_data_.primitives, cfg,
            sky_class=self.scene_data_.sky_class,
            thing_classes=self.scene_data_.thing_classes,
        )

    def predict(self, X=None):
        """Class maps for cameras, view names, or every fitted view."""
        return [cls for cls, _ in self.predict_panoptic(X)]

    def predict_panoptic(self, X=None):
        """(class_map, instance_map) pairs; instance 0 means none."""
        self._check_fitted()
        out = []
        for cam in self._cameras_for(X):
            r = self.render(cam, want_color=False)
            out.append((r["class_map"], r["instance_map"]))
        return out

    def score(self, X=None, y=None):
        """Mean IoU of predicted semantics against bundle ground truth."""
        self._check_fitted()
        if self.bundle_ is None or not self.bundle_.has_gt:
            raise ConfigError("score needs a fitted bundle with ground truth")
        cams = self._cameras_for(X)
        preds = self.predict([c.name for c in cams])
        pred_stack = []
        gt_stack = []
        for cam, pred in zip(cams, preds):
            gt = self.bundle_.gt_sem[cam.name]
            pred_stack.append(pred.reshape(-1))
            gt_stack.append(np.where(pred < 0, -1, gt).reshape(-1))
        _, miou, _ = miou_acc(np.concatenate(pred_stack),
                              np.concatenate(gt_stack), self.n_classes_)
        return miou
