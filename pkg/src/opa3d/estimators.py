"""scikit-learn style wrappers and input validation.

The estimators keep their constructor arguments untouched (so
``get_params``/``set_params``/``clone`` work) and put fitted state in
trailing-underscore attributes.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .augmentor import PointAugmentor, augment_scene
from .config import TrainConfig, scaled_schedule
from .datakit import Scene
from .detector import nms
from .geometry import OrientedBox, global_augment
from .metrics import evaluate
from .ssl_pipeline import pretrain, ssl_train


def check_points(points, min_points: int = 1, name: str = "points") -> np.ndarray:
    """Return ``points`` as a finite float64 (N, 3) array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if len(arr) < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite coordinates")
    return arr


def check_scene(scene, require_boxes: bool = False, min_points: int = 1) -> Scene:
    """Coerce a :class:`Scene` or a bare (N, 3) array into a validated Scene."""
    if not isinstance(scene, Scene):
        scene = Scene(check_points(scene, min_points))
    else:
        check_points(scene.points, min_points, name=f"scene {scene.id!r} points")
    if require_boxes and scene.boxes is None:
        raise ValueError(f"scene {scene.id!r} has no annotations")
    for b in scene.boxes or []:
        if not isinstance(b, OrientedBox):
            raise TypeError(f"scene {scene.id!r}: boxes must be OrientedBox, got {type(b).__name__}")
    return scene


def check_scenes(scenes, require_boxes=False, min_points=1, name="X") -> list[Scene]:
    if isinstance(scenes, (Scene, np.ndarray)):
        scenes = [scenes]
    scenes = [check_scene(s, require_boxes, min_points) for s in scenes]
    if not scenes:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(scenes):
        if not s.id:
            s.id = f"{name}{i}"
    return scenes


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class OPADetector(BaseEstimator):
    """Detector trained with object-level point augmentation.

    ``fit(labeled, unlabeled=None)`` runs adversarial pre-training and, when
    unlabeled scenes are given, the teacher-student stage. ``predict``
    returns post-NMS boxes per scene; ``score`` is mAP@0.25.

    Parameters
    ----------
    pretrain_epochs, ssl_epochs : int or None
        Shrink the default schedules (milestones scale along); None keeps
        the full schedule.
    pretrain_lr : float or None
        Override the pre-training base learning rate.
    use_augmentor, objectness_rho, aug_labeled, aug_unlabeled : bool
        Ablation switches.
    """

    def __init__(self, lam=0.1, m=3, s=1024, pretrain_epochs=None, ssl_epochs=None,
                 pretrain_lr=None, use_augmentor=True, objectness_rho=True,
                 aug_labeled=True, aug_unlabeled=True, seed=0):
        self.lam = lam
        self.m = m
        self.s = s
        self.pretrain_epochs = pretrain_epochs
        self.ssl_epochs = ssl_epochs
        self.pretrain_lr = pretrain_lr
        self.use_augmentor = use_augmentor
        self.objectness_rho = objectness_rho
        self.aug_labeled = aug_labeled
        self.aug_unlabeled = aug_unlabeled
        self.seed = seed

    def make_config(self) -> TrainConfig:
        cfg = TrainConfig(lam=self.lam, m=self.m, s=self.s, seed=self.seed,
                          use_augmentor=self.use_augmentor, objectness_rho=self.objectness_rho,
                          aug_labeled=self.aug_labeled, aug_unlabeled=self.aug_unlabeled)
        if self.pretrain_epochs is not None or self.ssl_epochs is not None:
            cfg = scaled_schedule(cfg, self.pretrain_epochs or cfg.pretrain.epochs,
                                  self.ssl_epochs or cfg.ssl.epochs)
        if self.pretrain_lr is not None:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, lr=self.pretrain_lr))
        return cfg.validate()

    def fit(self, X, y=None, unlabeled=None):
        """Train on annotated scenes ``X``; ``y`` is unused (boxes live in the scenes)."""
        labeled = check_scenes(X, require_boxes=True, name="X")
        cfg = self.make_config()
        result = pretrain(labeled, cfg)
        self.pretrain_metrics_ = result.metrics
        self.augmentor_ = result.augmentor
        self.detector_ = result.detector
        self.teacher_ = None
        if unlabeled is not None:
            pool = check_scenes(unlabeled, name="unlabeled")
            ssl = ssl_train(labeled, pool, result.detector, result.augmentor, cfg)
            self.detector_, self.teacher_ = ssl.detector, ssl.teacher
            self.ssl_metrics_ = ssl.metrics
        self.n_classes_ = self.detector_.n_classes
        return self

    def predict(self, X) -> list[list[OrientedBox]]:
        _check_fitted(self, "detector_")
        return [[p.to_box() for p in nms(self.detector_.detect(s.points))]
                for s in check_scenes(X, min_points=self.detector_.n_proposals)]

    def score(self, X, y=None) -> float:
        _check_fitted(self, "detector_")
        return evaluate(self.detector_, check_scenes(X, require_boxes=True)).map25


class ObjectAugmenter(TransformerMixin, BaseEstimator):
    """Apply a (learned) point augmentor to up to ``m`` boxes per scene.

    With ``augmentor=None`` a freshly initialised augmentor is used, whose
    zero final layer makes ``transform`` the identity.
    """

    def __init__(self, augmentor=None, m=3, s=1024, seed=0):
        self.augmentor = augmentor
        self.m = m
        self.s = s
        self.seed = seed

    def fit(self, X=None, y=None):
        self.augmentor_ = self.augmentor if self.augmentor is not None else PointAugmentor(seed=self.seed)
        self.rng_ = np.random.default_rng(self.seed)
        return self

    def transform(self, X) -> list[Scene]:
        _check_fitted(self, "augmentor_")
        out = []
        for scene in check_scenes(X, require_boxes=True):
            if not scene.boxes:
                out.append(scene.copy())
                continue
            out.append(augment_scene(scene, scene.boxes, self.m, self.augmentor_, self.rng_, self.s)[0])
        return out


class GlobalAugmenter(TransformerMixin, BaseEstimator):
    """Scene-level flip/rotate/scale/jitter with the weak, strong or none policy."""

    def __init__(self, policy="strong", seed=0):
        self.policy = policy
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.policy not in ("weak", "strong", "none"):
            raise ValueError(f"unknown policy {self.policy!r}")
        self.rng_ = np.random.default_rng(self.seed)
        return self

    def transform(self, X) -> list[Scene]:
        _check_fitted(self, "rng_")
        scenes = check_scenes(X)
        self.transforms_ = []
        out = []
        for s in scenes:
            aug, t = global_augment(s, self.policy, self.rng_)
            out.append(aug)
            self.transforms_.append(t)
        return out
