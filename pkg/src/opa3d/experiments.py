"""Desk-scale ablation study on synthetic scenes.

Each seed gets its own labeled/unlabeled split and runs three pre-trainings
(full, without augmentor, without objectness in ρ) followed by the matching
SSL stage. Pre-training results double as the with/without-augmentor
comparison of the pre-trained models.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrainConfig, scaled_schedule
from .datakit import generate_dataset, make_split
from .ssl_pipeline import pretrain, ssl_train

logger = logging.getLogger(__name__)

# variant -> config overrides; numbers follow the CLI ablation IDs
VARIANTS = {
    "id5_full": {},
    "id1_no_object_aug": {"use_augmentor": False, "aug_labeled": False, "aug_unlabeled": False},
    "id4_no_objectness_rho": {"objectness_rho": False},
}


@dataclass
class StudySettings:
    n_train: int = 200
    n_val: int = 50
    ratio: float = 0.1
    seeds: tuple = (0, 1, 2)
    pretrain_epochs: int = 60
    ssl_epochs: int = 80
    pretrain_lr: float = 0.003
    data_seed: int = 0
    variants: tuple = tuple(VARIANTS)


@dataclass
class StudyResult:
    settings: StudySettings
    pretrain_map: dict = field(default_factory=dict)  # variant -> [mAP@0.25 per seed]
    ssl_map: dict = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, stage: str, variant: str) -> float:
        table = self.pretrain_map if stage == "pretrain" else self.ssl_map
        return float(np.mean(table[variant]))


def study_config(settings: StudySettings, seed: int, variant: str) -> TrainConfig:
    cfg = scaled_schedule(TrainConfig(seed=seed), settings.pretrain_epochs, settings.ssl_epochs)
    cfg = replace(cfg, eval_every=0, pretrain=replace(cfg.pretrain, lr=settings.pretrain_lr))
    return replace(cfg, **VARIANTS[variant]).validate()


def run_study(settings: StudySettings | None = None) -> StudyResult:
    settings = settings or StudySettings()
    t0 = time.perf_counter()
    train = generate_dataset(settings.n_train, settings.data_seed, prefix="train")
    val = generate_dataset(settings.n_val, settings.data_seed + 1, prefix="val")
    by_id = {s.id: s for s in train}
    result = StudyResult(settings)
    for seed in settings.seeds:
        split = make_split(list(by_id), settings.ratio, seed)
        labeled = [by_id[i] for i in split.labeled]
        unlabeled = [by_id[i] for i in split.unlabeled]
        for variant in settings.variants:
            cfg = study_config(settings, seed, variant)
            pre = pretrain(labeled, cfg, val)
            ssl = ssl_train(labeled, unlabeled, pre.detector, pre.augmentor, cfg, val)
            result.pretrain_map.setdefault(variant, []).append(pre.metrics[-1]["mAP@0.25"])
            result.ssl_map.setdefault(variant, []).append(ssl.metrics[-1]["mAP@0.25"])
            logger.info("seed %d %s: pretrain %.4f ssl %.4f", seed, variant,
                        result.pretrain_map[variant][-1], result.ssl_map[variant][-1])
    result.seconds = time.perf_counter() - t0
    return result
