"""Adversarial pre-training and teacher-student SSL."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor_engine as ag
from .augmentor import PointAugmentor, apply_crops, choose_boxes, plan_crops
from .config import TrainConfig, load_config, parse_config, scaled_schedule
from .datakit import Scene
from .detector import VoteDetector, nms
from .geometry import OrientedBox, clamp_to_box, global_augment, points_in_box, rotation_z
from .losses import (
    augmentor_loss,
    detection_loss,
    pretrain_detector_loss,
    rho,
    rho_inputs,
    ssl_losses,
)
from .metrics import evaluate
from .nn import Adam, Module, multistep_lr

__all__ = [
    "TrainConfig", "load_config", "parse_config", "scaled_schedule", "PseudoLabel", "TrainResult",
    "filter_pseudo_labels", "select_augmentation_targets", "ema_update", "baseline_policies",
    "pretrain", "ssl_train", "clone_detector",
]

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L_D", "L_A", "rho_mean", "L_l", "L_u", "mAP@0.25", "mAP@0.5")


@dataclass(eq=False)
class PseudoLabel:
    box: OrientedBox
    class_id: int
    objectness: float
    cls_prob: float
    iou_pred: float
    index: int = 0

    @property
    def confidence(self) -> float:
        return self.iou_pred * self.objectness


def filter_pseudo_labels(proposals, objectness=0.9, cls=0.9, iou=0.25) -> list[PseudoLabel]:
    """Keep teacher proposals that pass all three confidence gates."""
    out = []
    for p in proposals:
        pmax = float(np.max(p.class_probs))
        if p.objectness >= objectness and pmax >= cls and p.iou_pred >= iou:
            out.append(PseudoLabel(p.to_box(), p.class_id, p.objectness, pmax, p.iou_pred, p.index))
    return out


def select_augmentation_targets(pseudo_labels, pick=3, top_k=6, rng=None) -> list[OrientedBox]:
    """Randomly pick ``pick`` boxes among the ``top_k`` most confident pseudo-labels."""
    ranked = sorted(pseudo_labels, key=lambda p: (-p.confidence, p.index))[:top_k]
    if len(ranked) <= pick:
        return [p.box for p in ranked]
    rng = rng if rng is not None else np.random.default_rng()
    chosen = rng.choice(len(ranked), size=pick, replace=False)
    return [ranked[i].box for i in chosen]


def ema_update(teacher: Module, student: Module, decay: float) -> Module:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    t_params = teacher.named_parameters()
    s_params = student.named_parameters()
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name!r}: {tp.shape} vs {sp.shape}")
        tp.values = decay * tp.values + (1.0 - decay) * sp.values
    return teacher


# pre-defined object-level augmentations

BASELINE_POLICIES = ("none", "scale_flip_rotate", "disp0.5", "disp1", "disp5")


def baseline_policies(scene: Scene, policy: str, rng: np.random.Generator, m: int = 3,
                      boxes=None, force: Optional[dict] = None) -> Scene:
    """Hand-designed object-level augmentation of up to ``m`` boxes.

    ``scale_flip_rotate``: per object, scale U(0.85, 1.15), rotate U(-5, 5)
    degrees and mirror the local x axis with p=0.5, about the box centre.
    ``dispA``: per-point, per-axis jitter U(-A%, A%) of the box size.
    Moved points are clamped to their box. ``force`` fixes the scale/angle/
    flip draw for testing.
    """
    if policy not in BASELINE_POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {BASELINE_POLICIES}")
    if policy == "none":
        return scene.copy()
    boxes = list(scene.boxes or []) if boxes is None else list(boxes)
    points = scene.points.copy()
    claimed = np.zeros(len(points), dtype=bool)
    for box in choose_boxes(boxes, m, rng, points):
        idx = points_in_box(points, box)
        idx = idx[~claimed[idx]]
        claimed[idx] = True
        local = box.to_local(points[idx])
        if policy == "scale_flip_rotate":
            draw = {"scale": rng.uniform(0.85, 1.15),
                    "angle": np.deg2rad(rng.uniform(-5.0, 5.0)),
                    "flip": rng.random() < 0.5}
            draw.update(force or {})
            if draw["flip"]:
                local[:, 0] = -local[:, 0]
            local = (local @ rotation_z(draw["angle"]).T) * draw["scale"]
        else:
            alpha = float(policy[4:]) / 100.0
            local = local + rng.uniform(-alpha, alpha, local.shape) * box.size
        points[idx] = clamp_to_box(box.to_world(local), box)
    return scene.copy(points=points)


# training loops

@dataclass
class TrainResult:
    detector: VoteDetector
    augmentor: PointAugmentor
    metrics: list = field(default_factory=list)
    teacher: Optional[VoteDetector] = None
    info: dict = field(default_factory=dict)


def _set_lr(opt: Adam, lr: float):
    opt.lr = lr


def _eval_row(row, detector, val_scenes, cfg):
    if val_scenes:
        res = evaluate(detector, val_scenes, iou_threshold=cfg.nms_iou, objectness_floor=cfg.nms_objectness)
        row["mAP@0.25"], row["mAP@0.5"] = res.map25, res.map50


def _should_eval(epoch, n_epochs, cfg):
    last = epoch == n_epochs - 1
    return last or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0)


def _mean_or_blank(values):
    return float(np.mean(values)) if values else ""


def _stack(scenes):
    return np.stack([s.points for s in scenes])


def pretrain(labeled, cfg: TrainConfig, val_scenes=None, detector=None, augmentor=None,
             callback: Optional[Callable] = None) -> TrainResult:
    """Joint detector/augmentor training on labeled scenes.

    After warm-up, even steps update the detector with L_D and odd steps
    update the augmentor with L_A, the detector held fixed. During warm-up
    only the detector is trained. With ``cfg.use_augmentor`` False the
    augmented view equals the global view and the detector trains every
    step.
    """
    labeled = [s for s in labeled]
    if not labeled:
        raise ValueError("pretrain needs a non-empty labeled set")
    cfg.validate()
    pc = cfg.pretrain
    rng = np.random.default_rng([cfg.seed, 1])
    detector = detector or VoteDetector(seed=cfg.seed)
    augmentor = augmentor or PointAugmentor(seed=cfg.seed + 1)
    opt_d = Adam(detector.parameters(), lr=pc.lr)
    opt_a = Adam(augmentor.parameters(), lr=pc.lr)
    detector.zero_grad()
    augmentor.zero_grad()
    step = 0
    rows = []
    for epoch in range(pc.epochs):
        lr = multistep_lr(epoch, pc.lr, pc.milestones, pc.factors)
        _set_lr(opt_d, lr)
        _set_lr(opt_a, lr)
        warm = epoch < pc.warmup
        ld_hist, la_hist, rho_hist = [], [], []
        order = rng.permutation(len(labeled))
        for lo in range(0, len(order), pc.batch_size):
            batch = [labeled[i] for i in order[lo:lo + pc.batch_size]]
            views = [global_augment(s, "strong", rng)[0] for s in batch]
            gts = [v.boxes for v in views]
            xg = _stack(views)
            if not cfg.use_augmentor:
                out = detector(xg)
                ld = detection_loss(out, gts).total
                loss = pretrain_detector_loss(ld, ld)
                ag.backward(loss)
                opt_d.step()
                ld_hist.append(float(loss.values))
            else:
                crops = [plan_crops(v.points, choose_boxes(v.boxes, cfg.m, rng, v.points), cfg.s, rng)
                         for v in views]
                if warm or step % 2 == 0:
                    with ag.no_grad():
                        xa = np.stack([apply_crops(v.points, c, augmentor)[0].values
                                       for v, c in zip(views, crops)])
                    lg, la = _group_losses(detector, [(xg, gts), (xa, gts)])
                    loss = pretrain_detector_loss(lg, la)
                    ag.backward(loss)
                    opt_d.step()
                    augmentor.zero_grad()
                    ld_hist.append(float(loss.values))
                else:
                    with ag.no_grad():
                        out_g = detector(xg)
                        lg = detection_loss(out_g, gts).total
                    r = rho(rho_inputs(out_g, gts), use_objectness=cfg.objectness_rho)
                    with detector.frozen():
                        xa = [apply_crops(v.points, c, augmentor)[0] for v, c in zip(views, crops)]
                        out_a = detector(ag.concat([ag.reshape(x, (1, -1, 3)) for x in xa], axis=0))
                        la = detection_loss(out_a, gts).total
                        loss = augmentor_loss(la, lg, r, cfg.lam)
                        ag.backward(loss)
                    opt_a.step()
                    detector.zero_grad()
                    la_hist.append(float(loss.values))
                    rho_hist.append(r)
            step += 1
        row = {"epoch": epoch, "L_D": _mean_or_blank(ld_hist), "L_A": _mean_or_blank(la_hist),
               "rho_mean": _mean_or_blank(rho_hist), "L_l": "", "L_u": "",
               "mAP@0.25": "", "mAP@0.5": "", "lr": lr}
        if _should_eval(epoch, pc.epochs, cfg):
            _eval_row(row, detector, val_scenes, cfg)
        rows.append(row)
        logger.info("pretrain epoch %d: L_D=%s L_A=%s rho=%s", epoch, row["L_D"], row["L_A"], row["rho_mean"])
        if callback:
            callback(epoch, detector, augmentor)
    return TrainResult(detector, augmentor, rows, info={"steps": step})


def clone_detector(detector: VoteDetector) -> VoteDetector:
    twin = VoteDetector(**detector.config())
    twin.load_state_dict(detector.state_dict())
    return twin


def _group_losses(detector, groups):
    """Detection loss per (points, boxes) group from one batched forward.

    A group whose points equal the previous group's bit for bit (an
    augmentation that moved nothing) reuses that group's loss instead of
    running the detector twice on identical input.
    """
    unique, slots = [], []
    for i, (pts, gts) in enumerate(groups):
        if i % 2 == 1 and np.array_equal(pts, groups[i - 1][0]):
            slots.append(slots[-1])
        else:
            slots.append(len(unique))
            unique.append((pts, gts))
    out = detector(np.concatenate([g[0] for g in unique]))
    losses, at = [], 0
    for pts, gts in unique:
        losses.append(detection_loss(out.slice(at, at + len(pts)), gts).total)
        at += len(pts)
    return [losses[j] for j in slots]


def _cycle(rng, n):
    while True:
        yield from rng.permutation(n)


def ssl_train(labeled, unlabeled, detector: VoteDetector, augmentor: PointAugmentor, cfg: TrainConfig,
              val_scenes=None, callback: Optional[Callable] = None) -> TrainResult:
    """Teacher-student training with a frozen augmentor.

    One epoch is one pass over the labeled set; unlabeled scenes are drawn
    from a reshuffled stream. Pseudo-labels are regenerated every step and
    the teacher follows the student by EMA after every optimizer step.
    """
    labeled = list(labeled)
    unlabeled = [u.copy(boxes=None) if u.boxes is not None else u for u in unlabeled]
    if not labeled or not unlabeled:
        raise ValueError("ssl_train needs non-empty labeled and unlabeled sets")
    cfg.validate()
    sc = cfg.ssl
    rng = np.random.default_rng([cfg.seed, 2])
    student = clone_detector(detector)
    teacher = clone_detector(detector)
    for p in teacher.parameters():
        p.requires_grad = False
    opt = Adam(student.parameters(), lr=sc.lr)
    student.zero_grad()
    unl_stream = _cycle(rng, len(unlabeled))
    nl, nu = sc.labeled_per_batch, sc.unlabeled_per_batch
    rows, step = [], 0
    batch_log = []
    for epoch in range(sc.epochs):
        lr = multistep_lr(epoch, sc.lr, sc.milestones, sc.factors)
        _set_lr(opt, lr)
        ll_hist, lu_hist, n_pseudo = [], [], []
        order = rng.permutation(len(labeled))
        for lo in range(0, len(order) - nl + 1, nl):
            lab = [labeled[i] for i in order[lo:lo + nl]]
            unl = [unlabeled[next(unl_stream)] for _ in range(nu)]
            batch_log.append((len(lab), len(unl)))

            # teacher: weak view -> nms -> gates
            views = [(global_augment(u, "weak", rng), global_augment(u, "strong", rng)) for u in unl]
            with ag.no_grad():
                t_out = teacher(np.stack([w[0].points for w, _ in views]))
            pseudo_sets, strong_u = [], []
            for b, ((weak, tw), (strong, ts)) in enumerate(views):
                props = nms(t_out.proposals(b), cfg.nms_iou, cfg.nms_objectness)
                pseudo = filter_pseudo_labels(props, cfg.filter.objectness, cfg.filter.cls, cfg.filter.iou)
                mapped = [PseudoLabel(ts.apply_box(tw.invert_box(p.box)), p.class_id, p.objectness,
                                      p.cls_prob, p.iou_pred, p.index) for p in pseudo]
                pseudo_sets.append(mapped)
                strong_u.append(strong.copy(boxes=[p.box for p in mapped]))
                n_pseudo.append(len(mapped))
            strong_l = [global_augment(s, "strong", rng)[0] for s in lab]

            with ag.no_grad():
                aug_l, aug_u = [], []
                for v in strong_l:
                    boxes = choose_boxes(v.boxes, cfg.m, rng, v.points) if cfg.aug_labeled else []
                    aug_l.append(apply_crops(v.points, plan_crops(v.points, boxes, cfg.s, rng), augmentor)[0].values)
                for v, pseudo in zip(strong_u, pseudo_sets):
                    boxes = select_augmentation_targets(pseudo, cfg.pick, cfg.top_k, rng) if cfg.aug_unlabeled else []
                    aug_u.append(apply_crops(v.points, plan_crops(v.points, boxes, cfg.s, rng), augmentor)[0].values)

            xl, xu = _stack(strong_l), _stack(strong_u)
            yl, yu = [v.boxes for v in strong_l], [v.boxes for v in strong_u]
            terms = _group_losses(student, [(xl, yl), (np.stack(aug_l), yl), (xu, yu), (np.stack(aug_u), yu)])
            l_l, l_u, total = ssl_losses(*terms)
            ag.backward(total)
            opt.step()
            ema_update(teacher, student, cfg.ema_decay)
            ll_hist.append(float(l_l.values))
            lu_hist.append(float(l_u.values))
            step += 1
        row = {"epoch": epoch, "L_D": "", "L_A": "", "rho_mean": "",
               "L_l": _mean_or_blank(ll_hist), "L_u": _mean_or_blank(lu_hist),
               "mAP@0.25": "", "mAP@0.5": "", "lr": lr,
               "pseudo_per_scene": _mean_or_blank(n_pseudo)}
        if _should_eval(epoch, sc.epochs, cfg):
            _eval_row(row, student, val_scenes, cfg)
        rows.append(row)
        logger.info("ssl epoch %d: L_l=%s L_u=%s pseudo=%s", epoch, row["L_l"], row["L_u"], row["pseudo_per_scene"])
        if callback:
            callback(epoch, student, teacher)
    return TrainResult(student, augmentor, rows, teacher=teacher,
                       info={"steps": step, "batches": batch_log})
