"""Training objectives for the detector and the augmentor."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor_engine as ag
from .tensor_engine import Tensor
from .detector import DetectorOutput, match_arrays
from .geometry import OrientedBox, points_in_box
from .metrics import iou_3d

logger = logging.getLogger(__name__)

LOSS_WEIGHTS = {
    "vote": 1.0,
    "objectness": 0.5,
    "center": 1.0,
    "size": 1.0,
    "yaw": 1.0,
    "cls": 0.1,
    "iou_est": 1.0,
}
EXP_CLIP = 20.0


@dataclass(eq=False)
class DetectionLossBreakdown:
    vote: Tensor
    objectness: Tensor
    center: Tensor
    size: Tensor
    yaw: Tensor
    cls: Tensor
    iou_est: Tensor
    total: Tensor

    def values(self) -> dict:
        return {f.name: float(getattr(self, f.name).values) for f in fields(self)}


@dataclass
class DetectionTargets:
    """Per-proposal targets for a batch, flattened to B*K rows."""

    kind: np.ndarray           # 1 positive, 0 negative, -1 ignored
    gt_center: np.ndarray      # (B*K, 3)
    gt_log_size: np.ndarray    # (B*K, 3)
    gt_sc: np.ndarray          # (B*K, 2)
    gt_class: np.ndarray       # (B*K,)
    iou: np.ndarray            # actual IoU of decoded box vs matched GT
    vote_mask: np.ndarray      # (B*Ms,) seed lies in some GT box
    vote_target: np.ndarray    # (B*Ms, 3)


def build_targets(output: DetectorOutput, gt_boxes_per_scene) -> DetectionTargets:
    """Match proposals to GT and compute regression targets (no gradients).

    Proposals are labelled by their vote anchor, the position the head
    regresses its centre offset from, so the labels do not depend on the
    regression output being trained.
    """
    B, K = output.centers.shape[:2]
    Ms = output.seed_xyz.shape[1]
    n = B * K
    t = DetectionTargets(
        kind=np.zeros(n, dtype=np.int64),
        gt_center=np.zeros((n, 3)),
        gt_log_size=np.zeros((n, 3)),
        gt_sc=np.zeros((n, 2)),
        gt_class=np.zeros(n, dtype=np.int64),
        iou=np.zeros(n),
        vote_mask=np.zeros(B * Ms, dtype=bool),
        vote_target=np.zeros((B * Ms, 3)),
    )
    for b in range(B):
        gts = list(gt_boxes_per_scene[b] or [])
        rows = slice(b * K, (b + 1) * K)
        kind, gt_index = match_arrays(output.votes.values[b], gts)
        t.kind[rows] = kind
        props = output.proposals(b)
        for k in np.flatnonzero(kind == 1):
            gt = gts[gt_index[k]]
            r = b * K + k
            t.gt_center[r] = gt.center
            t.gt_log_size[r] = np.log(gt.size)
            t.gt_sc[r] = (np.sin(gt.yaw), np.cos(gt.yaw))
            t.gt_class[r] = gt.class_id
            p = props[k]
            t.iou[r] = iou_3d(OrientedBox(p.center, p.size, p.yaw, 0), gt.copy(class_id=0))
        seeds = output.seed_xyz.values[b]
        for j, gt in enumerate(gts):
            inside = points_in_box(seeds, gt)
            fresh = inside[~t.vote_mask[b * Ms + inside]]
            t.vote_mask[b * Ms + fresh] = True
            t.vote_target[b * Ms + fresh] = gt.center
    return t


def _masked_mean(x: Tensor, rows: np.ndarray) -> Tensor:
    if len(rows) == 0:
        return Tensor(0.0)
    return ag.mean(ag.gather(x, rows))


def detection_loss(output: DetectorOutput, gt_boxes_per_scene, targets: Optional[DetectionTargets] = None,
                   weights=None) -> DetectionLossBreakdown:
    """Vote-detector loss for a batch; every component is mean-reduced.

    Pass precomputed ``targets`` to hold matching and IoU targets fixed.
    """
    weights = weights or LOSS_WEIGHTS
    if targets is None:
        targets = build_targets(output, gt_boxes_per_scene)
    B, K = output.centers.shape[:2]
    C = output.cls_logits.shape[-1]
    flat = lambda x, d: ag.reshape(x, (B * K, d)) if d else ag.reshape(x, (B * K,))

    pos = np.flatnonzero(targets.kind == 1)
    labelled = np.flatnonzero(targets.kind >= 0)
    voting = np.flatnonzero(targets.vote_mask)

    bce = ag.binary_cross_entropy_with_logits(flat(output.obj_logits, 0), (targets.kind == 1).astype(float))
    objectness = _masked_mean(bce, labelled)

    if len(pos):
        ce = ag.cross_entropy(ag.gather(flat(output.cls_logits, C), pos), targets.gt_class[pos])
        cls = ag.mean(ce)
        center = ag.mean(ag.tsum(ag.huber(ag.gather(flat(output.centers, 3), pos) - targets.gt_center[pos]), axis=1))
        size = ag.mean(ag.tsum(ag.huber(ag.gather(flat(output.log_sizes, 3), pos) - targets.gt_log_size[pos]), axis=1))
        yaw = ag.mean(ag.tsum(ag.huber(ag.gather(flat(output.yaw_sc, 2), pos) - targets.gt_sc[pos]), axis=1))
        iou_pred = ag.sigmoid(ag.gather(flat(output.iou_logits, 0), pos))
        iou_est = ag.mean(ag.huber(iou_pred - targets.iou[pos]))
    else:
        cls = center = size = yaw = iou_est = Tensor(0.0)

    if len(voting):
        Ms = output.seed_votes.shape[1]
        seed_votes = ag.reshape(output.seed_votes, (B * Ms, 3))
        vote = ag.mean(ag.tsum(ag.huber(ag.gather(seed_votes, voting) - targets.vote_target[voting]), axis=1))
    else:
        vote = Tensor(0.0)

    parts = {"vote": vote, "objectness": objectness, "center": center, "size": size,
             "yaw": yaw, "cls": cls, "iou_est": iou_est}
    total = Tensor(0.0)
    for name, value in parts.items():
        total = total + value * weights[name]
    return DetectionLossBreakdown(total=total, **parts)


# objectness-aware rho

@dataclass
class RhoInputs:
    gt_class: np.ndarray     # (n,) class ids (one-hot implied)
    class_probs: np.ndarray  # (n, C)
    objectness: np.ndarray   # (n,)

    @property
    def p_gt(self) -> np.ndarray:
        return self.class_probs[np.arange(len(self.gt_class)), self.gt_class]


def rho(inputs: RhoInputs, use_objectness: bool = True) -> float:
    """max(1, mean_i exp(objectness_i * p_gt_i)); 1 when nothing is matched."""
    if len(inputs.gt_class) == 0:
        logger.debug("rho: no matched objects, using 1")
        return 1.0
    scale = np.asarray(inputs.objectness, dtype=np.float64) if use_objectness else 1.0
    terms = np.exp(scale * inputs.p_gt)
    return float(max(1.0, np.mean(terms)))


def rho_inputs(output: DetectorOutput, gt_boxes_per_scene) -> RhoInputs:
    """One entry per GT box with a positive proposal: the nearest such proposal.

    Matching uses the vote anchors, as in :func:`build_targets`.
    """
    gt_class, probs, obj = [], [], []
    for b in range(output.batch_size):
        gts = list(gt_boxes_per_scene[b] or [])
        if not gts:
            continue
        props = output.proposals(b)
        centers = output.votes.values[b]
        kind, gt_index = match_arrays(centers, gts)
        for j, gt in enumerate(gts):
            cand = np.flatnonzero((kind == 1) & (gt_index == j))
            if len(cand) == 0:
                continue
            best = cand[np.argmin(np.linalg.norm(centers[cand] - gt.center, axis=1))]
            gt_class.append(gt.class_id)
            probs.append(props[best].class_probs)
            obj.append(props[best].objectness)
    n_cls = output.cls_logits.shape[-1]
    return RhoInputs(np.asarray(gt_class, dtype=np.int64),
                     np.asarray(probs, dtype=np.float64).reshape(-1, n_cls),
                     np.asarray(obj, dtype=np.float64))


def augmentor_loss(loss_aug, loss_global, rho_value: float, lam: float):
    """L_a + lam * |1 - exp(L_a - rho * L_g)| with the exponent clipped to +-20.

    ``loss_global`` is treated as a constant.
    """
    loss_aug = ag.as_tensor(loss_aug)
    lg = float(ag.as_tensor(loss_global).values)
    gap = ag.clip(loss_aug - rho_value * lg, -EXP_CLIP, EXP_CLIP)
    return loss_aug + ag.absolute(1.0 - ag.exp(gap)) * lam


def pretrain_detector_loss(loss_global, loss_aug):
    return ag.add(loss_global, loss_aug)


def ssl_losses(labeled_g, labeled_a, unlabeled_g=None, unlabeled_a=None):
    """Return ``(L_l, L_u, L_ssl)``; missing unlabeled terms count as zero."""
    l_l = ag.add(labeled_g, labeled_a)
    l_u = Tensor(0.0)
    for term in (unlabeled_g, unlabeled_a):
        if term is not None:
            l_u = ag.add(l_u, term)
    return l_l, l_u, ag.add(l_l, l_u)
