"""A small vote-style 3D detector built on :mod:`opa3d.tensor_engine`.

Pipeline per scene: a shared point MLP on centroid-centred coordinates,
FPS seeds with a local grouping layer, per-seed centre votes, a second
grouping around each vote, and a proposal head that also sees a max-pooled
scene feature. Proposals carry class probabilities, objectness and a
predicted IoU.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_engine as ag
from .tensor_engine import Tensor
from .geometry import OrientedBox, farthest_point_sampling
from .metrics import iou_3d
from .nn import MLP, Linear, Module

POSITIVE_RADIUS = 0.3
NEGATIVE_RADIUS = 0.6


@dataclass(eq=False)
class Proposal:
    center: np.ndarray
    size: np.ndarray
    yaw_sc: np.ndarray
    class_probs: np.ndarray
    objectness: float
    iou_pred: float
    index: int = 0

    @property
    def yaw(self) -> float:
        s, c = self.yaw_sc
        norm = np.hypot(s, c)
        if norm == 0:
            return 0.0
        return float(np.arctan2(s / norm, c / norm))

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def score(self) -> float:
        return float(self.objectness * np.max(self.class_probs))

    def to_box(self) -> OrientedBox:
        return OrientedBox(self.center, self.size, self.yaw, self.class_id)


@dataclass(eq=False)
class Assignment:
    proposal_index: int
    gt_index: Optional[int]
    kind: str  # positive, negative or ignored


@dataclass(eq=False)
class DetectorOutput:
    """Raw head tensors for a batch of B scenes with K proposals each."""

    seed_xyz: Tensor       # (B, Ms, 3) all seeds
    seed_votes: Tensor     # (B, Ms, 3) vote of every seed
    votes: Tensor          # (B, K, 3) proposal anchors, a subset of seed_votes
    centers: Tensor        # (B, K, 3)
    log_sizes: Tensor      # (B, K, 3)
    yaw_sc: Tensor         # (B, K, 2)
    cls_logits: Tensor     # (B, K, C)
    obj_logits: Tensor     # (B, K)
    iou_logits: Tensor     # (B, K)

    @property
    def batch_size(self) -> int:
        return self.centers.shape[0]

    def slice(self, lo: int, hi: int) -> "DetectorOutput":
        """Scenes ``lo:hi`` of the batch, still connected to the graph."""
        return DetectorOutput(**{
            name: getattr(self, name)[lo:hi]
            for name in ("seed_xyz", "seed_votes", "votes", "centers", "log_sizes", "yaw_sc",
                         "cls_logits", "obj_logits", "iou_logits")
        })

    def proposals(self, b: int = 0) -> list[Proposal]:
        """Decode scene ``b`` of the batch into :class:`Proposal` objects."""
        centers = self.centers.values[b]
        sizes = np.exp(self.log_sizes.values[b])
        sc = self.yaw_sc.values[b]
        logits = self.cls_logits.values[b]
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        obj = 1.0 / (1.0 + np.exp(-self.obj_logits.values[b]))
        iou = 1.0 / (1.0 + np.exp(-self.iou_logits.values[b]))
        return [
            Proposal(centers[k].copy(), sizes[k].copy(), sc[k].copy(), probs[k].copy(),
                     float(obj[k]), float(iou[k]), k)
            for k in range(len(centers))
        ]


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each query, nearest first."""
    d2 = (np.sum(queries ** 2, axis=1)[:, None] + np.sum(points ** 2, axis=1)[None, :]
          - 2.0 * queries @ points.T)
    k = min(k, len(points))
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    order = np.argsort(np.take_along_axis(d2, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


class VoteDetector(Module):
    """Vote-style detector network.

    Parameters
    ----------
    n_classes : int
    n_proposals : int
        Number of proposals K, drawn by FPS over the seed votes.
    n_seeds : int
        Number of FPS seeds that cast votes (capped at the scene size). With
        more seeds than proposals, proposals are the K farthest-spread votes.
    seed_group, vote_group : int
        Neighbourhood sizes for the two grouping layers.
    seed : int
        Initialisation seed.
    """

    def __init__(self, n_classes=6, n_proposals=32, n_seeds=32, seed_group=32, vote_group=48,
                 group_radius=0.5, feature_dim=64, group_layers=1, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.n_proposals = n_proposals
        self.n_seeds = n_seeds
        self.seed_group = seed_group
        self.vote_group = vote_group
        self.group_radius = group_radius
        self.point_mlp = MLP(self, "point", [3, 64, 128], rng, last_relu=True)
        self.feature_dim = feature_dim
        self.seed_layer = MLP(self, "seed_group", [128 + 3, feature_dim], rng, last_relu=True)
        self.vote_mlp = MLP(self, "vote", [feature_dim, 64, 3], rng)
        self.group_layers = group_layers
        self.vote_layer = MLP(self, "vote_group", [128 + 3] + [feature_dim] * group_layers, rng, last_relu=True)
        self.head_hidden = Linear(self, "head.0", feature_dim * 2 + 128, 128, rng)
        n_out = 3 + 3 + 2 + n_classes + 2
        self.head_out = Linear(self, "head.1", 128, n_out, rng)
        # start boxes near a typical object size and cos(yaw) near 1
        self.head_out.weight.values *= 0.1
        bias = np.zeros(n_out)
        bias[3:6] = np.log(0.7)
        bias[7] = 1.0
        self.head_out.bias.values = bias

    def config(self) -> dict:
        return {"n_classes": self.n_classes, "n_proposals": self.n_proposals, "n_seeds": self.n_seeds,
                "seed_group": self.seed_group, "vote_group": self.vote_group,
                "group_radius": self.group_radius,
                "feature_dim": self.feature_dim, "group_layers": self.group_layers}

    def _group(self, xyz_flat, feat_flat, centres, flat_idx, layer):
        """Max-pooled features of neighbours around ``centres`` (B, K, 3)."""
        B, K, k = flat_idx.shape
        nb_xyz = ag.gather(xyz_flat, flat_idx.reshape(-1))
        nb_xyz = ag.reshape(nb_xyz, (B, K, k, 3))
        rel = (nb_xyz - ag.reshape(centres, (B, K, 1, 3))) / self.group_radius
        nb_feat = ag.reshape(ag.gather(feat_flat, flat_idx.reshape(-1)), (B, K, k, feat_flat.shape[1]))
        return ag.max_pool(layer(ag.concat([nb_feat, rel], axis=-1)), axis=2)

    def forward(self, points) -> DetectorOutput:
        """Run the network on a (B, N, 3) tensor or a list of (N, 3) arrays."""
        if isinstance(points, (list, tuple)):
            points = ag.concat([ag.reshape(ag.as_tensor(p), (1, -1, 3)) for p in points], axis=0)
        points = ag.as_tensor(points)
        if points.ndim == 2:
            points = ag.reshape(points, (1,) + points.shape)
        B, N, _ = points.shape
        K = self.n_proposals
        if N < K:
            raise ValueError(f"scene too sparse: {N} points for {K} proposals")
        xyz = points.values

        centroid = ag.mean(points, axis=1, keepdims=True)
        feat = self.point_mlp(points - centroid)                         # (B, N, 128)
        global_feat = ag.max_pool(feat, axis=1)                          # (B, 128)

        offsets = (np.arange(B) * N)[:, None, None]
        Ms = max(K, min(self.n_seeds, N))
        seed_idx = np.stack([farthest_point_sampling(xyz[b], Ms, 0) for b in range(B)])
        nb_idx = np.stack([knn_indices(xyz[b], xyz[b][seed_idx[b]], self.seed_group) for b in range(B)])
        xyz_flat = ag.reshape(points, (B * N, 3))
        feat_flat = ag.reshape(feat, (B * N, feat.shape[2]))
        seed_xyz = ag.reshape(ag.gather(xyz_flat, (seed_idx + offsets[:, :, 0]).reshape(-1)), (B, Ms, 3))
        seed_feat = self._group(xyz_flat, feat_flat, seed_xyz, nb_idx + offsets, self.seed_layer)
        seed_votes = seed_xyz + self.vote_mlp(seed_feat)

        # proposals sit at K well-spread votes (vote clustering by FPS)
        if Ms == K:
            prop_idx = np.tile(np.arange(K), (B, 1))
        else:
            prop_idx = np.stack([farthest_point_sampling(seed_votes.values[b], K, 0) for b in range(B)])
        prop_flat = (prop_idx + (np.arange(B) * Ms)[:, None]).reshape(-1)
        votes = ag.reshape(ag.gather(ag.reshape(seed_votes, (B * Ms, 3)), prop_flat), (B, K, 3))
        anchor_feat = ag.reshape(ag.gather(ag.reshape(seed_feat, (B * Ms, -1)), prop_flat), (B, K, -1))
        vote_nb = np.stack([knn_indices(xyz[b], votes.values[b], self.vote_group) for b in range(B)])
        vote_feat = self._group(xyz_flat, feat_flat, votes, vote_nb + offsets, self.vote_layer)

        global_rep = ag.reshape(ag.gather(global_feat, np.repeat(np.arange(B), K)), (B, K, -1))
        h = ag.relu(self.head_hidden(ag.concat([vote_feat, anchor_feat, global_rep], axis=-1)))
        out = self.head_out(h)
        C = self.n_classes
        return DetectorOutput(
            seed_xyz=seed_xyz,
            seed_votes=seed_votes,
            votes=votes,
            centers=votes + out[..., 0:3],
            log_sizes=out[..., 3:6],
            yaw_sc=out[..., 6:8],
            cls_logits=out[..., 8:8 + C],
            obj_logits=out[..., 8 + C],
            iou_logits=out[..., 9 + C],
        )

    __call__ = forward

    def detect(self, points) -> list[Proposal]:
        """Proposals for one scene, computed without recording a graph."""
        with ag.no_grad():
            return self.forward(np.asarray(points, dtype=np.float64)).proposals(0)


def match_arrays(centers: np.ndarray, gt_boxes) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised matching: ``(kind, gt_index)`` with kind 1/0/-1 for pos/neg/ignored."""
    K = len(centers)
    if not gt_boxes:
        return np.zeros(K, dtype=np.int64), np.full(K, -1, dtype=np.int64)
    gt_centers = np.stack([b.center for b in gt_boxes])
    d = np.sqrt(np.sum((centers[:, None, :] - gt_centers[None, :, :]) ** 2, axis=2))
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(K), nearest]
    kind = np.where(dmin <= POSITIVE_RADIUS, 1, np.where(dmin > NEGATIVE_RADIUS, 0, -1))
    gt_index = np.where(kind == 1, nearest, -1)
    return kind, gt_index


def match(proposals, gt_boxes) -> list[Assignment]:
    """Centre-distance assignment of proposals to GT boxes."""
    if not proposals:
        return []
    centers = np.stack([p.center for p in proposals])
    kind, gt_index = match_arrays(centers, list(gt_boxes))
    names = {1: "positive", 0: "negative", -1: "ignored"}
    return [
        Assignment(i, int(g) if g >= 0 else None, names[int(k)])
        for i, (k, g) in enumerate(zip(kind, gt_index))
    ]


def nms(proposals, iou_threshold=0.25, objectness_floor=0.05) -> list[Proposal]:
    """Greedy class-agnostic 3D NMS ordered by objectness."""
    live = [p for p in proposals if p.objectness >= objectness_floor]
    live.sort(key=lambda p: (-p.objectness, p.index))
    boxes = [p.to_box() for p in live]
    kept, kept_boxes = [], []
    for p, box in zip(live, boxes):
        if all(iou_3d(box, kb) <= iou_threshold for kb in kept_boxes):
            kept.append(p)
            kept_boxes.append(box)
    return kept
