"""Object-level point augmentor.

Points inside selected boxes are moved to the box frame, resampled to a
fixed count, displaced by a per-point network, mapped back to the
original points, and clamped to their box. Everything outside the
selected boxes is passed through untouched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor_engine as ag
from .tensor_engine import Tensor
from .geometry import (
    BOX_EPS,
    OrientedBox,
    SampleMapping,
    clamp_to_box,
    points_in_box,
    reverse_map_displacements,
    sample_object,
)
from .nn import MLP, Module

logger = logging.getLogger(__name__)

D_MAX = 0.1
MIN_OBJECT_POINTS = 8


@dataclass(eq=False)
class ObjectCrop:
    """One selected object: its box, scene indices and normalized samples."""

    box: OrientedBox
    point_indices: np.ndarray
    sampled_points: np.ndarray
    mapping: SampleMapping


class PointAugmentor(Module):
    """Per-point displacement MLP (3 -> 64 -> 128 -> 64 -> 3).

    The last layer starts at zero, so a fresh augmentor is the identity.
    Outputs are ``d_max * tanh(.)`` in box-normalized units.
    """

    def __init__(self, hidden=(64, 128, 64), d_max=D_MAX, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.hidden = tuple(hidden)
        self.d_max = d_max
        self.mlp = MLP(self, "aug", [3, *hidden, 3], rng, zero_last=True)

    def config(self) -> dict:
        return {"hidden": list(self.hidden), "d_max": self.d_max}

    def forward_displacements(self, sampled_points) -> Tensor:
        return ag.tanh(self.mlp(ag.as_tensor(sampled_points))) * self.d_max

    __call__ = forward_displacements


def plan_crops(points: np.ndarray, boxes, sample_count: int, rng: np.random.Generator,
               min_points: int = MIN_OBJECT_POINTS) -> list[ObjectCrop]:
    """Gather, normalize and resample the points of each box.

    A point already claimed by an earlier box is not reused. Boxes with
    fewer than ``min_points`` points are skipped.
    """
    claimed = np.zeros(len(points), dtype=bool)
    crops = []
    for box in boxes:
        idx = points_in_box(points, box)
        idx = idx[~claimed[idx]]
        if len(idx) < min_points:
            logger.debug("skipping box with %d interior points", len(idx))
            continue
        claimed[idx] = True
        obj = points[idx]
        _, mapping = sample_object(obj, sample_count, rng)
        normalized = box.to_local(obj[mapping.selected]) / box.half
        crops.append(ObjectCrop(box, idx, normalized, mapping))
    return crops


def _reverse_map_tensor(disp: Tensor, mapping: SampleMapping) -> Tensor:
    if mapping.direction == "down":
        return ag.gather(disp, mapping.owner)
    counts = np.bincount(mapping.selected, minlength=mapping.original_count).astype(np.float64)
    summed = ag.segment_sum(disp, mapping.selected, mapping.original_count)
    return summed * (1.0 / counts)[:, None]


def apply_crops(points: np.ndarray, crops, augmentor: PointAugmentor, displacements=None):
    """Augmented scene as a tensor connected to the augmentor parameters.

    Returns ``(points_tensor, fields)`` where ``fields[i]`` is the per-point
    world-frame displacement tensor (post-clamp) of crop ``i``.
    """
    points = np.asarray(points, dtype=np.float64)
    if not crops:
        return Tensor(points), []
    if displacements is None:
        stacked = np.concatenate([c.sampled_points for c in crops])
        displacements = augmentor.forward_displacements(stacked)
    pieces, fields = [Tensor(points)], []
    row_map = np.arange(len(points))
    offset, start = len(points), 0
    for crop in crops:
        S = crop.mapping.sampled_count
        d_hat = displacements[start:start + S]
        start += S
        box = crop.box
        rot = box.rotation()
        local_disp = _reverse_map_tensor(d_hat, crop.mapping) * box.half
        original = points[crop.point_indices]
        moved = ag.add(original, ag.matmul(local_disp, rot.T))
        local = box.to_local(moved.values)
        outside = np.any(np.abs(local) > box.half + BOX_EPS, axis=1)
        if np.any(outside):
            clipped = ag.clip(ag.matmul(moved - box.center, rot), -box.half, box.half)
            back = ag.add(ag.matmul(clipped, rot.T), box.center)
            moved = ag.where(outside[:, None], back, moved)
        pieces.append(moved)
        fields.append(moved - original)
        row_map[crop.point_indices] = offset + np.arange(len(crop.point_indices))
        offset += len(crop.point_indices)
    table = ag.concat(pieces, axis=0)
    return ag.gather(table, row_map), fields


def augment_points(points, boxes, augmentor: PointAugmentor, rng, sample_count=1024,
                   min_points: int = MIN_OBJECT_POINTS):
    """Tensor-valued augmentation of ``points`` for the given (already selected) boxes."""
    crops = plan_crops(np.asarray(points, dtype=np.float64), boxes, sample_count, rng, min_points)
    out, fields = apply_crops(points, crops, augmentor)
    return out, crops, fields


def choose_boxes(boxes, m: int, rng: np.random.Generator, points=None, min_points=MIN_OBJECT_POINTS):
    """Uniformly pick up to ``m`` boxes, preferring ones with enough points."""
    boxes = list(boxes)
    if points is not None:
        boxes = [b for b in boxes if len(points_in_box(points, b)) >= min_points]
    if len(boxes) <= m:
        return boxes
    pick = rng.choice(len(boxes), size=m, replace=False)
    return [boxes[i] for i in sorted(pick)]


def augment_scene(scene, boxes, m: int, augmentor: PointAugmentor, rng, sample_count=1024,
                  selector=None):
    """Object-level augmentation of a scene (numpy in, numpy out).

    ``selector(boxes, m, rng)`` picks which boxes to edit; the default is
    uniform without replacement. Returns ``(augmented_scene, crops,
    fields)`` where ``fields`` holds post-clamp world displacements of each
    crop's original points.
    """
    boxes = list(boxes)
    if not boxes:
        raise ValueError("augment_scene needs at least one box")
    if m < 1:
        raise ValueError("m must be at least 1")
    selector = selector or (lambda bs, k, r: choose_boxes(bs, k, r))
    chosen = selector(boxes, min(m, len(boxes)), rng)
    with ag.no_grad():
        out, crops, fields = augment_points(scene.points, chosen, augmentor, rng, sample_count)
    return scene.copy(points=out.values), crops, [f.values for f in fields]


def reference_augment(points, crops, augmentor: PointAugmentor):
    """Numpy-only replay of :func:`apply_crops` built from geometry helpers."""
    out = np.array(points, dtype=np.float64, copy=True)
    with ag.no_grad():
        for crop in crops:
            d_hat = augmentor.forward_displacements(crop.sampled_points).values
            local = reverse_map_displacements(d_hat, crop.mapping) * crop.box.half
            moved = points[crop.point_indices] + local @ crop.box.rotation().T
            out[crop.point_indices] = clamp_to_box(moved, crop.box)
    return out


def displacement_histogram(crops, fields, bin_width=0.005, min_ratio=0.01, max_ratio=None):
    """Histograms of |displacement| / box size per box-local axis.

    Ratios at or below ``min_ratio`` are ignored. Returns ``(edges,
    counts)`` with ``counts`` of shape (3, n_bins) for x, y and z.
    """
    ratios = [[], [], []]
    for crop, field in zip(crops, fields):
        local = np.asarray(field, dtype=np.float64) @ crop.box.rotation()
        r = np.abs(local) / crop.box.size
        for axis in range(3):
            ratios[axis].append(r[:, axis])
    ratios = [np.concatenate(r) if r else np.zeros(0) for r in ratios]
    ratios = [r[r > min_ratio] for r in ratios]
    top = max_ratio
    if top is None:
        top = max([r.max() for r in ratios if len(r)] + [min_ratio])
    n_bins = max(int(np.ceil(round(top / bin_width, 9))), 1)
    if n_bins * bin_width <= top:
        n_bins += 1
    edges = np.arange(n_bins + 1) * bin_width
    counts = np.zeros((3, n_bins), dtype=np.int64)
    for axis, r in enumerate(ratios):
        if len(r):
            bins = np.floor(np.round(r / bin_width, 9)).astype(np.int64)
            counts[axis] = np.bincount(np.minimum(bins, n_bins - 1), minlength=n_bins)
    return edges, counts
