"""Synthetic indoor scenes, scene files and labeled/unlabeled splits."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import OrientedBox, points_in_box

logger = logging.getLogger(__name__)

CLASS_NAMES = ("cuboid", "cylinder", "l_shape", "t_shape", "hollow_box", "ramp")

# full extents (x, y, z) ranges per class; heights sit in disjoint bands so
# that class is learnable from a few dozen labeled objects
SIZE_RANGES = {
    0: ((0.5, 1.0), (0.4, 0.8), (0.20, 0.32)),
    1: ((0.4, 0.8), None, (0.50, 0.64)),
    2: ((0.8, 1.2), (0.6, 1.0), (0.66, 0.80)),
    3: ((0.8, 1.2), (0.6, 1.0), (0.82, 0.96)),
    4: ((0.6, 1.0), (0.6, 1.0), (0.98, 1.12)),
    5: ((0.8, 1.2), (0.4, 0.8), (0.34, 0.48)),
}


class SceneFormatError(ValueError):
    """Raised for malformed scene or split files."""


@dataclass(eq=False)
class Scene:
    """A point cloud with optional ground-truth boxes."""

    points: np.ndarray
    boxes: Optional[list] = None
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def copy(self, **changes) -> "Scene":
        points = changes.get("points", self.points)
        boxes = changes.get("boxes", self.boxes)
        return Scene(
            np.array(points, dtype=np.float64, copy=True),
            None if boxes is None else list(boxes),
            changes.get("id", self.id),
        )

    def __len__(self):
        return len(self.points)


@dataclass
class SceneSpec:
    room: tuple = (5.0, 5.0)
    wall_height: float = 1.0
    n_points: int = 2048
    min_objects: int = 2
    max_objects: int = 8
    n_classes: int = 6
    points_per_object: tuple = (100, 600)
    background_points: int = 1000
    noise: float = 0.005
    yaw_range: float = np.pi / 4
    clearance: float = 0.15
    max_retries: int = 100

    def validate(self):
        if not 2 <= self.min_objects <= self.max_objects <= 8:
            raise ValueError("object count range must lie within [2, 8]")
        if self.n_classes != len(CLASS_NAMES):
            raise ValueError(f"synthetic scenes have exactly {len(CLASS_NAMES)} classes")
        if self.n_points < 256:
            raise ValueError("scenes need at least 256 points")


# surface samplers, all in box-local coordinates with z in [0, h]

def _sample_faces(rng, faces, n):
    """faces: list of (origin, edge_u, edge_v) parallelograms; area-weighted."""
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    st = rng.random((n, 2))
    origin = np.array([faces[i][0] for i in which])
    eu = np.array([faces[i][1] for i in which])
    ev = np.array([faces[i][2] for i in which])
    return origin + st[:, :1] * eu + st[:, 1:] * ev


def _cuboid_faces(lo, hi, top=True, bottom=False):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dx, dy, dz = hi - lo
    ex, ey, ez = np.array([dx, 0, 0]), np.array([0, dy, 0]), np.array([0, 0, dz])
    faces = [
        (lo, ey, ez), (lo + ex, ey, ez),
        (lo, ex, ez), (lo + ey, ex, ez),
    ]
    if top:
        faces.append((lo + ez, ex, ey))
    if bottom:
        faces.append((lo, ex, ey))
    return faces


def _strictly_inside(points, lo, hi, margin=1e-6):
    return np.all((points > np.asarray(lo) + margin) & (points < np.asarray(hi) - margin), axis=1)


def _union_surface(rng, parts, n):
    """Surface of a union of axis-aligned cuboids (top + sides)."""
    faces = [f for lo, hi in parts for f in _cuboid_faces(lo, hi)]
    out = np.zeros((0, 3))
    while len(out) < n:
        cand = _sample_faces(rng, faces, 2 * n)
        keep = np.ones(len(cand), dtype=bool)
        for lo, hi in parts:
            keep &= ~_strictly_inside(cand, lo, hi)
        out = np.concatenate([out, cand[keep]])
    return out[:n]


def _sample_shape(rng, class_id, size, n):
    hx, hy, h = size[0] / 2, size[1] / 2, size[2]
    if class_id == 0:
        return _sample_faces(rng, _cuboid_faces([-hx, -hy, 0], [hx, hy, h]), n)
    if class_id == 1:
        r = hx
        side_area = 2 * np.pi * r * h
        top_area = np.pi * r * r
        n_side = rng.binomial(n, side_area / (side_area + top_area))
        th = rng.uniform(0, 2 * np.pi, n_side)
        side = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(0, h, n_side)], axis=1)
        rad = r * np.sqrt(rng.random(n - n_side))
        th = rng.uniform(0, 2 * np.pi, n - n_side)
        top = np.stack([rad * np.cos(th), rad * np.sin(th), np.full(n - n_side, h)], axis=1)
        return np.concatenate([side, top])
    if class_id == 2:
        arm = 0.4
        parts = [([-hx, -hy, 0], [hx, -hy + arm * size[1], h]),
                 ([-hx, -hy, 0], [-hx + arm * size[0], hy, h])]
        return _union_surface(rng, parts, n)
    if class_id == 3:
        arm = 0.35
        parts = [([-hx, hy - arm * size[1], 0], [hx, hy, h]),
                 ([-arm * hx, -hy, 0], [arm * hx, hy, h])]
        return _union_surface(rng, parts, n)
    if class_id == 4:
        t = 0.08
        faces = _cuboid_faces([-hx, -hy, 0], [hx, hy, h], top=False)
        faces += _cuboid_faces([-hx + t, -hy + t, t], [hx - t, hy - t, h], top=False, bottom=True)
        # rim
        faces += [
            (np.array([-hx, -hy, h]), np.array([2 * hx, 0, 0]), np.array([0, t, 0])),
            (np.array([-hx, hy - t, h]), np.array([2 * hx, 0, 0]), np.array([0, t, 0])),
            (np.array([-hx, -hy, h]), np.array([t, 0, 0]), np.array([0, 2 * hy, 0])),
            (np.array([hx - t, -hy, h]), np.array([t, 0, 0]), np.array([0, 2 * hy, 0])),
        ]
        return _sample_faces(rng, faces, n)
    if class_id == 5:
        slope = (np.array([-hx, -hy, 0.0]), np.array([2 * hx, 0, h]), np.array([0, 2 * hy, 0]))
        back = (np.array([hx, -hy, 0.0]), np.array([0, 2 * hy, 0]), np.array([0, 0, h]))
        # triangular sides: sample a parallelogram and fold the far half back
        tri_area = hx * h
        slope_area = np.linalg.norm(np.cross(slope[1], slope[2]))
        back_area = 2 * hy * h
        probs = np.array([slope_area, back_area, tri_area, tri_area])
        counts = rng.multinomial(n, probs / probs.sum())
        pts = [_sample_faces(rng, [slope], counts[0]), _sample_faces(rng, [back], counts[1])]
        for k, y in zip(counts[2:], (-hy, hy)):
            st = rng.random((k, 2))
            flip = st.sum(axis=1) > 1
            st[flip] = 1 - st[flip]
            # triangle with vertices (-hx,0), (hx,0), (hx,h) in (x, z)
            x = -hx + 2 * hx * (st[:, 0] + st[:, 1])
            z = h * st[:, 1]
            pts.append(np.stack([x, np.full(k, y), z], axis=1))
        return np.concatenate(pts)
    raise ValueError(f"unknown class id {class_id}")


def _draw_size(rng, class_id):
    rx, ry, rz = SIZE_RANGES[class_id]
    sx = rng.uniform(*rx)
    sy = sx if ry is None else rng.uniform(*ry)
    return np.array([sx, sy, rng.uniform(*rz)])


def _footprints_clear(box, placed, clearance):
    from .metrics import polygon_area, clip_convex

    grown = box.copy(size=box.size + np.array([clearance, clearance, 0.0]))
    for other in placed:
        if np.linalg.norm(box.center[:2] - other.center[:2]) > (
            np.linalg.norm(grown.size[:2]) + np.linalg.norm(other.size[:2])
        ) / 2:
            continue
        if polygon_area(clip_convex(grown.corners_xy(), other.corners_xy())) > 0:
            return False
    return True


def generate_scene(rng: np.random.Generator, spec: Optional[SceneSpec] = None, scene_id: str = "") -> Scene:
    """Build one synthetic room with 2-8 primitive objects and their GT boxes."""
    spec = spec or SceneSpec()
    spec.validate()
    rx, ry = spec.room[0] / 2, spec.room[1] / 2
    n_target = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    boxes, object_points = [], []
    retries = 0
    while len(boxes) < n_target and retries < spec.max_retries:
        cls = int(rng.integers(spec.n_classes))
        size = _draw_size(rng, cls)
        yaw = float(rng.uniform(-spec.yaw_range, spec.yaw_range))
        reach = np.linalg.norm(size[:2]) / 2 + 0.05
        cx = rng.uniform(-rx + reach, rx - reach)
        cy = rng.uniform(-ry + reach, ry - reach)
        box = OrientedBox([cx, cy, size[2] / 2], size, yaw, cls)
        if not _footprints_clear(box, boxes, spec.clearance):
            retries += 1
            continue
        n_pts = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        local = _sample_shape(rng, cls, size, n_pts)
        local[:, 2] -= size[2] / 2
        boxes.append(box)
        object_points.append(box.to_world(local))
    if len(boxes) < n_target:
        logger.info("scene %s: placed %d of %d objects after %d retries",
                    scene_id, len(boxes), n_target, retries)

    floor = np.column_stack([
        rng.uniform(-rx, rx, spec.background_points),
        rng.uniform(-ry, ry, spec.background_points),
        np.zeros(spec.background_points),
    ])
    # floor hidden under objects is not observed
    covered = np.zeros(len(floor), dtype=bool)
    for box in boxes:
        covered[points_in_box(floor, box.copy(size=box.size + np.array([0.05, 0.05, 0.1])))] = True
    floor = floor[~covered]
    n_wall = spec.background_points // 3
    side = rng.integers(0, 4, n_wall)
    t = rng.uniform(-1, 1, n_wall)
    wx = np.where(side == 0, -rx, np.where(side == 1, rx, t * rx))
    wy = np.where(side == 2, -ry, np.where(side == 3, ry, t * ry))
    walls = np.column_stack([wx, wy, rng.uniform(0, spec.wall_height, n_wall)])

    points = np.concatenate([floor, walls] + object_points)
    points = points + rng.normal(0.0, spec.noise, points.shape)
    if len(points) > spec.n_points:
        keep = np.sort(rng.choice(len(points), spec.n_points, replace=False))
        points = points[keep]
    elif len(points) < spec.n_points:
        extra = rng.integers(0, len(points), spec.n_points - len(points))
        points = np.concatenate([points, points[extra]])

    kept = [b for b in boxes if len(points_in_box(points, b)) >= 8]
    if len(kept) < len(boxes):
        logger.info("scene %s: dropped %d boxes with < 8 points", scene_id, len(boxes) - len(kept))
    return Scene(points, kept, scene_id)


def generate_dataset(n: int, seed: int, spec: Optional[SceneSpec] = None, prefix: str = "scene") -> list[Scene]:
    """Scenes seeded independently from ``(seed, index)``."""
    return [
        generate_scene(np.random.default_rng([seed, i]), spec, f"{prefix}_{i:05d}")
        for i in range(n)
    ]


# scene files

def _round9(values):
    return [float(f"{v:.9g}") for v in values]


def scene_to_dict(scene: Scene) -> dict:
    doc = {"id": scene.id, "points": [_round9(p) for p in scene.points]}
    if scene.boxes is not None:
        doc["boxes"] = [
            {"center": _round9(b.center), "size": _round9(b.size),
             "yaw": float(f"{b.yaw:.9g}"), "class": b.class_id}
            for b in scene.boxes
        ]
    return doc


def scene_from_dict(doc, source="<scene>") -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{source}: top level must be an object")
    if "points" not in doc:
        raise SceneFormatError(f"{source}: missing field 'points'")
    try:
        points = np.asarray(doc["points"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{source}: field 'points': {exc}") from None
    if points.ndim != 2 or points.shape[1] != 3:
        raise SceneFormatError(f"{source}: field 'points' must be a list of [x, y, z]")
    if not np.all(np.isfinite(points)):
        raise SceneFormatError(f"{source}: field 'points' contains non-finite values")
    boxes = None
    if doc.get("boxes") is not None:
        boxes = []
        for i, b in enumerate(doc["boxes"]):
            for key in ("center", "size", "yaw", "class"):
                if key not in b:
                    raise SceneFormatError(f"{source}: boxes[{i}] missing field {key!r}")
            try:
                boxes.append(OrientedBox(b["center"], b["size"], b["yaw"], b["class"]))
            except (TypeError, ValueError) as exc:
                raise SceneFormatError(f"{source}: boxes[{i}]: {exc}") from None
    return Scene(points, boxes, str(doc.get("id", "")))


def save_scene(scene: Scene, path):
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


def load_scene(path) -> Scene:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return scene_from_dict(doc, str(path))


# splits

@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    val: list = field(default_factory=list)
    ratio: float = 0.1

    def __post_init__(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.val)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("labeled, unlabeled and val ids must be disjoint")

    def to_dict(self) -> dict:
        return {"labeled": list(self.labeled), "unlabeled": list(self.unlabeled),
                "val": list(self.val), "ratio": self.ratio}


def make_split(train_ids, ratio: float, seed: int, val_ids=()) -> DatasetSplit:
    """Seeded shuffle; the first ``round(ratio * n)`` ids become labeled."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"labeled ratio must be in (0, 1), got {ratio}")
    ids = list(train_ids)
    n_labeled = int(round(ratio * len(ids)))
    if n_labeled == 0:
        raise ValueError(f"ratio {ratio} of {len(ids)} scenes gives no labeled scenes")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(shuffled[:n_labeled], shuffled[n_labeled:], list(val_ids), ratio)


def save_split(split: DatasetSplit, path):
    Path(path).write_text(json.dumps(split.to_dict(), indent=1))


def load_split(path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"split file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    for key in ("labeled", "unlabeled", "val", "ratio"):
        if key not in doc:
            raise SceneFormatError(f"{path}: missing field {key!r}")
    return DatasetSplit(doc["labeled"], doc["unlabeled"], doc["val"], float(doc["ratio"]))


def load_scenes(data_dir, ids) -> list[Scene]:
    data_dir = Path(data_dir)
    return [load_scene(data_dir / f"{i}.json") for i in ids]
