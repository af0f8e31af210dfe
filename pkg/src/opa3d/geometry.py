"""Point and oriented-box geometry used by the augmentation pipeline.

Everything here is a pure function of numpy arrays. Random draws take a
caller-owned ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

BOX_EPS = 1e-9


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    out = (float(yaw) + np.pi) % (2.0 * np.pi) - np.pi
    # float modulo can land exactly on +pi for inputs just below -pi
    if out >= np.pi:
        out -= 2.0 * np.pi
    return out


@dataclass(eq=False)
class OrientedBox:
    """Box rotated about the vertical axis.

    Parameters
    ----------
    center : array-like of shape (3,)
    size : array-like of shape (3,)
        Full extents along the box-local axes; all positive.
    yaw : float
        Rotation about z in radians, stored wrapped into [-pi, pi).
    class_id : int
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.center)) or not np.all(np.isfinite(self.size)):
            raise ValueError("box center and size must be finite")
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size.tolist()}")
        if not np.isfinite(self.yaw):
            raise ValueError("box yaw must be finite")
        self.yaw = normalize_yaw(self.yaw)
        self.class_id = int(self.class_id)

    @property
    def half(self) -> np.ndarray:
        return self.size / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def rotation(self) -> np.ndarray:
        """3x3 matrix taking box-local coordinates to world coordinates."""
        return rotation_z(self.yaw)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """World points -> box-local (unnormalized) coordinates."""
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation()

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local, dtype=np.float64) @ self.rotation().T + self.center

    def corners_xy(self) -> np.ndarray:
        """Footprint rectangle corners, counter-clockwise, shape (4, 2)."""
        hx, hy = self.half[0], self.half[1]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def copy(self, **changes) -> "OrientedBox":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "yaw": self.yaw,
            "class": self.class_id,
        }

    def __repr__(self):
        c = ", ".join(f"{v:.3f}" for v in self.center)
        s = ", ".join(f"{v:.3f}" for v in self.size)
        return f"OrientedBox(center=({c}), size=({s}), yaw={self.yaw:.3f}, class_id={self.class_id})"


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def points_in_box(points: np.ndarray, box: OrientedBox, eps: float = BOX_EPS) -> np.ndarray:
    """Indices of points inside ``box`` (boundary inclusive, in input order)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    local = box.to_local(points)
    inside = np.all(np.abs(local) <= box.half + eps, axis=1)
    return np.flatnonzero(inside)


def farthest_point_sampling(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset selection.

    Returns ``count`` distinct indices in selection order. The first is
    ``start``; each next index maximizes the distance to the chosen set,
    ties going to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if count > n:
        raise ValueError(f"insufficient points: requested {count} from {n}")
    if count < 1:
        raise ValueError("count must be positive")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    dist = np.sqrt(np.sum((points - points[start]) ** 2, axis=1))
    for i in range(1, count):
        # chosen points sit at distance 0, so argmax never revisits them
        # unless the cloud has duplicates; mask explicitly for that case
        dist[selected[i - 1]] = -1.0
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        dist = np.minimum(dist, np.sqrt(np.sum((points - points[nxt]) ** 2, axis=1)))
    return selected


@dataclass(eq=False)
class SampleMapping:
    """Record of how an object's S_b points became S sampled points.

    ``selected`` holds original indices for a down-sample and the source
    index of every padded slot for an up-sample. ``owner`` gives, for each
    original point, the sampled slot whose displacement it takes after a
    down-sample (nearest selected point).
    """

    direction: str
    selected: np.ndarray
    original_count: int
    sampled_count: int
    owner: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.direction not in ("down", "up"):
            raise ValueError(f"direction must be 'down' or 'up', got {self.direction!r}")
        self.selected = np.asarray(self.selected, dtype=np.int64)
        if len(self.selected) != self.sampled_count:
            raise ValueError("selected length must equal sampled_count")
        if self.direction == "down" and self.owner is None:
            raise ValueError("down-sample mapping needs an owner array")

    @classmethod
    def identity(cls, count: int) -> "SampleMapping":
        idx = np.arange(count)
        return cls("down", idx, count, count, owner=idx.copy())


def fps_sample(points: np.ndarray, count: int, start: int = 0) -> tuple[np.ndarray, SampleMapping]:
    """Down-sample with FPS and record which slot owns every original point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    selected = farthest_point_sampling(points, count, start)
    owner = nearest_owner(points, selected)
    return points[selected], SampleMapping("down", selected, len(points), count, owner=owner)


def nearest_owner(points: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Slot index of the nearest selected point for every point.

    Selected points own their own slot. Equidistant candidates resolve to
    the lowest original index.
    """
    order = np.argsort(selected, kind="stable")
    sel_sorted = selected[order]
    owner = np.empty(len(points), dtype=np.int64)
    chunk = 4096
    for lo in range(0, len(points), chunk):
        block = points[lo:lo + chunk]
        d2 = np.sum((block[:, None, :] - points[sel_sorted][None, :, :]) ** 2, axis=2)
        owner[lo:lo + chunk] = order[np.argmin(d2, axis=1)]
    owner[selected] = np.arange(len(selected))
    return owner


def pad_sample(points: np.ndarray, count: int, rng: np.random.Generator) -> tuple[np.ndarray, SampleMapping]:
    """Up-sample by duplicating uniformly drawn originals.

    The first ``len(points)`` slots are the originals in order; coordinates
    are never modified.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ValueError("empty object")
    if n >= count:
        raise ValueError(f"pad_sample needs fewer than {count} points, got {n}")
    extra = rng.integers(0, n, size=count - n)
    selected = np.concatenate([np.arange(n), extra])
    return points[selected], SampleMapping("up", selected, n, count)


def sample_object(points: np.ndarray, count: int, rng: np.random.Generator, start: int = 0):
    """FPS, padding or identity depending on how many points the object has."""
    n = len(points)
    if n > count:
        return fps_sample(points, count, start)
    if n < count:
        return pad_sample(points, count, rng)
    return np.asarray(points, dtype=np.float64).copy(), SampleMapping.identity(count)


def reverse_map_displacements(disp: np.ndarray, mapping: SampleMapping) -> np.ndarray:
    """Map per-slot displacements back onto the original points.

    Down-sample: every original point takes its owner slot's displacement.
    Up-sample: every original point takes the mean over its slots.
    """
    disp = np.asarray(disp, dtype=np.float64).reshape(-1, 3)
    if len(disp) != mapping.sampled_count:
        raise ValueError(
            f"displacement length {len(disp)} does not match sampled_count {mapping.sampled_count}"
        )
    if mapping.direction == "down":
        return disp[mapping.owner]
    total = np.zeros((mapping.original_count, 3))
    np.add.at(total, mapping.selected, disp)
    counts = np.bincount(mapping.selected, minlength=mapping.original_count)
    return total / counts[:, None]


def clamp_to_box(points: np.ndarray, box: OrientedBox, eps: float = BOX_EPS) -> np.ndarray:
    """Pull points back inside ``box``.

    Points that ``points_in_box`` already accepts are returned untouched;
    the rest are clamped per local axis to the box faces.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = points.copy()
    local = box.to_local(points)
    outside = np.any(np.abs(local) > box.half + eps, axis=1)
    if np.any(outside):
        clipped = np.clip(local[outside], -box.half, box.half)
        out[outside] = box.to_world(clipped)
    return out


@dataclass
class GlobalTransform:
    """Sampled scene-level transform: flip x, rotate about z, scale, jitter."""

    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    jitter: Optional[np.ndarray] = None

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle == 0.0 and self.scale == 1.0 and self.jitter is None

    def apply_points(self, points: np.ndarray, with_jitter: bool = True) -> np.ndarray:
        out = np.asarray(points, dtype=np.float64).copy()
        if self.flip:
            out[:, 0] = -out[:, 0]
        if self.angle != 0.0:
            out = out @ rotation_z(self.angle).T
        if self.scale != 1.0:
            out = out * self.scale
        if with_jitter and self.jitter is not None:
            out = out + self.jitter
        return out

    def apply_box(self, box: OrientedBox) -> OrientedBox:
        center = self.apply_points(box.center[None], with_jitter=False)[0]
        yaw = -box.yaw if self.flip else box.yaw
        return OrientedBox(center, box.size * self.scale, yaw + self.angle, box.class_id)

    def invert_box(self, box: OrientedBox) -> OrientedBox:
        center = box.center / self.scale
        center = center @ rotation_z(-self.angle).T
        yaw = box.yaw - self.angle
        if self.flip:
            center = center * np.array([-1.0, 1.0, 1.0])
            yaw = -yaw
        return OrientedBox(center, box.size / self.scale, yaw, box.class_id)

    def to_dict(self) -> dict:
        return {"flip": self.flip, "angle": self.angle, "scale": self.scale}


GLOBAL_POLICIES = {
    # rotation half-range (degrees), scale range, jitter std
    "weak": (5.0, (1.0, 1.0), 0.0),
    "strong": (30.0, (0.85, 1.15), 0.01),
}


def sample_global_transform(policy: str, n_points: int, rng: np.random.Generator) -> GlobalTransform:
    if policy == "none":
        return GlobalTransform()
    if policy not in GLOBAL_POLICIES:
        raise ValueError(f"unknown global policy {policy!r}; expected weak, strong or none")
    rot_deg, (s_lo, s_hi), jitter_std = GLOBAL_POLICIES[policy]
    flip = bool(rng.random() < 0.5)
    angle = float(np.deg2rad(rng.uniform(-rot_deg, rot_deg)))
    scale = float(rng.uniform(s_lo, s_hi)) if s_hi > s_lo else 1.0
    jitter = rng.normal(0.0, jitter_std, size=(n_points, 3)) if jitter_std > 0 else None
    return GlobalTransform(flip, angle, scale, jitter)


def global_augment(scene, policy: str, rng: np.random.Generator, transform: Optional[GlobalTransform] = None):
    """Apply one scene-level transform consistently to points and boxes.

    Returns ``(new_scene, transform)``. Pass ``transform`` to replay a
    specific record instead of sampling one.
    """
    if transform is None:
        transform = sample_global_transform(policy, len(scene.points), rng)
    if transform.is_identity:
        return scene.copy(), transform
    points = transform.apply_points(scene.points)
    boxes = None if scene.boxes is None else [transform.apply_box(b) for b in scene.boxes]
    return scene.copy(points=points, boxes=boxes), transform
