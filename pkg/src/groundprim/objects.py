"""Procedural convex-extrusion objects.

An object is a convex polygon (3 to 8 vertices, counter-clockwise, centered on
its area centroid) extruded along z. Its canonical frame has the origin at the
center of mass, caps at ``z = ±height / 2``. The polygon and height are
normalized so the larger of (polygon diameter, height) is 0.10 m; a further
per-episode uniform scale is applied by :class:`ObjectInstance`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import PointCloud, rot_x, rot_y, rot_z, voxel_downsample

BASE_MAX_DIM = 0.10
SCALE_RANGE = (0.8, 1.2)


def polygon_area_centroid(poly: np.ndarray):
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


def convex_ccw(points2d: np.ndarray) -> np.ndarray:
    if len(points2d) < 3:
        raise ValueError("need at least 3 points for a polygon")
    try:
        hull = ConvexHull(points2d)
    except QhullError as e:
        raise ValueError(f"degenerate polygon: {e}") from e
    return points2d[hull.vertices]  # scipy returns 2-D hulls counter-clockwise


def diameter(points: np.ndarray) -> float:
    d = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


@dataclass(frozen=True)
class ObjectShape:
    name: str
    base: tuple  # ((x, y), ...) counter-clockwise, centroid at origin
    height: float
    category: str = ""

    @classmethod
    def from_polygon(cls, name, polygon, height, category="") -> "ObjectShape":
        poly = convex_ccw(np.asarray(polygon, dtype=float))
        if not 3 <= len(poly) <= 8:
            raise ValueError("base polygon must have 3 to 8 vertices")
        _, c = polygon_area_centroid(poly)
        poly = poly - c
        s = BASE_MAX_DIM / max(diameter(poly), height)
        return cls(name, tuple(map(tuple, (poly * s).tolist())), float(height * s), category)

    @property
    def base_array(self) -> np.ndarray:
        return np.array(self.base, dtype=float)

    def to_dict(self) -> dict:
        return {"name": self.name, "category": self.category,
                "vertices": [list(v) for v in self.base], "height": self.height}

    @classmethod
    def from_dict(cls, d) -> "ObjectShape":
        return cls(d["name"], tuple(tuple(v) for v in d["vertices"]), float(d["height"]),
                   d.get("category", ""))


def save_library(path, shapes) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in shapes], indent=1))


def load_library(path) -> list:
    return [ObjectShape.from_dict(d) for d in json.loads(Path(path).read_text())]


@dataclass(frozen=True, eq=False)
class Face:
    vertices: np.ndarray  # (m, 3), counter-clockwise seen from outside
    normal: np.ndarray
    offset: float  # plane: normal . x = offset

    @cached_property
    def area(self) -> float:
        v = self.vertices
        return float(sum(np.linalg.norm(np.cross(v[i] - v[0], v[i + 1] - v[0]))
                         for i in range(1, len(v) - 1)) / 2.0)

    def contains(self, p, tol=1e-9) -> bool:
        """Whether ``p`` (assumed on the face plane) lies inside the face."""
        v = self.vertices
        for i in range(len(v)):
            edge = v[(i + 1) % len(v)] - v[i]
            if np.dot(np.cross(edge, p - v[i]), self.normal) < -tol:
                return False
        return True


class ObjectInstance:
    """An :class:`ObjectShape` at a given per-episode scale, with derived geometry.

    Faces are ordered: 0 = bottom cap, 1 = top cap, then one side per base edge.
    """

    SURFACE_DENSITY = 40000.0  # samples per square meter before voxelization
    VOXEL = 0.01
    N_MODEL_POINTS = 400

    def __init__(self, shape: ObjectShape, scale: float = 1.0):
        self.shape = shape
        self.scale = float(scale)

    def __repr__(self):
        return f"ObjectInstance({self.shape.name!r}, scale={self.scale:.4f})"

    def __eq__(self, other):
        return (isinstance(other, ObjectInstance) and self.shape == other.shape
                and self.scale == other.scale)

    def __hash__(self):
        return hash((self.shape, self.scale))

    @cached_property
    def base(self) -> np.ndarray:
        return self.shape.base_array * self.scale

    @cached_property
    def height(self) -> float:
        return self.shape.height * self.scale

    @cached_property
    def vertices(self) -> np.ndarray:
        b = self.base
        h = self.height / 2.0
        return np.vstack([np.c_[b, np.full(len(b), -h)], np.c_[b, np.full(len(b), h)]])

    @cached_property
    def max_dimension(self) -> float:
        return max(diameter(self.base), self.height)

    @cached_property
    def faces(self) -> list:
        b, h = self.base, self.height / 2.0
        m = len(b)
        bottom = np.c_[b, np.full(m, -h)]
        top = np.c_[b, np.full(m, h)]
        faces = [Face(bottom[::-1].copy(), np.array([0.0, 0.0, -1.0]), h),
                 Face(top.copy(), np.array([0.0, 0.0, 1.0]), h)]
        for i in range(m):
            j = (i + 1) % m
            e = b[j] - b[i]
            n = np.array([e[1], -e[0], 0.0]) / np.linalg.norm(e)
            quad = np.array([bottom[i], bottom[j], top[j], top[i]])
            faces.append(Face(quad, n, float(np.dot(n, bottom[i]))))
        return faces

    @cached_property
    def stable_faces(self) -> tuple:
        """Faces the center of mass projects strictly inside of."""
        out = []
        for k, f in enumerate(self.faces):
            if f.contains(f.offset * f.normal, tol=-1e-9):
                out.append(k)
        return tuple(out)

    def rest_rotation(self, face: int) -> np.ndarray:
        """Rotation taking ``face``'s outward normal to ``-z`` (zero yaw convention)."""
        n = self.faces[face].normal
        if face == 0:
            return np.eye(3)
        if face == 1:
            return rot_x(np.pi)
        return rot_y(np.pi / 2) @ rot_z(-np.arctan2(n[1], n[0]))

    def rotation(self, face: int, yaw: float) -> np.ndarray:
        return rot_z(yaw) @ self.rest_rotation(face)

    def rest_height(self, face: int) -> float:
        """Height of the origin above the floor when resting on ``face``."""
        return float(self.faces[face].offset)

    @cached_property
    def face_samples(self) -> list:
        """Dense uniform samples on each face (fixed seed), canonical frame."""
        rng = np.random.default_rng(0)
        out = []
        for f in self.faces:
            v = f.vertices
            tris = [(v[0], v[i], v[i + 1]) for i in range(1, len(v) - 1)]
            areas = np.array([np.linalg.norm(np.cross(b - a, c - a)) / 2 for a, b, c in tris])
            n = max(8, int(np.ceil(areas.sum() * self.SURFACE_DENSITY)))
            which = rng.choice(len(tris), size=n, p=areas / areas.sum())
            r1, r2 = rng.random(n), rng.random(n)
            s = np.sqrt(r1)
            a = np.array([t[0] for t in tris])[which]
            b = np.array([t[1] for t in tris])[which]
            c = np.array([t[2] for t in tris])[which]
            out.append(a * (1 - s)[:, None] + b * (s * (1 - r2))[:, None] + c * (s * r2)[:, None])
        return out

    @cached_property
    def face_voxel_points(self) -> list:
        """Per-face voxel centroids; each stays on its (convex) face."""
        return [voxel_downsample(PointCloud(p), self.VOXEL).points for p in self.face_samples]

    @cached_property
    def model_points(self) -> np.ndarray:
        """Farthest-point subset of the surface used for reward correspondence."""
        return farthest_point_sample(np.concatenate(self.face_samples), self.N_MODEL_POINTS)

    def surface_distance(self, points) -> np.ndarray:
        """Unsigned distance from canonical-frame points to the surface."""
        p = np.asarray(points, dtype=float)
        normals = np.array([f.normal for f in self.faces])
        offsets = np.array([f.offset for f in self.faces])
        signed = p @ normals.T - offsets
        outside = signed.max(axis=1)
        # exact for points inside or on the surface, which is all we sample
        return np.abs(np.where(outside <= 0, outside, np.linalg.norm(np.maximum(signed, 0), axis=1)))


def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    if len(points) <= n:
        return points.copy()
    chosen = np.empty(n, dtype=int)
    chosen[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return points[chosen]


def footprint(vertices_world: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull of the xy projection."""
    return convex_ccw(vertices_world[:, :2])


def chord_length(poly: np.ndarray, q, direction) -> float:
    """Length of the intersection of the line ``q + s * direction`` with a convex polygon."""
    q = np.asarray(q, dtype=float)[:2]
    d = np.asarray(direction, dtype=float)[:2]
    d = d / np.linalg.norm(d)
    lo, hi = -np.inf, np.inf
    for i in range(len(poly)):
        e = poly[(i + 1) % len(poly)] - poly[i]
        m = np.array([e[1], -e[0]])  # outward for counter-clockwise order
        a, c = np.dot(m, d), np.dot(m, poly[i] - q)
        if abs(a) < 1e-15:
            if c < -1e-12:
                return 0.0
            continue
        if a > 0:
            hi = min(hi, c / a)
        else:
            lo = max(lo, c / a)
    return float(max(0.0, hi - lo))


# ---------------------------------------------------------------------------
# library generation

CATEGORIES = {
    # name: (vertex count range, aspect range, height range relative to width)
    "box": ((4, 4), (0.5, 1.0), (0.4, 1.2)),
    "prism": ((3, 3), (0.7, 1.0), (0.4, 1.0)),
    "hex_can": ((6, 6), (0.8, 1.0), (0.6, 1.6)),
    "round_can": ((8, 8), (0.85, 1.0), (0.6, 1.6)),
    "bar": ((4, 6), (0.3, 0.5), (0.3, 0.6)),
    # held out
    "wedge": ((5, 5), (0.4, 0.7), (0.5, 1.0)),
    "plate": ((7, 7), (0.6, 0.9), (0.2, 0.3)),
}
TRAIN_CATEGORIES = ("box", "prism", "hex_can", "round_can", "bar")
UNSEEN_CATEGORIES = ("wedge", "plate")


def random_shape(category: str, rng: np.random.Generator, name: str) -> ObjectShape:
    (vmin, vmax), (amin, amax), (hmin, hmax) = CATEGORIES[category]
    m = int(rng.integers(vmin, vmax + 1))
    aspect = rng.uniform(amin, amax)
    if m == 4 and category == "box":
        angles = np.array([np.pi / 4, 3 * np.pi / 4, 5 * np.pi / 4, 7 * np.pi / 4])
    else:
        angles = np.sort(2 * np.pi * (np.arange(m) + rng.uniform(-0.25, 0.25, m)) / m)
    poly = np.c_[np.cos(angles), aspect * np.sin(angles)]
    width = 2.0 * aspect
    height = width * rng.uniform(hmin, hmax)
    return ObjectShape.from_polygon(name, poly, height, category)


def make_library(seed: int = 0, n_train: int = 32, n_unseen_instance: int = 7,
                 n_unseen_category: int = 5) -> dict:
    """Procedural splits mirroring train / unseen-instance / unseen-category."""
    rng = np.random.default_rng(seed)
    splits = {"train": [], "unseen_instance": [], "unseen_category": []}
    for i in range(n_train):
        cat = TRAIN_CATEGORIES[i % len(TRAIN_CATEGORIES)]
        splits["train"].append(random_shape(cat, rng, f"train_{i:02d}_{cat}"))
    for i in range(n_unseen_instance):
        cat = TRAIN_CATEGORIES[i % len(TRAIN_CATEGORIES)]
        splits["unseen_instance"].append(random_shape(cat, rng, f"inst_{i:02d}_{cat}"))
    for i in range(n_unseen_category):
        cat = UNSEEN_CATEGORIES[i % len(UNSEEN_CATEGORIES)]
        splits["unseen_category"].append(random_shape(cat, rng, f"cat_{i:02d}_{cat}"))
    return splits


def simple_objects() -> list:
    """Four tall, narrow objects: graspable upright from any yaw at any scale."""
    def ring(m, phase=0.0):
        a = phase + np.arange(m) * 2 * np.pi / m
        return np.c_[np.cos(a), np.sin(a)]
    return [
        ObjectShape.from_polygon("tall_box", ring(4, np.pi / 4), 2.3, "box"),
        ObjectShape.from_polygon("hex_can", ring(6), 3.2, "hex_can"),
        ObjectShape.from_polygon("tri_prism", ring(3), 2.8, "prism"),
        ObjectShape.from_polygon("oct_can", ring(8), 3.2, "round_can"),
    ]
