"""Point clouds and rigid motions.

Everything here works on plain ``numpy`` arrays in double precision. A
:class:`PointCloud` bundles positions with a per-point segmentation label
(``OBJECT`` / ``BACKGROUND``) and, once goal-conditioned, a per-point flow
vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

BACKGROUND = 0
OBJECT = 1


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(yaw), translation)

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def about(self, center) -> "RigidTransform":
        """The same rotation, but pivoting about ``center`` instead of the origin."""
        c = np.asarray(center, dtype=float)
        return RigidTransform(self.rotation, c - self.rotation @ c + self.translation)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    flow: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.labels is None:
            self.labels = np.full(n, OBJECT, dtype=np.int8)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if len(self.labels) != n:
            raise ValueError("labels length does not match points")
        if self.flow is not None:
            self.flow = np.asarray(self.flow, dtype=float).reshape(-1, 3)
            if len(self.flow) != n:
                raise ValueError("flow length does not match points")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.labels[idx],
                          None if self.flow is None else self.flow[idx])

    def segment(self, label: int) -> "PointCloud":
        return self.select(self.labels == label)

    @staticmethod
    def concat(*clouds: "PointCloud") -> "PointCloud":
        with_flow = any(c.flow is not None for c in clouds)
        flows = [c.flow if c.flow is not None else np.zeros((len(c), 3)) for c in clouds]
        return PointCloud(np.concatenate([c.points for c in clouds]),
                          np.concatenate([c.labels for c in clouds]),
                          np.concatenate(flows) if with_flow else None)


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Move the cloud rigidly. Flow vectors, being displacements, are rotated too."""
    flow = None if cloud.flow is None else t.apply_vectors(cloud.flow)
    return PointCloud(t.apply(cloud.points), cloud.labels.copy(), flow)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel at the centroid of its members.

    The label is the per-voxel majority (ties go to ``OBJECT``); flow, if any,
    is averaged like the positions.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, np.int8),
                          None if cloud.flow is None else np.zeros((0, 3)))
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def mean(values):
        out = np.zeros((m, 3))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    obj_votes = np.bincount(inverse, weights=(cloud.labels == OBJECT), minlength=m)
    labels = np.where(2 * obj_votes >= counts, OBJECT, BACKGROUND).astype(np.int8)
    flow = None if cloud.flow is None else mean(cloud.flow)
    return PointCloud(mean(cloud.points), labels, flow)


def random_sample(cloud: PointCloud, n: int, seed) -> PointCloud:
    """Exactly ``n`` points; without replacement when the cloud is large enough.

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in place).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(cloud), size=n, replace=len(cloud) < n)
    return cloud.select(idx)


def estimate_normals(cloud: PointCloud, k_neighbors: int = 10, center=None) -> np.ndarray:
    """Per-point unit normals from k-NN PCA, flipped to face away from ``center``.

    ``center`` defaults to the cloud centroid.
    """
    pts = cloud.points
    n = len(pts)
    if n < 3 or k_neighbors < 3:
        raise ValueError("degenerate neighborhood")
    k = min(k_neighbors, n)
    _, nbr = cKDTree(pts).query(pts, k=k)
    local = pts[nbr] - pts[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    c = pts.mean(axis=0) if center is None else np.asarray(center, dtype=float)
    outward = np.einsum("ij,ij->i", normals, pts - c)
    # no outward direction on a plane through the center: fall back to +z, then +x
    tie = np.abs(outward) < 1e-12
    fallback = np.where(np.abs(normals[:, 2]) > 1e-12, normals[:, 2], normals[:, 0])
    flip = np.where(tie, fallback < 0, outward < 0)
    normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def goal_flow(obj_points: PointCloud, to_goal: RigidTransform) -> np.ndarray:
    """Displacement of each object point to its correspondence in the goal pose."""
    return to_goal.apply(obj_points.points) - obj_points.points


def save_cloud(path, cloud: PointCloud) -> None:
    """ASCII: a count line, then ``x y z label fx fy fz`` per point."""
    flow = cloud.flow if cloud.flow is not None else np.zeros((len(cloud), 3))
    lines = [str(len(cloud))]
    for p, lab, f in zip(cloud.points, cloud.labels, flow):
        lines.append(" ".join([*(repr(float(v)) for v in p), str(int(lab)),
                               *(repr(float(v)) for v in f)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path) -> PointCloud:
    lines = Path(path).read_text().split("\n")
    n = int(lines[0])
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, np.int8), np.zeros((0, 3)))
    rows = np.array([[float(v) for v in line.split()] for line in lines[1:n + 1]])
    if rows.shape != (n, 7):
        raise ValueError(f"malformed cloud file {path}")
    return PointCloud(rows[:, :3], rows[:, 3].astype(np.int8), rows[:, 4:])
