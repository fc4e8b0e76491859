"""Quasi-static DoubleBin simulator.

Two open bins sit side by side along x; the floor is ``z = 0``. The object is
a convex extrusion that is either resting on one of its stable faces (pose =
face index + yaw + position) or rigidly held by the gripper. There is no
dynamics: releasing an object drops it straight down onto a stable face and
slides it inside the bin it is over.

Three task variants share the machinery:

``doublebin``
    goal is an independent drop-settled pose in either bin.
``translation``
    goal keeps the initial face and yaw, placed in the opposite bin.
``lift``
    goal is the initial pose raised by the grasp lift height.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import (BACKGROUND, OBJECT, PointCloud, RigidTransform, estimate_normals,
                       goal_flow, random_sample, voxel_downsample)
from .objects import SCALE_RANGE, ObjectInstance, ObjectShape, footprint

SUCCESS_THRESHOLD = 0.03
GRIPPER_RESET = np.array([0.0, 0.0, 0.30])


@dataclass(frozen=True)
class BinGeometry:
    size: tuple = (0.40, 0.24, 0.06)
    center_distance: float = 0.55

    def __post_init__(self):
        if self.center_distance <= self.size[0]:
            raise ValueError("bins overlap")

    def center(self, k: int) -> np.ndarray:
        return np.array([(-0.5 if k == 0 else 0.5) * self.center_distance, 0.0])

    def interior(self, k: int):
        cx = self.center(k)[0]
        hx, hy = self.size[0] / 2, self.size[1] / 2
        return cx - hx, cx + hx, -hy, hy

    def nearest_bin(self, xy) -> int:
        return int(xy[0] > 0)

    def workspace(self):
        """Axis-aligned box the gripper may occupy."""
        hx = self.center_distance / 2 + self.size[0] / 2 + 0.05
        hy = self.size[1] / 2 + 0.05
        return np.array([-hx, -hy, 0.0]), np.array([hx, hy, 0.45])


@lru_cache(maxsize=8)
def background_points(bins: BinGeometry, voxel: float = 0.02) -> PointCloud:
    """Voxelized inner surfaces (floor and four walls) of both bins."""
    step = 0.005
    sx, sy, sz = bins.size
    pts = []
    for k in range(2):
        x0, x1, y0, y1 = bins.interior(k)
        xs = np.arange(x0, x1 + 1e-9, step)
        ys = np.arange(y0, y1 + 1e-9, step)
        zs = np.arange(0.0, sz + 1e-9, step)
        gx, gy = np.meshgrid(xs, ys)
        pts.append(np.c_[gx.ravel(), gy.ravel(), np.zeros(gx.size)])
        for x in (x0, x1):
            gy, gz = np.meshgrid(ys, zs)
            pts.append(np.c_[np.full(gy.size, x), gy.ravel(), gz.ravel()])
        for y in (y0, y1):
            gx, gz = np.meshgrid(xs, zs)
            pts.append(np.c_[gx.ravel(), np.full(gx.size, y), gz.ravel()])
    cloud = PointCloud(np.concatenate(pts), np.full(sum(len(p) for p in pts), BACKGROUND))
    return voxel_downsample(cloud, voxel)


@dataclass(frozen=True, eq=False)
class EnvState:
    obj: ObjectInstance
    face: int
    yaw: float
    position: np.ndarray
    gripper_pos: np.ndarray = field(default_factory=lambda: GRIPPER_RESET.copy())
    gripper_yaw: float = 0.0
    contact: bool = False  # both fingers touching, as reported by the grasp model
    grasp_offset: RigidTransform | None = None  # object pose in the gripper frame
    lift: float = 0.0

    def to_dict(self) -> dict:
        return {
            "shape": self.obj.shape.to_dict(), "scale": self.obj.scale,
            "face": self.face, "yaw": self.yaw, "position": list(map(float, self.position)),
            "gripper_pos": list(map(float, self.gripper_pos)),
            "gripper_yaw": self.gripper_yaw, "contact": self.contact,
            "grasp_offset": None if self.grasp_offset is None
            else self.grasp_offset.matrix().tolist(),
            "lift": self.lift,
        }

    @classmethod
    def from_dict(cls, d, cache=None) -> "EnvState":
        shape = ObjectShape.from_dict(d["shape"])
        key = (shape, d["scale"])
        obj = cache.get(key) if cache is not None else None
        if obj is None:
            obj = ObjectInstance(shape, d["scale"])
        return cls(obj, d["face"], d["yaw"], np.array(d["position"]),
                   np.array(d["gripper_pos"]), d["gripper_yaw"], d["contact"],
                   None if d["grasp_offset"] is None
                   else RigidTransform.from_matrix(d["grasp_offset"]), d["lift"])


@dataclass(frozen=True, eq=False)
class GoalSpec:
    transform: RigidTransform
    cloud: PointCloud
    state: EnvState


@dataclass(eq=False)
class Observation:
    cloud: PointCloud  # labels are the segmentation mask, flow the goal flow
    grasped: bool = False

    def __len__(self):
        return len(self.cloud)

    def features(self) -> np.ndarray:
        """``(N, 7)`` network input: position, goal flow, object mask."""
        c = self.cloud
        flow = c.flow if c.flow is not None else np.zeros_like(c.points)
        return np.concatenate([c.points, flow, c.labels[:, None].astype(float)], axis=1)

    @property
    def labels(self) -> np.ndarray:
        return self.cloud.labels

    def object_normals(self, k_neighbors: int = 10) -> np.ndarray:
        """Outward normals at every point (background rows are zero)."""
        out = np.zeros_like(self.cloud.points)
        obj = self.cloud.labels == OBJECT
        if obj.sum() >= 3:
            out[obj] = estimate_normals(self.cloud.select(obj), min(k_neighbors, int(obj.sum())))
        return out

    def object_box(self):
        pts = self.cloud.points[self.cloud.labels == OBJECT]
        return pts.min(axis=0), pts.max(axis=0)


def object_transform(state: EnvState) -> RigidTransform:
    return RigidTransform(state.obj.rotation(state.face, state.yaw), state.position)


def world_vertices(state: EnvState) -> np.ndarray:
    return object_transform(state).apply(state.obj.vertices)


def object_bottom(state: EnvState) -> float:
    return float(world_vertices(state)[:, 2].min())


def is_grasped(state: EnvState) -> bool:
    """Finger contact, or the object hanging at least two max-dimensions above the floor."""
    return bool(state.contact or object_bottom(state) >= 2.0 * state.obj.max_dimension)


def containing_bin(state: EnvState, bins: BinGeometry, tol: float = 1e-9):
    """Index of the bin whose interior holds the footprint, else ``None``."""
    fp = footprint(world_vertices(state))
    for k in range(2):
        x0, x1, y0, y1 = bins.interior(k)
        if (fp[:, 0].min() >= x0 - tol and fp[:, 0].max() <= x1 + tol
                and fp[:, 1].min() >= y0 - tol and fp[:, 1].max() <= y1 + tol):
            return k
    return None


def rest_pose_from_rotation(obj: ObjectInstance, R: np.ndarray):
    """(face, yaw) of the stable face pointing most nearly down under rotation ``R``."""
    down = [(R @ obj.faces[k].normal)[2] for k in obj.stable_faces]
    face = obj.stable_faces[int(np.argmin(down))]
    M = R @ obj.rest_rotation(face).T
    return face, float(np.arctan2(M[1, 0], M[0, 0]))


def settle(state: EnvState, bins: BinGeometry, bin_index=None) -> EnvState:
    """Release-and-rest: drop to the floor on a stable face, then slide inside a bin.

    ``bin_index`` forces the bin (pokes cannot lift an object over a wall);
    otherwise the bin the footprint center is over is used.
    """
    if state.contact:
        raise ValueError("cannot settle a grasped object")
    obj = state.obj
    face, yaw = state.face, state.yaw
    if face not in obj.stable_faces:
        face, yaw = rest_pose_from_rotation(obj, obj.rotation(face, yaw))
    pos = np.array(state.position, dtype=float)
    pos[2] = obj.rest_height(face)
    rested = replace(state, face=face, yaw=yaw, position=pos, grasp_offset=None, lift=0.0)
    fp = footprint(world_vertices(rested))
    lo, hi = fp.min(axis=0), fp.max(axis=0)
    k = bins.nearest_bin((lo + hi) / 2) if bin_index is None else bin_index
    x0, x1, y0, y1 = bins.interior(k)
    shift = np.zeros(2)
    for axis, (a, b) in enumerate(((x0, x1), (y0, y1))):
        if lo[axis] < a - 1e-12:
            shift[axis] = a - lo[axis]
        elif hi[axis] > b + 1e-12:
            shift[axis] = b - hi[axis]
    if np.any(shift):
        pos = pos.copy()
        pos[:2] += shift
        rested = replace(rested, position=pos)
    return rested


def compute_reward(state: EnvState, goal: GoalSpec) -> float:
    """Negative mean distance between model points in the current and goal poses."""
    m = state.obj.model_points
    cur = object_transform(state).apply(m)
    tgt = goal.transform.apply(m)
    return -float(np.linalg.norm(tgt - cur, axis=1).mean())


def is_success(reward: float) -> bool:
    return reward > -SUCCESS_THRESHOLD


def _inside_convex(poly, xy) -> np.ndarray:
    inside = np.ones(len(xy), dtype=bool)
    for i in range(len(poly)):
        e = poly[(i + 1) % len(poly)] - poly[i]
        d = xy - poly[i]
        inside &= (e[0] * d[:, 1] - e[1] * d[:, 0]) > 0
    return inside


def render_observation(state: EnvState, goal: GoalSpec, bins: BinGeometry, rng,
                       n_object: int = 400, n_background: int = 1000,
                       background_voxel: float = 0.02) -> Observation:
    obj = state.obj
    T = object_transform(state)
    down = [(T.rotation @ f.normal)[2] for f in obj.faces]
    bottom = int(np.argmin(down))
    pts = np.concatenate([p for k, p in enumerate(obj.face_voxel_points) if k != bottom])
    obj_cloud = random_sample(PointCloud(T.apply(pts)), n_object, rng)
    obj_cloud.flow = goal_flow(obj_cloud, goal.transform @ T.inverse())

    bg = background_points(bins, background_voxel)
    if object_bottom(state) < 1e-6:
        on_floor = bg.points[:, 2] < 1e-9
        hidden = on_floor & _inside_convex(footprint(T.apply(obj.vertices)), bg.points[:, :2])
        bg = bg.select(~hidden)
    bg_cloud = random_sample(bg, n_background, rng)
    bg_cloud.flow = np.zeros((n_background, 3))
    return Observation(PointCloud.concat(obj_cloud, bg_cloud), is_grasped(state))


# ---------------------------------------------------------------------------
# episode driver

@dataclass
class EnvConfig:
    task: str = "doublebin"
    n_object_points: int = 400
    n_background_points: int = 1000
    background_voxel: float = 0.02
    max_steps: int = 10
    bin_distance: float = 0.55
    upright_only: bool = False
    normal_neighbors: int = 10


class DoubleBinEnv:
    """Episode wrapper: seeded resets, one primitive per :meth:`step`."""

    def __init__(self, objects, config: EnvConfig | None = None, constants=None):
        from .primitives import PrimitiveConstants

        if not objects:
            raise ValueError("object library is empty")
        self.objects = list(objects)
        self.config = config or EnvConfig()
        if self.config.task not in ("doublebin", "translation", "lift"):
            raise ValueError(f"unknown task {self.config.task!r}")
        self.constants = constants or PrimitiveConstants()
        self.bins = BinGeometry(center_distance=self.config.bin_distance)
        self.rng = np.random.default_rng(0)
        self._instances = {}
        self.state = self.goal = self.obs = None
        self.t = 0

    def _instance(self, shape, scale):
        key = (shape, scale)
        if key not in self._instances:
            if len(self._instances) > 64:
                self._instances.clear()
            self._instances[key] = ObjectInstance(shape, scale)
        return self._instances[key]

    def _place(self, obj, rng, k, face, yaw) -> EnvState:
        x0, x1, y0, y1 = self.bins.interior(k)
        s = None
        for _ in range(200):
            xy = rng.uniform((x0, y0), (x1, y1))
            s = EnvState(obj, face, yaw, np.array([xy[0], xy[1], obj.rest_height(face)]))
            if containing_bin(s, self.bins) == k:
                return s
        return settle(s, self.bins, k)

    def _random_rest(self, obj, rng, k) -> EnvState:
        face = 0 if self.config.upright_only else int(rng.choice(obj.stable_faces))
        yaw = float(rng.uniform(-np.pi, np.pi))
        dropped = self._place(obj, rng, k, face, yaw)
        return settle(dropped, self.bins, k)

    def reset(self, seed):
        self.rng = np.random.default_rng(seed)
        rng = self.rng
        shape = self.objects[int(rng.integers(len(self.objects)))]
        obj = self._instance(shape, float(rng.uniform(*SCALE_RANGE)))
        start_bin = int(rng.integers(2))
        state = self._random_rest(obj, rng, start_bin)
        task = self.config.task
        if task == "doublebin":
            goal_state = self._random_rest(obj, rng, int(rng.integers(2)))
        elif task == "translation":
            goal_state = settle(self._place(obj, rng, 1 - start_bin, state.face, state.yaw),
                                self.bins, 1 - start_bin)
        else:
            lifted = state.position + np.array([0.0, 0.0, self.constants.d3])
            goal_state = replace(state, position=lifted)
        self.state = state
        self.goal = make_goal(goal_state)
        self.t = 0
        self.obs = self.render()
        return self.state, self.goal, self.obs

    def render(self) -> Observation:
        c = self.config
        return render_observation(self.state, self.goal, self.bins, self.rng,
                                  c.n_object_points, c.n_background_points, c.background_voxel)

    def reward(self) -> float:
        return compute_reward(self.state, self.goal)

    def step(self, action):
        """Execute one primitive. Returns ``(obs, reward, done, info)``."""
        from .primitives import PrimitiveType, execute

        label = normal = None
        if action.location_index is not None:
            label = int(self.obs.labels[action.location_index])
            if action.primitive == PrimitiveType.POKE:
                normal = self.obs.object_normals(self.config.normal_neighbors)[action.location_index]
        elif action.primitive == PrimitiveType.POKE:
            normal = self._nearest_object_normal(action.location)
        self.state, traj = execute(self.state, action, self.constants, self.bins,
                                   normal=normal, location_label=label)
        self.t += 1
        self.obs = self.render()
        reward = self.reward()
        success = is_success(reward)
        done = success or self.t >= self.config.max_steps
        info = {"success": success, "grasped": is_grasped(self.state), "trajectory": traj}
        return self.obs, reward, done, info

    def _nearest_object_normal(self, location):
        obj = self.obs.labels == OBJECT
        d = np.linalg.norm(self.obs.cloud.points[obj] - location, axis=1)
        return self.obs.object_normals(self.config.normal_neighbors)[obj][int(np.argmin(d))]

    # checkpoint support
    def snapshot(self) -> dict:
        return {"state": self.state.to_dict(), "goal": self.goal.state.to_dict(),
                "t": self.t, "rng": self.rng.bit_generator.state,
                "obs": None if self.obs is None else self.obs.features().tolist(),
                "obs_grasped": None if self.obs is None else self.obs.grasped}

    def restore(self, snap: dict) -> None:
        state = EnvState.from_dict(snap["state"])
        state = replace(state, obj=self._instance(state.obj.shape, state.obj.scale))
        goal_state = EnvState.from_dict(snap["goal"])
        goal_state = replace(goal_state, obj=state.obj)
        self.state, self.goal, self.t = state, make_goal(goal_state), snap["t"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = snap["rng"]
        f = np.array(snap["obs"])
        self.obs = Observation(PointCloud(f[:, :3], f[:, 6].astype(np.int8), f[:, 3:6]),
                               snap["obs_grasped"])


def make_goal(goal_state: EnvState) -> GoalSpec:
    T = object_transform(goal_state)
    cloud = PointCloud(T.apply(goal_state.obj.model_points))
    return GoalSpec(T, cloud, goal_state)


def write_trace(path, records) -> None:
    """Line-delimited JSON, one record per primitive step."""
    with open(Path(path), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_jsonable) + "\n")


def read_trace(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))
