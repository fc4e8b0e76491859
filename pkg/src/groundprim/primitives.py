"""Spatially grounded motion primitives.

Each primitive is grounded at a location picked from the observation and
shaped by a small continuous parameter vector in ``(-1, 1)``. Execution is
kinematic: :func:`execute` maps an :class:`~groundprim.env.EnvState` to the
next state and returns the gripper waypoints it visited.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .env import (GRIPPER_RESET, BinGeometry, EnvState, is_grasped, object_transform,
                  rest_pose_from_rotation, settle, world_vertices)
from .geometry import BACKGROUND, OBJECT, RigidTransform
from .objects import chord_length, footprint


class PrimitiveType(IntEnum):
    POKE = 0
    GRASP = 1
    MOVE_TO = 2
    MOVE_DELTA = 3
    OPEN_GRIPPER = 4


K = len(PrimitiveType)
PARAM_DIMS = (5, 2, 5, 5, 0)
MAX_PARAM_DIM = max(PARAM_DIMS)
# segment a primitive must be grounded in; None = any point
DOMAIN = (OBJECT, OBJECT, BACKGROUND, BACKGROUND, None)


@dataclass(frozen=True)
class PrimitiveConstants:
    d1: float = 0.04  # poke pre-contact offset along the surface normal
    d2: float = 0.10  # grasp approach height
    d3: float = 0.15  # post-grasp lift
    d4: float | None = None  # move-to offset scale; None = object max dimension
    poke_scale: float = 0.06  # meters per unit poke parameter
    delta_scale: float = 0.06  # meters per unit move-delta parameter
    rotation_gain: float = 150.0  # yaw change per unit push torque, 1/m^2
    max_aperture: float = 0.08
    min_aperture: float = 0.005
    flip_ratio: float = 2.0
    contact_radius: float = 0.02  # regressed locations farther than this from the surface miss


@dataclass(eq=False)
class PrimitiveAction:
    primitive: PrimitiveType
    location: np.ndarray
    params: np.ndarray
    location_index: int | None = None

    def __post_init__(self):
        self.primitive = PrimitiveType(int(self.primitive))
        self.location = np.asarray(self.location, dtype=float).reshape(3)
        p = np.asarray(self.params, dtype=float).reshape(-1)
        self.params = p[:PARAM_DIMS[self.primitive]]

    def to_dict(self) -> dict:
        return {"primitive": self.primitive.name, "location": self.location.tolist(),
                "params": self.params.tolist(), "location_index": self.location_index}


def decode_orientation(tx: float, ty: float) -> float:
    """Yaw angle in ``(-pi, pi]`` from the two orientation parameters."""
    a = float(np.arctan2(tx, ty))
    return np.pi if a == -np.pi else a


def wrap_angle(a: float) -> float:
    a = (a + np.pi) % (2 * np.pi) - np.pi
    return np.pi if a == -np.pi else float(a)


def admissible(primitive, state: EnvState) -> bool:
    primitive = PrimitiveType(int(primitive))
    if primitive == PrimitiveType.OPEN_GRIPPER:
        return True
    held = is_grasped(state)
    if primitive in (PrimitiveType.MOVE_TO, PrimitiveType.MOVE_DELTA):
        return held
    return not held


def admissible_mask(grasped: bool) -> np.ndarray:
    """Per-primitive admissibility from the grasped flag alone."""
    return np.array([not grasped, not grasped, grasped, grasped, True])


def location_mask(labels) -> np.ndarray:
    """``(N, K)`` boolean: may primitive k be grounded at point i."""
    labels = np.asarray(labels)
    cols = [np.ones(len(labels), bool) if d is None else labels == d for d in DOMAIN]
    return np.stack(cols, axis=1)


def map_regressed_location(raw, primitive, object_box, workspace_box) -> np.ndarray:
    """Affine map of ``(-1, 1)^3`` onto the primitive's area of interest.

    Object-centric primitives (poke, grasp) use the object's bounding box;
    everything else uses the workspace box.
    """
    primitive = PrimitiveType(int(primitive))
    lo, hi = object_box if primitive in (PrimitiveType.POKE, PrimitiveType.GRASP) \
        else workspace_box
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return lo + (np.asarray(raw, dtype=float) + 1.0) / 2.0 * (hi - lo)


def _clip(p, bins: BinGeometry) -> np.ndarray:
    lo, hi = bins.workspace()
    return np.clip(np.asarray(p, dtype=float), lo, hi)


def _surface_distance(state: EnvState, p) -> float:
    local = object_transform(state).inverse().apply(np.asarray(p)[None])
    return float(state.obj.surface_distance(local)[0])


def execute(state: EnvState, action: PrimitiveAction, constants: PrimitiveConstants,
            bins: BinGeometry, normal=None, location_label=None):
    """Run one primitive. Returns ``(next_state, trajectory)``.

    ``normal`` is the estimated outward surface normal at the location (poke
    only). ``location_label``, when given, is checked against the primitive's
    segment.
    """
    k = action.primitive
    if not admissible(k, state):
        raise ValueError("inadmissible")
    if location_label is not None and DOMAIN[k] is not None and location_label != DOMAIN[k]:
        raise ValueError("invalid grounding")
    if k == PrimitiveType.POKE:
        return _poke(state, action, constants, bins, normal)
    if k == PrimitiveType.GRASP:
        return _grasp(state, action, constants, bins)
    if k in (PrimitiveType.MOVE_TO, PrimitiveType.MOVE_DELTA):
        return _move(state, action, constants, bins)
    return _open(state, bins)


def _poke(state, action, c, bins, normal):
    if normal is None:
        raise ValueError("poke requires a surface normal")
    x, y, z, tx, ty = action.params
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    loc = action.location
    pre = loc + c.d1 * n
    push = c.poke_scale * np.array([x, y, z])
    traj = {"pre_contact": pre, "contact": loc, "yaw": decode_orientation(tx, ty),
            "waypoints": [_clip(p, bins) for p in (GRIPPER_RESET, pre, loc, loc + push,
                                                   GRIPPER_RESET)]}
    reset = replace(state, gripper_pos=GRIPPER_RESET.copy(), gripper_yaw=0.0)
    if _surface_distance(state, loc) > c.contact_radius:
        traj["contact_made"] = False
        return reset, traj
    traj["contact_made"] = True
    bin_k = bins.nearest_bin(state.position[:2])
    ph = push[:2]
    on_side = abs(n[2]) < 0.5
    if (on_side and push[2] < 0 and -push[2] > c.flip_ratio * np.linalg.norm(ph)
            and loc[2] > state.position[2]):
        new = _tip_over(reset, n)
        traj["flipped"] = new.face != state.face
        return settle(new, bins, bin_k), traj
    if np.dot(push, -n) <= 1e-12:
        return reset, traj  # moving away from the surface
    r = loc[:2] - state.position[:2]
    torque = r[0] * ph[1] - r[1] * ph[0]
    dyaw = float(np.clip(c.rotation_gain * torque, -np.pi / 2, np.pi / 2))
    pos = state.position.copy()
    pos[:2] += ph
    moved = replace(reset, yaw=wrap_angle(state.yaw + dyaw), position=pos)
    return settle(moved, bins, bin_k), traj


def _tip_over(state: EnvState, contact_normal) -> EnvState:
    """Roll the object onto the stable face facing the pushed side."""
    obj = state.obj
    R = object_transform(state).rotation
    nh = np.array([contact_normal[0], contact_normal[1], 0.0])
    nh /= np.linalg.norm(nh)
    best, score = None, -np.inf
    for f in obj.stable_faces:
        w = R @ obj.faces[f].normal
        if f != state.face and np.dot(w, nh) > score:
            best, score = f, float(np.dot(w, nh))
    if best is None or score <= 0:
        return state
    w = R @ obj.faces[best].normal
    axis = np.cross(w, [0.0, 0.0, -1.0])
    angle = np.arccos(np.clip(-w[2], -1.0, 1.0))
    axis /= np.linalg.norm(axis)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    tilt = np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
    face, yaw = rest_pose_from_rotation(obj, tilt @ R)
    return replace(state, face=face, yaw=yaw)


def _grasp(state, action, c, bins):
    tx, ty = action.params
    theta = decode_orientation(tx, ty)
    loc = action.location
    approach = loc + np.array([0.0, 0.0, c.d2])
    closing = np.array([-np.sin(theta), np.cos(theta)])
    width = chord_length(footprint(world_vertices(state)), loc, closing)
    ok = (_surface_distance(state, loc) <= c.contact_radius
          and c.min_aperture <= width <= c.max_aperture)
    traj = {"pre_contact": approach, "contact": loc, "yaw": theta, "width": width,
            "grasp_success": bool(ok)}
    if not ok:
        traj["waypoints"] = [_clip(p, bins) for p in (GRIPPER_RESET, approach, loc, GRIPPER_RESET)]
        return replace(state, gripper_pos=GRIPPER_RESET.copy(), gripper_yaw=0.0), traj
    grip = RigidTransform.from_yaw(theta, _clip(loc, bins))
    offset = grip.inverse() @ object_transform(state)
    lifted = _clip(grip.translation + np.array([0.0, 0.0, c.d3]), bins)
    held = replace(state, gripper_pos=lifted, gripper_yaw=theta, contact=True,
                   grasp_offset=offset, lift=float(lifted[2] - grip.translation[2]))
    traj["waypoints"] = [_clip(GRIPPER_RESET, bins), _clip(approach, bins), grip.translation, lifted]
    return _carry(held, lifted, theta), traj


def _carry(state: EnvState, gripper_pos, gripper_yaw) -> EnvState:
    """Move the gripper; the held object follows rigidly."""
    grip = RigidTransform.from_yaw(gripper_yaw, gripper_pos)
    obj_T = grip @ state.grasp_offset
    yaw = wrap_angle(state.yaw + gripper_yaw - state.gripper_yaw)
    return replace(state, gripper_pos=np.asarray(gripper_pos, dtype=float),
                   gripper_yaw=float(gripper_yaw), yaw=yaw, position=obj_T.translation)


def _move(state, action, c, bins):
    x, y, z, tx, ty = action.params
    theta = decode_orientation(tx, ty)
    offset = np.array([x, y, z])
    if action.primitive == PrimitiveType.MOVE_TO:
        d4 = c.d4 if c.d4 is not None else state.obj.max_dimension
        target = action.location + d4 * offset
    else:
        target = state.gripper_pos + c.delta_scale * offset
    reached = _clip(target, bins)
    traj = {"target": target, "yaw": theta, "waypoints": [state.gripper_pos.copy(), reached]}
    if state.grasp_offset is None:
        # held by the height rule only; nothing attached to carry
        return replace(state, gripper_pos=reached, gripper_yaw=theta), traj
    return _carry(state, reached, theta), traj


def _open(state, bins):
    traj = {"waypoints": [state.gripper_pos.copy()]}
    if not state.contact:
        return state, traj
    released = replace(state, contact=False, grasp_offset=None, lift=0.0)
    return settle(released, bins), traj
