"""Shape-only rigid registration: FPFH features, RANSAC, point-to-plane ICP.

Used to estimate goal flow when correspondences between the observed object
and its goal pose are unknown. Colors are never used.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform, estimate_normals, rot_x, rot_y, rot_z, rotation_angle
from .objects import ObjectInstance, random_shape

log = logging.getLogger(__name__)

FPFH_BINS = 11
LOW_FITNESS = 0.3


@dataclass(frozen=True)
class RegistrationParams:
    voxel: float = 0.01
    fpfh_radius_factor: float = 2.5
    ransac_iterations: int = 4000
    inlier_threshold: float = 0.015
    edge_ratio: float = 0.9  # reject samples whose pairwise lengths disagree
    icp_iterations: int = 50
    icp_relative_tol: float = 1e-6
    icp_max_distance: float = 0.03
    normal_neighbors: int = 20
    seed: int = 0

    @property
    def fpfh_radius(self) -> float:
        return self.fpfh_radius_factor * self.voxel


@dataclass
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    converged: bool
    history: list = field(default_factory=list)  # ICP error per accepted iterate


# ---------------------------------------------------------------------------
# FPFH

def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angles ``(alpha, phi, theta)`` for one source point and many targets."""
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 0
    dist = np.where(ok, dist, 1.0)
    a1 = (d @ n1) / dist
    a2 = np.einsum("ij,ij->i", n2, d) / dist
    # tolerances keep ties (coplanar data) from flipping under rigid motion
    swap = np.abs(a2) - np.abs(a1) > 1e-12
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    f2 = np.einsum("ij,ij->i", v, other)
    sin = np.einsum("ij,ij->i", w, other)
    f1 = np.arctan2(np.where(np.abs(sin) < 1e-12, 0.0, sin), np.einsum("ij,ij->i", u, other))
    return f1[ok], f2[ok], f3[ok], ok


def _bin(x, lo, hi):
    return np.clip(np.floor(FPFH_BINS * (x - lo) / (hi - lo)).astype(int), 0, FPFH_BINS - 1)


def compute_fpfh(points, normals, radius: float) -> np.ndarray:
    """``(N, 33)`` histograms; points without neighbors get zeros."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=float)
    nrm = np.asarray(normals, dtype=float)
    n = len(pts)
    tree = cKDTree(pts)
    neigh = [[j for j in nb if j != i] for i, nb in enumerate(tree.query_ball_point(pts, radius))]
    spfh = np.zeros((n, 3 * FPFH_BINS))
    for i, nb in enumerate(neigh):
        if not nb:
            continue
        nb = np.array(nb)
        f1, f2, f3, _ = _pair_features(pts[i], nrm[i], pts[nb], nrm[nb])
        incr = 100.0 / len(nb)
        np.add.at(spfh[i], _bin(f1, -np.pi, np.pi), incr)
        np.add.at(spfh[i], FPFH_BINS + _bin(f2, -1.0, 1.0), incr)
        np.add.at(spfh[i], 2 * FPFH_BINS + _bin(f3, -1.0, 1.0), incr)
    out = np.zeros_like(spfh)
    for i, nb in enumerate(neigh):
        if not nb:
            continue
        nb = np.array(nb)
        d = np.linalg.norm(pts[nb] - pts[i], axis=1)
        keep = d > 0
        if not keep.any():
            continue
        acc = (spfh[nb[keep]] / d[keep, None]).sum(axis=0)
        for s in range(3):
            sl = slice(s * FPFH_BINS, (s + 1) * FPFH_BINS)
            total = acc[sl].sum()
            if total > 0:
                acc[sl] *= 100.0 / total
        out[i] = acc + spfh[i]
    return out


# ---------------------------------------------------------------------------
# RANSAC

def kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation(s) and translation(s) with ``dst ≈ R src + t``.

    Works on ``(M, 3)`` pairs or batches ``(B, M, 3)``.
    """
    cs, cd = src.mean(axis=-2, keepdims=True), dst.mean(axis=-2, keepdims=True)
    H = np.swapaxes(src - cs, -1, -2) @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    det = np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2))
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1
    D[..., 1, 1] = 1
    D[..., 2, 2] = np.sign(np.where(det == 0, 1, det))
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cd[..., 0, :] - (R @ cs[..., 0, :, None])[..., 0]
    return R, t


def match_features(f_src, f_dst, mutual=True):
    """Nearest-neighbor correspondences in feature space, ``(M, 2)`` index pairs."""
    fwd = cKDTree(f_dst).query(f_src)[1]
    pairs = np.c_[np.arange(len(f_src)), fwd]
    if mutual:
        back = cKDTree(f_src).query(f_dst)[1]
        keep = back[fwd] == pairs[:, 0]
        if keep.sum() >= 3:
            pairs = pairs[keep]
    return pairs


def _fitness(src, dst_tree, T: RigidTransform, threshold):
    d = dst_tree.query(T.apply(src))[0]
    inl = d < threshold
    rmse = float(np.sqrt(np.mean(d[inl] ** 2))) if inl.any() else 0.0
    return float(inl.mean()), rmse


def ransac_global(src, dst, src_features, dst_features,
                  params: RegistrationParams = RegistrationParams()) -> RegistrationResult:
    """Sample 3 feature matches, fit a rigid transform, keep the one with most inliers."""
    src, dst = np.asarray(src, dtype=float), np.asarray(dst, dtype=float)
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("degenerate: need at least 3 points per cloud")
    rng = np.random.default_rng(params.seed)
    pairs = match_features(src_features, dst_features)
    ps, pd = src[pairs[:, 0]], dst[pairs[:, 1]]
    m = len(pairs)
    samples = np.stack([rng.choice(m, 3, replace=False) for _ in range(params.ransac_iterations)])
    a, b = ps[samples], pd[samples]
    # edge-length consistency check
    ea = np.linalg.norm(a - np.roll(a, 1, axis=1), axis=2)
    eb = np.linalg.norm(b - np.roll(b, 1, axis=1), axis=2)
    ratio = np.minimum(ea, eb) / np.maximum(np.maximum(ea, eb), 1e-12)
    good = (ratio > params.edge_ratio).all(axis=1)
    if not good.any():
        good[:] = True
    R, t = kabsch(a[good], b[good])
    # score hypotheses against the whole correspondence set
    moved = np.einsum("hij,mj->hmi", R, ps) + t[:, None, :]
    inliers = (np.linalg.norm(moved - pd[None], axis=2) < params.inlier_threshold).sum(axis=1)
    best = int(np.argmax(inliers))
    sel = np.linalg.norm(moved[best] - pd, axis=1) < params.inlier_threshold
    if sel.sum() >= 3:
        Rb, tb = kabsch(ps[sel], pd[sel])
    else:
        Rb, tb = R[best], t[best]
    T = RigidTransform(Rb, tb)
    fit, rmse = _fitness(src, cKDTree(dst), T, params.inlier_threshold)
    return RegistrationResult(T, fit, rmse, True)


# ---------------------------------------------------------------------------
# ICP

def _small_rotation(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx


def _plane_error(src, dst, dst_normals, tree, T, max_dist):
    p = T.apply(src)
    d, j = tree.query(p)
    keep = d < max_dist
    if not keep.any():
        return np.inf, p, j, keep
    r = np.einsum("ij,ij->i", p[keep] - dst[j[keep]], dst_normals[j[keep]])
    return float(np.sqrt(np.mean(r ** 2))), p, j, keep


def icp_point_to_plane(src, dst, init: RigidTransform, dst_normals=None,
                       params: RegistrationParams = RegistrationParams()) -> RegistrationResult:
    """Damped Gauss-Newton on point-to-plane residuals; recorded error never increases."""
    src, dst = np.asarray(src, dtype=float), np.asarray(dst, dtype=float)
    if dst_normals is None:
        dst_normals = estimate_normals(PointCloud(dst), params.normal_neighbors)
    tree = cKDTree(dst)
    T = init
    err, p, j, keep = _plane_error(src, dst, dst_normals, tree, T, params.icp_max_distance)
    history = [err]
    converged = False
    lam = 1e-6
    for _ in range(params.icp_iterations):
        if not np.isfinite(err):
            break
        q, n = dst[j[keep]], dst_normals[j[keep]]
        pk = p[keep]
        c = pk.mean(axis=0)  # linearize about the centroid so steps are frame-independent
        r = np.einsum("ij,ij->i", pk - q, n)
        J = np.c_[np.cross(pk - c, n), n]
        A, g = J.T @ J, J.T @ r
        accepted = False
        for _ in range(10):
            x = np.linalg.solve(A + lam * (np.trace(A) / 6 + 1e-12) * np.eye(6), -g)
            step = RigidTransform(_small_rotation(x[:3]), x[3:]).about(c)
            cand = step @ T
            e2, p2, j2, k2 = _plane_error(src, dst, dst_normals, tree, cand, params.icp_max_distance)
            if e2 <= err:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # no descent direction left
            break
        lam = max(lam / 10.0, 1e-9)
        rel = (err - e2) / max(err, 1e-15)
        T, err, p, j, keep = cand, e2, p2, j2, k2
        history.append(err)
        if rel < params.icp_relative_tol:
            converged = True
            break
    fit, rmse = _fitness(src, tree, T, params.inlier_threshold)
    return RegistrationResult(T, fit, rmse, converged, history)


# ---------------------------------------------------------------------------
# pipeline

def register(src_points, dst_points, params: RegistrationParams = RegistrationParams()):
    """Global then local registration of ``src`` onto ``dst``."""
    src_points = np.asarray(src_points, dtype=float)
    dst_points = np.asarray(dst_points, dtype=float)
    ns = estimate_normals(PointCloud(src_points), params.normal_neighbors)
    nd = estimate_normals(PointCloud(dst_points), params.normal_neighbors)
    fs = compute_fpfh(src_points, ns, params.fpfh_radius)
    fd = compute_fpfh(dst_points, nd, params.fpfh_radius)
    coarse = ransac_global(src_points, dst_points, fs, fd, params)
    return icp_point_to_plane(src_points, dst_points, coarse.transform, nd, params)


@dataclass
class FlowEstimate:
    flow: np.ndarray
    result: RegistrationResult
    low_fitness: bool


def estimate_goal_flow(obs_obj: PointCloud, goal_obj: PointCloud,
                       params: RegistrationParams = RegistrationParams()) -> FlowEstimate:
    """Per-point flow ``T(x) - x`` with ``T`` aligning the observed object onto the goal."""
    x = obs_obj.points
    res = register(x, goal_obj.points, params)
    low = res.fitness < LOW_FITNESS
    if low:
        log.warning("registration fitness %.3f below %.1f", res.fitness, LOW_FITNESS)
    return FlowEstimate(res.transform.apply(x) - x, res, low)


# ---------------------------------------------------------------------------
# synthetic benchmark

def transform_errors(estimate: RigidTransform, truth: RigidTransform):
    """Rotation error in degrees and translation error in meters."""
    dR = estimate.rotation @ truth.rotation.T
    return float(np.degrees(rotation_angle(dR))), float(np.linalg.norm(estimate.translation - truth.translation))


def random_yaw_dominant(rng, tilt_deg=10.0, max_translation=0.2) -> RigidTransform:
    yaw = rng.uniform(-np.pi, np.pi)
    tilt = np.radians(tilt_deg)
    R = rot_z(yaw) @ rot_y(rng.uniform(-tilt, tilt)) @ rot_x(rng.uniform(-tilt, tilt))
    return RigidTransform(R, rng.uniform(-max_translation, max_translation, 3))


def sample_surface(obj: ObjectInstance, n: int, rng) -> np.ndarray:
    pts = np.concatenate(obj.face_samples)
    return pts[rng.choice(len(pts), n, replace=len(pts) < n)]


def registration_trial(rng, n_points=500, noise=0.002, params=RegistrationParams()):
    shape = random_shape("prism", rng, "bench")
    obj = ObjectInstance(shape, 1.0)
    src = sample_surface(obj, n_points, rng)
    truth = random_yaw_dominant(rng)
    dst = truth.apply(src) + rng.normal(0.0, noise, src.shape)
    res = register(src, dst, params)
    rot_err, trans_err = transform_errors(res.transform, truth)
    return {"truth": truth, "result": res, "rot_err_deg": rot_err, "trans_err_m": trans_err}


def registration_study(n_trials=100, n_points=500, noise=0.002, seed=0,
                       params: RegistrationParams = RegistrationParams()) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(n_trials):
        out = registration_trial(rng, n_points, noise, params)
        rows.append({"trial": trial, **out})
    return rows


def _flat(T: RigidTransform) -> str:
    return " ".join(repr(float(v)) for v in T.matrix().ravel())


def write_benchmark_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "true_transform", "recovered_transform", "rotation_error_deg",
                    "translation_error_m", "fitness"])
        for r in rows:
            w.writerow([r["trial"], _flat(r["truth"]), _flat(r["result"].transform),
                        repr(r["rot_err_deg"]), repr(r["trans_err_m"]), repr(r["result"].fitness)])
