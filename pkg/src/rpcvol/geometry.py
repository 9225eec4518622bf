"""Camera centers, triangulation, convergence angles and stereo-pair selection.

Functions taking a "camera" accept any object with
``project(lon, lat, height) -> (row, col)`` and
``localize(row, col, height) -> (lon, lat)``: a plain RpcModel or a
rotation-corrected camera from :mod:`rpcvol.bundle_adjust`.
"""
import itertools
from dataclasses import dataclass, field
from datetime import date as Date
from typing import NamedTuple

import numpy as np
from shapely.geometry import Polygon

from rpcvol.errors import (ConvergenceError, DegenerateGeometryError,
                           RegressionError)
from rpcvol.geodesy import ecef_to_geodetic, geodetic_to_ecef, local_enu_frame
from rpcvol.rpc_model import RpcModel

MIN_TRIANGULATION_ANGLE = 0.5
CONVERGENCE_WINDOW = (5.0, 35.0)
MIN_INTERSECTION_SIZE = 200.0


@dataclass(eq=False)
class Scene:
    image_id: str
    rpc: RpcModel
    width: int
    height: int
    footprint: list = field(default=None)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene size must be positive")
        if self.footprint is None:
            self.footprint = scene_footprint(self.rpc, self.width, self.height)
        if not Polygon(self.footprint).is_valid:
            raise ValueError("footprint of %s is not a simple polygon" % self.image_id)


@dataclass(eq=False)
class Acquisition:
    date: Date
    scenes: list

    def __post_init__(self):
        ids = [s.image_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in acquisition %s" % self.date)

    def scene(self, image_id):
        for s in self.scenes:
            if s.image_id == image_id:
                return s
        raise KeyError(image_id)


def scene_footprint(rpc, width, height, ground_height=None):
    """Image corners localized at `ground_height` (default the RPC height offset)."""
    h = rpc.height_offset if ground_height is None else ground_height
    rows = np.array([0.0, 0.0, height - 1.0, height - 1.0])
    cols = np.array([0.0, width - 1.0, width - 1.0, 0.0])
    lon, lat = rpc.localize(rows, cols, np.full(4, h))
    return [(float(a), float(b)) for a, b in zip(lon, lat)]


def _normalize_points(pts):
    """Hartley normalization: zero mean, average distance sqrt(dim)."""
    mean = pts.mean(axis=0)
    d = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(pts.shape[1]) / d
    T = np.eye(pts.shape[1] + 1)
    T[:-1, :-1] *= s
    T[:-1, -1] = -s * mean
    return T


def fit_projective_matrix(X, x):
    """DLT estimate of the 3x4 matrix mapping ECEF points X (N,3) to pixels x (N,2).

    Returns the matrix (denormalized, unit Frobenius norm) and the condition
    number of the normalized DLT system restricted to its 11-dim solution
    space.
    """
    T3 = _normalize_points(X)
    T2 = _normalize_points(x)
    Xn = (np.c_[X, np.ones(len(X))] @ T3.T)
    xn = (np.c_[x, np.ones(len(x))] @ T2.T)
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -xn[:, [0]] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -xn[:, [1]] * Xn
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    cond = s[0] / s[-2] if s[-2] > 0 else np.inf
    P = np.linalg.inv(T2) @ vt[-1].reshape(3, 4) @ T3
    return P / np.linalg.norm(P), cond


def matrix_center(P):
    """Right null-space point of a 3x4 projective matrix (dehomogenized)."""
    _, _, vt = np.linalg.svd(P)
    c = vt[-1]
    return c[:3] / c[3]


def regress_camera_center(rpc, n=5):
    """Camera center (ECEF meters) of the projective camera best fitting `rpc`.

    A n x n x n grid over the RPC normalization box is projected with the
    RPC; a 3x4 projective matrix is fitted to the (ECEF, pixel) pairs by DLT
    and its null space returned.

    Raises:
        RegressionError: if the DLT system is degenerate (condition > 1e12).
    """
    t = np.linspace(-1.0, 1.0, n)
    L, P, H = (a.ravel() for a in np.meshgrid(t, t, t, indexing="ij"))
    lon = L * rpc.lon_scale + rpc.lon_offset
    lat = P * rpc.lat_scale + rpc.lat_offset
    h = H * rpc.height_scale + rpc.height_offset
    row, col = rpc.project(lon, lat, h)
    X = np.stack(geodetic_to_ecef(lon, lat, h), axis=-1)
    Pm, cond = fit_projective_matrix(X, np.c_[row, col])
    if not np.isfinite(cond) or cond > 1e12:
        raise RegressionError("degenerate DLT system (condition %.3g)" % cond)
    return matrix_center(Pm)


def camera_center(cam):
    """ECEF center of an RPC (regressed) or of a corrected camera (stored)."""
    center = getattr(cam, "center", None)
    if center is not None:
        return np.asarray(center, dtype=float)
    return regress_camera_center(cam)


def ray_angle(center_a, center_b, X):
    """Angle in degrees at X between the directions to two camera centers."""
    X = np.asarray(X, dtype=float)
    da = np.asarray(center_a, dtype=float) - X
    db = np.asarray(center_b, dtype=float) - X
    da = da / np.linalg.norm(da, axis=-1, keepdims=True)
    db = db / np.linalg.norm(db, axis=-1, keepdims=True)
    # atan2 form is exact for nearly parallel rays and symmetric in a and b
    cross = np.linalg.norm(np.cross(da, db), axis=-1)
    dot = np.sum(da * db, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def convergence_angle(cam_a, cam_b, at, centers=None):
    """Angle (degrees) between the two viewing rays at ground point `at`.

    `at` is (lon, lat, height); `centers` optionally supplies precomputed
    ECEF camera centers.
    """
    ca, cb = centers if centers is not None else (camera_center(cam_a),
                                                  camera_center(cam_b))
    X = np.array(geodetic_to_ecef(*at))
    return float(ray_angle(ca, cb, X))


class Triangulation(NamedTuple):
    lon: np.ndarray
    lat: np.ndarray
    height: np.ndarray
    residual_px: np.ndarray
    converged: np.ndarray


def _reprojection(cams, obs, lon, lat, h):
    res = []
    for cam, (row, col) in zip(cams, obs):
        r, c = cam.project(lon, lat, h)
        res.append(r - row)
        res.append(c - col)
    return np.stack(res, axis=-1)


def triangulate(cams, observations, h0=None, max_iter=30, tol_m=1e-6,
                init=None):
    """Least-squares multi-view triangulation of arrays of correspondences.

    Gauss-Newton over (lon, lat, height) minimizing the summed squared
    reprojection error. Cameras exposing `project_jacobian` use the analytic
    Jacobian, others central differences (steps of about 1 mm). The start point is the mean of the per-view
    localizations at `h0` (default the first camera's height offset) unless
    `init` (lon, lat, height arrays) is given.

    Args:
        cams: sequence of cameras.
        observations: sequence of (row, col) array pairs, one per camera.

    Returns:
        Triangulation with per-point RMS residual (px) and convergence flags.
    """
    obs = [(np.asarray(r, dtype=float).ravel(), np.asarray(c, dtype=float).ravel())
           for r, c in observations]
    n = obs[0][0].size
    rpc0 = getattr(cams[0], "rpc", cams[0])
    if h0 is None:
        h0 = rpc0.height_offset
    if init is None:
        lons, lats = [], []
        for cam, (row, col) in zip(cams, obs):
            lo, la = cam.localize(row, col, np.full(n, float(h0)))
            lons.append(lo)
            lats.append(la)
        X = np.mean([np.stack(geodetic_to_ecef(lo, la, h0), -1)
                     for lo, la in zip(lons, lats)], axis=0)
        lon, lat, h = ecef_to_geodetic(X[:, 0], X[:, 1], X[:, 2])
    else:
        lon, lat, h = (np.array(v, dtype=float).ravel() for v in init)

    # steps of ~1 mm expressed in degrees
    m_per_deg = 111320.0
    d_lat = 1e-3 / m_per_deg
    d_lon = d_lat / max(np.cos(np.radians(rpc0.lat_offset)), 1e-3)
    steps = np.array([d_lon, d_lat, 1e-3])
    to_m = np.array([1.0 / d_lon * 1e-3, 1.0 / d_lat * 1e-3, 1.0])

    analytic = all(hasattr(cam, "project_jacobian") for cam in cams)
    converged = np.zeros(n, dtype=bool)
    active = np.arange(n)
    r = _reprojection(cams, obs, lon, lat, h)
    for _ in range(max_iter):
        if active.size == 0:
            break
        sub = [(row[active], col[active]) for row, col in obs]
        p = np.stack([lon[active], lat[active], h[active]], axis=-1)
        if analytic:
            J = np.concatenate([cam.project_jacobian(*p.T)[2] for cam in cams], axis=1)
        else:
            J = np.empty(r[active].shape + (3,))
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = steps[k]
                rp = _reprojection(cams, sub, *(p + dp).T)
                rm = _reprojection(cams, sub, *(p - dp).T)
                J[..., k] = (rp - rm) / (2 * steps[k])
        # solve in metric units so the ridge is isotropic
        J = J / to_m
        JtJ = np.einsum("nik,nil->nkl", J, J)
        Jtr = np.einsum("nik,ni->nk", J, r[active])
        # a tiny ridge keeps rank-deficient (parallel-ray) points solvable
        ridge = 1e-12 * np.trace(JtJ, axis1=1, axis2=2)[:, None, None] * np.eye(3)
        delta = -np.linalg.solve(JtJ + ridge, Jtr[..., None])[..., 0] / to_m
        p_new = p + delta
        r_new = _reprojection(cams, sub, *p_new.T)
        better = (r_new ** 2).sum(-1) <= (r[active] ** 2).sum(-1)
        upd = active[better]
        lon[upd], lat[upd], h[upd] = p_new[better].T
        r[upd] = r_new[better]
        step_m = np.abs(delta * to_m).max(axis=-1)
        done = (step_m < tol_m) | ~better
        # a rejected step at the noise floor still counts as converged
        converged[active[done & (step_m < 1e-3)]] = True
        active = active[~done]
    rms = np.sqrt((r ** 2).sum(-1) / len(cams))
    return Triangulation(lon, lat, h, rms, converged)


def triangulate_pair(cam_a, cam_b, px_a, px_b, centers=None, max_iter=30):
    """Triangulate one correspondence between two cameras.

    Args:
        px_a, px_b: (row, col) pixels.

    Returns:
        ((lon, lat, height), rms residual in pixels).

    Raises:
        DegenerateGeometryError: convergence angle below 0.5 degree.
        ConvergenceError: no convergence within `max_iter` iterations.
    """
    if centers is None:
        centers = (camera_center(cam_a), camera_center(cam_b))
    h0 = getattr(cam_a, "rpc", cam_a).height_offset
    lon0, lat0 = cam_a.localize(px_a[0], px_a[1], h0)
    angle = convergence_angle(cam_a, cam_b, (lon0, lat0, h0), centers)
    if angle < MIN_TRIANGULATION_ANGLE:
        raise DegenerateGeometryError("convergence angle %.3g deg < %.1f deg"
                                      % (angle, MIN_TRIANGULATION_ANGLE))
    tri = triangulate([cam_a, cam_b], [([px_a[0]], [px_a[1]]), ([px_b[0]], [px_b[1]])],
                      h0=h0, max_iter=max_iter)
    if not tri.converged[0]:
        raise ConvergenceError("triangulation did not converge in %d iterations"
                               % max_iter)
    return (float(tri.lon[0]), float(tri.lat[0]), float(tri.height[0])), \
        float(tri.residual_px[0])


def init_tiepoint(observations, cameras, centers=None):
    """Mean (in ECEF) of the triangulations of all admissible observation pairs.

    Args:
        observations: sequence of (image_id, (row, col)).
        cameras: mapping image_id -> camera.
        centers: optional mapping image_id -> ECEF center.

    Raises:
        DegenerateGeometryError: no pair with a convergence angle >= 0.5 deg.
    """
    if len(observations) < 2:
        raise DegenerateGeometryError("track needs at least two observations")
    obs = sorted(observations, key=lambda o: o[0])
    points = []
    for (ia, pa), (ib, pb) in itertools.combinations(obs, 2):
        cs = None if centers is None else (centers[ia], centers[ib])
        try:
            p, _ = triangulate_pair(cameras[ia], cameras[ib], pa, pb, centers=cs)
        except (DegenerateGeometryError, ConvergenceError):
            continue
        points.append(geodetic_to_ecef(*p))
    if not points:
        raise DegenerateGeometryError("no admissible observation pair in track")
    X = np.mean(np.array(points), axis=0)
    lon, lat, h = ecef_to_geodetic(*X)
    return float(lon), float(lat), float(h)


def footprint_in_frame(polygon, frame, height=0.0):
    """Project a lon/lat polygon into the (east, north) plane of `frame`."""
    lon = np.array([p[0] for p in polygon])
    lat = np.array([p[1] for p in polygon])
    e, n, _ = frame.to_enu(lon, lat, np.full(lon.shape, float(height)))
    return Polygon(np.c_[e, n])


def polygon_centroid(polygon):
    c = Polygon(polygon).centroid
    return float(c.x), float(c.y)


def select_pairs(acq, aoi, ground_height=None, window=CONVERGENCE_WINDOW,
                 min_size=MIN_INTERSECTION_SIZE, centers=None):
    """Scene pairs admissible for stereo reconstruction over `aoi`.

    A pair is kept when its convergence angle at the aoi centroid lies
    strictly inside `window` (degrees) and the bounding box of
    footprint_a & footprint_b & aoi, measured in the ENU frame at the
    centroid, exceeds `min_size` meters in both dimensions.

    Returns:
        list of (image_id_a, image_id_b) with a < b, sorted.
    """
    scenes = sorted(acq.scenes, key=lambda s: s.image_id)
    if ground_height is None:
        ground_height = float(np.mean([s.rpc.height_offset for s in scenes]))
    lon0, lat0 = polygon_centroid(aoi)
    frame = local_enu_frame((lon0, lat0, ground_height))
    aoi_poly = footprint_in_frame(aoi, frame, ground_height)
    if centers is None:
        centers = {s.image_id: camera_center(s.rpc) for s in scenes}
    polys = {s.image_id: footprint_in_frame(s.footprint, frame, ground_height)
             for s in scenes}
    at = (lon0, lat0, ground_height)
    pairs = []
    for a, b in itertools.combinations(scenes, 2):
        angle = convergence_angle(a.rpc, b.rpc, at,
                                  (centers[a.image_id], centers[b.image_id]))
        if not window[0] < angle < window[1]:
            continue
        inter = polys[a.image_id].intersection(polys[b.image_id]).intersection(aoi_poly)
        if inter.is_empty:
            continue
        x0, y0, x1, y1 = inter.bounds
        if x1 - x0 > min_size and y1 - y0 > min_size:
            pairs.append((a.image_id, b.image_id))
    return pairs
