"""Date-wise RPC refinement by a rotation about each camera center.

Each camera m is corrected as x = P_m(R_m (X - C_m) + C_m) where P_m is the
delivered RPC projection, C_m the camera center regressed from it, and R_m
an Euler-angle rotation. One reference camera keeps R = I and fixes the
gauge. The summed squared reprojection error over all tracks is minimized
by Levenberg-Marquardt over the angles of the other cameras and the
tie-point positions, with a Schur complement on the point blocks.
"""
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from rpcvol.errors import (ConnectivityError, DegenerateGeometryError,
                           InsufficientDataError, SingularJacobianError)
from rpcvol.geodesy import (ecef_jacobian, ecef_to_geodetic, enu_rotation,
                            geodetic_jacobian, geodetic_to_ecef)
from rpcvol.geometry import (MIN_TRIANGULATION_ANGLE, camera_center, ray_angle,
                             triangulate)
from rpcvol.matching import UnionFind

log = logging.getLogger(__name__)


def euler_to_matrix(phi, theta, alpha):
    """R = Rx(phi) @ Ry(theta) @ Rz(alpha), angles in radians."""
    cp, sp = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def euler_to_matrices(angles):
    """Vectorized euler_to_matrix over an (n, 3) array of angles."""
    angles = np.asarray(angles, dtype=float)
    cp, ct, ca = np.cos(angles).T
    sp, st, sa = np.sin(angles).T
    R = np.empty((len(angles), 3, 3))
    # expanded product Rx Ry Rz
    R[:, 0, 0] = ct * ca
    R[:, 0, 1] = -ct * sa
    R[:, 0, 2] = st
    R[:, 1, 0] = cp * sa + sp * st * ca
    R[:, 1, 1] = cp * ca - sp * st * sa
    R[:, 1, 2] = -sp * ct
    R[:, 2, 0] = sp * sa - cp * st * ca
    R[:, 2, 1] = sp * ca + cp * st * sa
    R[:, 2, 2] = cp * ct
    return R


def matrix_to_euler(R):
    """Inverse of euler_to_matrix for |theta| < pi/2."""
    theta = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    phi = np.arctan2(-R[1, 2], R[2, 2])
    alpha = np.arctan2(-R[0, 1], R[0, 0])
    return float(phi), float(theta), float(alpha)


@dataclass(frozen=True)
class CorrectionRotation:
    phi: float = 0.0
    theta: float = 0.0
    alpha: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)

    @property
    def angles(self):
        return np.array([self.phi, self.theta, self.alpha])

    @property
    def matrix(self):
        return euler_to_matrix(self.phi, self.theta, self.alpha)

    @property
    def is_identity(self):
        return self.phi == 0.0 and self.theta == 0.0 and self.alpha == 0.0

    def to_record(self, image_id):
        return {"image_id": image_id, "phi": self.phi, "theta": self.theta,
                "alpha": self.alpha, "center_xyz": [float(c) for c in self.center]}

    @classmethod
    def from_record(cls, rec):
        return cls(float(rec["phi"]), float(rec["theta"]), float(rec["alpha"]),
                   tuple(float(c) for c in rec["center_xyz"]))


def rotate_about(R, center, X):
    """R (X - C) + C for X of shape (..., 3)."""
    center = np.asarray(center, dtype=float)
    return (np.asarray(X, dtype=float) - center) @ np.asarray(R).T + center


def corrected_project(rpc, center, rot, X):
    """Pixel (row, col) of ECEF point(s) X through the corrected camera.

    With an identity rotation this is exactly rpc.project(geodetic(X)).
    """
    X = np.asarray(X, dtype=float)
    if not rot.is_identity:
        X = rotate_about(rot.matrix, center, X)
    lon, lat, h = ecef_to_geodetic(X[..., 0], X[..., 1], X[..., 2])
    return rpc.project(lon, lat, h)


class CorrectedCamera:
    """An RPC composed with a correction rotation about its center."""

    def __init__(self, rpc, rotation=None, center=None):
        self.rpc = rpc
        if rotation is None:
            c = camera_center(rpc) if center is None else center
            rotation = CorrectionRotation(center=tuple(float(v) for v in c))
        self.rotation = rotation
        self.center = np.asarray(rotation.center, dtype=float)
        self._R = rotation.matrix

    @property
    def height_offset(self):
        return self.rpc.height_offset

    def project(self, lon, lat, height):
        if self.rotation.is_identity:
            return self.rpc.project(lon, lat, height)
        X = np.stack(geodetic_to_ecef(lon, lat, height), axis=-1)
        Y = rotate_about(self._R, self.center, X)
        return self.rpc.project(*ecef_to_geodetic(Y[..., 0], Y[..., 1], Y[..., 2]))

    def project_jacobian(self, lon, lat, height):
        """Projection and analytic Jacobian w.r.t. (lon, lat, height)."""
        if self.rotation.is_identity:
            return self.rpc.project_jacobian(lon, lat, height)
        X = np.stack(geodetic_to_ecef(lon, lat, height), axis=-1)
        Y = rotate_about(self._R, self.center, X)
        ylon, ylat, yh = ecef_to_geodetic(Y[..., 0], Y[..., 1], Y[..., 2])
        row, col, J = self.rpc.project_jacobian(ylon, ylat, yh)
        chain = geodetic_jacobian(ylon, ylat, yh) @ self._R @ ecef_jacobian(lon, lat, height)
        return row, col, J @ chain

    def localize(self, row, col, height, max_iter=20, tol_px=1e-8):
        """Inverse of `project` at fixed height (Newton from the RPC ray)."""
        lon, lat = self.rpc.localize(row, col, height)
        if self.rotation.is_identity:
            return lon, lat
        row, col, height = (np.broadcast_to(np.asarray(v, dtype=float), np.shape(lon))
                            for v in (row, col, height))
        Y = np.stack(geodetic_to_ecef(lon, lat, height), axis=-1)
        X = rotate_about(self._R.T, self.center, Y)
        lon, lat, _ = ecef_to_geodetic(X[..., 0], X[..., 1], X[..., 2])
        lon, lat = np.array(lon, dtype=float), np.array(lat, dtype=float)
        step = 1e-8
        for _ in range(max_iter):
            r, c = self.project(lon, lat, height)
            fr, fc = r - row, c - col
            if np.all(np.abs(fr) < tol_px) and np.all(np.abs(fc) < tol_px):
                break
            r1, c1 = self.project(lon + step, lat, height)
            r2, c2 = self.project(lon, lat + step, height)
            a, b = (r1 - r) / step, (r2 - r) / step
            c_, d = (c1 - c) / step, (c2 - c) / step
            det = a * d - b * c_
            if np.any(det == 0):
                raise SingularJacobianError("singular corrected localization Jacobian")
            lon = lon - (d * fr - b * fc) / det
            lat = lat - (-c_ * fr + a * fc) / det
        return lon, lat


@dataclass
class BundleConfig:
    angle_step: float = 1e-8
    point_step: float = 1e-3
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e8
    rel_tol: float = 1e-10
    abs_rms_tol: float = 1e-10
    max_iter: int = 100
    min_tracks: int = 10


@dataclass
class BundleProblem:
    """One date's adjustment problem.

    cameras: list of (image_id, RpcModel, center) triples.
    tracks: FeatureTrack list whose `tiepoint` (lon, lat, h) is initialized.
    """
    cameras: list
    tracks: list
    reference_index: int = 0

    def __post_init__(self):
        ids = [c[0] for c in self.cameras]
        if not 0 <= self.reference_index < len(ids):
            raise ValueError("reference index out of range")
        known = set(ids)
        for t in self.tracks:
            for img, _ in t.observations:
                if img not in known:
                    raise ValueError("track observes unknown image %s" % img)


class BundleSolution(NamedTuple):
    image_ids: list
    rotations: list
    tiepoints: np.ndarray
    initial_rms: float
    final_rms: float
    iterations: int
    costs: list
    stalled: bool
    reference_index: int


def choose_reference(image_ids, tracks):
    """Camera with the most track observations; ties go to the smallest id."""
    counts = {img: 0 for img in image_ids}
    for t in tracks:
        for img, _ in t.observations:
            if img in counts:
                counts[img] += 1
    best = min(image_ids, key=lambda img: (-counts[img], img))
    return list(image_ids).index(best)


def check_connectivity(image_ids, tracks):
    uf = UnionFind()
    for img in image_ids:
        uf.find(img)
    for t in tracks:
        ids = t.image_ids
        for other in ids[1:]:
            uf.union(ids[0], other)
    roots = {uf.find(img) for img in image_ids}
    if len(roots) != 1:
        raise ConnectivityError("camera graph has %d connected components" % len(roots))


def init_tiepoints(tracks, cameras, centers):
    """Initialize every track's tie-point as the ECEF mean of its pairwise
    triangulations (pairs below 0.5 degree of convergence skipped).

    Pair triangulations are batched per camera pair. Tracks without an
    admissible pair get `tiepoint = None`.

    Args:
        cameras: mapping image_id -> camera; centers: image_id -> ECEF center.
    """
    jobs = {}
    for k, t in enumerate(tracks):
        obs = sorted(t.observations)
        for i in range(len(obs)):
            for j in range(i + 1, len(obs)):
                key = (obs[i][0], obs[j][0])
                jobs.setdefault(key, []).append((k, obs[i][1], obs[j][1]))
    sums = np.zeros((len(tracks), 3))
    counts = np.zeros(len(tracks))
    for (a, b), items in sorted(jobs.items()):
        ks = np.array([it[0] for it in items])
        pa = np.array([it[1] for it in items])
        pb = np.array([it[2] for it in items])
        tri = triangulate([cameras[a], cameras[b]],
                          [(pa[:, 0], pa[:, 1]), (pb[:, 0], pb[:, 1])])
        X = np.stack(geodetic_to_ecef(tri.lon, tri.lat, tri.height), -1)
        ok = tri.converged & (ray_angle(centers[a], centers[b], X)
                              >= MIN_TRIANGULATION_ANGLE)
        np.add.at(sums, ks[ok], X[ok])
        np.add.at(counts, ks[ok], 1)
    for k, t in enumerate(tracks):
        if counts[k] == 0:
            t.tiepoint = None
        else:
            lon, lat, h = ecef_to_geodetic(*(sums[k] / counts[k]))
            t.tiepoint = (float(lon), float(lat), float(h))
    return tracks


def init_tiepoint(track, cameras, centers):
    init_tiepoints([track], cameras, centers)
    if track.tiepoint is None:
        raise DegenerateGeometryError("no admissible observation pair in track")
    return track.tiepoint


class _Layout:
    """Flattened observation arrays shared by residual and Jacobian code."""

    def __init__(self, problem):
        self.image_ids = [c[0] for c in problem.cameras]
        self.rpcs = [c[1] for c in problem.cameras]
        self.centers = np.array([np.asarray(c[2], dtype=float) for c in problem.cameras])
        index = {img: m for m, img in enumerate(self.image_ids)}
        cam, pt, px = [], [], []
        for k, t in enumerate(problem.tracks):
            for img, p in t.observations:
                cam.append(index[img])
                pt.append(k)
                px.append(p)
        order = np.lexsort((np.array(pt), np.array(cam)))
        self.cam = np.array(cam)[order]
        self.pt = np.array(pt)[order]
        self.px = np.array(px, dtype=float)[order]
        self.n_cam = len(self.image_ids)
        self.n_pt = len(problem.tracks)
        self.ref = problem.reference_index
        self.slices = []
        for m in range(self.n_cam):
            idx = np.flatnonzero(self.cam == m)
            self.slices.append(slice(idx[0], idx[-1] + 1) if idx.size else slice(0, 0))
        X0 = np.array([geodetic_to_ecef(*t.tiepoint) for t in problem.tracks])
        self.X0 = X0
        lon, lat, _ = ecef_to_geodetic(*X0.mean(axis=0))
        self.enu = enu_rotation(lon, lat)
        # pairs of observations sharing a tie-point, for the Schur complement
        by_pt = np.argsort(self.pt, kind="stable")
        o1, o2 = [], []
        groups = np.split(by_pt, np.cumsum(np.bincount(self.pt, minlength=self.n_pt))[:-1])
        for g in groups:
            for a in g:
                for b in g:
                    o1.append(a)
                    o2.append(b)
        self.pair_o1 = np.array(o1, dtype=int)
        self.pair_o2 = np.array(o2, dtype=int)

    def points(self, offsets):
        return self.X0 + offsets @ self.enu

    def residuals(self, angles, offsets):
        """(n_obs, 2) reprojection residuals for angles (n_cam, 3), offsets (n_pt, 3)."""
        R = euler_to_matrices(angles)
        X = self.points(offsets)[self.pt]
        C = self.centers[self.cam]
        Y = np.einsum("nij,nj->ni", R[self.cam], X - C) + C
        lon, lat, h = ecef_to_geodetic(Y[:, 0], Y[:, 1], Y[:, 2])
        out = np.empty_like(self.px)
        for m, sl in enumerate(self.slices):
            if sl.stop > sl.start:
                r, c = self.rpcs[m].project(lon[sl], lat[sl], h[sl])
                out[sl, 0] = r - self.px[sl, 0]
                out[sl, 1] = c - self.px[sl, 1]
        return out

    def jacobians(self, angles, offsets, cfg):
        n_obs = len(self.px)
        Jc = np.empty((n_obs, 2, 3))
        Jp = np.empty((n_obs, 2, 3))
        for j in range(3):
            d = np.zeros_like(angles)
            d[:, j] = cfg.angle_step
            rp = self.residuals(angles + d, offsets)
            rm = self.residuals(angles - d, offsets)
            Jc[:, :, j] = (rp - rm) / (2 * cfg.angle_step)
            d = np.zeros_like(offsets)
            d[:, j] = cfg.point_step
            rp = self.residuals(angles, offsets + d)
            rm = self.residuals(angles, offsets - d)
            Jp[:, :, j] = (rp - rm) / (2 * cfg.point_step)
        Jc[self.cam == self.ref] = 0.0
        return Jc, Jp


def _solve_step(layout, Jc, Jp, r, lam):
    """Damped normal equations solved by eliminating the point blocks."""
    nc, npt = layout.n_cam, layout.n_pt
    U = np.zeros((nc, 3, 3))
    V = np.zeros((npt, 3, 3))
    np.add.at(U, layout.cam, np.einsum("nki,nkj->nij", Jc, Jc))
    np.add.at(V, layout.pt, np.einsum("nki,nkj->nij", Jp, Jp))
    W = np.einsum("nki,nkj->nij", Jc, Jp)          # per observation (cam x pt)
    gc = np.zeros((nc, 3))
    gp = np.zeros((npt, 3))
    np.add.at(gc, layout.cam, np.einsum("nki,nk->ni", Jc, r))
    np.add.at(gp, layout.pt, np.einsum("nki,nk->ni", Jp, r))

    eye = np.eye(3)
    Ud = U + lam * U * eye
    Vd = V + lam * V * eye
    Ud[layout.ref] = eye
    Vinv = np.linalg.inv(Vd)

    Y = np.einsum("nij,njk->nik", W, Vinv[layout.pt])   # W V^-1 per observation
    S = np.zeros((nc, nc, 3, 3))
    S[np.arange(nc), np.arange(nc)] = Ud
    o1, o2 = layout.pair_o1, layout.pair_o2
    np.add.at(S, (layout.cam[o1], layout.cam[o2]),
              -np.einsum("nij,nkj->nik", Y[o1], W[o2]))
    rhs = -gc.copy()
    np.add.at(rhs, layout.cam, np.einsum("nij,nj->ni", Y, gp[layout.pt]))
    rhs[layout.ref] = 0.0
    S = S.transpose(0, 2, 1, 3).reshape(3 * nc, 3 * nc)
    S[3 * layout.ref:3 * layout.ref + 3, :] = 0.0
    S[:, 3 * layout.ref:3 * layout.ref + 3] = 0.0
    S[3 * layout.ref:3 * layout.ref + 3, 3 * layout.ref:3 * layout.ref + 3] = eye
    dc = np.linalg.solve(S, rhs.ravel()).reshape(nc, 3)
    dc[layout.ref] = 0.0
    back = -gp.copy()
    np.add.at(back, layout.pt, -np.einsum("nji,nj->ni", W, dc[layout.cam]))
    dp = np.einsum("kij,kj->ki", Vinv, back)
    return dc, dp


def _cost(r):
    return float(np.sum(r * r))


def _rms(r):
    return float(np.sqrt(np.sum(r * r) / max(len(r), 1)))


def reprojection_cost(problem, rotations, tiepoints_ecef):
    """Summed squared reprojection error by a plain double loop over
    tracks and observations (independent of the solver's vectorized path)."""
    index = {c[0]: m for m, c in enumerate(problem.cameras)}
    total = 0.0
    for k, t in enumerate(problem.tracks):
        for img, (row, col) in t.observations:
            m = index[img]
            rpc, center = problem.cameras[m][1], problem.cameras[m][2]
            r, c = corrected_project(rpc, center, rotations[m], tiepoints_ecef[k])
            total += (float(r) - row) ** 2 + (float(c) - col) ** 2
    return total


def validate_problem(problem, cfg=None):
    cfg = cfg or BundleConfig()
    ids = [c[0] for c in problem.cameras]
    if len(ids) < 2:
        raise InsufficientDataError("need at least one non-reference camera")
    if len(problem.tracks) < cfg.min_tracks:
        raise InsufficientDataError("need at least %d tracks, got %d"
                                    % (cfg.min_tracks, len(problem.tracks)))
    if any(t.tiepoint is None for t in problem.tracks):
        raise ValueError("all tracks need an initialized tie-point")
    seen = {img for t in problem.tracks for img in t.image_ids}
    missing = [img for img in ids if img not in seen]
    if missing:
        raise ConnectivityError("cameras without observations: %s" % ", ".join(missing))
    check_connectivity(ids, problem.tracks)


def solve_date(problem, config=None):
    """Minimize the total reprojection error of one date's problem.

    Raises:
        ConnectivityError: some camera is not linked to the others by tracks.
        InsufficientDataError: fewer than 10 tracks or a single camera.

    Returns:
        BundleSolution; `stalled` is set when no damping up to the maximum
        reduced the cost although the linear model predicted a decrease
        (the best iterate is still returned).
    """
    cfg = config or BundleConfig()
    validate_problem(problem, cfg)
    L = _Layout(problem)
    angles = np.zeros((L.n_cam, 3))
    offsets = np.zeros((L.n_pt, 3))
    r = L.residuals(angles, offsets)
    cost = _cost(r)
    initial_rms = _rms(r)
    costs = [cost]
    lam = cfg.lambda_init
    stalled = False
    it = 0
    Jc, Jp = L.jacobians(angles, offsets, cfg)
    while it < cfg.max_iter:
        if _rms(r) < cfg.abs_rms_tol:
            break
        it += 1
        dc, dp = _solve_step(L, Jc, Jp, r, lam)
        r_new = L.residuals(angles + dc, offsets + dp)
        new_cost = _cost(r_new)
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            angles, offsets, r, cost = angles + dc, offsets + dp, r_new, new_cost
            costs.append(cost)
            lam = max(lam / cfg.lambda_down, 1e-15)
            if rel < cfg.rel_tol:
                break
            Jc, Jp = L.jacobians(angles, offsets, cfg)
        else:
            # at the noise floor the model predicts no useful decrease
            r_lin = r + np.einsum("nki,ni->nk", Jc, dc[L.cam]) \
                + np.einsum("nki,ni->nk", Jp, dp[L.pt])
            if cost - _cost(r_lin) <= cfg.rel_tol * cost:
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                stalled = True
                break
    angles[L.ref] = 0.0
    rotations = [CorrectionRotation(float(a[0]), float(a[1]), float(a[2]),
                                    tuple(float(v) for v in L.centers[m]))
                 for m, a in enumerate(angles)]
    X = L.points(offsets)
    lon, lat, h = ecef_to_geodetic(X[:, 0], X[:, 1], X[:, 2])
    log.info("bundle adjustment: rms %.4g -> %.4g px in %d iterations%s",
             initial_rms, _rms(r), it, " (stalled)" if stalled else "")
    return BundleSolution(L.image_ids, rotations, np.c_[lon, lat, h], initial_rms,
                          _rms(r), it, costs, stalled, L.ref)


def write_rotation(path, image_id, rot):
    from rpcvol.io import atomic_write_text
    atomic_write_text(path, json.dumps(rot.to_record(image_id), indent=2) + "\n")


def read_rotation(path):
    with open(path) as f:
        rec = json.load(f)
    return rec["image_id"], CorrectionRotation.from_record(rec)
