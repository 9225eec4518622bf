"""Synthetic ground truth: pile terrains, pushframe-like scene strips with
known attitude errors, tie-point and dense correspondences.

Every generator is a pure function of its seed and parameters.

Geometry of an acquisition: scenes alternate between a forward-looking and a
backward-looking pass along north. Scenes of the same pass overlap by
`overlap_fraction` of their along-track length, and the backward pass is
shifted by half a step, so each scene overlaps its list neighbors with
some 20 degrees of convergence.
"""
import json
import os
from dataclasses import dataclass, field, replace
from datetime import date as Date, timedelta
from typing import NamedTuple

import numpy as np

from rpcvol.bundle_adjust import CorrectionRotation, euler_to_matrix
from rpcvol.errors import FitError, GenerationError
from rpcvol.geodesy import local_enu_frame
from rpcvol.geometry import Acquisition, Scene, select_pairs
from rpcvol.io import atomic_write_text, write_dense
from rpcvol.matching import PairwiseMatch, write_keypoints, write_matches
from rpcvol.pinhole import satellite_camera
from rpcvol.rpc_model import Normalization, dumps_rpc, fit_rpc

DEFAULT_ORIGIN = (32.02, -28.80)
DEFAULT_ALTITUDE = 500e3
DEFAULT_GSD = 0.72
DEFAULT_MAX_ANGLE = 100e-6
DEFAULT_OFF_NADIR = 10.0
FIT_TOLERANCE_PX = 0.01
DESCRIPTOR_LENGTH = 128
WEIGHT_A = 1.02  # Mt per Mm^3
WEIGHT_B = 0.3  # Mt
# across-track margin covering footprint shifts of ~100 µrad attitude errors
ACROSS_MARGIN = 100.0
# wide scenes spread tie-points over the full field of view, which keeps
# the height datum of rotation-only refinement well determined
DEFAULT_COLS = 3200


class Pile(NamedTuple):
    east: float
    north: float
    amplitude: float
    sigma: float

    def height(self, e, n):
        d2 = (np.asarray(e) - self.east) ** 2 + (np.asarray(n) - self.north) ** 2
        return self.amplitude * np.exp(-0.5 * d2 / self.sigma ** 2)

    @property
    def volume(self):
        return 2.0 * np.pi * self.amplitude * self.sigma ** 2


@dataclass(frozen=True)
class SyntheticWorld:
    """Flat base plane plus Gaussian piles in the ENU frame at `origin`.

    `extent` is the (east, north) size in meters of the area of interest,
    centered on the frame origin. Heights are ENU "up" values, which agree
    with ellipsoidal heights to centimeters over the area.
    """

    seed: int
    extent: tuple
    piles: tuple = ()
    base_height: float = 100.0
    origin: tuple = DEFAULT_ORIGIN

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        for p in self.piles:
            if p.amplitude <= 0 or p.sigma <= 0:
                raise ValueError("pile amplitude and sigma must be positive")

    @property
    def frame(self):
        return local_enu_frame((self.origin[0], self.origin[1], 0.0))

    def pile_height(self, e, n):
        e, n = np.broadcast_arrays(np.asarray(e, dtype=float), np.asarray(n, dtype=float))
        h = np.zeros(e.shape)
        for p in self.piles:
            h = h + p.height(e, n)
        return h

    def surface(self, e, n):
        return self.base_height + self.pile_height(e, n)

    def surface_ecef(self, e, n):
        e, n = np.broadcast_arrays(np.asarray(e, dtype=float), np.asarray(n, dtype=float))
        return np.stack(self.frame.enu_to_ecef(e, n, self.surface(e, n)), axis=-1)

    def pile_volume(self):
        """Untruncated total pile volume, sum of 2 pi A sigma^2."""
        return float(sum(p.volume for p in self.piles))

    def bounds(self):
        we, wn = self.extent
        return -we / 2.0, -wn / 2.0, we / 2.0, wn / 2.0

    def aoi_polygon(self):
        """Area of interest as a (lon, lat) ring at the base height."""
        e0, n0, e1, n1 = self.bounds()
        e = np.array([e0, e1, e1, e0])
        n = np.array([n0, n0, n1, n1])
        lon, lat, _ = self.frame.to_geodetic(e, n, np.full(4, self.base_height))
        return [(float(a), float(b)) for a, b in zip(lon, lat)]

    def truncated_volume(self, hmin=3.0, hmax=30.0, cell=0.25, mask=None):
        """Volume of pile heights within [hmin, hmax] by midpoint integration.

        Args:
            cell: integration step in meters.
            mask: optional (origin_e, origin_n, gsd, bool array with row 0 at
                the north edge) restricting the integral to true cells.
        """
        e0, n0, e1, n1 = self.bounds()
        if mask is not None:
            me, mn, mgsd, mvals = mask
            mvals = np.asarray(mvals, dtype=bool)
        total = 0.0
        es = np.arange(e0 + cell / 2.0, e1, cell)
        for n_start in np.arange(n0, n1, 64.0):
            ns = np.arange(n_start + cell / 2.0, min(n_start + 64.0, n1), cell)
            E, N = np.meshgrid(es, ns)
            h = self.pile_height(E, N)
            keep = (h >= hmin) & (h <= hmax)
            if mask is not None:
                col = np.floor((E - me) / mgsd).astype(int)
                row = mvals.shape[0] - 1 - np.floor((N - mn) / mgsd).astype(int)
                inside = ((row >= 0) & (row < mvals.shape[0])
                          & (col >= 0) & (col < mvals.shape[1]))
                sel = np.zeros_like(keep)
                sel[inside] = mvals[row[inside], col[inside]]
                keep &= sel
            total += float(np.sum(h[keep]))
        return total * cell * cell

    def with_amplitudes(self, amplitudes):
        piles = tuple(p._replace(amplitude=float(a))
                      for p, a in zip(self.piles, amplitudes) if a > 0)
        return replace(self, piles=piles)


def generate_world(seed, n_piles, extent, base_height=100.0, origin=DEFAULT_ORIGIN,
                   amplitude_range=(10.0, 20.0), sigma_range=(15.0, 25.0)):
    """Random pile field inside the area, piles kept 3.5 sigma from the edges.

    Args:
        extent: side in meters, or an (east, north) pair.
    """
    if np.isscalar(extent):
        extent = (float(extent), float(extent))
    extent = (float(extent[0]), float(extent[1]))
    if min(extent) <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    piles = []
    for _ in range(n_piles):
        a = float(rng.uniform(*amplitude_range))
        s = float(rng.uniform(*sigma_range))
        m = 3.5 * s
        lo_e, hi_e = -extent[0] / 2 + m, extent[0] / 2 - m
        lo_n, hi_n = -extent[1] / 2 + m, extent[1] / 2 - m
        if lo_e >= hi_e or lo_n >= hi_n:
            raise GenerationError("area too small for a pile of sigma %.1f m" % s)
        piles.append(Pile(float(rng.uniform(lo_e, hi_e)), float(rng.uniform(lo_n, hi_n)),
                          a, s))
    return SyntheticWorld(int(seed), extent, tuple(piles), float(base_height),
                          tuple(origin))


@dataclass(eq=False)
class SyntheticScene:
    image_id: str
    true_camera: object
    delivered_camera: object
    rpc: object
    rotation: CorrectionRotation
    footprint: list
    fit_error_px: float

    @property
    def scene(self):
        return Scene(self.image_id, self.rpc, self.true_camera.width,
                     self.true_camera.height, self.footprint)


@dataclass(eq=False)
class SyntheticAcquisition:
    date: Date
    world: SyntheticWorld
    scenes: list
    seed: int

    @property
    def acquisition(self):
        return Acquisition(self.date, [s.scene for s in self.scenes])

    def by_id(self):
        return {s.image_id: s for s in self.scenes}

    def aoi(self):
        return self.world.aoi_polygon()


def strip_layout(n_scenes, overlap_fraction, extent_north):
    """Along-track centers (m) and footprint length of the interleaved strip.

    The stereo pairs formed by list neighbors together span `extent_north`.
    """
    s_frac = 1.0 - overlap_fraction
    length = extent_north / (max(n_scenes - 3, 0) * s_frac / 2.0 + 1.0)
    step = length * s_frac
    k = np.arange(n_scenes)
    centers = (k - (n_scenes - 1) / 2.0) * step / 2.0
    return centers, length


def _fit_scene_rpc(cam, h_lo, h_hi, rng):
    """RPC fitted to `cam` over its image at heights [h_lo, h_hi]."""
    rows = np.array([0.0, 0.0, cam.height - 1.0, cam.height - 1.0])
    cols = np.array([0.0, cam.width - 1.0, 0.0, cam.width - 1.0])
    lons, lats = [], []
    for h in (h_lo, h_hi):
        lo, la = cam.localize(rows, cols, np.full(4, h))
        lons.extend(lo)
        lats.extend(la)
    lon0, lon1, lat0, lat1 = min(lons), max(lons), min(lats), max(lats)
    g = np.stack(np.meshgrid(np.linspace(lon0, lon1, 15), np.linspace(lat0, lat1, 15),
                             np.linspace(h_lo, h_hi, 9)), -1).reshape(-1, 3)
    r, c = cam.project(*g.T)
    norm = Normalization((lat0 + lat1) / 2, (lat1 - lat0) / 2, (lon0 + lon1) / 2,
                         (lon1 - lon0) / 2, (h_lo + h_hi) / 2, (h_hi - h_lo) / 2,
                         (cam.height - 1) / 2.0, cam.height / 2.0,
                         (cam.width - 1) / 2.0, cam.width / 2.0)
    try:
        rpc = fit_rpc(g, np.c_[r, c], norm).model
    except FitError as exc:  # pragma: no cover - defensive
        raise GenerationError("RPC fit failed: %s" % exc) from exc
    # independent validation on random points of the fitting volume
    v = np.c_[rng.uniform(lon0, lon1, 2000), rng.uniform(lat0, lat1, 2000),
              rng.uniform(h_lo, h_hi, 2000)]
    rr, cc = rpc.project(*v.T)
    pr, pc = cam.project(*v.T)
    err = float(np.max(np.hypot(rr - pr, cc - pc)))
    if not err <= FIT_TOLERANCE_PX:
        raise GenerationError("fitted RPC deviates by %.3g px from its pinhole" % err)
    return rpc, err


def _date_seed(seed, date):
    return int(seed) * 100003 + date.toordinal()


def generate_acquisition(world, n_scenes, overlap_fraction, date, seed=None,
                         max_angle=DEFAULT_MAX_ANGLE, angles=None,
                         off_nadir=DEFAULT_OFF_NADIR, altitude=DEFAULT_ALTITUDE,
                         gsd=DEFAULT_GSD, cols=None, height_margin=(60.0, 90.0)):
    """Scenes covering `world` with known injected attitude rotations.

    Each scene's true pinhole is perturbed by a rotation about its center
    (Euler angles drawn uniformly in [-max_angle, max_angle]); the
    delivered RPC is fitted to the perturbed camera.

    Args:
        date: datetime.date or ISO string.
        angles: optional (n_scenes, 3) injected angles overriding the draw.
        height_margin: fit volume spans base - m0 .. base + m1 meters.

    Raises:
        GenerationError: a fitted RPC misses its pinhole by more than 0.01 px.
    """
    if n_scenes < 2:
        raise ValueError("need at least two scenes")
    if not 0.0 < overlap_fraction < 0.9:
        raise ValueError("overlap fraction must lie in (0, 0.9)")
    if isinstance(date, str):
        date = Date.fromisoformat(date)
    seed = _date_seed(world.seed, date) if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    if angles is None:
        angles = rng.uniform(-max_angle, max_angle, (n_scenes, 3))
    angles = np.asarray(angles, dtype=float).reshape(n_scenes, 3)

    centers_n, length = strip_layout(n_scenes, overlap_fraction, world.extent[1])
    tan_a = np.tan(np.radians(off_nadir))
    along_gsd = gsd * (1.0 + tan_a ** 2)
    rows = int(np.ceil(length / along_gsd))
    if cols is None:
        cols = max(DEFAULT_COLS, int(np.ceil((world.extent[0] + 2 * ACROSS_MARGIN) / gsd)))
    frame = world.frame
    h_lo = world.base_height - height_margin[0]
    h_hi = world.base_height + height_margin[1]
    scenes = []
    for k in range(n_scenes):
        lon, lat, h = frame.to_geodetic(0.0, float(centers_n[k]), world.base_height)
        look = off_nadir if k % 2 == 0 else -off_nadir
        true_cam = satellite_camera((float(lon), float(lat), float(h)), altitude, look,
                                    gsd=gsd, width=cols, height=rows)
        phi, theta, alpha = (float(a) for a in angles[k])
        R = euler_to_matrix(phi, theta, alpha)
        delivered = true_cam.rotated(R)
        rpc, err = _fit_scene_rpc(delivered, h_lo, h_hi, rng)
        image_id = "scene%02d" % k
        footprint = Scene(image_id, rpc, cols, rows).footprint
        rot = CorrectionRotation(phi, theta, alpha,
                                 tuple(float(v) for v in true_cam.center))
        scenes.append(SyntheticScene(image_id, true_cam, delivered, rpc, rot,
                                     footprint, err))
    return SyntheticAcquisition(date, world, scenes, seed)


@dataclass(eq=False)
class SyntheticObservations:
    """Keypoints (per image), candidate matches (per pair) and their truth."""

    keypoints: dict
    descriptors: dict
    matches: dict
    points_ecef: np.ndarray
    keypoint_point: dict
    match_inlier: dict = field(default_factory=dict)


def _visible(cam, row, col):
    return (row >= 0) & (row <= cam.height - 1) & (col >= 0) & (col <= cam.width - 1)


def footprint_bounds(acq, world=None):
    """ENU bounding box (e0, n0, e1, n1) of all true scene footprints at base height."""
    world = acq.world if world is None else world
    frame = world.frame
    es, ns = [], []
    for sc in acq.scenes:
        cam = sc.true_camera
        rows = np.array([0.0, 0.0, cam.height - 1.0, cam.height - 1.0])
        cols = np.array([0.0, cam.width - 1.0, 0.0, cam.width - 1.0])
        lon, lat = cam.localize(rows, cols, np.full(4, world.base_height))
        e, n, _ = frame.to_enu(lon, lat, np.full(4, world.base_height))
        es.extend(e)
        ns.extend(n)
    return min(es), min(ns), max(es), max(ns)


def generate_observations(acq, world=None, n_points=300, pixel_noise_sigma=0.3,
                          outlier_fraction=0.0, seed=0, descriptor_noise=2.0,
                          region="scenes"):
    """Tie-point keypoints and candidate matches seen by the true cameras.

    Surface points are sampled uniformly over `region` ("scenes": the
    bounding box of all footprints, "aoi": the area of interest) and projected into
    every true camera that sees them, with Gaussian pixel noise. Every image
    pair sharing at least 8 points also receives uniformly placed outlier
    matches so that they make up `outlier_fraction` of its candidates.
    Outlier keypoints carry a shared descriptor, so descriptor matching
    reproduces them.
    """
    world = acq.world if world is None else world
    if n_points < 1 or pixel_noise_sigma < 0 or not 0 <= outlier_fraction < 1:
        raise ValueError("invalid observation parameters")
    rng = np.random.default_rng(seed)
    if region == "scenes":
        e0, n0, e1, n1 = footprint_bounds(acq, world)
    elif region == "aoi":
        e0, n0, e1, n1 = world.bounds()
    else:
        raise ValueError("unknown sampling region %r" % region)
    e = rng.uniform(e0, e1, n_points)
    n = rng.uniform(n0, n1, n_points)
    X = world.surface_ecef(e, n)
    point_desc = rng.uniform(0.0, 255.0, (n_points, DESCRIPTOR_LENGTH))

    pos, desc, owner = {}, {}, {}
    seen = {}
    for sc in acq.scenes:
        cam = sc.true_camera
        r, c = cam.project_ecef(X[:, 0], X[:, 1], X[:, 2])
        r = r + rng.normal(0.0, pixel_noise_sigma, n_points)
        c = c + rng.normal(0.0, pixel_noise_sigma, n_points)
        vis = np.flatnonzero(_visible(cam, r, c))
        pos[sc.image_id] = [np.c_[r[vis], c[vis]]]
        desc[sc.image_id] = [point_desc[vis]
                             + rng.normal(0.0, descriptor_noise, (vis.size, DESCRIPTOR_LENGTH))]
        owner[sc.image_id] = [vis]
        seen[sc.image_id] = set(vis.tolist())

    ids = [sc.image_id for sc in acq.scenes]
    cams = {sc.image_id: sc.true_camera for sc in acq.scenes}
    pair_outliers = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            shared = seen[a] & seen[b]
            if len(shared) < 8 or outlier_fraction == 0:
                continue
            n_out = int(round(outlier_fraction / (1 - outlier_fraction) * len(shared)))
            d = rng.uniform(0.0, 255.0, (n_out, DESCRIPTOR_LENGTH))
            for img in (a, b):
                cam = cams[img]
                p = np.c_[rng.uniform(0, cam.height - 1, n_out),
                          rng.uniform(0, cam.width - 1, n_out)]
                start = sum(len(x) for x in pos[img])
                pos[img].append(p)
                desc[img].append(d + rng.normal(0.0, descriptor_noise, d.shape))
                owner[img].append(np.full(n_out, -1))
                pair_outliers.setdefault((a, b), []).append(np.arange(start, start + n_out))

    keypoints, descriptors, keypoint_point = {}, {}, {}
    perm_of = {}
    for img in ids:
        P = np.concatenate(pos[img])
        D = np.concatenate(desc[img])
        O = np.concatenate(owner[img])
        perm = rng.permutation(len(P))
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(P))
        keypoints[img], descriptors[img], keypoint_point[img] = P[perm], D[perm], O[perm]
        perm_of[img] = inv

    matches, inlier = {}, {}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            ka, kb = keypoint_point[a], keypoint_point[b]
            where_b = {int(p): j for j, p in enumerate(kb) if p >= 0}
            items = []
            for ia, p in enumerate(ka):
                if p >= 0 and int(p) in where_b:
                    items.append((ia, where_b[int(p)], True))
            if (a, b) in pair_outliers:
                oa, ob = pair_outliers[(a, b)]
                items.extend((int(perm_of[a][x]), int(perm_of[b][y]), False)
                             for x, y in zip(oa, ob))
            if not items:
                continue
            items.sort()
            ms = [PairwiseMatch(a, b, ia, ib, float(np.linalg.norm(
                descriptors[a][ia] - descriptors[b][ib]))) for ia, ib, _ in items]
            matches[(a, b)] = ms
            inlier[(a, b)] = np.array([ok for _, _, ok in items])
    return SyntheticObservations(keypoints, descriptors, matches, X, keypoint_point,
                                 inlier)


def generate_dense(acq, pairs, world=None, spacing=1.0, sigma=0.05, seed=0):
    """Dense correspondences of each pair on a regular ground grid.

    Returns:
        dict (a, b) -> (n, 4) array of (row_a, col_a, row_b, col_b).
    """
    world = acq.world if world is None else world
    rng = np.random.default_rng(seed)
    e0, n0, e1, n1 = world.bounds()
    es = np.arange(e0 + spacing / 2.0, e1, spacing)
    ns = np.arange(n0 + spacing / 2.0, n1, spacing)
    scenes = acq.by_id()
    out = {}
    for a, b in pairs:
        ca, cb = scenes[a].true_camera, scenes[b].true_camera
        rows = []
        for n_chunk in np.array_split(ns, max(1, len(ns) // 128)):
            E, N = np.meshgrid(es, n_chunk)
            X = world.surface_ecef(E.ravel(), N.ravel())
            ra, cola = ca.project_ecef(X[:, 0], X[:, 1], X[:, 2])
            rb, colb = cb.project_ecef(X[:, 0], X[:, 1], X[:, 2])
            ok = _visible(ca, ra, cola) & _visible(cb, rb, colb)
            rows.append(np.c_[ra[ok], cola[ok], rb[ok], colb[ok]])
        d = np.concatenate(rows)
        if sigma > 0:
            d = d + rng.normal(0.0, sigma, d.shape)
        out[(a, b)] = d
    return out


def pile_schedule(kind, n_dates, n_piles, seed=0, base_amplitudes=None):
    """Per-date pile amplitude factors, shape (n_dates, n_piles).

    kind: "constant", "linear" (0.5 to 1.5 times the template), "dynamic"
    (seeded factors in [0.3, 1.7] with consecutive dates differing by at
    least 0.4), or an explicit array of factors.
    """
    if not isinstance(kind, str):
        f = np.asarray(kind, dtype=float)
        if f.shape != (n_dates, n_piles):
            raise ValueError("schedule shape must be (n_dates, n_piles)")
        return f
    if kind == "constant":
        return np.ones((n_dates, n_piles))
    if kind == "linear":
        return np.repeat(np.linspace(0.5, 1.5, n_dates)[:, None], n_piles, axis=1)
    if kind == "dynamic":
        rng = np.random.default_rng(seed)
        f = np.empty((n_dates, n_piles))
        f[0] = rng.uniform(0.3, 1.7, n_piles)
        for t in range(1, n_dates):
            step = rng.uniform(0.4, 0.8, n_piles) * rng.choice([-1.0, 1.0], n_piles)
            prev = f[t - 1]
            room = np.where(step > 0, 1.7 - prev, prev - 0.3)
            flip = np.abs(step) > room
            step[flip] = -step[flip]
            # after a flip the other side offers more than 0.6
            room = np.where(step > 0, 1.7 - prev, prev - 0.3)
            step = np.sign(step) * np.minimum(np.abs(step), room)
            f[t] = prev + step
        return f
    raise ValueError("unknown schedule %r" % kind)


class SeriesDate(NamedTuple):
    date: Date
    world: SyntheticWorld
    acquisition: SyntheticAcquisition


def series_dates(n_dates, start="2021-03-01", seed=0):
    """Dates separated by seeded gaps of 1 to 20 days."""
    rng = np.random.default_rng(seed)
    d = Date.fromisoformat(start)
    out = [d]
    for gap in rng.integers(1, 21, n_dates - 1):
        d = d + timedelta(days=int(gap))
        out.append(d)
    return out


def generate_timeseries(world_template, n_dates, pile_schedule_kind="dynamic",
                        n_scenes=6, overlap_fraction=0.3, seed=0, start="2021-03-01",
                        **acq_kwargs):
    """Per-date worlds (piles rescaled by the schedule) and acquisitions
    with independent attitude errors."""
    if n_dates < 3:
        raise ValueError("a series needs at least three dates")
    factors = pile_schedule(pile_schedule_kind, n_dates, len(world_template.piles), seed)
    base = np.array([p.amplitude for p in world_template.piles])
    out = []
    for t, d in enumerate(series_dates(n_dates, start, seed)):
        world = world_template.with_amplitudes(base * factors[t])
        acq = generate_acquisition(world, n_scenes, overlap_fraction, d,
                                   seed=_date_seed(seed, d), **acq_kwargs)
        out.append(SeriesDate(d, world, acq))
    return out


def true_dynamic_mask(worlds, gsd=1.0, tau=1.0):
    """Dynamic-cell mask of a series computed from the exact surfaces.

    Uses the same rule as the pipeline (temporal population std > tau then
    a 3x3 opening) on cell-center samples of the area.

    Returns:
        (origin_e, origin_n, gsd, bool array) with row 0 at the north edge.
    """
    from scipy.ndimage import binary_opening

    e0, n0, e1, n1 = worlds[0].bounds()
    es = np.arange(e0 + gsd / 2.0, e1, gsd)
    ns = np.arange(n1 - gsd / 2.0, n0, -gsd)
    E, N = np.meshgrid(es, ns)
    stack = np.stack([w.surface(E, N) for w in worlds])
    mask = binary_opening(stack.std(axis=0) > tau, structure=np.ones((3, 3), bool))
    return (e0, n0, gsd, mask)


def weights_from_volumes(dates, volumes_m3, a=WEIGHT_A, b=WEIGHT_B, sigma=0.05, seed=0,
                         sample_dates=None):
    """Weights S = a V + b (V in Mm^3, S in Mt) with Gaussian noise of `sigma` Mt,
    sampled on `sample_dates` (default every day of the span) by linear
    interpolation of the volume series."""
    rng = np.random.default_rng(seed)
    t = np.array([d.toordinal() for d in dates], dtype=float)
    if sample_dates is None:
        sample_dates = [Date.fromordinal(k) for k in range(int(t[0]), int(t[-1]) + 1)]
    ts = np.array([d.toordinal() for d in sample_dates], dtype=float)
    v = np.interp(ts, t, np.asarray(volumes_m3, dtype=float)) / 1e6
    s = a * v + b + rng.normal(0.0, sigma, len(ts)) if sigma > 0 else a * v + b
    return list(zip(sample_dates, (float(x) for x in s)))


def _pair_name(a, b):
    return "%s__%s" % (a, b)


def write_date_directory(root, acq, obs, dense=None, dense_fmt="%.5f"):
    """Write one date in the pipeline ingestion layout.

    Layout: <root>/<YYYY-MM-DD>/{rpc,keypoints,matches,dense}/.
    """
    d = os.path.join(root, acq.date.isoformat())
    for sub in ("rpc", "keypoints", "matches", "dense"):
        os.makedirs(os.path.join(d, sub), exist_ok=True)
    for sc in acq.scenes:
        extra = {"image_id": sc.image_id, "width": sc.true_camera.width,
                 "height": sc.true_camera.height}
        atomic_write_text(os.path.join(d, "rpc", sc.image_id + ".json"),
                          dumps_rpc(sc.rpc, extra))
        write_keypoints(os.path.join(d, "keypoints", sc.image_id + ".csv"),
                        obs.keypoints[sc.image_id], obs.descriptors[sc.image_id])
    for (a, b), ms in sorted(obs.matches.items()):
        write_matches(os.path.join(d, "matches", _pair_name(a, b) + ".csv"), ms)
    for (a, b), arr in sorted((dense or {}).items()):
        write_dense(os.path.join(d, "dense", _pair_name(a, b) + ".csv"), arr, dense_fmt)
    return d


def truth_record(acq):
    return {"date": acq.date.isoformat(), "seed": acq.seed,
            "rotations": {sc.image_id: sc.rotation.to_record(sc.image_id)
                          for sc in acq.scenes},
            "fit_error_px": {sc.image_id: sc.fit_error_px for sc in acq.scenes}}


def write_ground_truth(path, record):
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")


class SeriesTruth(NamedTuple):
    dates: list
    aoi: list
    mask: tuple
    volumes: list
    weights: list
    series: list


def write_weights(path, weights):
    lines = ["date,weight_mt"] + ["%s,%r" % (d.isoformat(), float(w)) for d, w in weights]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_series(root, world_template, n_dates=6, schedule="dynamic", n_scenes=8,
                 overlap_fraction=0.3, seed=0, n_points=1500, pixel_noise_sigma=0.3,
                 dense_spacing=1.0, dense_sigma=0.05, hmin=3.0, hmax=30.0, tau=1.0,
                 gsd=1.0, weight_sigma=0.05, **acq_kwargs):
    """Generate a full series and write it in the ingestion layout.

    Writes one directory per date, root/weights.csv and root/ground_truth.json
    holding the injected rotations and the truncated volumes restricted to
    the true dynamic mask.

    Returns:
        SeriesTruth.
    """
    series = generate_timeseries(world_template, n_dates, schedule, n_scenes,
                                 overlap_fraction, seed, **acq_kwargs)
    aoi = world_template.aoi_polygon()
    records = []
    for k, item in enumerate(series):
        acq = item.acquisition
        pairs = select_pairs(acq.acquisition, aoi)
        obs = generate_observations(acq, n_points=n_points,
                                    pixel_noise_sigma=pixel_noise_sigma,
                                    seed=_date_seed(seed, item.date) + 1)
        dense = generate_dense(acq, pairs, spacing=dense_spacing, sigma=dense_sigma,
                               seed=_date_seed(seed, item.date) + 2)
        write_date_directory(root, acq, obs, dense)
        records.append(truth_record(acq))
    worlds = [s.world for s in series]
    mask = true_dynamic_mask(worlds, gsd, tau)
    volumes = [w.truncated_volume(hmin, hmax, mask=mask) for w in worlds]
    dates = [s.date for s in series]
    weights = weights_from_volumes(dates, volumes, sigma=weight_sigma, seed=seed)
    write_weights(os.path.join(root, "weights.csv"), weights)
    for rec, v, w in zip(records, volumes, worlds):
        rec["volume_m3"] = v
        rec["pile_volume_m3"] = float(sum(p.volume for p in w.piles))
    write_ground_truth(os.path.join(root, "ground_truth.json"),
                       {"seed": seed, "aoi": [list(p) for p in aoi], "dates": records,
                        "hmin": hmin, "hmax": hmax, "tau": tau, "gsd": gsd,
                        "regression": {"a": WEIGHT_A, "b": WEIGHT_B, "sigma": weight_sigma}})
    return SeriesTruth(dates, aoi, mask, volumes, weights, series)
