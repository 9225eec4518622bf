"""Pairwise descriptor matching, RANSAC epipolar filtering and track building."""
import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from rpcvol.errors import InsufficientDataError, NoGeometryError

DEFAULT_RATIO = 0.6
DESCRIPTOR_LENGTH = 128


class Keypoint(NamedTuple):
    image_id: str
    row: float
    col: float
    descriptor: np.ndarray


class PairwiseMatch(NamedTuple):
    image_a: str
    image_b: str
    idx_a: int
    idx_b: int
    distance: float


@dataclass
class FeatureTrack:
    """Observations of one tie-point: at most one (row, col) per image."""

    observations: list
    tiepoint: tuple = field(default=None)

    def __post_init__(self):
        ids = [o[0] for o in self.observations]
        if len(ids) < 2:
            raise ValueError("a track needs at least two observations")
        if len(set(ids)) != len(ids):
            raise ValueError("a track holds at most one observation per image")

    @property
    def image_ids(self):
        return [o[0] for o in self.observations]

    def __len__(self):
        return len(self.observations)


def ratio_test_match(desc_a, desc_b, ratio=DEFAULT_RATIO, image_a="a", image_b="b"):
    """Nearest-neighbor matches passing the distance-ratio test.

    For each descriptor of `desc_a` the two nearest neighbors in `desc_b`
    (Euclidean) are found; the best is kept when d1 / d2 < ratio. When
    several a-descriptors pick the same b-descriptor only the one with the
    smallest d1 survives.

    Raises:
        InsufficientDataError: fewer than two candidates in `desc_b`, or an
            empty `desc_a`.
    """
    desc_a = np.atleast_2d(np.asarray(desc_a, dtype=float))
    desc_b = np.atleast_2d(np.asarray(desc_b, dtype=float))
    if len(desc_b) < 2:
        raise InsufficientDataError("ratio test needs at least two candidates")
    if len(desc_a) == 0:
        raise InsufficientDataError("no query descriptors")
    if desc_a.shape[1] != desc_b.shape[1]:
        raise ValueError("descriptor lengths differ")
    d, j = cKDTree(desc_b).query(desc_a, k=2)
    keep = d[:, 0] < ratio * d[:, 1]
    best = {}
    for i in np.flatnonzero(keep):
        b = int(j[i, 0])
        if b not in best or d[i, 0] < d[best[b], 0]:
            best[b] = i
    out = [PairwiseMatch(image_a, image_b, int(i), b, float(d[i, 0]))
           for b, i in best.items()]
    return sorted(out, key=lambda m: m.idx_a)


def _normalizing_transform(pts):
    mean = pts.mean(axis=0)
    d = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])


def _eight_point(xa, xb):
    """Normalized 8-point estimate(s) with the rank-2 constraint.

    xa, xb: (..., n, 2) batched point sets, n >= 8. Points are (x, y) = (col, row).
    """
    batched = xa.ndim == 3
    if not batched:
        xa, xb = xa[None], xb[None]
    Ta = np.stack([_normalizing_transform(p) for p in xa])
    Tb = np.stack([_normalizing_transform(p) for p in xb])
    ha = np.einsum("bij,bnj->bni", Ta, np.concatenate([xa, np.ones(xa.shape[:2] + (1,))], -1))
    hb = np.einsum("bij,bnj->bni", Tb, np.concatenate([xb, np.ones(xb.shape[:2] + (1,))], -1))
    # x_b^T F x_a = 0
    A = (hb[..., :, None] * ha[..., None, :]).reshape(ha.shape[0], ha.shape[1], 9)
    _, _, vt = np.linalg.svd(A)
    F = vt[:, -1].reshape(-1, 3, 3)
    u, s, vt = np.linalg.svd(F)
    s[:, 2] = 0.0
    F = u @ (s[:, :, None] * vt)
    F = np.einsum("bji,bjk,bkl->bil", Tb, F, Ta)
    F = F / np.linalg.norm(F, axis=(1, 2), keepdims=True)
    return F if batched else F[0]


def sampson_distance(F, xa, xb):
    """First-order geometric error (pixels) of correspondences under F.

    F may be (3, 3) or batched (B, 3, 3); the result is (n,) or (B, n).
    """
    ha = np.c_[xa, np.ones(len(xa))]
    hb = np.c_[xb, np.ones(len(xb))]
    Fx = ha @ np.swapaxes(F, -1, -2)       # F x_a
    Ftx = hb @ F                           # F^T x_b
    num = np.sum(hb * Fx, axis=-1)
    den = Fx[..., 0] ** 2 + Fx[..., 1] ** 2 + Ftx[..., 0] ** 2 + Ftx[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


class RansacResult(NamedTuple):
    inliers: np.ndarray
    F: np.ndarray
    n_inliers: int


def ransac_fundamental(xa, xb, threshold_px=1.0, iterations=2000, seed=0,
                       batch=500):
    """RANSAC estimate of the fundamental matrix x_b^T F x_a = 0.

    Args:
        xa, xb: (n, 2) pixel coordinates as (row, col).

    Returns:
        RansacResult with the inlier mask and F re-estimated on all inliers
        (F acts on homogeneous (col, row, 1) points).

    Raises:
        InsufficientDataError: fewer than 8 correspondences.
        NoGeometryError: best consensus below 8 inliers.
    """
    xa = np.asarray(xa, dtype=float)[:, ::-1]
    xb = np.asarray(xb, dtype=float)[:, ::-1]
    n = len(xa)
    if n < 8:
        raise InsufficientDataError("RANSAC needs at least 8 matches, got %d" % n)
    rng = np.random.default_rng(seed)
    best_count, best_mask = -1, None
    done = 0
    while done < iterations:
        b = min(batch, iterations - done)
        samples = np.stack([rng.choice(n, 8, replace=False) for _ in range(b)])
        Fs = _eight_point(xa[samples], xb[samples])
        d = sampson_distance(Fs, xa, xb)
        counts = (d < threshold_px).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_mask = d[k] < threshold_px
        done += b
    if best_count < 8:
        raise NoGeometryError("best consensus has %d inliers" % best_count)
    mask = best_mask
    F = _eight_point(xa[mask], xb[mask])
    for _ in range(3):
        new_mask = sampson_distance(F, xa, xb) < threshold_px
        if new_mask.sum() < 8 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
        F = _eight_point(xa[mask], xb[mask])
    return RansacResult(mask, F, int(mask.sum()))


def ransac_fundamental_filter(matches, keypoints, threshold_px=1.0, iterations=2000,
                              seed=0):
    """Keep the matches of one image pair consistent with a fundamental matrix.

    Args:
        matches: PairwiseMatch list for a single (image_a, image_b) pair.
        keypoints: mapping image_id -> (n, 2) array of (row, col) positions.

    Returns:
        (inlier matches, F).
    """
    if len(matches) < 8:
        raise InsufficientDataError("RANSAC needs at least 8 matches, got %d"
                                    % len(matches))
    a, b = matches[0].image_a, matches[0].image_b
    pa = np.asarray(keypoints[a])[[m.idx_a for m in matches]]
    pb = np.asarray(keypoints[b])[[m.idx_b for m in matches]]
    res = ransac_fundamental(pa, pb, threshold_px, iterations, seed)
    return [m for m, ok in zip(matches, res.inliers) if ok], res.F


class UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        parent = self.parent
        parent.setdefault(x, x)
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller key becomes the root; keeps results order independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_tracks(matches, keypoints):
    """Merge pairwise matches into feature tracks by union-find.

    A connected component holding two different keypoints of the same image is
    discarded entirely. Tracks are returned sorted by their observations.

    Args:
        matches: iterable of PairwiseMatch.
        keypoints: mapping image_id -> (n, 2) array of (row, col).
    """
    uf = UnionFind()
    for m in matches:
        uf.union((m.image_a, int(m.idx_a)), (m.image_b, int(m.idx_b)))
    components = {}
    for node in list(uf.parent):
        components.setdefault(uf.find(node), set()).add(node)
    tracks = []
    for nodes in components.values():
        images = [img for img, _ in nodes]
        if len(set(images)) != len(images) or len(nodes) < 2:
            continue
        obs = sorted(nodes)
        tracks.append(FeatureTrack([(img, tuple(float(v) for v in keypoints[img][idx]))
                                    for img, idx in obs]))
    tracks.sort(key=lambda t: t.observations)
    return tracks


def read_keypoints(path, image_id=None):
    """Keypoint CSV with header row,col,d0,...; returns (positions, descriptors)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2:]


def write_keypoints(path, positions, descriptors):
    from rpcvol.io import atomic_write_text, fmt_float
    nd = descriptors.shape[1]
    lines = [",".join(["row", "col"] + ["d%d" % i for i in range(nd)])]
    for p, d in zip(positions, descriptors):
        lines.append(",".join(fmt_float(v) for v in list(p) + list(d)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matches(path):
    out = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            out.append(PairwiseMatch(rec["image_a"], rec["image_b"], int(rec["idx_a"]),
                                     int(rec["idx_b"]), float(rec["distance"])))
    return out


def write_matches(path, matches):
    from rpcvol.io import atomic_write_text, fmt_float
    lines = ["image_a,image_b,idx_a,idx_b,distance"]
    for m in matches:
        lines.append("%s,%s,%d,%d,%s" % (m.image_a, m.image_b, m.idx_a, m.idx_b,
                                         fmt_float(m.distance)))
    atomic_write_text(path, "\n".join(lines) + "\n")
