"""Height grids: rasterization, merging, consistency maps, hole filling,
NCC translation alignment and grid files.

Grids live in a local ENU frame. `origin_e, origin_n` is the lower-left
(south-west) corner; row 0 is the northern edge. Missing cells hold NaN in
memory and -9999 in files.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator
from scipy.ndimage import binary_dilation, convolve
from scipy.signal import fftconvolve
from scipy.spatial import Delaunay, QhullError

from rpcvol.errors import FrameError, OverlapError
from rpcvol.io import atomic_write_bytes

log = logging.getLogger(__name__)

NODATA = -9999.0
DEFAULT_GSD = 1.0
MEDIAN_WINDOW = 5
MEDIAN_MIN_VALID = 13
MIN_ALIGN_OVERLAP = 1000


class GridFrame(NamedTuple):
    origin_e: float
    origin_n: float
    gsd: float
    width: int
    height: int

    def cell_centers(self):
        """(east, north) arrays of shape (height, width)."""
        e = self.origin_e + (np.arange(self.width) + 0.5) * self.gsd
        n = self.origin_n + (self.height - np.arange(self.height) - 0.5) * self.gsd
        return np.meshgrid(e, n)

    def cell_index(self, e, n):
        """(row, col) integer indices of the cells holding points (e, n)."""
        col = np.floor((np.asarray(e) - self.origin_e) / self.gsd).astype(np.int64)
        row = self.height - 1 - np.floor((np.asarray(n) - self.origin_n)
                                         / self.gsd).astype(np.int64)
        return row, col


def snap_frame(bounds, gsd=DEFAULT_GSD):
    """Smallest frame with corners on multiples of `gsd` covering (e0, n0, e1, n1)."""
    if gsd <= 0:
        raise FrameError("gsd must be positive")
    e0, n0, e1, n1 = bounds
    oe = math.floor(e0 / gsd) * gsd
    on = math.floor(n0 / gsd) * gsd
    width = max(1, int(math.ceil((e1 - oe) / gsd - 1e-9)))
    height = max(1, int(math.ceil((n1 - on) / gsd - 1e-9)))
    return GridFrame(float(oe), float(on), float(gsd), width, height)


@dataclass(frozen=True, eq=False)
class DsmGrid:
    origin_e: float
    origin_n: float
    gsd: float
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.size == 0:
            raise FrameError("grid values must be a non-empty 2D array")
        if not self.gsd > 0:
            raise FrameError("gsd must be positive")
        if np.isinf(v).any():
            raise ValueError("grid values must be finite or NaN")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def frame(self):
        return GridFrame(self.origin_e, self.origin_n, self.gsd, self.width, self.height)

    @property
    def valid(self):
        return ~np.isnan(self.values)

    def with_values(self, values):
        return DsmGrid(self.origin_e, self.origin_n, self.gsd, values)

    @classmethod
    def empty(cls, frame):
        return cls(frame.origin_e, frame.origin_n, frame.gsd,
                   np.full((frame.height, frame.width), np.nan))


class PointCloud(NamedTuple):
    points: np.ndarray
    pair: tuple = ("", "")


def check_same_frame(grids):
    f0 = grids[0].frame
    for g in grids[1:]:
        if g.frame != f0:
            raise FrameError("grids are not on a common frame: %s vs %s" % (f0, g.frame))
    return f0


def rasterize(points, frame):
    """Per-cell median of point heights; cells without points are nodata.

    Args:
        points: PointCloud or (n, 3) array of (east, north, height).
        frame: GridFrame.
    """
    pts = points.points if isinstance(points, PointCloud) else points
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise ValueError("point coordinates must be finite")
    row, col = frame.cell_index(pts[:, 0], pts[:, 1])
    ok = (row >= 0) & (row < frame.height) & (col >= 0) & (col < frame.width)
    cell = row[ok] * frame.width + col[ok]
    h = pts[ok, 2]
    out = np.full(frame.height * frame.width, np.nan)
    if cell.size:
        order = np.lexsort((h, cell))
        cell, h = cell[order], h[order]
        uniq, start, count = np.unique(cell, return_index=True, return_counts=True)
        lo = h[start + (count - 1) // 2]
        hi = h[start + count // 2]
        out[uniq] = 0.5 * (lo + hi)
    return DsmGrid(frame.origin_e, frame.origin_n, frame.gsd,
                   out.reshape(frame.height, frame.width))


def _sorted_stack(grids):
    # sorting makes the reductions independent of input order, bit for bit
    stack = np.sort(np.stack([g.values for g in grids]), axis=0)
    valid = ~np.isnan(stack)
    return np.where(valid, stack, 0.0), valid


def merge_average(grids):
    """Per-cell mean of the valid inputs (nodata where none is valid)."""
    if not grids:
        raise ValueError("nothing to merge")
    check_same_frame(grids)
    vals, valid = _sorted_stack(grids)
    count = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vals.sum(axis=0) / count
    mean[count == 0] = np.nan
    return grids[0].with_values(mean)


def stddev_map(grids):
    """Per-cell population standard deviation over valid inputs; cells with
    fewer than two valid values are nodata."""
    if len(grids) < 2:
        raise ValueError("need at least two grids")
    check_same_frame(grids)
    vals, valid = _sorted_stack(grids)
    count = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vals.sum(axis=0) / count
        dev = np.where(valid, vals - mean, 0.0)
        std = np.sqrt((dev * dev).sum(axis=0) / count)
    std[count < 2] = np.nan
    return grids[0].with_values(std)


def median_fill(values, size=MEDIAN_WINDOW, min_valid=MEDIAN_MIN_VALID):
    """Nodata cells with at least `min_valid` valid neighbors in the
    size x size window take the median of those neighbors."""
    values = np.asarray(values, dtype=float)
    hole = np.isnan(values)
    count = convolve((~hole).astype(int), np.ones((size, size), int), mode="constant")
    target = hole & (count >= min_valid)
    out = values.copy()
    if target.any():
        rows, cols = np.nonzero(target)
        k = size // 2
        padded = np.pad(values, k, constant_values=np.nan)
        di, dj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        neigh = padded[rows[:, None] + di.ravel(), cols[:, None] + dj.ravel()]
        out[rows, cols] = np.nanmedian(neigh, axis=1)
    return out


def _inside_hull(points, queries):
    try:
        tri = Delaunay(points)
    except QhullError:
        return np.zeros(len(queries), dtype=bool)
    return tri.find_simplex(queries) >= 0


def interpolate_holes(values, support_radius=4):
    """Fill nodata cells inside the convex hull of the valid cells with a
    piecewise cubic (Clough-Tocher) interpolant of nearby valid cells.

    Holes outside the hull stay nodata. The support starts with the valid
    cells within `support_radius` cells of a hole and widens until every
    interior hole is enclosed.
    """
    values = np.asarray(values, dtype=float)
    out = values.copy()
    hole = np.isnan(values)
    valid = ~hole
    if not hole.any() or valid.sum() < 3:
        return out
    vr, vc = np.nonzero(valid)
    hr, hc = np.nonzero(hole)
    # the hull of all valid cells is the hull of their boundary cells
    edge = valid & binary_dilation(hole, np.ones((3, 3), bool))
    outer = np.zeros_like(valid)
    outer[[0, -1], :] = True
    outer[:, [0, -1]] = True
    edge |= valid & outer
    inside = _inside_hull(np.c_[np.nonzero(edge)[1], np.nonzero(edge)[0]].astype(float),
                          np.c_[hc, hr].astype(float))
    if not inside.any():
        return out
    hr, hc = hr[inside], hc[inside]
    todo = np.ones(hr.size, dtype=bool)
    radius = support_radius
    while todo.any():
        near = np.zeros_like(hole)
        near[hr[todo], hc[todo]] = True
        near = binary_dilation(near, np.ones((3, 3), bool), iterations=radius) & valid
        sr, sc = np.nonzero(near)
        if sr.size >= 3:
            try:
                f = CloughTocher2DInterpolator(np.c_[sc, sr].astype(float), values[sr, sc])
                z = f(np.c_[hc[todo], hr[todo]].astype(float))
            except QhullError:
                z = np.full(todo.sum(), np.nan)
            idx = np.flatnonzero(todo)
            good = ~np.isnan(z)
            out[hr[idx[good]], hc[idx[good]]] = z[good]
            todo[idx[good]] = False
        if near.sum() == valid.sum():
            break
        radius *= 4
    return out


def fill_holes(dsm):
    """5x5 median pass (>= 13 valid neighbors) then cubic interpolation of
    the remaining interior holes. Originally valid cells are never changed.

    A grid without any valid cell is returned unchanged with a RuntimeWarning.
    """
    if not dsm.valid.any():
        warnings.warn("fill_holes: grid has no valid cell", RuntimeWarning)
        return dsm
    v = median_fill(dsm.values)
    v = interpolate_holes(v)
    return dsm.with_values(v)


class Alignment(NamedTuple):
    de: float
    dn: float
    dh: float
    ncc: float
    on_border: bool


def _xcorr(f, g):
    """c[u] = sum_x f(x) g(x + u) for all 2D shifts u, 'full' layout."""
    return fftconvolve(f, g[::-1, ::-1], mode="full")


def ncc_surface(ref, mov, radius):
    """Masked NCC for integer shifts (dr, dc) in [-radius, radius]^2 pairing
    ref[r, c] with mov[r + dr, c + dc].

    Returns:
        (ncc array indexed [dr + radius, dc + radius], overlap counts).
    """
    ma = ~np.isnan(ref)
    mb = ~np.isnan(mov)
    a = np.where(ma, ref - np.nanmean(ref), 0.0)
    b = np.where(mb, mov - np.nanmean(mov), 0.0)
    fa, fb = ma.astype(float), mb.astype(float)
    n = _xcorr(fa, fb)
    sa = _xcorr(a, fb)
    sb = _xcorr(fa, b)
    saa = _xcorr(a * a, fb)
    sbb = _xcorr(fa, b * b)
    sab = _xcorr(a, b)
    H, W = mov.shape
    # shift u = (dr, dc) sits at index (H - 1 - dr, W - 1 - dc) in full layout
    dr = np.arange(-radius, radius + 1)
    rows = H - 1 - dr
    cols = W - 1 - dr
    sel = np.ix_(rows, cols)
    n, sa, sb, saa, sbb, sab = (x[sel] for x in (n, sa, sb, saa, sbb, sab))
    n = np.rint(n)
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sab - sa * sb / n
        va = saa - sa * sa / n
        vb = sbb - sb * sb / n
        ncc = cov / np.sqrt(va * vb)
    ncc[(n < 100) | ~np.isfinite(ncc) | (va <= 0) | (vb <= 0)] = -np.inf
    return ncc, n


def _quadratic_peak(z):
    """Stationary point of the least-squares quadratic through a 3x3 patch,
    as an offset (dy, dx) from its center, clipped to [-1, 1]."""
    y, x = np.mgrid[-1:2, -1:2]
    A = np.c_[np.ones(9), x.ravel(), y.ravel(), x.ravel() ** 2, x.ravel() * y.ravel(),
              y.ravel() ** 2]
    c = np.linalg.lstsq(A, z.ravel(), rcond=None)[0]
    H = np.array([[2 * c[3], c[4]], [c[4], 2 * c[5]]])
    g = np.array([c[1], c[2]])
    if np.linalg.det(H) <= 0 or H[0, 0] >= 0:
        return 0.0, 0.0
    dx, dy = -np.linalg.solve(H, g)
    return float(np.clip(dy, -1, 1)), float(np.clip(dx, -1, 1))


def align_translation(reference, moving, search_radius=20):
    """Translation (de, dn, dh) in meters to apply to `moving` so it
    registers onto `reference`.

    Horizontal shifts maximize the NCC of mean-removed heights over
    mutually valid cells (exhaustive integer search plus a quadratic
    sub-cell refinement); dh is the median height difference after the
    horizontal shift.

    Raises:
        FrameError: grids on different frames.
        OverlapError: fewer than 1000 common valid cells at zero shift.
    """
    check_same_frame([reference, moving])
    common = reference.valid & moving.valid
    if common.sum() < MIN_ALIGN_OVERLAP:
        raise OverlapError("only %d common valid cells" % common.sum())
    ncc, _ = ncc_surface(reference.values, moving.values, search_radius)
    k = int(np.argmax(ncc))
    ir, ic = divmod(k, ncc.shape[1])
    best = float(ncc[ir, ic])
    on_border = ir in (0, ncc.shape[0] - 1) or ic in (0, ncc.shape[1] - 1)
    fr, fc = float(ir - search_radius), float(ic - search_radius)
    if not on_border:
        patch = ncc[ir - 1:ir + 2, ic - 1:ic + 2]
        if np.isfinite(patch).all():
            dy, dx = _quadratic_peak(patch)
            fr, fc = fr + dy, fc + dx
    else:
        log.warning("NCC peak on the search border (radius %d)", search_radius)
    # ref[r, c] ~ mov[r + fr, c + fc]: moving content sits fc cells east and
    # fr cells south of the reference, so it must move by (-fc, +fr) cells
    de = -fc * reference.gsd
    dn = fr * reference.gsd
    shifted = apply_translation(moving, de, dn, 0.0)
    both = reference.valid & shifted.valid
    if not both.any():
        raise OverlapError("no overlap after shifting")
    dh = float(np.median(reference.values[both] - shifted.values[both]))
    return Alignment(de, dn, dh, best, bool(on_border))


def apply_translation(grid, de, dn, dh):
    """Grid with content moved by (de, dn) meters and raised by dh, on the
    same frame. Sub-cell shifts use bilinear interpolation; a cell whose
    interpolation touches nodata becomes nodata."""
    sc = -de / grid.gsd
    sr = dn / grid.gsd
    H, W = grid.values.shape
    r = np.arange(H)[:, None] + sr
    c = np.arange(W)[None, :] + sc
    r0 = np.floor(r + 1e-9).astype(int)
    c0 = np.floor(c + 1e-9).astype(int)
    fr = np.clip(r - r0, 0.0, 1.0)
    fc = np.clip(c - c0, 0.0, 1.0)
    fr[fr < 1e-9] = 0.0
    fc[fc < 1e-9] = 0.0
    v = grid.values
    padded = np.pad(v, 1, constant_values=np.nan)

    def at(rr, cc):
        rr = np.clip(rr + 1, 0, H + 1)
        cc = np.clip(cc + 1, 0, W + 1)
        return padded[rr, cc]

    r0b = np.broadcast_to(r0, (H, W))
    c0b = np.broadcast_to(c0, (H, W))
    frb = np.broadcast_to(fr, (H, W))
    fcb = np.broadcast_to(fc, (H, W))
    terms = []
    for dr, wr in ((0, 1 - frb), (1, frb)):
        for dc, wc in ((0, 1 - fcb), (1, fcb)):
            w = wr * wc
            val = at(r0b + dr, c0b + dc)
            # zero-weight neighbors never poison the result
            terms.append(np.where(w > 0, w * val, 0.0))
    out = terms[0] + terms[1] + terms[2] + terms[3]
    return grid.with_values(out + dh)


def _header(grid):
    return ("ncols %d\nnrows %d\nxllcorner %s\nyllcorner %s\ncellsize %s\n"
            "NODATA_value %s\n" % (grid.width, grid.height, repr(grid.origin_e),
                                   repr(grid.origin_n), repr(grid.gsd), "-9999"))


def write_ascii_grid(path, grid, fmt="%.6f"):
    v = np.where(grid.valid, grid.values, NODATA)
    lines = [" ".join(fmt % x if x != NODATA else "-9999" for x in row) for row in v]
    atomic_write_bytes(path, (_header(grid) + "\n".join(lines) + "\n").encode("ascii"))


def write_binary_grid(path, grid):
    v = np.where(grid.valid, grid.values, NODATA).astype("<f4")
    atomic_write_bytes(path, _header(grid).encode("ascii") + v.tobytes())


def read_grid(path):
    """Read an ESRI ASCII grid or its binary twin (same header, float32 body)."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    head = {}
    for _ in range(6):
        end = data.index(b"\n", pos)
        key, val = data[pos:end].decode("ascii").split()
        head[key.lower()] = val
        pos = end + 1
    w, h = int(head["ncols"]), int(head["nrows"])
    nodata = float(head["nodata_value"])
    body = data[pos:]
    if len(body) == 4 * w * h:
        v = np.frombuffer(body, dtype="<f4").astype(float).reshape(h, w)
    else:
        v = np.array(body.split(), dtype=float).reshape(h, w)
    v = np.where(v == nodata, np.nan, v)
    return DsmGrid(float(head["xllcorner"]), float(head["yllcorner"]),
                   float(head["cellsize"]), v)
