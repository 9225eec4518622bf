"""Terrain plane, dynamic-area mask, normalized heights, volume and the
weight-from-volume regression."""
import json
from dataclasses import dataclass, field
from datetime import date as Date
from typing import NamedTuple

import numpy as np
from scipy.ndimage import binary_opening

from rpcvol.errors import InsufficientDataError, RegressionError
from rpcvol.io import atomic_write_text, fmt_float
from rpcvol.raster import DsmGrid, check_same_frame

DTM_PERCENTILE = 25.0
MIN_DTM_CELLS = 100
DEFAULT_TAU = 1.0
NDSM_MIN = 3.0
NDSM_MAX = 30.0
TRAIN_FRACTION = 0.85
VOLUME_UNIT = 1e6  # regression works in Mm^3


def estimate_dtm(dsm, percentile=DTM_PERCENTILE):
    """Constant plane at the given percentile of the valid DSM heights.

    The percentile interpolates linearly between order statistics of the
    empirical CDF (numpy's "interpolated_inverted_cdf"), so a sample that is
    exactly 25 % at 5 m and 75 % at 20 m gives 5 m.

    Raises:
        InsufficientDataError: fewer than 100 valid cells.
    """
    v = dsm.values[dsm.valid]
    if v.size < MIN_DTM_CELLS:
        raise InsufficientDataError("DTM needs %d valid cells, got %d"
                                    % (MIN_DTM_CELLS, v.size))
    level = float(np.percentile(v, percentile, method="interpolated_inverted_cdf"))
    return dsm.with_values(np.full(dsm.values.shape, level))


@dataclass(frozen=True, eq=False)
class DynamicMask:
    origin_e: float
    origin_n: float
    gsd: float
    values: np.ndarray

    @property
    def frame(self):
        return DsmGrid(self.origin_e, self.origin_n, self.gsd,
                       np.zeros(self.values.shape)).frame


def compute_dynamic_mask(series, tau=DEFAULT_TAU):
    """Cells whose temporal population std exceeds `tau`, opened by a 3x3 square.

    Cells with fewer than three valid dates are static.
    """
    if len(series) < 3:
        raise InsufficientDataError("dynamic mask needs at least three dates")
    check_same_frame(series)
    stack = np.sort(np.stack([g.values for g in series]), axis=0)
    valid = ~np.isnan(stack)
    count = valid.sum(axis=0)
    vals = np.where(valid, stack, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vals.sum(axis=0) / count
        dev = np.where(valid, vals - mean, 0.0)
        std = np.sqrt((dev * dev).sum(axis=0) / count)
    raw = (count >= 3) & (std > tau)
    mask = binary_opening(raw, structure=np.ones((3, 3), dtype=bool))
    g = series[0]
    return DynamicMask(g.origin_e, g.origin_n, g.gsd, mask)


def compute_ndsm(dsm, dtm, mask, hmin=NDSM_MIN, hmax=NDSM_MAX):
    """Masked DSM - DTM keeping only differences in [hmin, hmax].

    Returns:
        (nDSM grid with 0 elsewhere, fraction of nodata cells in the DSM or DTM).
    """
    check_same_frame([dsm, dtm])
    m = np.asarray(mask.values if isinstance(mask, DynamicMask) else mask, dtype=bool)
    if m.shape != dsm.values.shape:
        raise ValueError("mask shape differs from the DSM")
    if isinstance(mask, DynamicMask):
        check_same_frame([dsm, DsmGrid(mask.origin_e, mask.origin_n, mask.gsd,
                                       np.zeros(m.shape))])
    missing = np.isnan(dsm.values) | np.isnan(dtm.values)
    with np.errstate(invalid="ignore"):
        diff = dsm.values - dtm.values
        keep = m & ~missing & (diff >= hmin) & (diff <= hmax)
    out = np.where(keep, diff, 0.0)
    return dsm.with_values(out), float(missing.mean())


def integrate_volume(ndsm):
    """Sum of cell volumes gsd * gsd * h (nodata counts as 0)."""
    v = np.where(ndsm.valid, ndsm.values, 0.0)
    return float(v.sum() * ndsm.gsd * ndsm.gsd)


@dataclass
class VolumeSeries:
    dates: list
    volumes: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.dates) != len(self.volumes):
            raise ValueError("dates and volumes differ in length")
        ords = [d.toordinal() for d in self.dates]
        if any(b <= a for a, b in zip(ords, ords[1:])):
            raise ValueError("dates must be strictly increasing")
        if any(v < 0 for v in self.volumes):
            raise ValueError("volumes must be non-negative")

    def items(self):
        return list(zip(self.dates, self.volumes))


class WeightRegression(NamedTuple):
    a: float
    b: float
    rms_train: float
    rms_test: float
    train_fraction: float
    seed: int
    n_train: int
    n_test: int


class RegressionSample(NamedTuple):
    date: Date
    volume_m3: float
    weight_mt: float
    train: bool


def _as_pairs(series):
    if isinstance(series, VolumeSeries):
        return series.items()
    return sorted((d, float(v)) for d, v in series)


def interpolate_series(volumes, weights):
    """Both series linearly interpolated to the union of their dates inside
    the common span. Returns a list of (date, volume m^3, weight Mt)."""
    vp, wp = _as_pairs(volumes), _as_pairs(weights)
    if len(vp) < 2 or len(wp) < 2:
        raise InsufficientDataError("each series needs at least two dates")
    tv = np.array([d.toordinal() for d, _ in vp], dtype=float)
    tw = np.array([d.toordinal() for d, _ in wp], dtype=float)
    lo, hi = max(tv[0], tw[0]), min(tv[-1], tw[-1])
    ts = sorted({t for t in np.r_[tv, tw] if lo <= t <= hi})
    ts = np.array(ts, dtype=float)
    v = np.interp(ts, tv, [x for _, x in vp])
    s = np.interp(ts, tw, [x for _, x in wp])
    return [(Date.fromordinal(int(t)), float(a), float(b)) for t, a, b in zip(ts, v, s)]


def fit_weight_regression(volumes, weights, train_fraction=TRAIN_FRACTION, seed=0):
    """Least-squares fit of S = a V + b (V in Mm^3, S in Mt) on a seeded
    random `train_fraction` subset of the interpolated samples.

    Returns:
        (WeightRegression, list of RegressionSample).

    Raises:
        InsufficientDataError: fewer than 4 interpolated samples.
        RegressionError: the training volumes do not vary.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train fraction must lie in (0, 1]")
    samples = interpolate_series(volumes, weights)
    n = len(samples)
    if n < 4:
        raise InsufficientDataError("regression needs at least 4 samples, got %d" % n)
    rng = np.random.default_rng(seed)
    n_train = min(n, max(2, int(round(train_fraction * n))))
    train = np.zeros(n, dtype=bool)
    train[rng.permutation(n)[:n_train]] = True
    V = np.array([s[1] for s in samples]) / VOLUME_UNIT
    S = np.array([s[2] for s in samples])
    if np.ptp(V[train]) == 0:
        raise RegressionError("training volumes have zero variance")
    A = np.c_[V[train], np.ones(n_train)]
    (a, b), *_ = np.linalg.lstsq(A, S[train], rcond=None)
    res = S - (a * V + b)
    rms_train = float(np.sqrt(np.mean(res[train] ** 2)))
    rms_test = float(np.sqrt(np.mean(res[~train] ** 2))) if (~train).any() else float("nan")
    reg = WeightRegression(float(a), float(b), rms_train, rms_test, float(train_fraction),
                           int(seed), int(n_train), int(n - n_train))
    out = [RegressionSample(d, v, w, bool(t)) for (d, v, w), t in zip(samples, train)]
    return reg, out


def predict_weight(reg, volume_m3):
    """a V + b with V given in m^3 (converted to Mm^3) and the result in Mt."""
    return reg.a * np.asarray(volume_m3, dtype=float) / VOLUME_UNIT + reg.b


def write_volume_report(path, dates, volumes, nodata_fractions):
    lines = ["date,volume_m3,ndata_fraction"]
    for d, v, f in zip(dates, volumes, nodata_fractions):
        lines.append("%s,%s,%s" % (d.isoformat(), fmt_float(v), fmt_float(f)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_regression_report(csv_path, json_path, reg, samples):
    lines = ["date,volume_m3,weight_mt,train"]
    for s in samples:
        lines.append("%s,%s,%s,%d" % (s.date.isoformat(), fmt_float(s.volume_m3),
                                      fmt_float(s.weight_mt), int(s.train)))
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    rec = {"a": reg.a, "b": reg.b, "rms_train": reg.rms_train,
           "rms_test": None if np.isnan(reg.rms_test) else reg.rms_test,
           "train_fraction": reg.train_fraction, "seed": reg.seed}
    atomic_write_text(json_path, json.dumps(rec, indent=2, sort_keys=True) + "\n")


def read_weights(path):
    """Weights CSV with header date,weight_mt."""
    out = []
    with open(path) as f:
        header = f.readline()
        if "date" not in header:
            raise ValueError("weights file needs a date,weight_mt header")
        for line in f:
            line = line.strip()
            if line:
                d, w = line.split(",")[:2]
                out.append((Date.fromisoformat(d), float(w)))
    return out
