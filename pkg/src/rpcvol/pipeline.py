"""Orchestration over a directory-structured time series.

Input layout::

    root/<YYYY-MM-DD>/rpc/<image>.json
    root/<YYYY-MM-DD>/keypoints/<image>.csv
    root/<YYYY-MM-DD>/matches/<a>__<b>.csv      (optional candidate matches)
    root/<YYYY-MM-DD>/dense/<a>__<b>.csv        (dense correspondences)
    root/weights.csv                            (optional, date,weight_mt)

Outputs go to root/<output_dir>/ (default "out").
"""
import dataclasses
import glob
import hashlib
import json
import logging
import os
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date as Date
from typing import NamedTuple

import numpy as np

from rpcvol import __version__
from rpcvol.bundle_adjust import (BundleConfig, BundleProblem, CorrectedCamera,
                                  choose_reference, init_tiepoints, read_rotation,
                                  solve_date, write_rotation)
from rpcvol.errors import (InsufficientDataError, NoGeometryError, OverlapError,
                           RpcVolError)
from rpcvol.geodesy import local_enu_frame
from rpcvol.geometry import (Acquisition, Scene, polygon_centroid, regress_camera_center,
                             select_pairs, triangulate)
from rpcvol.io import atomic_write_text, read_dense
from rpcvol.matching import (build_tracks, ransac_fundamental_filter, ratio_test_match,
                             read_keypoints, read_matches)
from rpcvol.raster import (DsmGrid, apply_translation, align_translation, fill_holes,
                           merge_average, rasterize, read_grid, snap_frame, stddev_map,
                           write_ascii_grid)
from rpcvol.rpc_model import read_rpc
from rpcvol.volume import (VolumeSeries, compute_dynamic_mask, compute_ndsm, estimate_dtm,
                           fit_weight_regression, integrate_volume, read_weights,
                           write_regression_report, write_volume_report)

log = logging.getLogger(__name__)

DATE_DIR = re.compile(r"^\d{4}-\d{2}-\d{2}$")
CONFIG_NAME = "pipeline.cfg"


class DateSkipped(RpcVolError):
    """A date cannot be processed; the reason is reported and the series continues."""


@dataclass
class PipelineConfig:
    aoi: list = None
    gsd: float = 1.0
    convergence_window: tuple = (5.0, 35.0)
    intersection_min: float = 200.0
    ratio: float = 0.6
    ransac_threshold: float = 1.0
    ransac_iterations: int = 2000
    ransac_seed: int = 0
    lm_lambda_init: float = 1e-3
    lm_lambda_max: float = 1e8
    lm_max_iter: int = 100
    lm_rel_tol: float = 1e-10
    min_tracks: int = 10
    mask_tau: float = 1.0
    ndsm_min: float = 3.0
    ndsm_max: float = 30.0
    align_radius: int = 100
    train_fraction: float = 0.85
    regression_seed: int = 0
    output_dir: str = "out"
    workers: int = 1
    apply_correction: bool = True
    weights_file: str = "weights.csv"

    def __post_init__(self):
        if self.aoi is not None:
            self.aoi = [tuple(float(v) for v in p) for p in self.aoi]
            if len(self.aoi) < 3:
                raise ValueError("aoi needs at least three vertices")
        self.convergence_window = tuple(float(v) for v in self.convergence_window)
        lo, hi = self.convergence_window
        if not 0 <= lo < hi <= 90:
            raise ValueError("convergence window must satisfy 0 <= lo < hi <= 90")
        checks = [(self.gsd > 0, "gsd"), (self.intersection_min >= 0, "intersection_min"),
                  (0 < self.ratio < 1, "ratio"), (self.ransac_threshold > 0, "ransac_threshold"),
                  (self.ransac_iterations > 0, "ransac_iterations"),
                  (self.lm_lambda_init > 0, "lm_lambda_init"),
                  (self.lm_lambda_max > self.lm_lambda_init, "lm_lambda_max"),
                  (self.lm_max_iter > 0, "lm_max_iter"), (self.min_tracks >= 1, "min_tracks"),
                  (self.mask_tau >= 0, "mask_tau"),
                  (0 <= self.ndsm_min < self.ndsm_max, "ndsm bounds"),
                  (self.align_radius >= 1, "align_radius"),
                  (0 < self.train_fraction <= 1, "train_fraction"),
                  (self.workers >= 1, "workers")]
        for ok, name in checks:
            if not ok:
                raise ValueError("invalid config value: %s" % name)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["convergence_window"] = list(self.convergence_window)
        if self.aoi is not None:
            d["aoi"] = [list(p) for p in self.aoi]
        return d

    def config_hash(self):
        """sha256 of the canonical JSON of all fields."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def bundle_config(self):
        return BundleConfig(lambda_init=self.lm_lambda_init, lambda_max=self.lm_lambda_max,
                            max_iter=self.lm_max_iter, rel_tol=self.lm_rel_tol,
                            min_tracks=self.min_tracks)

    def dumps(self):
        """Text key = value form with JSON values, one field per line."""
        return "".join("%s = %s\n" % (k, json.dumps(v))
                       for k, v in sorted(self.to_dict().items()))


def loads_config(text, base=None):
    """Parse the key = value text format; unknown keys are an error."""
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    values = dict(base.to_dict()) if base is not None else {}
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError("line %d: expected key = value" % num)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError("line %d: unknown config key %r" % (num, key))
        try:
            values[key] = json.loads(val)
        except json.JSONDecodeError:
            values[key] = val
    return PipelineConfig(**values)


def load_config(path):
    with open(path) as f:
        return loads_config(f.read())


class DateRecord(NamedTuple):
    date: str
    status: str
    reason: str = ""
    scenes: tuple = ()
    reference: str = ""
    n_tracks: int = 0
    initial_rms_px: float = float("nan")
    final_rms_px: float = float("nan")
    iterations: int = 0
    stalled: bool = False
    pairs: tuple = ()
    coverage: float = 0.0

    def to_json(self):
        d = self._asdict()
        d["scenes"] = list(self.scenes)
        d["pairs"] = ["%s__%s" % p for p in self.pairs]
        for k in ("initial_rms_px", "final_rms_px"):
            if d[k] != d[k]:
                d[k] = None
        return d


@dataclass
class RunManifest:
    records: list = field(default_factory=list)
    alignments: dict = field(default_factory=dict)
    volumes: list = field(default_factory=list)
    regression: dict = None
    config_hash: str = ""
    tool_version: str = __version__

    def to_json(self):
        return {"tool_version": self.tool_version, "config_hash": self.config_hash,
                "dates": [r.to_json() for r in self.records],
                "alignments": self.alignments, "volumes": self.volumes,
                "regression": self.regression}

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- loading

def date_of(date_dir):
    name = os.path.basename(os.path.normpath(date_dir))
    if not DATE_DIR.match(name):
        raise DateSkipped("%s is not a YYYY-MM-DD directory" % name)
    return Date.fromisoformat(name)


def list_dates(root):
    return sorted(d for d in os.listdir(root)
                  if DATE_DIR.match(d) and os.path.isdir(os.path.join(root, d)))


def out_dir(root, config, *parts):
    return os.path.join(root, config.output_dir, *parts)


class DateInputs(NamedTuple):
    date: Date
    scenes: dict
    keypoints: dict
    descriptors: dict


def load_date(date_dir):
    """RPC scenes and keypoints of one date directory."""
    d = date_of(date_dir)
    scenes, kps, descs = {}, {}, {}
    for path in sorted(glob.glob(os.path.join(date_dir, "rpc", "*.json"))):
        rpc, extra = read_rpc(path)
        image_id = extra.get("image_id", os.path.splitext(os.path.basename(path))[0])
        scenes[image_id] = Scene(image_id, rpc, int(extra["width"]), int(extra["height"]))
        kp = os.path.join(date_dir, "keypoints", image_id + ".csv")
        if os.path.exists(kp):
            kps[image_id], descs[image_id] = read_keypoints(kp)
    return DateInputs(d, scenes, kps, descs)


def pair_file(date_dir, sub, a, b):
    for x, y in ((a, b), (b, a)):
        p = os.path.join(date_dir, sub, "%s__%s.csv" % (x, y))
        if os.path.exists(p):
            return p, (x, y) != (a, b)
    return None, False


# ---------------------------------------------------------------- refine

class RefineResult(NamedTuple):
    record: DateRecord
    cameras: dict


def _pair_seed(seed, a, b):
    return (int(seed) * 1000003 + zlib.crc32(("%s__%s" % (a, b)).encode())) % (2 ** 32)


def collect_matches(date_dir, inputs, config):
    """RANSAC-filtered matches over all image pairs of a date."""
    ids = sorted(inputs.keypoints)
    out = []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            path, swapped = pair_file(date_dir, "matches", a, b)
            if path is not None:
                ms = read_matches(path)
                if swapped:
                    ms = [m._replace(image_a=a, image_b=b, idx_a=m.idx_b, idx_b=m.idx_a)
                          for m in ms]
            else:
                try:
                    ms = ratio_test_match(inputs.descriptors[a], inputs.descriptors[b],
                                          config.ratio, a, b)
                except InsufficientDataError:
                    continue
            if len(ms) < 8:
                continue
            try:
                inl, _ = ransac_fundamental_filter(ms, inputs.keypoints,
                                                   config.ransac_threshold,
                                                   config.ransac_iterations,
                                                   _pair_seed(config.ransac_seed, a, b))
            except (InsufficientDataError, NoGeometryError):
                continue
            out.extend(inl)
    return out


def run_refine(date_dir, config, write=True):
    """Matching, tracks, tie-point initialization and the date's bundle adjustment.

    Raises:
        DateSkipped: fewer than two scenes or keypoint files.
        ConnectivityError, InsufficientDataError: from the adjustment.
    """
    inputs = load_date(date_dir)
    ids = sorted(inputs.scenes)
    if len(ids) < 2:
        raise DateSkipped("date has %d scene(s), need at least 2" % len(ids))
    if len(inputs.keypoints) < 2:
        raise DateSkipped("fewer than two keypoint files")
    centers = {i: regress_camera_center(inputs.scenes[i].rpc) for i in ids}
    matches = collect_matches(date_dir, inputs, config)
    tracks = build_tracks(matches, inputs.keypoints)
    init_tiepoints(tracks, {i: inputs.scenes[i].rpc for i in ids}, centers)
    tracks = [t for t in tracks if t.tiepoint is not None]
    used = sorted({img for t in tracks for img in t.image_ids})
    if len(used) < 2:
        raise InsufficientDataError("tracks link fewer than two cameras")
    ref = choose_reference(ids, tracks)
    problem = BundleProblem([(i, inputs.scenes[i].rpc, centers[i]) for i in ids], tracks, ref)
    sol = solve_date(problem, config.bundle_config())
    cameras = {i: CorrectedCamera(inputs.scenes[i].rpc, sol.rotations[m])
               for m, i in enumerate(ids)}
    record = DateRecord(inputs.date.isoformat(), "ok", "", tuple(ids), ids[ref],
                        len(tracks), sol.initial_rms, sol.final_rms, sol.iterations,
                        bool(sol.stalled))
    if write:
        root = os.path.dirname(os.path.normpath(date_dir))
        rot_dir = out_dir(root, config, inputs.date.isoformat(), "rotations")
        for m, i in enumerate(ids):
            write_rotation(os.path.join(rot_dir, i + ".json"), i, sol.rotations[m])
    return RefineResult(record, cameras)


def load_cameras(date_dir, config, corrected=True):
    """RPC cameras of a date, with rotation sidecars applied when present."""
    inputs = load_date(date_dir)
    root = os.path.dirname(os.path.normpath(date_dir))
    rot_dir = out_dir(root, config, inputs.date.isoformat(), "rotations")
    cams = {}
    for i, sc in inputs.scenes.items():
        path = os.path.join(rot_dir, i + ".json")
        if corrected and os.path.exists(path):
            _, rot = read_rotation(path)
            cams[i] = CorrectedCamera(sc.rpc, rot)
        else:
            cams[i] = CorrectedCamera(sc.rpc)
    return cams


# ---------------------------------------------------------------- reconstruct

def aoi_frame(config):
    """(ENU frame at the aoi centroid, snapped grid frame over the aoi)."""
    if config.aoi is None:
        raise ValueError("config has no aoi polygon")
    lon0, lat0 = polygon_centroid(config.aoi)
    frame = local_enu_frame((lon0, lat0, 0.0))
    lon = np.array([p[0] for p in config.aoi])
    lat = np.array([p[1] for p in config.aoi])
    e, n, _ = frame.to_enu(lon, lat, np.zeros(lon.shape))
    grid = snap_frame((e.min(), n.min(), e.max(), n.max()), config.gsd)
    return frame, grid


class ReconstructResult(NamedTuple):
    dsm: DsmGrid
    pair_dsms: dict
    stddev: DsmGrid
    pairs: list
    coverage: float


def triangulate_dense(cam_a, cam_b, corr, frame, h0, chunk=200000):
    """ENU points from dense (row_a, col_a, row_b, col_b) correspondences."""
    lon0, lat0, _ = frame.origin
    pts = []
    for s in range(0, len(corr), chunk):
        d = corr[s:s + chunk]
        n = len(d)
        init = (np.full(n, lon0), np.full(n, lat0), np.full(n, h0))
        tri = triangulate([cam_a, cam_b], [(d[:, 0], d[:, 1]), (d[:, 2], d[:, 3])],
                          init=init)
        ok = tri.converged & np.isfinite(tri.height)
        e, nn, u = frame.to_enu(tri.lon[ok], tri.lat[ok], tri.height[ok])
        pts.append(np.c_[e, nn, u])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def run_reconstruct(date_dir, config, cameras=None, write=True):
    """Per-pair DSMs over the aoi, their stddev map and the merged, filled DSM.

    Args:
        cameras: mapping image_id -> camera; default the corrected cameras
            from the rotation sidecars (or the raw RPCs when
            `config.apply_correction` is false).

    Raises:
        DateSkipped: no admissible pair with dense correspondences.
    """
    inputs = load_date(date_dir)
    if cameras is None:
        cameras = load_cameras(date_dir, config, corrected=config.apply_correction)
    frame, grid = aoi_frame(config)
    acq = Acquisition(inputs.date, [inputs.scenes[i] for i in sorted(inputs.scenes)])
    centers = {i: cameras[i].center for i in cameras}
    pairs = select_pairs(acq, config.aoi, window=config.convergence_window,
                         min_size=config.intersection_min, centers=centers)
    h0 = float(np.mean([s.rpc.height_offset for s in acq.scenes]))
    pair_dsms = {}
    for a, b in pairs:
        path, swapped = pair_file(date_dir, "dense", a, b)
        if path is None:
            continue
        corr = read_dense(path)
        if swapped:
            corr = corr[:, [2, 3, 0, 1]]
        pts = triangulate_dense(cameras[a], cameras[b], corr, frame, h0)
        pair_dsms[(a, b)] = rasterize(pts, grid)
    if not pair_dsms:
        raise DateSkipped("no admissible stereo pair with dense correspondences")
    used = sorted(pair_dsms)
    dsms = [pair_dsms[p] for p in used]
    merged = fill_holes(merge_average(dsms))
    std = stddev_map(dsms) if len(dsms) > 1 else DsmGrid.empty(grid)
    coverage = float(merged.valid.mean())
    if write:
        root = os.path.dirname(os.path.normpath(date_dir))
        d = out_dir(root, config, inputs.date.isoformat())
        for (a, b), g in pair_dsms.items():
            write_ascii_grid(os.path.join(d, "pairs", "%s__%s.asc" % (a, b)), g)
        write_ascii_grid(os.path.join(d, "stddev.asc"), std)
        write_ascii_grid(os.path.join(d, "dsm.asc"), merged)
    return ReconstructResult(merged, pair_dsms, std, used, coverage)


# ---------------------------------------------------------------- series

def process_date(date_dir, config):
    """Refine then reconstruct one date; failures become a skipped record."""
    name = os.path.basename(os.path.normpath(date_dir))
    try:
        ref = run_refine(date_dir, config)
        cams = ref.cameras if config.apply_correction else None
        rec = run_reconstruct(date_dir, config, cameras=cams)
    except (RpcVolError, ValueError, OSError, KeyError) as exc:
        log.warning("date %s skipped: %s", name, exc)
        return DateRecord(name, "skipped", "%s: %s" % (type(exc).__name__, exc)), None
    record = ref.record._replace(pairs=tuple(rec.pairs), coverage=rec.coverage)
    root = os.path.dirname(os.path.normpath(date_dir))
    atomic_write_text(out_dir(root, config, name, "record.json"),
                      json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")
    return record, rec.dsm


def _process_args(args):
    return process_date(*args)


def align_series(dates, dsms, config):
    """Align every DSM onto the first one. Returns (aligned dict, alignment records)."""
    ref = dsms[dates[0]]
    aligned = {dates[0]: ref}
    records = {dates[0]: {"de": 0.0, "dn": 0.0, "dh": 0.0, "ncc": 1.0, "on_border": False}}
    for d in dates[1:]:
        try:
            al = align_translation(ref, dsms[d], config.align_radius)
        except OverlapError as exc:
            records[d] = {"error": str(exc)}
            continue
        aligned[d] = apply_translation(dsms[d], al.de, al.dn, al.dh)
        records[d] = {"de": al.de, "dn": al.dn, "dh": al.dh, "ncc": al.ncc,
                      "on_border": al.on_border}
    return aligned, records


class VolumeResult(NamedTuple):
    series: VolumeSeries
    nodata: list
    mask: object
    regression: object


def compute_volumes(aligned, config, weights=None):
    dates = sorted(aligned)
    grids = [aligned[d] for d in dates]
    mask = compute_dynamic_mask(grids, config.mask_tau)
    vols, nodata = [], []
    for g in grids:
        ndsm, frac = compute_ndsm(g, estimate_dtm(g), mask, config.ndsm_min, config.ndsm_max)
        vols.append(integrate_volume(ndsm))
        nodata.append(frac)
    series = VolumeSeries([Date.fromisoformat(d) for d in dates], vols,
                          {"gsd": config.gsd, "hmin": config.ndsm_min,
                           "hmax": config.ndsm_max, "tau": config.mask_tau})
    reg = None
    if weights:
        try:
            reg = fit_weight_regression(series, weights, config.train_fraction,
                                        config.regression_seed)
        except RpcVolError as exc:
            log.warning("weight regression skipped: %s", exc)
    return VolumeResult(series, nodata, mask, reg)


def _weights_path(root, config):
    if not config.weights_file:
        return None
    p = os.path.join(root, config.weights_file)
    return p if os.path.exists(p) else None


def write_volume_outputs(root, config, vr):
    o = out_dir(root, config)
    write_volume_report(os.path.join(o, "volume.csv"), vr.series.dates, vr.series.volumes,
                        vr.nodata)
    write_ascii_grid(os.path.join(o, "dynamic_mask.asc"),
                     DsmGrid(vr.mask.origin_e, vr.mask.origin_n, vr.mask.gsd,
                             vr.mask.values.astype(float)), fmt="%.0f")
    if vr.regression is not None:
        reg, samples = vr.regression
        write_regression_report(os.path.join(o, "regression.csv"),
                                os.path.join(o, "regression.json"), reg, samples)


def run_series(root, config):
    """Full run over all date directories of `root`.

    Returns:
        RunManifest (also written to root/<output_dir>/manifest.json).
    """
    names = list_dates(root)
    if len(names) < 3:
        raise InsufficientDataError("a series needs at least three date directories")
    jobs = [(os.path.join(root, n), config) for n in names]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(_process_args, jobs))
    else:
        results = [process_date(*j) for j in jobs]
    manifest = RunManifest(config_hash=config.config_hash())
    dsms = {}
    for rec, dsm in results:
        manifest.records.append(rec)
        if dsm is not None:
            dsms[rec.date] = dsm
    # continue from the written grids so that the stage commands reproduce this run
    written = read_dsms(root, config)
    dsms = {d: written[d] for d in dsms}
    good = sorted(dsms)
    if len(good) >= 1:
        aligned, manifest.alignments = align_series(good, dsms, config)
        for d, g in aligned.items():
            write_ascii_grid(out_dir(root, config, "aligned", d + ".asc"), g)
        written = read_dsms(root, config, "aligned")
        aligned = {d: written[d] for d in aligned}
        if len(aligned) >= 3:
            wp = _weights_path(root, config)
            weights = read_weights(wp) if wp else None
            try:
                vr = compute_volumes(aligned, config, weights)
            except RpcVolError as exc:
                log.warning("volume stage failed: %s", exc)
            else:
                write_volume_outputs(root, config, vr)
                manifest.volumes = [{"date": d.isoformat(), "volume_m3": v,
                                     "nodata_fraction": f}
                                    for d, v, f in zip(vr.series.dates, vr.series.volumes,
                                                       vr.nodata)]
                if vr.regression is not None:
                    reg = vr.regression[0]
                    manifest.regression = {"a": reg.a, "b": reg.b,
                                           "rms_train": reg.rms_train,
                                           "rms_test": None if np.isnan(reg.rms_test)
                                           else reg.rms_test,
                                           "train_fraction": reg.train_fraction,
                                           "seed": reg.seed}
    atomic_write_text(out_dir(root, config, "manifest.json"), manifest.dumps())
    return manifest


def read_dsms(root, config, sub=None):
    """Per-date merged DSMs (or aligned ones with sub="aligned") from outputs."""
    out = {}
    if sub == "aligned":
        for p in sorted(glob.glob(out_dir(root, config, "aligned", "*.asc"))):
            out[os.path.splitext(os.path.basename(p))[0]] = read_grid(p)
        return out
    for d in list_dates(root):
        p = out_dir(root, config, d, "dsm.asc")
        if os.path.exists(p):
            out[d] = read_grid(p)
    return out
