import filecmp
import os

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rpcvol import synth
from rpcvol.geometry import select_pairs
from rpcvol.matching import ransac_fundamental_filter
from rpcvol.rpc_model import read_rpc


def test_world_deterministic():
    assert synth.generate_world(3, 5, 800.0) == synth.generate_world(3, 5, 800.0)
    assert synth.generate_world(3, 5, 800.0) != synth.generate_world(4, 5, 800.0)


def test_world_without_piles():
    w = synth.generate_world(0, 0, (500.0, 300.0))
    assert w.pile_volume() == 0.0
    assert np.all(w.surface(np.linspace(-200, 200, 9), 0.0) == w.base_height)
    assert w.truncated_volume() == 0.0


def test_single_pile_volume():
    w = synth.SyntheticWorld(0, (400.0, 400.0), (synth.Pile(0.0, 0.0, 20.0, 30.0),))
    assert w.pile_volume() == pytest.approx(113097.34, abs=0.01)
    assert w.truncated_volume(0.0, np.inf) == pytest.approx(113097.34, rel=1e-3)


def test_world_validation():
    with pytest.raises(ValueError):
        synth.SyntheticWorld(0, (100.0, 100.0), (synth.Pile(0, 0, -1.0, 5.0),))
    with pytest.raises(ValueError):
        synth.generate_world(0, 1, 0.0)


def test_zero_injection_matches_truth(small_world):
    acq = synth.generate_acquisition(small_world, 4, 0.3, "2021-05-02", seed=1,
                                     angles=np.zeros((4, 3)))
    rng = np.random.default_rng(0)
    for sc in acq.scenes:
        assert sc.fit_error_px < synth.FIT_TOLERANCE_PX
        e = rng.uniform(-150, 150, 200)
        n = rng.uniform(-450, 450, 200)
        X = small_world.surface_ecef(e, n)
        r0, c0 = sc.true_camera.project_ecef(X[:, 0], X[:, 1], X[:, 2])
        lon, lat, h = small_world.frame.to_geodetic(e, n, small_world.surface(e, n))
        r1, c1 = sc.rpc.project(lon, lat, h)
        assert np.max(np.hypot(r1 - r0, c1 - c0)) < synth.FIT_TOLERANCE_PX


def test_injected_rotation_displacement(small_world):
    # 100 microradians perpendicular to the line of sight
    base = synth.generate_acquisition(small_world, 2, 0.3, "2021-05-02", seed=1,
                                      angles=np.zeros((2, 3)))
    cam = base.scenes[0].true_camera
    X = small_world.surface_ecef(0.0, 0.0)
    los = X - cam.center
    axis = np.cross(los, [0.0, 0.0, 1.0])
    axis /= np.linalg.norm(axis)
    angles = Rotation.from_rotvec(1e-4 * axis).as_euler("XYZ")
    acq = synth.generate_acquisition(small_world, 2, 0.3, "2021-05-02", seed=1,
                                     angles=np.vstack([angles, np.zeros(3)]))
    lon, lat, h = small_world.frame.to_geodetic(0.0, 0.0, small_world.surface(0.0, 0.0))
    r0, c0 = cam.project_ecef(*X)
    r1, c1 = acq.scenes[0].rpc.project(lon, lat, h)
    shift = float(np.hypot(r1 - r0, c1 - c0))
    assert shift == pytest.approx(50.0 / synth.DEFAULT_GSD, rel=0.25)


def test_truth_rotations_recorded(acq8):
    for sc in acq8.scenes:
        assert np.all(np.abs(sc.rotation.angles) <= synth.DEFAULT_MAX_ANGLE)
        np.testing.assert_allclose(sc.rotation.center, sc.true_camera.center)


def test_consecutive_pairs_admissible(acq8, world):
    pairs = set(select_pairs(acq8.acquisition, world.aoi_polygon()))
    ids = [sc.image_id for sc in acq8.scenes]
    for a, b in zip(ids, ids[1:]):
        assert (a, b) in pairs


def ray_midpoint(cams, pixels):
    """Least-squares intersection of the pixel rays of pinhole cameras."""
    A = np.zeros((3, 3))
    rhs = np.zeros(3)
    for cam, (r, c) in zip(cams, pixels):
        d = cam.ray(r, c)
        P = np.eye(3) - np.outer(d, d)
        A += P
        rhs += P @ cam.center
    return np.linalg.solve(A, rhs)


def test_noise_free_observations_triangulate(acq4):
    obs = synth.generate_observations(acq4, n_points=200, pixel_noise_sigma=0.0, seed=2)
    cams = {sc.image_id: sc.true_camera for sc in acq4.scenes}
    errs = []
    for (a, b), ms in obs.matches.items():
        for m in ms[:20]:
            k = obs.keypoint_point[a][m.idx_a]
            da = cams[a].ray(*obs.keypoints[a][m.idx_a])
            db = cams[b].ray(*obs.keypoints[b][m.idx_b])
            if np.degrees(np.arccos(np.clip(da @ db, -1, 1))) < 5.0:
                continue  # near-parallel rays are not a stereo pair
            X = ray_midpoint([cams[a], cams[b]],
                             [obs.keypoints[a][m.idx_a], obs.keypoints[b][m.idx_b]])
            errs.append(np.linalg.norm(X - obs.points_ecef[k]))
    assert errs and max(errs) < 1e-3


def test_outliers_and_ransac(acq4):
    obs = synth.generate_observations(acq4, n_points=300, pixel_noise_sigma=0.3,
                                      outlier_fraction=0.3, seed=3)
    for (a, b), ms in obs.matches.items():
        truth = obs.match_inlier[(a, b)]
        if truth.sum() < 50:
            continue
        assert (~truth).mean() == pytest.approx(0.3, abs=0.02)
        kept, _ = ransac_fundamental_filter(ms, obs.keypoints, 1.0, 2000, seed=0)
        kept = {(m.idx_a, m.idx_b) for m in kept}
        true_in = [(m.idx_a, m.idx_b) for m, t in zip(ms, truth) if t]
        assert np.mean([p in kept for p in true_in]) >= 0.98


def test_observations_deterministic(acq4):
    a = synth.generate_observations(acq4, n_points=100, outlier_fraction=0.1, seed=4)
    b = synth.generate_observations(acq4, n_points=100, outlier_fraction=0.1, seed=4)
    for img in a.keypoints:
        assert a.keypoints[img].tobytes() == b.keypoints[img].tobytes()
    assert a.matches == b.matches


def test_date_directory_byte_identical(tmp_path, acq4):
    dirs = []
    for k in range(2):
        obs = synth.generate_observations(acq4, n_points=100, outlier_fraction=0.1, seed=5)
        pairs = select_pairs(acq4.acquisition, acq4.aoi())
        dense = synth.generate_dense(acq4, pairs[:1], spacing=4.0, seed=6)
        root = tmp_path / str(k)
        synth.write_date_directory(str(root), acq4, obs, dense)
        dirs.append(root)
    cmp = filecmp.dircmp(dirs[0], dirs[1])
    files = []
    for dirpath, _, names in os.walk(dirs[0]):
        files += [os.path.relpath(os.path.join(dirpath, n), dirs[0]) for n in names]
    assert len(files) > 5
    for f in files:
        assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()
    assert not cmp.left_only and not cmp.right_only


def test_written_rpcs_roundtrip(tmp_path, acq4):
    obs = synth.generate_observations(acq4, n_points=50, seed=7)
    synth.write_date_directory(str(tmp_path), acq4, obs)
    date_dir = tmp_path / acq4.date.isoformat()
    for sc in acq4.scenes:
        rpc, extra = read_rpc(str(date_dir / "rpc" / (sc.image_id + ".json")))
        assert extra["width"] == sc.true_camera.width
        assert rpc.project(32.02, -28.8, 100.0) == sc.rpc.project(32.02, -28.8, 100.0)


def test_constant_schedule(small_world):
    series = synth.generate_timeseries(small_world, 3, "constant", n_scenes=2)
    vols = [d.world.truncated_volume() for d in series]
    assert vols[0] == vols[1] == vols[2]
    assert series[0].acquisition.scenes[0].rotation != series[1].acquisition.scenes[0].rotation


def test_linear_schedule_volume_linear(small_world):
    f = synth.pile_schedule("linear", 5, len(small_world.piles))
    base = np.array([p.amplitude for p in small_world.piles])
    worlds = [small_world.with_amplitudes(base * row) for row in f]
    v = np.array([w.pile_volume() for w in worlds])
    np.testing.assert_allclose(np.diff(v, 2), 0.0, atol=1e-6 * v.max())
    gridded = np.array([w.truncated_volume(0.0, np.inf, cell=1.0) for w in worlds])
    np.testing.assert_allclose(gridded, v, rtol=5e-3)


def test_dynamic_schedule_bounds():
    f = synth.pile_schedule("dynamic", 10, 4, seed=2)
    assert f.min() >= 0.3 - 1e-12 and f.max() <= 1.7 + 1e-12
    assert np.all(np.abs(np.diff(f, axis=0)) >= 0.4 - 1e-12)


def test_series_dates_cadence():
    d = synth.series_dates(30, seed=1)
    gaps = np.diff([x.toordinal() for x in d])
    assert gaps.min() >= 1 and gaps.max() <= 20


def test_weights_construction():
    d = synth.series_dates(5, seed=0)
    v = [2e6, 3e6, 4e6, 3.5e6, 5e6]
    w = synth.weights_from_volumes(d, v, a=1.02, b=0.3, sigma=0.0, sample_dates=d)
    np.testing.assert_allclose([s for _, s in w], 1.02 * np.array(v) / 1e6 + 0.3)
