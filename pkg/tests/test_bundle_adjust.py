import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from rpcvol import synth
from rpcvol.bundle_adjust import (BundleConfig, BundleProblem, CorrectedCamera,
                                  CorrectionRotation, choose_reference, corrected_project,
                                  euler_to_matrices, euler_to_matrix, init_tiepoints,
                                  matrix_to_euler, read_rotation, reprojection_cost,
                                  solve_date, write_rotation)
from rpcvol.errors import ConnectivityError, InsufficientDataError
from rpcvol.geodesy import ecef_to_geodetic
from rpcvol.geometry import regress_camera_center
from rpcvol.matching import FeatureTrack


def tracks_from_points(acq, X, sigma=0.0, seed=0, through="rpc"):
    """One track per surface point over the scenes that see it.

    through="rpc" projects with the delivered RPCs, "true" with the true pinholes.
    """
    rng = np.random.default_rng(seed)
    lon, lat, h = ecef_to_geodetic(X[:, 0], X[:, 1], X[:, 2])
    per_scene = []
    for sc in acq.scenes:
        if through == "rpc":
            r, c = sc.rpc.project(lon, lat, h)
        else:
            r, c = sc.true_camera.project_ecef(X[:, 0], X[:, 1], X[:, 2])
        r = r + rng.normal(0, sigma, len(r))
        c = c + rng.normal(0, sigma, len(c))
        vis = (r >= 0) & (r <= sc.true_camera.height - 1) & (c >= 0) & \
            (c <= sc.true_camera.width - 1)
        per_scene.append((sc.image_id, r, c, vis))
    tracks = []
    for k in range(len(X)):
        obs = [(img, (float(r[k]), float(c[k]))) for img, r, c, vis in per_scene if vis[k]]
        if len(obs) >= 2:
            tracks.append(FeatureTrack(obs))
    return tracks


def make_problem(acq, tracks):
    ids = [sc.image_id for sc in acq.scenes]
    rpcs = {sc.image_id: sc.rpc for sc in acq.scenes}
    centers = {i: regress_camera_center(rpcs[i]) for i in ids}
    init_tiepoints(tracks, rpcs, centers)
    tracks = [t for t in tracks if t.tiepoint is not None]
    ref = choose_reference(ids, tracks)
    return BundleProblem([(i, rpcs[i], centers[i]) for i in ids], tracks, ref)


def surface_points(world, n, seed):
    rng = np.random.default_rng(seed)
    e0, n0, e1, n1 = world.bounds()
    return world.surface_ecef(rng.uniform(e0, e1, n), rng.uniform(n0, n1, n))


@pytest.fixture(scope="module")
def clean_acq(small_world):
    return synth.generate_acquisition(small_world, 4, 0.3, "2021-05-02", seed=11,
                                      angles=np.zeros((4, 3)))


@pytest.fixture(scope="module")
def noisy_solution(acq4, small_world):
    X = surface_points(small_world, 300, 5)
    problem = make_problem(acq4, tracks_from_points(acq4, X, 0.3, seed=6, through="true"))
    return problem, solve_date(problem)


def test_euler_zero_and_axes():
    np.testing.assert_array_equal(euler_to_matrix(0.0, 0.0, 0.0), np.eye(3))
    np.testing.assert_allclose(euler_to_matrix(np.pi / 2, 0, 0),
                               [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    np.testing.assert_allclose(euler_to_matrix(0, 0, np.pi / 2),
                               [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_euler_orthonormal_and_inverse():
    rng = np.random.default_rng(0)
    A = rng.uniform(-1.2, 1.2, (50, 3))
    Rs = euler_to_matrices(A)
    for a, R in zip(A, Rs):
        np.testing.assert_allclose(R, euler_to_matrix(*a), atol=1e-15)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-14)
        np.testing.assert_allclose(matrix_to_euler(R), a, atol=1e-12)


def test_euler_matches_intrinsic_xyz():
    a = (3e-4, -2e-4, 1e-4)
    np.testing.assert_allclose(euler_to_matrix(*a),
                               Rotation.from_euler("XYZ", a).as_matrix(), atol=1e-15)


def test_identity_rotation_is_plain_projection(acq4, small_world):
    sc = acq4.scenes[0]
    X = surface_points(small_world, 20, 1)
    lon, lat, h = ecef_to_geodetic(X[:, 0], X[:, 1], X[:, 2])
    r0, c0 = sc.rpc.project(lon, lat, h)
    center = regress_camera_center(sc.rpc)
    r1, c1 = corrected_project(sc.rpc, center, CorrectionRotation(center=tuple(center)), X)
    assert np.array_equal(r0, r1) and np.array_equal(c0, c1)


def test_rotation_against_independent_oracle(acq4, small_world):
    sc = acq4.scenes[1]
    X = surface_points(small_world, 20, 2)
    C = regress_camera_center(sc.rpc)
    a = (4e-5, -7e-5, 9e-5)
    R = Rotation.from_euler("XYZ", a).as_matrix()
    Y = (X - C) @ R.T + C
    r0, c0 = sc.rpc.project(*ecef_to_geodetic(Y[:, 0], Y[:, 1], Y[:, 2]))
    r1, c1 = corrected_project(sc.rpc, C, CorrectionRotation(*a, center=tuple(C)), X)
    assert np.max(np.abs(r1 - r0)) < 1e-9 and np.max(np.abs(c1 - c0)) < 1e-9


def test_small_rotation_pixel_shift(acq4, small_world):
    # 100 microradians about the across-track axis moves the line of sight by ~50 m
    sc = acq4.scenes[0]
    cam = CorrectedCamera(sc.rpc)
    X = surface_points(small_world, 1, 3)
    lon, lat, h = ecef_to_geodetic(X[:, 0], X[:, 1], X[:, 2])
    r0, c0 = cam.project(lon, lat, h)
    frame = small_world.frame
    east = frame.rotation[0]
    rot = Rotation.from_rotvec(1e-4 * east)
    phi, theta, alpha = rot.as_euler("XYZ")
    moved = CorrectedCamera(sc.rpc, CorrectionRotation(phi, theta, alpha, tuple(cam.center)))
    r1, c1 = moved.project(lon, lat, h)
    shift = float(np.hypot(r1 - r0, c1 - c0)[0])
    expected = 1e-4 * np.linalg.norm(cam.center - X[0]) / synth.DEFAULT_GSD
    assert shift == pytest.approx(expected, rel=0.2)


def test_corrected_localize_inverts_project(acq4, small_world):
    sc = acq4.scenes[2]
    C = regress_camera_center(sc.rpc)
    cam = CorrectedCamera(sc.rpc, CorrectionRotation(5e-5, 3e-5, -8e-5, tuple(C)))
    r, c = cam.project(32.02, -28.80, 104.0)
    lon, lat = cam.localize(r, c, 104.0)
    assert abs(lon - 32.02) < 1e-9 and abs(lat + 28.80) < 1e-9


def test_zero_error_recovers_identity(clean_acq, small_world):
    X = surface_points(small_world, 200, 4)
    problem = make_problem(clean_acq, tracks_from_points(clean_acq, X))
    sol = solve_date(problem)
    assert max(np.max(np.abs(r.angles)) for r in sol.rotations) < 1e-7
    assert sol.final_rms < 1e-6


def test_reference_is_exactly_identity(noisy_solution):
    problem, sol = noisy_solution
    assert sol.reference_index == problem.reference_index
    assert sol.rotations[sol.reference_index].is_identity


def test_costs_monotone(noisy_solution):
    _, sol = noisy_solution
    assert all(b < a for a, b in zip(sol.costs, sol.costs[1:]))
    assert sol.final_rms <= sol.initial_rms


def test_residual_drops_to_noise(noisy_solution):
    _, sol = noisy_solution
    assert sol.initial_rms > 10.0
    assert sol.final_rms < 2 * 0.3


def test_cost_matches_double_loop(noisy_solution):
    problem, sol = noisy_solution
    from rpcvol.geodesy import geodetic_to_ecef
    X = np.stack(geodetic_to_ecef(*sol.tiepoints.T), -1)
    n_obs = sum(len(t) for t in problem.tracks)
    loop = reprojection_cost(problem, sol.rotations, X)
    assert loop == pytest.approx(sol.final_rms ** 2 * n_obs, rel=1e-10)
    assert loop == pytest.approx(sol.costs[-1], rel=1e-10)


def test_choose_reference():
    t = [FeatureTrack([("b", (0.0, 0.0)), ("c", (0.0, 0.0))]),
         FeatureTrack([("a", (0.0, 0.0)), ("c", (0.0, 0.0))])]
    assert choose_reference(["a", "b", "c"], t) == 2
    t = t[:1] + [FeatureTrack([("a", (0.0, 0.0)), ("b", (0.0, 0.0))])]
    assert choose_reference(["a", "b", "c"], t) == 1
    assert choose_reference(["x", "y"], []) == 0


def test_disconnected_graph_raises(clean_acq, small_world):
    X = surface_points(small_world, 200, 7)
    tracks = tracks_from_points(clean_acq, X)
    ids = [sc.image_id for sc in clean_acq.scenes]
    groups = ({ids[0], ids[1]}, {ids[2], ids[3]})
    cut = []
    for t in tracks:
        for g in groups:
            obs = [o for o in t.observations if o[0] in g]
            if len(obs) >= 2:
                cut.append(FeatureTrack(obs))
    problem = make_problem(clean_acq, cut)
    with pytest.raises(ConnectivityError):
        solve_date(problem)


def test_too_few_tracks(clean_acq, small_world):
    X = surface_points(small_world, 200, 8)
    problem = make_problem(clean_acq, tracks_from_points(clean_acq, X))
    small = BundleProblem(problem.cameras, problem.tracks[:5], problem.reference_index)
    with pytest.raises(InsufficientDataError):
        solve_date(small)


def test_reference_choice_changes_little(noisy_solution):
    # relative rotations barely depend on which camera carries the gauge
    problem, sol = noisy_solution
    other = (problem.reference_index + 1) % len(problem.cameras)
    sol2 = solve_date(BundleProblem(problem.cameras, problem.tracks, other),
                      BundleConfig())
    assert sol2.rotations[other].is_identity
    assert sol2.final_rms == pytest.approx(sol.final_rms, rel=0.02)


def test_rotation_file_roundtrip(tmp_path):
    rot = CorrectionRotation(1.25e-5, -3.5e-5, 7e-6, (4.1e6, 3.2e6, -2.9e6))
    path = tmp_path / "r.json"
    write_rotation(str(path), "scene07", rot)
    img, back = read_rotation(str(path))
    assert img == "scene07" and back == rot
