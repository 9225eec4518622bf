import numpy as np
import pytest

from rpcvol import synth
from rpcvol.geodesy import geodetic_to_ecef, local_enu_frame
from rpcvol.pinhole import satellite_camera
from rpcvol.rpc_model import Normalization, fit_rpc

ORIGIN = (32.02, -28.80, 100.0)


def pinhole_samples(cam, frame, half=1000.0, h=(50.0, 150.0), n=(15, 15, 9)):
    """Ground grid over a (2 half) x (2 half) m box of heights h and its pinhole pixels."""
    e, nn, u = np.meshgrid(np.linspace(-half, half, n[0]), np.linspace(-half, half, n[1]),
                           np.linspace(*h, n[2]))
    lon, lat, hh = frame.to_geodetic(e.ravel(), nn.ravel(), u.ravel() * 0.0)
    hh = u.ravel()
    r, c = cam.project(lon, lat, hh)
    return np.c_[lon, lat, hh], np.c_[r, c]


@pytest.fixture(scope="session")
def study_frame():
    return local_enu_frame((ORIGIN[0], ORIGIN[1], 0.0))


@pytest.fixture(scope="session")
def pinhole():
    """Pinhole at 500 km, 10 degrees forward, covering about 2 km x 2 km."""
    return satellite_camera(ORIGIN, 500e3, 10.0, gsd=0.72, width=2800, height=2800)


@pytest.fixture(scope="session")
def fitted(pinhole, study_frame):
    ground, pixels = pinhole_samples(pinhole, study_frame)
    lon, lat, h = ground.T
    norm = Normalization(float(np.mean([lat.min(), lat.max()])), float(np.ptp(lat) / 2),
                         float(np.mean([lon.min(), lon.max()])), float(np.ptp(lon) / 2),
                         100.0, 50.0, 1399.5, 1400.0, 1399.5, 1400.0)
    return fit_rpc(ground, pixels, norm)


@pytest.fixture(scope="session")
def world():
    return synth.generate_world(1, 4, (400.0, 1300.0))


@pytest.fixture(scope="session")
def acq8(world):
    return synth.generate_acquisition(world, 8, 0.3, "2021-03-01")


@pytest.fixture(scope="session")
def small_world():
    return synth.generate_world(2, 3, (300.0, 900.0))


@pytest.fixture(scope="session")
def acq4(small_world):
    return synth.generate_acquisition(small_world, 4, 0.3, "2021-05-02", seed=11)


def ecef(lon, lat, h):
    return np.stack(geodetic_to_ecef(lon, lat, h), axis=-1)
