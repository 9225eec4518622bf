"""WGS84 geodetic <-> ECEF conversions and local East-North-Up frames.

Angles are in degrees, distances in meters. Heights are ellipsoidal. All
functions accept scalars or numpy arrays and broadcast.
"""
from typing import NamedTuple

import numpy as np

from rpcvol.errors import DomainError

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_EP2 = WGS84_E2 / (1.0 - WGS84_E2)

_MAX_BOWRING_ITER = 10
_LAT_TOL_RAD = 1e-12
_MIN_RADIUS = 1000.0


class GeodeticPoint(NamedTuple):
    lon: float
    lat: float
    height: float


class EcefPoint(NamedTuple):
    x: float
    y: float
    z: float


def geodetic_to_ecef(lon, lat, height):
    """Convert geodetic coordinates to ECEF.

    Args:
        lon, lat: degrees.
        height: meters above the WGS84 ellipsoid.

    Returns:
        tuple (x, y, z) in meters.
    """
    lon = np.radians(lon)
    lat = np.radians(lat)
    height = np.asarray(height, dtype=float)
    sin_lat = np.sin(lat)
    cos_lat = np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    x = (n + height) * cos_lat * np.cos(lon)
    y = (n + height) * cos_lat * np.sin(lon)
    z = (n * (1.0 - WGS84_E2) + height) * sin_lat
    return x, y, z


def _geodetic_basis(lon, lat, height):
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    height = np.asarray(height, dtype=float)
    sl, cl = np.sin(lon), np.cos(lon)
    sp, cp = np.sin(lat), np.cos(lat)
    w = 1.0 - WGS84_E2 * sp * sp
    n = WGS84_A / np.sqrt(w)
    m = WGS84_A * (1.0 - WGS84_E2) / w ** 1.5
    z = np.zeros(np.broadcast(lon, lat, height).shape)
    east = np.stack(np.broadcast_arrays(-sl, cl, z), -1)
    north = np.stack(np.broadcast_arrays(-sp * cl, -sp * sl, cp), -1)
    up = np.stack(np.broadcast_arrays(cp * cl, cp * sl, sp), -1)
    k = np.pi / 180.0
    return east, north, up, (n + height) * cp * k, (m + height) * k


def ecef_jacobian(lon, lat, height):
    """d(x, y, z) / d(lon [deg], lat [deg], height [m]), shape (..., 3, 3)."""
    east, north, up, se, sn = _geodetic_basis(lon, lat, height)
    return np.stack([east * se[..., None], north * sn[..., None], up], axis=-1)


def geodetic_jacobian(lon, lat, height):
    """d(lon [deg], lat [deg], height [m]) / d(x, y, z) at a geodetic point.

    The inverse of :func:`ecef_jacobian`.
    """
    east, north, up, se, sn = _geodetic_basis(lon, lat, height)
    return np.stack([east / se[..., None], north / sn[..., None], up], axis=-2)


def ecef_to_geodetic(x, y, z):
    """Convert ECEF coordinates to geodetic (lon, lat, height).

    Latitude is solved with Bowring's iteration, capped at 10 iterations; it
    typically reaches the 1e-12 rad tolerance in two or three.

    Raises:
        DomainError: if a point lies within 1 km of the Earth center.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(np.sqrt(x * x + y * y + z * z) < _MIN_RADIUS):
        raise DomainError("point within 1 km of the Earth center")

    p = np.hypot(x, y)
    lon = np.arctan2(y, x)
    # reduced latitude first guess
    u = np.arctan2(z * WGS84_A, p * WGS84_B)
    lat = np.arctan2(z, p * (1.0 - WGS84_E2))
    for _ in range(_MAX_BOWRING_ITER):
        sin_u = np.sin(u)
        cos_u = np.cos(u)
        new_lat = np.arctan2(z + WGS84_EP2 * WGS84_B * sin_u ** 3,
                             p - WGS84_E2 * WGS84_A * cos_u ** 3)
        done = np.all(np.abs(new_lat - lat) < _LAT_TOL_RAD)
        lat = new_lat
        u = np.arctan2(WGS84_B * np.sin(lat), WGS84_A * np.cos(lat))
        if done:
            break

    sin_lat = np.sin(lat)
    cos_lat = np.cos(lat)
    # valid at all latitudes, including the poles
    height = (p * cos_lat + z * sin_lat
              - WGS84_A * np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat))
    return np.degrees(lon), np.degrees(lat), height


def enu_rotation(lon, lat):
    """Rotation matrix whose rows are the East, North, Up unit vectors (ECEF)."""
    lon = np.radians(lon)
    lat = np.radians(lat)
    sl, cl = np.sin(lon), np.cos(lon)
    sp, cp = np.sin(lat), np.cos(lat)
    return np.array([[-sl, cl, 0.0],
                     [-sp * cl, -sp * sl, cp],
                     [cp * cl, cp * sl, sp]])


class LocalFrame:
    """Tangent-plane East-North-Up frame anchored at a geodetic origin.

    The frame is a rigid transform of ECEF, so distances are preserved
    exactly and both directions compose to the identity up to rounding.
    """

    def __init__(self, origin):
        self.origin = GeodeticPoint(*map(float, origin))
        self.rotation = enu_rotation(self.origin.lon, self.origin.lat)
        self.origin_ecef = np.array(geodetic_to_ecef(*self.origin))

    def ecef_to_enu(self, x, y, z):
        d = np.stack(np.broadcast_arrays(x, y, z), axis=-1) - self.origin_ecef
        enu = d @ self.rotation.T
        return enu[..., 0], enu[..., 1], enu[..., 2]

    def enu_to_ecef(self, e, n, u):
        enu = np.stack(np.broadcast_arrays(e, n, u), axis=-1).astype(float)
        xyz = enu @ self.rotation + self.origin_ecef
        return xyz[..., 0], xyz[..., 1], xyz[..., 2]

    def to_enu(self, lon, lat, height):
        return self.ecef_to_enu(*geodetic_to_ecef(lon, lat, height))

    def to_geodetic(self, e, n, u):
        return ecef_to_geodetic(*self.enu_to_ecef(e, n, u))

    def __repr__(self):
        return "LocalFrame(%r)" % (self.origin,)


def local_enu_frame(origin):
    """Build the local ENU frame at `origin` (lon, lat, height)."""
    return LocalFrame(origin)
