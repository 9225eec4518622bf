"""Ideal pinhole cameras in ECEF, used as ground truth by the synthetic oracle."""
from dataclasses import dataclass

import numpy as np

from rpcvol.geodesy import ecef_to_geodetic, enu_rotation, geodetic_to_ecef


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """x_cam = rotation @ (X - center); col = f x/z + cx, row = f y/z + cy."""

    center: np.ndarray
    rotation: np.ndarray
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def project_ecef(self, x, y, z):
        X = np.stack(np.broadcast_arrays(x, y, z), axis=-1) - self.center
        cam = X @ self.rotation.T
        col = self.focal * cam[..., 0] / cam[..., 2] + self.cx
        row = self.focal * cam[..., 1] / cam[..., 2] + self.cy
        return row, col

    def project(self, lon, lat, height):
        return self.project_ecef(*geodetic_to_ecef(lon, lat, height))

    def matrix(self):
        """The 3x4 projection matrix acting on homogeneous ECEF points."""
        K = np.array([[0.0, self.focal, self.cy],
                      [self.focal, 0.0, self.cx],
                      [0.0, 0.0, 1.0]])
        return K @ np.hstack([self.rotation, -(self.rotation @ self.center)[:, None]])

    def ray(self, row, col):
        """Unit ECEF viewing directions through pixels."""
        d = np.stack(np.broadcast_arrays((np.asarray(col) - self.cx) / self.focal,
                                         (np.asarray(row) - self.cy) / self.focal,
                                         np.ones(np.shape(row))), axis=-1)
        d = d @ self.rotation
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def localize(self, row, col, height, n_iter=8):
        """Intersect pixel rays with the ellipsoid-relative height surface."""
        d = self.ray(row, col)
        height = np.broadcast_to(np.asarray(height, dtype=float), d.shape[:-1])
        # start with the range to the surface of a sphere, then refine on height
        t = np.full(d.shape[:-1], np.linalg.norm(self.center) - 6371000.0)
        for _ in range(n_iter):
            X = self.center + t[..., None] * d
            _, _, h = ecef_to_geodetic(X[..., 0], X[..., 1], X[..., 2])
            # dh/dt is about -cos(off-nadir); estimate it numerically
            X2 = X + d
            _, _, h2 = ecef_to_geodetic(X2[..., 0], X2[..., 1], X2[..., 2])
            t = t - (h - height) / (h2 - h)
        X = self.center + t[..., None] * d
        lon, lat, _ = ecef_to_geodetic(X[..., 0], X[..., 1], X[..., 2])
        return lon, lat

    def rotated(self, rot, about=None):
        """Camera seeing through R_rot: P'(Y) = P(rot^T (Y - c) + c).

        `about` defaults to the camera center, which leaves the center fixed.
        """
        c = self.center if about is None else np.asarray(about, dtype=float)
        new_rotation = self.rotation @ rot.T
        new_center = rot @ (self.center - c) + c
        return PinholeCamera(new_center, new_rotation, self.focal, self.cx, self.cy,
                             self.width, self.height)


def look_at_camera(center_ecef, target_ecef, along_ecef, focal, width, height):
    """Pinhole at `center_ecef` looking at `target_ecef`.

    Image rows run along `along_ecef` (projected orthogonal to the view axis).
    """
    center = np.asarray(center_ecef, dtype=float)
    z = np.asarray(target_ecef, dtype=float) - center
    z /= np.linalg.norm(z)
    y = np.asarray(along_ecef, dtype=float)
    y = y - (y @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    rotation = np.vstack([x, y, z])
    return PinholeCamera(center, rotation, float(focal), (width - 1) / 2.0,
                         (height - 1) / 2.0, int(width), int(height))


def satellite_camera(target, altitude, off_nadir_along, off_nadir_across=0.0,
                     gsd=0.72, width=1000, height=700, heading=0.0):
    """Camera at `altitude` above `target` (lon, lat, h), tilted by the given
    off-nadir angles (degrees) in the along-track and across-track planes.

    The along-track direction is `heading` degrees clockwise from north.
    Rows run along-track. Focal length yields `gsd` meters per pixel at nadir.
    """
    lon, lat, h = target
    R = enu_rotation(lon, lat)
    east, north, up = R
    hd = np.radians(heading)
    along = np.sin(hd) * east + np.cos(hd) * north
    across = np.cos(hd) * east - np.sin(hd) * north
    t = np.array(geodetic_to_ecef(lon, lat, h))
    # positive along-track angle: camera sits behind the target and looks forward
    center = t + altitude * (up - np.tan(np.radians(off_nadir_along)) * along
                             - np.tan(np.radians(off_nadir_across)) * across)
    focal = altitude / gsd
    return look_at_camera(center, t, along, focal, width, height)
