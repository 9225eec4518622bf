"""Rational polynomial camera (RPC) model.

Polynomials are cubic in the normalized coordinates (L, P, H) = (lon, lat,
height) with the 20 coefficients in the RPC00B order::

    1, L, P, H, LP, LH, PH, L^2, P^2, H^2,
    PLH, L^3, LP^2, LH^2, L^2P, P^3, PH^2, L^2H, P^2H, H^3

Heights are ellipsoidal (WGS84) throughout.
"""
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from rpcvol.errors import (ConvergenceError, FitError, SingularityError,
                           SingularJacobianError)

N_COEFFS = 20
VALIDITY_BOUND = 1.5
_DEN_EPS = 1e-12
_NORM_FIELDS = ("lat_offset", "lat_scale", "lon_offset", "lon_scale",
                "height_offset", "height_scale", "row_offset", "row_scale",
                "col_offset", "col_scale")
_POLY_FIELDS = ("row_num", "row_den", "col_num", "col_den")


def monomials(L, P, H):
    """Stack the 20 RPC00B monomials of normalized coordinates on the last axis."""
    L, P, H = np.broadcast_arrays(np.asarray(L, dtype=float),
                                  np.asarray(P, dtype=float),
                                  np.asarray(H, dtype=float))
    return np.stack([np.ones_like(L), L, P, H, L * P, L * H, P * H,
                     L * L, P * P, H * H, P * L * H, L ** 3, L * P * P,
                     L * H * H, L * L * P, P ** 3, P * H * H, L * L * H,
                     P * P * H, H ** 3], axis=-1)


def monomial_gradients(L, P, H):
    """Partial derivatives of the 20 monomials w.r.t. L, P and H, each (..., 20)."""
    L, P, H = np.broadcast_arrays(np.asarray(L, dtype=float),
                                  np.asarray(P, dtype=float),
                                  np.asarray(H, dtype=float))
    z = np.zeros_like(L)
    o = np.ones_like(L)
    dL = np.stack([z, o, z, z, P, H, z, 2 * L, z, z, P * H, 3 * L * L, P * P,
                   H * H, 2 * L * P, z, z, 2 * L * H, z, z], axis=-1)
    dP = np.stack([z, z, o, z, L, z, H, z, 2 * P, z, L * H, z, 2 * L * P,
                   z, L * L, 3 * P * P, H * H, z, 2 * P * H, z], axis=-1)
    dH = np.stack([z, z, z, o, z, L, P, z, z, 2 * H, P * L, z, z,
                   2 * L * H, z, z, 2 * P * H, L * L, P * P, 3 * H * H], axis=-1)
    return dL, dP, dH


class Normalization(NamedTuple):
    lat_offset: float
    lat_scale: float
    lon_offset: float
    lon_scale: float
    height_offset: float
    height_scale: float
    row_offset: float
    row_scale: float
    col_offset: float
    col_scale: float


@dataclass(frozen=True, eq=False)
class RpcModel:
    row_num: np.ndarray
    row_den: np.ndarray
    col_num: np.ndarray
    col_den: np.ndarray
    lat_offset: float
    lat_scale: float
    lon_offset: float
    lon_scale: float
    height_offset: float
    height_scale: float
    row_offset: float
    row_scale: float
    col_offset: float
    col_scale: float

    def __post_init__(self):
        for name in _POLY_FIELDS:
            c = np.array(getattr(self, name), dtype=float).reshape(-1)
            if c.size != N_COEFFS:
                raise ValueError("%s must have 20 coefficients" % name)
            c.setflags(write=False)
            object.__setattr__(self, name, c)
        for name in _NORM_FIELDS:
            object.__setattr__(self, name, float(getattr(self, name)))
            if name.endswith("scale") and getattr(self, name) == 0.0:
                raise ValueError("%s must be nonzero" % name)

    @classmethod
    def from_polynomials(cls, polys, norm):
        """Build from a (row_num, row_den, col_num, col_den) tuple and a Normalization."""
        return cls(*polys, *norm)

    @property
    def normalization(self):
        return Normalization(*(getattr(self, f) for f in _NORM_FIELDS))

    def normalize_ground(self, lon, lat, height):
        return ((np.asarray(lon, dtype=float) - self.lon_offset) / self.lon_scale,
                (np.asarray(lat, dtype=float) - self.lat_offset) / self.lat_scale,
                (np.asarray(height, dtype=float) - self.height_offset) / self.height_scale)

    def in_domain(self, lon, lat, height):
        """True where all normalized ground coordinates lie within +-1.5."""
        L, P, H = self.normalize_ground(lon, lat, height)
        return ((np.abs(L) <= VALIDITY_BOUND) & (np.abs(P) <= VALIDITY_BOUND)
                & (np.abs(H) <= VALIDITY_BOUND))

    def _eval_normalized(self, L, P, H):
        m = monomials(L, P, H)
        den_r = m @ self.row_den
        den_c = m @ self.col_den
        if np.any(np.abs(den_r) < _DEN_EPS) or np.any(np.abs(den_c) < _DEN_EPS):
            raise SingularityError("RPC denominator vanishes")
        return (m @ self.row_num) / den_r, (m @ self.col_num) / den_c

    def project(self, lon, lat, height, return_valid=False):
        """Project ground points to (row, col) pixels.

        Points outside the validity domain are projected anyway; pass
        `return_valid=True` to also get the in-domain flag.
        """
        L, P, H = self.normalize_ground(lon, lat, height)
        rn, cn = self._eval_normalized(L, P, H)
        row = rn * self.row_scale + self.row_offset
        col = cn * self.col_scale + self.col_offset
        if return_valid:
            return row, col, self.in_domain(lon, lat, height)
        return row, col

    def project_jacobian(self, lon, lat, height):
        """Projection plus its analytic Jacobian.

        Returns:
            row, col arrays and J of shape (..., 2, 3) holding the derivatives
            of (row, col) w.r.t. (lon [deg], lat [deg], height [m]).
        """
        L, P, H = self.normalize_ground(lon, lat, height)
        m = monomials(L, P, H)
        grads = monomial_gradients(L, P, H)
        coeffs = np.stack([self.row_num, self.row_den, self.col_num, self.col_den], -1)
        v = m @ coeffs
        if np.any(np.abs(v[..., 1]) < _DEN_EPS) or np.any(np.abs(v[..., 3]) < _DEN_EPS):
            raise SingularityError("RPC denominator vanishes")
        rn = v[..., 0] / v[..., 1]
        cn = v[..., 2] / v[..., 3]
        ground_scale = (self.lon_scale, self.lat_scale, self.height_scale)
        J = np.empty(L.shape + (2, 3))
        for k, g in enumerate(grads):
            dv = g @ coeffs
            J[..., 0, k] = ((dv[..., 0] - rn * dv[..., 1]) / v[..., 1]
                            * self.row_scale / ground_scale[k])
            J[..., 1, k] = ((dv[..., 2] - cn * dv[..., 3]) / v[..., 3]
                            * self.col_scale / ground_scale[k])
        return (rn * self.row_scale + self.row_offset,
                cn * self.col_scale + self.col_offset, J)

    def localize(self, row, col, height, max_iter=50, tol=1e-10,
                 step=1e-7):
        """Ground (lon, lat) imaged at pixel (row, col) for the given height.

        Newton iteration on the normalized 2x2 system with a central
        finite-difference Jacobian, started at the normalization center.

        Raises:
            ConvergenceError: no convergence within `max_iter` iterations.
            SingularJacobianError: the Jacobian is singular at an iterate.
        """
        row, col, height = np.broadcast_arrays(np.asarray(row, dtype=float),
                                               np.asarray(col, dtype=float),
                                               np.asarray(height, dtype=float))
        shape = row.shape
        tr = ((row - self.row_offset) / self.row_scale).ravel()
        tc = ((col - self.col_offset) / self.col_scale).ravel()
        H = ((height - self.height_offset) / self.height_scale).ravel()
        # stop once both the normalized and the pixel residuals are tiny
        tol_r = min(tol, 1e-8 / abs(self.row_scale))
        tol_c = min(tol, 1e-8 / abs(self.col_scale))

        P = np.zeros_like(tr)
        L = np.zeros_like(tr)
        active = np.arange(tr.size)
        for _ in range(max_iter + 1):
            Pa, La, Ha = P[active], L[active], H[active]
            fr, fc = self._eval_normalized(La, Pa, Ha)
            rr = fr - tr[active]
            rc = fc - tc[active]
            done = (np.abs(rr) < tol_r) & (np.abs(rc) < tol_c)
            active = active[~done]
            if active.size == 0:
                break
            Pa, La, Ha = Pa[~done], La[~done], Ha[~done]
            rr, rc = rr[~done], rc[~done]
            r1, c1 = self._eval_normalized(La, Pa + step, Ha)
            r0, c0 = self._eval_normalized(La, Pa - step, Ha)
            drdp, dcdp = (r1 - r0) / (2 * step), (c1 - c0) / (2 * step)
            r1, c1 = self._eval_normalized(La + step, Pa, Ha)
            r0, c0 = self._eval_normalized(La - step, Pa, Ha)
            drdl, dcdl = (r1 - r0) / (2 * step), (c1 - c0) / (2 * step)
            det = drdp * dcdl - drdl * dcdp
            scale = np.abs(drdp * dcdl) + np.abs(drdl * dcdp)
            if np.any(np.abs(det) <= 1e-14 * scale) or np.any(scale == 0):
                raise SingularJacobianError(
                    "singular localization Jacobian (non-invertible RPC)")
            P[active] = Pa - (dcdl * rr - drdl * rc) / det
            L[active] = La - (-dcdp * rr + drdp * rc) / det
        else:
            raise ConvergenceError(
                "localization did not converge in %d iterations for %d points"
                % (max_iter, active.size))
        lon = (L * self.lon_scale + self.lon_offset).reshape(shape)
        lat = (P * self.lat_scale + self.lat_offset).reshape(shape)
        return lon, lat

    def scaled(self, row_factor, col_factor):
        """Same model with each coordinate's numerator and denominator rescaled."""
        return RpcModel(self.row_num * row_factor, self.row_den * row_factor,
                        self.col_num * col_factor, self.col_den * col_factor,
                        *self.normalization)

    def to_dict(self):
        d = {name: [float(v) for v in getattr(self, name)] for name in _POLY_FIELDS}
        d.update({name: getattr(self, name) for name in _NORM_FIELDS})
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(*(d[name] for name in _POLY_FIELDS + _NORM_FIELDS))


def project(rpc, lon, lat, height, return_valid=False):
    return rpc.project(lon, lat, height, return_valid=return_valid)


def localize(rpc, row, col, height, **kwargs):
    return rpc.localize(row, col, height, **kwargs)


def _fmt(v):
    return "%.17g" % v


def dumps_rpc(rpc, extra=None):
    """Serialize to JSON text with 17 significant digits per value.

    `extra` holds additional scalar metadata (image id, size) written before
    the RPC fields.
    """
    lines = []
    for key, value in (extra or {}).items():
        lines.append("  %s: %s" % (json.dumps(key), json.dumps(value)))
    for name in _POLY_FIELDS:
        vals = ", ".join(_fmt(v) for v in getattr(rpc, name))
        lines.append('  "%s": [%s]' % (name, vals))
    for name in _NORM_FIELDS:
        lines.append('  "%s": %s' % (name, _fmt(getattr(rpc, name))))
    return "{\n" + ",\n".join(lines) + "\n}\n"


def loads_rpc(text):
    """Parse RPC JSON text; returns (RpcModel, dict of the remaining fields)."""
    d = json.loads(text)
    extra = {k: v for k, v in d.items() if k not in _POLY_FIELDS + _NORM_FIELDS}
    return RpcModel.from_dict(d), extra


def read_rpc(path):
    with open(path) as f:
        return loads_rpc(f.read())


def write_rpc(path, rpc, extra=None):
    from rpcvol.io import atomic_write_text
    atomic_write_text(path, dumps_rpc(rpc, extra))


class RpcFit(NamedTuple):
    model: RpcModel
    max_error_px: float
    rms_error_px: float
    condition: float


def normalization_from_samples(ground, pixels):
    """Offsets at the box centers, scales equal to the half ranges."""
    ground = np.asarray(ground, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    lo_g, hi_g = ground.min(axis=0), ground.max(axis=0)
    lo_p, hi_p = pixels.min(axis=0), pixels.max(axis=0)
    off_g, sc_g = (lo_g + hi_g) / 2, np.maximum((hi_g - lo_g) / 2, 1e-12)
    off_p, sc_p = (lo_p + hi_p) / 2, np.maximum((hi_p - lo_p) / 2, 1e-12)
    return Normalization(off_g[1], sc_g[1], off_g[0], sc_g[0], off_g[2], sc_g[2],
                         off_p[0], sc_p[0], off_p[1], sc_p[1])


def _fit_coordinate(M, t, reg, n_pass=2):
    """Rationalized least squares for one coordinate, den[0] pinned to 1."""
    w = np.ones_like(t)
    A = np.hstack([M, -t[:, None] * M[:, 1:]])
    col_norm = np.linalg.norm(A, axis=0)
    col_norm[col_norm == 0] = 1.0
    As = A / col_norm
    cond = np.linalg.cond(As)
    n_unk = A.shape[1]
    for _ in range(n_pass):
        Aw = As * w[:, None]
        Ab = np.vstack([Aw, np.sqrt(reg) * np.eye(n_unk)])
        bb = np.concatenate([t * w, np.zeros(n_unk)])
        x = np.linalg.lstsq(Ab, bb, rcond=None)[0] / col_norm
        num = x[:N_COEFFS]
        den = np.concatenate([[1.0], x[N_COEFFS:]])
        d = M @ den
        if np.any(np.abs(d) < _DEN_EPS):
            break
        w = 1.0 / np.abs(d)
    return num, den, cond


def fit_rpc(ground, pixels, normalization=None, reg=1e-14, min_samples=200):
    """Fit RPC coefficients to 3D<->2D correspondences.

    Args:
        ground: (N, 3) array of (lon, lat, height).
        pixels: (N, 2) array of (row, col).
        normalization: offsets and scales; derived from the samples if None.
        reg: Tikhonov weight on the (column-scaled) unknowns.

    Returns:
        RpcFit with the model and its max/RMS deviation over the samples.

    Raises:
        FitError: too few samples, samples not spanning the box, or a
            non-finite solution.
    """
    ground = np.asarray(ground, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    if ground.ndim != 2 or ground.shape[1] != 3 or pixels.shape != (len(ground), 2):
        raise ValueError("expected ground (N, 3) and pixels (N, 2)")
    if len(ground) < min_samples:
        raise FitError("need at least %d samples, got %d" % (min_samples, len(ground)))
    norm = normalization or normalization_from_samples(ground, pixels)
    L = (ground[:, 0] - norm.lon_offset) / norm.lon_scale
    P = (ground[:, 1] - norm.lat_offset) / norm.lat_scale
    H = (ground[:, 2] - norm.height_offset) / norm.height_scale
    spans = [np.ptp(v) for v in (L, P, H)]
    M = monomials(L, P, H)
    if min(spans) < 1.0:
        cond = np.linalg.cond(M / np.maximum(np.linalg.norm(M, axis=0), 1e-300))
        raise FitError("samples do not span the normalization box "
                       "(normalized spans lon/lat/height = %.3g/%.3g/%.3g, "
                       "monomial condition %.3g)" % (*spans, cond))
    tr = (pixels[:, 0] - norm.row_offset) / norm.row_scale
    tc = (pixels[:, 1] - norm.col_offset) / norm.col_scale
    row_num, row_den, cond_r = _fit_coordinate(M, tr, reg)
    col_num, col_den, cond_c = _fit_coordinate(M, tc, reg)
    coeffs = np.concatenate([row_num, row_den, col_num, col_den])
    if not np.all(np.isfinite(coeffs)):
        raise FitError("non-finite RPC solution (condition %.3g / %.3g)" % (cond_r, cond_c))
    model = RpcModel(row_num, row_den, col_num, col_den, *norm)
    try:
        r, c = model.project(ground[:, 0], ground[:, 1], ground[:, 2])
    except SingularityError as exc:
        raise FitError("fitted denominator vanishes on the samples "
                       "(condition %.3g / %.3g)" % (cond_r, cond_c)) from exc
    err = np.hypot(r - pixels[:, 0], c - pixels[:, 1])
    return RpcFit(model, float(err.max()), float(np.sqrt(np.mean(err ** 2))),
                  float(max(cond_r, cond_c)))


__all__ = ["RpcModel", "Normalization", "RpcFit", "monomials",
           "monomial_gradients", "project",
           "localize", "fit_rpc", "normalization_from_samples", "dumps_rpc",
           "loads_rpc", "read_rpc", "write_rpc"]
