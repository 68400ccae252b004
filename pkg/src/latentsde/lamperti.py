"""Reducibility checks and the multivariate Lamperti transform.

For a diffusion sigma(y, t) whose inverse is a gradient field (the curl
condition below) the map

    h(y, t) = int_0^1 sigma(b + s (y - b), t)^{-1} (y - b) ds

has Jacobian sigma^{-1}, so Z = h(Y) has unit diffusion.  The base point ``b``
is where h vanishes; it must lie where sigma is invertible (GBM needs b > 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend, _rng
from .errors import InvalidInputError, InversionError
from .sde import SdeSpec

CURL_TOL = 1e-8
FD_REL_STEP = 1e-5


def _fd_step(y):
    return FD_REL_STEP * (1.0 + np.linalg.norm(y, axis=-1, keepdims=True))


def sigma_partials(spec: SdeSpec, y, t) -> np.ndarray:
    """Central differences d sigma / d y_k, shape (..., k, d, d)."""
    y = np.asarray(y, dtype=np.float64)
    d = spec.dim
    h = _fd_step(y)[..., None]  # (..., 1, 1)
    out = np.empty(y.shape[:-1] + (d, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        step = h[..., 0] * e  # (..., d)
        out[..., k, :, :] = (spec.diffusion(y + step, t) - spec.diffusion(y - step, t)) / (2 * h)
    return out


@dataclass
class ReducibilityReport:
    points: np.ndarray
    times: np.ndarray
    curl_residual: np.ndarray  # max over pairs j<k, per point
    symmetry_residual: np.ndarray
    min_eigenvalue: np.ndarray  # of the symmetric part
    singular: np.ndarray  # bool per point
    curl_tol: float = CURL_TOL

    @property
    def curl_ok(self) -> bool:
        return bool(np.all(~self.singular) and np.all(self.curl_residual <= self.curl_tol))

    @property
    def symmetric(self) -> bool:
        return bool(np.all(self.symmetry_residual <= self.curl_tol))

    @property
    def positive_definite(self) -> bool:
        return bool(np.all(self.min_eigenvalue > 0))

    @property
    def reducible(self) -> bool:
        return self.curl_ok and self.symmetric and self.positive_definite

    def __bool__(self):
        return self.reducible

    @property
    def worst_point(self):
        if self.singular.any():
            return self.points[np.argmax(self.singular)]
        return self.points[np.argmax(self.curl_residual)]

    def rows(self):
        """Per-point rows for CSV output."""
        for i, p in enumerate(self.points):
            yield {"point": " ".join(f"{v:.6g}" for v in p), "t": float(self.times[i]),
                   "curl_residual": float(self.curl_residual[i]),
                   "symmetry_residual": float(self.symmetry_residual[i]),
                   "min_eigenvalue": float(self.min_eigenvalue[i]),
                   "singular": bool(self.singular[i])}


def check_reducible(spec: SdeSpec, probe_points, times=0.0, curl_tol: float = CURL_TOL
                    ) -> ReducibilityReport:
    """Evaluate the reducibility conditions at each probe point.

    curl residual: max_{j<k} |d_k sigma . sigma^{-1} e_j - d_j sigma . sigma^{-1} e_k|.
    A singular sigma marks the point as violating, it does not raise.
    """
    pts = spec.check_state(np.atleast_2d(np.asarray(probe_points, dtype=np.float64)))
    n, d = pts.shape
    ts = np.broadcast_to(np.asarray(times, dtype=np.float64), (n,)).copy()
    curl = np.zeros(n)
    sym = np.zeros(n)
    mineig = np.zeros(n)
    singular = np.zeros(n, dtype=bool)
    for i in range(n):
        y, t = pts[i], ts[i]
        s = spec.diffusion(y, t)
        sym[i] = np.abs(s - s.T).max()
        mineig[i] = np.linalg.eigvalsh(0.5 * (s + s.T)).min()
        sv = np.linalg.svd(s, compute_uv=False)
        if not np.all(np.isfinite(s)) or sv.min() <= 1e-12 * max(sv.max(), 1e-300):
            singular[i] = True
            curl[i] = np.inf
            continue
        sinv = np.linalg.inv(s)
        ds = sigma_partials(spec, y, t)  # (k, d, d)
        worst = 0.0
        for j in range(d):
            for k in range(j + 1, d):
                r = ds[k] @ sinv[:, j] - ds[j] @ sinv[:, k]
                worst = max(worst, float(np.linalg.norm(r)))
        curl[i] = worst
    return ReducibilityReport(pts, ts, curl, sym, mineig, singular, curl_tol)


def default_probes(spec: SdeSpec, base_point, count: int = 16, radius: float = 0.1, seed: int = 0):
    u = _backend.uniforms(_rng.stream_key(seed, "probe"), 0, count * spec.dim)
    return np.asarray(base_point) + radius * (2.0 * u.reshape(count, spec.dim) - 1.0)


@dataclass(frozen=True)
class LampertiMap:
    source: SdeSpec
    base_point: np.ndarray
    quadrature_nodes: int = 32
    inversion_tol: float = 1e-10
    max_iter: int = 50
    _nodes: np.ndarray = field(default=None, repr=False)
    _weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        x, w = np.polynomial.legendre.leggauss(self.quadrature_nodes)
        object.__setattr__(self, "_nodes", 0.5 * (x + 1.0))
        object.__setattr__(self, "_weights", 0.5 * w)

    def h(self, y, t=0.0) -> np.ndarray:
        y = self.source.check_state(y)
        delta = y - self.base_point
        # quadrature points: (K, ..., d)
        s = self._nodes.reshape((-1,) + (1,) * y.ndim)
        pts = self.base_point + s * delta
        sig = self.source.diffusion(pts, t)
        v = np.linalg.solve(sig, np.broadcast_to(delta, pts.shape)[..., None])[..., 0]
        return np.tensordot(self._weights, v, axes=(0, 0))

    def g(self, z, t=0.0) -> np.ndarray:
        """Invert h by damped Newton steps y <- y - a sigma(y) (h(y) - z)."""
        z = self.source.check_state(z)
        single = z.ndim == 1
        zz = np.atleast_2d(z)
        # start at the base point; steps may not change the sign of det sigma,
        # which keeps the iterate on the base point's side of any singular set
        sign0 = np.sign(np.linalg.det(self.source.diffusion(self.base_point, t)))
        y = np.tile(self.base_point, (len(zz), 1))
        r = self._residual(y, zz, t)
        for _ in range(self.max_iter):
            step = -np.einsum("nij,nj->ni", self.source.diffusion(y, t), r)
            done = np.linalg.norm(step, axis=-1) <= 0.1 * self.inversion_tol
            if done.all():
                break
            alpha = np.ones(len(zz))
            rnorm = np.linalg.norm(r, axis=-1)
            for _half in range(60):
                y_try = y + alpha[:, None] * step
                r_try = self._residual(y_try, zz, t)
                with np.errstate(all="ignore"):
                    same_side = np.sign(np.linalg.det(self.source.diffusion(y_try, t))) == sign0
                bad = (~np.isfinite(r_try).all(axis=-1) | ~same_side
                       | (np.linalg.norm(r_try, axis=-1) > rnorm)) & ~done
                if not bad.any():
                    break
                alpha[bad] *= 0.5
            keep = ~done
            y[keep] = y_try[keep]
            r[keep] = r_try[keep]
        err = np.linalg.norm(np.einsum("nij,nj->ni", self.source.diffusion(y, t), r), axis=-1)
        if not np.all(np.isfinite(err)) or np.any(err > self.inversion_tol):
            worst = int(np.nanargmax(np.where(np.isfinite(err), err, np.inf)))
            raise InversionError(f"Newton inversion did not converge (residual {err[worst]:.3g})",
                                 worst_point=zz[worst])
        return y[0] if single else y

    def _residual(self, y, z, t):
        with np.errstate(all="ignore"):
            try:
                return self.h(y, t) - z
            except np.linalg.LinAlgError:
                return np.full_like(z, np.nan)

    def dg_dt(self, z, t=0.0) -> np.ndarray:
        z = self.source.check_state(z)
        if not self.source.time_dependent:
            return np.zeros_like(z)
        y = self.g(z, t)
        dt = FD_REL_STEP * (1.0 + abs(float(t)))
        dh = (self.h(y, t + dt) - self.h(y, t - dt)) / (2 * dt)
        return -np.einsum("...ij,...j->...i", self.source.diffusion(y, t), dh)

    def laplacian_g(self, z, t=0.0) -> np.ndarray:
        """Laplacian of each component of g via the chain rule dg/dz = sigma(g)."""
        y = self.g(z, t)
        return self._laplacian_at(y, t)

    def _laplacian_at(self, y, t):
        ds = sigma_partials(self.source, y, t)  # (..., m, i, k)
        s = self.source.diffusion(y, t)  # (..., m, k)
        return np.einsum("...mik,...mk->...i", ds, s)

    def transformed_drift(self, z, t=0.0) -> np.ndarray:
        z = self.source.check_state(z)
        y = self.g(z, t)
        rhs = self.source.drift(y, t) - self.dg_dt(z, t) - 0.5 * self._laplacian_at(y, t)
        return np.linalg.solve(self.source.diffusion(y, t), rhs[..., None])[..., 0]

    def transformed_spec(self) -> SdeSpec:
        d = self.source.dim
        eye = np.eye(d)
        return SdeSpec(
            name=f"lamperti({self.source.name})", dim=d,
            drift=lambda z, t: self.transformed_drift(z, t),
            diffusion=lambda z, t: np.broadcast_to(eye, np.shape(z)[:-1] + (d, d)).copy(),
            time_dependent=self.source.time_dependent, isotropic=True,
        )


def build_map(spec: SdeSpec, base_point=None, quadrature_nodes: int = 32,
              inversion_tol: float = 1e-10, check: bool = True,
              probes: Optional[np.ndarray] = None) -> LampertiMap:
    """Construct h, g and the unit-diffusion drift for ``spec``.

    Requires an invertible sigma satisfying the curl condition near the base
    point; symmetry is not needed for the construction itself.
    """
    base = np.zeros(spec.dim) if base_point is None else np.asarray(base_point, dtype=np.float64)
    base = spec.check_state(base)
    if quadrature_nodes < 1:
        raise InvalidInputError("quadrature_nodes must be positive")
    if check:
        pts = default_probes(spec, base) if probes is None else probes
        report = check_reducible(spec, np.vstack([base, pts]))
        if not report.curl_ok:
            raise InvalidInputError(
                f"{spec.name}: diffusion is singular or fails the curl condition near "
                f"{report.worst_point} (residual {report.curl_residual.max():.3g})"
            )
    return LampertiMap(spec, base, quadrature_nodes, inversion_tol)
