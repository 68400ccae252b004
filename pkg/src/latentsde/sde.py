"""SDE coefficients, the built-in catalog and an Euler-Maruyama simulator.

Coefficient callables take a state array of shape ``(..., d)`` and a time
(scalar or broadcastable to the leading shape) and return ``(..., d)`` for the
drift and ``(..., d, d)`` for the diffusion.  Simulated paths are raw; any
rescaling happens in :mod:`latentsde.datasets`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _backend, _rng
from .errors import InvalidInputError, NotFoundError
from .lsde_io import read_array, read_json, write_array, write_json

Coefficient = Callable[[np.ndarray, object], np.ndarray]


@dataclass(frozen=True)
class SdeSpec:
    """dZ = drift(Z, t) dt + diffusion(Z, t) dW in R^dim."""

    name: str
    dim: int
    drift: Coefficient
    diffusion: Coefficient
    time_dependent: bool = False
    isotropic: bool = False
    reducible: bool = True
    # (B, c, M) when drift(z) = B z + c and diffusion is the constant M;
    # lets simulate() use the compiled kernel
    affine: Optional[tuple] = None
    # box used when probing coefficient properties numerically
    probe_box: tuple = (-2.0, 2.0)
    notes: str = ""

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InvalidInputError("dim must be a positive integer")

    def check_state(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 0 or z.shape[-1] != self.dim:
            raise InvalidInputError(
                f"{self.name}: state has shape {z.shape}, expected trailing dimension {self.dim}"
            )
        return z


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    seed: int
    spec_name: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] != self.times.shape[0]:
            raise InvalidInputError("states must be (len(times), d)")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidInputError("times must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def save(self, path) -> None:
        """Write ``path`` (LSDE array of [t, z]) and ``path.json``."""
        path = Path(path)
        write_array(path, np.column_stack([self.times, self.states]))
        write_json(
            path.with_name(path.name + ".json"),
            {"spec": self.spec_name, "seed": int(self.seed), "dim": self.dim,
             "dt": np.diff(self.times).tolist()},
        )

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        arr = read_array(path)
        meta = read_json(path.with_name(path.name + ".json"))
        return cls(times=arr[:, 0], states=arr[:, 1:], seed=meta["seed"], spec_name=meta["spec"])


def euler_maruyama_step(spec: SdeSpec, z, t, dt, noise) -> np.ndarray:
    """One step ``z + mu dt + sigma sqrt(dt) noise``; batched over leading dims."""
    z = spec.check_state(z)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z.shape:
        raise InvalidInputError(f"noise shape {noise.shape} does not match state {z.shape}")
    if not np.all(np.asarray(dt) > 0):
        raise InvalidInputError("dt must be positive")
    dt = np.asarray(dt, dtype=np.float64)
    sq = np.sqrt(dt)
    if dt.ndim:
        dt, sq = dt[..., None], sq[..., None]
    scaled = sq * noise
    if spec.isotropic:
        dif = scaled
    else:
        sigma = spec.diffusion(z, t)
        dif = np.einsum("...ij,...j->...i", sigma, scaled)
    return z + spec.drift(z, t) * dt + dif


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.shape[0] < 1:
        raise InvalidInputError("times must be a non-empty 1-D sequence")
    if np.any(~np.isfinite(times)) or np.any(np.diff(times) <= 0):
        raise InvalidInputError("times must be finite and strictly increasing")
    return times


def wiener_normals(seed: int, n_steps: int, d: int) -> np.ndarray:
    """Standard normals driving ``simulate``; row k feeds step k."""
    key = _rng.stream_key(seed, "wiener")
    return _backend.normals(key, 0, n_steps * d).reshape(n_steps, d)


def simulate(spec: SdeSpec, z0, times, seed: int, backend: str | None = None) -> Trajectory:
    """Euler-Maruyama path on an arbitrary (possibly non-uniform) time grid.

    The noise for coordinate j of step k is draw ``k*d + j`` of the
    ``(seed, wiener)`` stream, so paths are reproducible bit-for-bit.
    """
    z0 = spec.check_state(z0)
    if z0.ndim != 1:
        raise InvalidInputError("z0 must be a single state vector")
    times = _check_times(times)
    n = times.shape[0]
    d = spec.dim
    if spec.affine is not None and not spec.time_dependent:
        B, c, M = spec.affine
        key = _rng.stream_key(seed, "wiener")
        states = _backend.get(backend).em_affine(z0, times, B, c, M, key)
        return Trajectory(times, states, seed, spec.name)
    xi = wiener_normals(seed, n - 1, d)
    states = np.empty((n, d))
    states[0] = z0
    z = z0
    for k in range(n - 1):
        z = euler_maruyama_step(spec, z, times[k], times[k + 1] - times[k], xi[k])
        states[k + 1] = z
    return Trajectory(times, states, seed, spec.name)


def uniform_times(n_steps: int, dt: float, t0: float = 0.0) -> np.ndarray:
    return t0 + dt * np.arange(n_steps + 1, dtype=np.float64)


# ---------------------------------------------------------------- catalog

def _eye_field(d):
    eye = np.eye(d)

    def diffusion(z, t):
        z = np.asarray(z, dtype=np.float64)
        return np.broadcast_to(eye, z.shape[:-1] + (d, d)).copy()

    return diffusion


def _affine_spec(name, B, c, notes="") -> SdeSpec:
    B = np.asarray(B, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = c.shape[0]

    def drift(z, t):
        return np.asarray(z, dtype=np.float64) @ B.T + c

    return SdeSpec(name=name, dim=d, drift=drift, diffusion=_eye_field(d), isotropic=True,
                   affine=(B, c, np.eye(d)), notes=notes)


def _zero() -> SdeSpec:
    def drift(z, t):
        return np.zeros_like(np.asarray(z, dtype=np.float64))

    def diffusion(z, t):
        z = np.asarray(z, dtype=np.float64)
        return np.zeros(z.shape[:-1] + (2, 2))

    return SdeSpec(name="zero", dim=2, drift=drift, diffusion=diffusion, reducible=False,
                   affine=(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2))))


def _isotropic(name, d, fn, probe_box=(-2.0, 2.0)) -> SdeSpec:
    return SdeSpec(name=name, dim=d, drift=fn, diffusion=_eye_field(d), isotropic=True,
                   probe_box=probe_box)


def _double_well(z, t):
    z = np.asarray(z, dtype=np.float64)
    return 2.0 * z * (1.0 - z * z)


def _cauchy(z, t):
    z = np.asarray(z, dtype=np.float64)
    k = np.arange(1, 4, dtype=np.float64)
    return -k * z / (1.0 + z * z)


def _gbm() -> SdeSpec:
    def drift(z, t):
        return 0.5 * np.asarray(z, dtype=np.float64)

    def diffusion(z, t):
        return np.asarray(z, dtype=np.float64)[..., None]

    return SdeSpec(name="gbm1d", dim=1, drift=drift, diffusion=diffusion, probe_box=(0.1, 5.0),
                   notes="positive half-line; Lamperti base point must be > 0")


def _anisotropic() -> SdeSpec:
    def drift(z, t):
        z = np.asarray(z, dtype=np.float64)
        out = np.empty_like(z)
        out[..., 0] = -z[..., 0]
        out[..., 1] = -2.0 * z[..., 1]
        out[..., 2] = 0.6 - 0.3 * z[..., 2]
        return out

    def diffusion(z, t):
        z = np.asarray(z, dtype=np.float64)
        s = np.zeros(z.shape[:-1] + (3, 3))
        s[..., 0, 0], s[..., 0, 1] = 1.0, 2.0
        s[..., 1, 0], s[..., 1, 1] = 2.5, 3.0
        # truncated at 0 so Euler steps that overshoot below zero stay defined
        s[..., 2, 2] = np.sqrt(np.maximum(z[..., 2], 0.0))
        return s

    # sigma is not symmetric, so the symmetric/PD reducibility flag is off;
    # the curl condition still holds and build_map works on it
    return SdeSpec(name="anisotropic3d", dim=3, drift=drift, diffusion=diffusion,
                   reducible=False, probe_box=(0.2, 3.0),
                   notes="third coordinate lives on z > 0")


def _build_catalog() -> dict:
    c = {}
    c["constant2d"] = _affine_spec("constant2d", np.zeros((2, 2)), [-0.25, 0.25])
    c["ou2d"] = _affine_spec("ou2d", -4.0 * np.eye(2), [0.0, 0.0])
    c["circle2d"] = _affine_spec(
        "circle2d", [[-1.0, -3.0], [-3.0, 1.0]], [0.0, 0.0],
        notes="drift (-x-3y, y-3x); the other published sign is (-x-3y, y+3x)",
    )
    c["constant4d"] = _affine_spec("constant4d", np.zeros((4, 4)), np.zeros(4))
    # 4-D state is (x0, x1, y0, y1): x then y coordinates of two objects
    c["ou4d"] = _affine_spec("ou4d", -np.eye(4), [-1.0, -1.0, 1.0, 1.0])
    rot = np.array([[-1.0, -2.0], [2.0, -1.0]])
    B4 = np.zeros((4, 4))
    B4[:2, :2] = rot
    B4[2:, 2:] = rot
    c["circle4d"] = _affine_spec("circle4d", B4, np.zeros(4))
    c["ou1d"] = _affine_spec("ou1d", [[-2.0]], [0.0])
    c["double_well1d"] = _isotropic("double_well1d", 1, _double_well)
    c["gbm1d"] = _gbm()
    c["ou3d"] = _affine_spec("ou3d", np.diag([-1.0, -2.0, -3.0]), np.zeros(3))
    c["cauchy3d"] = _isotropic("cauchy3d", 3, _cauchy)
    c["anisotropic3d"] = _anisotropic()
    c["zero"] = _zero()
    return c


_CATALOG = _build_catalog()
CATALOG_NAMES = tuple(_CATALOG)


def catalog(name: str) -> SdeSpec:
    try:
        return _CATALOG[name]
    except KeyError:
        raise NotFoundError(
            f"unknown SDE {name!r}; available: {', '.join(CATALOG_NAMES)}"
        ) from None


def probe_grid(spec: SdeSpec, count: int = 64, seed: int = 0) -> np.ndarray:
    """Uniform points in ``spec.probe_box`` for numerical property checks."""
    lo, hi = spec.probe_box
    u = _backend.uniforms(_rng.stream_key(seed, "probe"), 0, count * spec.dim)
    return lo + (hi - lo) * u.reshape(count, spec.dim)


__all__ = [
    "SdeSpec", "Trajectory", "euler_maruyama_step", "simulate", "catalog", "CATALOG_NAMES",
    "uniform_times", "wiener_normals", "probe_grid",
]
