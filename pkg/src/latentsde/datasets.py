"""Synthetic observation datasets: latent path -> ambient map -> noise -> pairs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import stdtrit

from . import _backend, _rng
from .errors import InvalidInputError
from .lsde_io import read_array, read_json, write_array, write_json
from .sde import SdeSpec, catalog, simulate, uniform_times

MAP_KINDS = ("random_smooth", "raster_ball", "linear")
DEFAULT_SIDE = 16
DEFAULT_HIDDEN = 32
BUMP_WIDTH = 0.1  # raster bump std in rescaled [0, 1] units


def _normals(seed, stream, shape, start=0):
    key = _rng.stream_key(seed, stream)
    return _backend.normals(key, start, int(np.prod(shape))).reshape(shape)


def _orthonormal_columns(seed, n, d, start=0):
    q, r = np.linalg.qr(_normals(seed, "map", (n, d), start))
    return q * np.sign(np.diag(r))


@dataclass
class AmbientMap:
    kind: str
    latent_dim: int
    ambient_dim: int
    seed: int
    params: dict = field(repr=False)
    injectivity_margin: float = float("nan")
    probe_box: tuple = (-2.0, 2.0)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise InvalidInputError(f"map expects latent width {self.latent_dim}, got {z.shape[-1]}")
        p = self.params
        if self.kind == "linear":
            return z @ p["A"].T
        if self.kind == "random_smooth":
            hidden = np.tanh(z @ p["W1"].T + p["b1"])
            return hidden @ p["W2"].T + p["b2"] + z @ p["S"].T
        # raster_ball
        grid = p["grid"]  # (n, 2)
        sq = ((z[..., None, :] - grid) ** 2).sum(-1)
        return np.exp(-sq / (2.0 * p["width"] ** 2))

    def jacobian(self, z, eps: float = 1e-6) -> np.ndarray:
        """Central-difference Jacobian, shape (..., n, d)."""
        z = np.asarray(z, dtype=np.float64)
        cols = [(self(z + eps * e) - self(z - eps * e)) / (2 * eps) for e in np.eye(self.latent_dim)]
        return np.stack(cols, axis=-1)

    def measure_margin(self, count: int = 100, seed: int = 0) -> float:
        lo, hi = self.probe_box
        u = _backend.uniforms(_rng.stream_key(seed, "probe"), 0, count * self.latent_dim)
        pts = lo + (hi - lo) * u.reshape(count, self.latent_dim)
        return float(np.linalg.svd(self.jacobian(pts), compute_uv=False).min())

    def describe(self) -> dict:
        return {"kind": self.kind, "latent_dim": self.latent_dim, "ambient_dim": self.ambient_dim,
                "seed": self.seed, "injectivity_margin": self.injectivity_margin,
                "identity": bool(self.params.get("identity", False))}


def make_ambient_map(kind: str, d: int, n: int, seed: int, side: Optional[int] = None,
                     identity: bool = False, hidden: int = DEFAULT_HIDDEN) -> AmbientMap:
    """Seeded injective map R^d -> R^n.

    random_smooth: W2 tanh(W1 z + b1) + b2 + S z with S orthonormal and
    ||W2|| ||W1|| = 1/2, so every Jacobian singular value is at least 1/2.
    """
    if kind not in MAP_KINDS:
        raise InvalidInputError(f"unknown map kind {kind!r}; expected one of {MAP_KINDS}")
    if d < 1 or n < d:
        raise InvalidInputError(f"need 1 <= d <= n, got d={d}, n={n}")
    if kind == "linear":
        if identity:
            A = np.eye(n, d)
        else:
            q = _orthonormal_columns(seed, n, d)
            u = _backend.uniforms(_rng.stream_key(seed, "map"), 10**6, d)
            A = q * np.exp(np.log(0.5) + u * np.log(4.0))  # singular values in [0.5, 2]
        amap = AmbientMap(kind, d, n, seed, {"A": A, "identity": identity})
    elif kind == "random_smooth":
        S = _orthonormal_columns(seed, n, d)
        off = n * d
        W1 = _normals(seed, "map", (hidden, d), off)
        off += hidden * d
        b1 = 0.5 * _normals(seed, "map", (hidden,), off)
        off += hidden
        W2 = _normals(seed, "map", (n, hidden), off)
        off += n * hidden
        b2 = 0.1 * _normals(seed, "map", (n,), off)
        W1 *= 2.0 / np.linalg.norm(W1, 2)
        W2 *= 0.25 / np.linalg.norm(W2, 2)
        amap = AmbientMap(kind, d, n, seed, {"S": S, "W1": W1, "b1": b1, "W2": W2, "b2": b2})
    else:
        side = DEFAULT_SIDE if side is None else side
        if d != 2:
            raise InvalidInputError("raster_ball needs a 2-D latent")
        if n != side * side:
            raise InvalidInputError(f"raster_ball needs n = side^2 = {side * side}, got {n}")
        ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        grid = np.column_stack([ii.ravel(), jj.ravel()]) / side
        amap = AmbientMap(kind, d, n, seed, {"grid": grid, "width": BUMP_WIDTH, "side": side},
                          probe_box=(0.0, 1.0))
    amap.injectivity_margin = amap.measure_margin()
    return amap


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise. ``scale='range255'`` reads the variance on a 0..255
    intensity scale, i.e. std = sqrt(variance) * (ambient range) / 255."""

    kind: str = "none"  # none | gaussian | student_t
    variance: float = 0.0
    dof: float = 3.0
    scale: str = "absolute"  # absolute | range255

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "student_t"):
            raise InvalidInputError(f"unknown noise kind {self.kind!r}")
        if self.scale not in ("absolute", "range255"):
            raise InvalidInputError(f"unknown noise scale {self.scale!r}")
        if self.variance < 0 or (self.kind == "student_t" and self.dof <= 2):
            raise InvalidInputError("noise variance must be >= 0 and student_t dof > 2")

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """``none``, ``gaussian:4``, ``student_t:4:3``; suffix ``@255`` for range255."""
        scale = "absolute"
        if text.endswith("@255"):
            text, scale = text[:-4], "range255"
        parts = text.split(":")
        try:
            if parts[0] == "none":
                return cls()
            if parts[0] == "gaussian":
                return cls("gaussian", float(parts[1]), scale=scale)
            if parts[0] == "student_t":
                dof = float(parts[2]) if len(parts) > 2 else 3.0
                return cls("student_t", float(parts[1]), dof, scale)
        except (IndexError, ValueError):
            pass
        raise InvalidInputError(f"cannot parse noise {text!r}")

    def to_text(self) -> str:
        if self.kind == "none":
            return "none"
        body = f"gaussian:{self.variance!r}" if self.kind == "gaussian" else \
            f"student_t:{self.variance!r}:{self.dof!r}"
        return body + ("@255" if self.scale == "range255" else "")

    def std(self, clean: np.ndarray) -> float:
        s = float(np.sqrt(self.variance))
        if self.scale == "range255":
            s *= float(clean.max() - clean.min()) / 255.0
        return s

    def sample(self, shape, seed: int, clean: Optional[np.ndarray] = None) -> np.ndarray:
        if self.kind == "none" or self.variance == 0:
            return np.zeros(shape)
        std = self.std(clean if clean is not None else np.zeros(1))
        count = int(np.prod(shape))
        key = _rng.stream_key(seed, "obs_noise")
        if self.kind == "gaussian":
            return std * _backend.normals(key, 0, count).reshape(shape)
        # unit-variance t draws by inverse CDF, rescaled to the requested std
        t = stdtrit(self.dof, _backend.uniforms(key, 0, count))
        return std * np.sqrt((self.dof - 2.0) / self.dof) * t.reshape(shape)


@dataclass
class PairedDataset:
    x0: np.ndarray
    x1: np.ndarray
    dt: np.ndarray
    latent0: Optional[np.ndarray] = None
    latent1: Optional[np.ndarray] = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    meta: dict = field(default_factory=dict)
    clean0: Optional[np.ndarray] = None
    clean1: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.dt = np.asarray(self.dt, dtype=np.float64).reshape(-1)
        if self.x0.shape != self.x1.shape or self.x0.shape[0] != self.dt.shape[0]:
            raise InvalidInputError("pair arrays have inconsistent shapes")
        if np.any(self.dt <= 0):
            raise InvalidInputError("every pair needs dt > 0")
        if (self.latent0 is None) != (self.latent1 is None):
            raise InvalidInputError("latent truth needs both time points")
        if self.latent0 is not None and len(self.latent0) != len(self.x0):
            raise InvalidInputError("latent truth must align with pairs")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.x0.shape[1]

    @property
    def latent_dim(self) -> Optional[int]:
        return None if self.latent0 is None else self.latent0.shape[1]

    def subset(self, idx) -> "PairedDataset":
        pick = (lambda a: None if a is None else a[idx])
        return PairedDataset(self.x0[idx], self.x1[idx], self.dt[idx], pick(self.latent0),
                             pick(self.latent1), self.noise, dict(self.meta),
                             pick(self.clean0), pick(self.clean1))

    def raw_latent(self):
        """Latent truth with the stored min-max rescale undone."""
        if self.latent0 is None:
            return None, None
        r = self.meta.get("rescale")
        if not r or not r.get("enabled"):
            return self.latent0, self.latent1
        lo, hi = np.asarray(r["lo"]), np.asarray(r["hi"])
        span = np.where(np.asarray(r["applied"]), hi - lo, 1.0)
        shift = np.where(np.asarray(r["applied"]), lo, 0.0)
        return self.latent0 * span + shift, self.latent1 * span + shift

    def save(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        meta["noise"] = self.noise.to_text()
        meta["n_pairs"] = len(self)
        meta["ambient_dim"] = self.ambient_dim
        meta["has_latent"] = self.latent0 is not None
        meta["has_clean"] = self.clean0 is not None
        write_json(out / "meta.json", meta)
        write_array(out / "pairs.bin", np.column_stack([self.x0, self.x1, self.dt]))
        if self.latent0 is not None:
            write_array(out / "latent.bin", np.column_stack([self.latent0, self.latent1]))
        if self.clean0 is not None:
            write_array(out / "clean.bin", np.column_stack([self.clean0, self.clean1]))

    @classmethod
    def load(cls, path) -> "PairedDataset":
        path = Path(path)
        meta = read_json(path / "meta.json")
        arr = read_array(path / "pairs.bin")
        n = (arr.shape[1] - 1) // 2
        lat0 = lat1 = c0 = c1 = None
        if meta.get("has_latent"):
            lat = read_array(path / "latent.bin")
            d = lat.shape[1] // 2
            lat0, lat1 = lat[:, :d], lat[:, d:]
        if meta.get("has_clean"):
            c = read_array(path / "clean.bin")
            c0, c1 = c[:, :n], c[:, n:]
        noise = NoiseSpec.parse(meta.get("noise", "none"))
        for k in ("noise", "n_pairs", "ambient_dim", "has_latent", "has_clean"):
            meta.pop(k, None)
        return cls(arr[:, :n], arr[:, n:2 * n], arr[:, -1], lat0, lat1, noise, meta, c0, c1)


def default_z0(spec: SdeSpec) -> np.ndarray:
    lo, hi = spec.probe_box
    return np.zeros(spec.dim) if lo < 0.0 < hi else np.ones(spec.dim)


def trajectory_seed(seed: int, index: int) -> int:
    return seed if index == 0 else _rng.stream_key(seed, "batch") ^ index


def _time_grid(n_steps, dt_schedule):
    if np.ndim(dt_schedule) == 0:
        if dt_schedule <= 0:
            raise InvalidInputError("dt must be positive")
        return uniform_times(n_steps, float(dt_schedule))
    dts = np.broadcast_to(np.asarray(dt_schedule, dtype=np.float64), (n_steps,))
    if np.any(dts <= 0):
        raise InvalidInputError("dt schedule must be positive")
    return np.concatenate([[0.0], np.cumsum(dts)])


def generate(spec_name: str, amap: AmbientMap, n_steps: int, dt_schedule=0.01,
             noise: NoiseSpec | str = "none", rescale: bool = False, seed: int = 0,
             n_trajectories: int = 1, z0=None) -> PairedDataset:
    """Simulate, optionally rescale to [0,1], embed, add noise and pair.

    Pairs never straddle two trajectories.  ``latent0/1`` hold the (rescaled)
    latent path; ``meta['rescale']`` keeps the bounds to undo it.
    """
    spec = catalog(spec_name)
    if isinstance(noise, str):
        noise = NoiseSpec.parse(noise)
    if amap.latent_dim != spec.dim:
        raise InvalidInputError(f"map latent dim {amap.latent_dim} != {spec_name} dim {spec.dim}")
    if n_steps < 1 or n_trajectories < 1:
        raise InvalidInputError("need at least one step and one trajectory")
    times = _time_grid(n_steps, dt_schedule)
    z0 = default_z0(spec) if z0 is None else np.asarray(z0, dtype=np.float64)
    paths = [simulate(spec, z0, times, trajectory_seed(seed, i)).states for i in range(n_trajectories)]
    stacked = np.concatenate(paths)
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    applied = (hi - lo) > 0
    rescale_meta = {"enabled": bool(rescale), "lo": lo.tolist(), "hi": hi.tolist(),
                    "applied": applied.tolist() if rescale else [False] * spec.dim}
    if rescale:
        if not applied.all():
            warnings.warn(f"constant latent coordinate(s) {np.flatnonzero(~applied).tolist()}; "
                          "rescale skipped there", stacklevel=2)
            rescale_meta["skipped"] = np.flatnonzero(~applied).tolist()
        span = np.where(applied, hi - lo, 1.0)
        shift = np.where(applied, lo, 0.0)
        paths = [(p - shift) / span for p in paths]
    clean = [amap(p) for p in paths]
    all_clean = np.concatenate(clean)
    eps = noise.sample(all_clean.shape, seed, all_clean)
    obs, start = [], 0
    for c in clean:
        obs.append(c + eps[start:start + len(c)])
        start += len(c)
    dts = np.diff(times)
    cat = lambda arrs, sl: np.concatenate([a[sl] for a in arrs])  # noqa: E731
    meta = {
        "spec": spec_name, "seed": int(seed), "n_steps": int(n_steps),
        "n_trajectories": int(n_trajectories), "dt": dts.tolist() if np.ptp(dts) > 0 else float(dts[0]),
        "z0": z0.tolist(), "map": amap.describe(), "rescale": rescale_meta,
        "noise_std": noise.std(all_clean) if noise.kind != "none" else 0.0,
    }
    keep_clean = noise.kind != "none"
    return PairedDataset(
        x0=cat(obs, slice(None, -1)), x1=cat(obs, slice(1, None)),
        dt=np.tile(dts, n_trajectories),
        latent0=cat(paths, slice(None, -1)), latent1=cat(paths, slice(1, None)),
        noise=noise, meta=meta,
        clean0=cat(clean, slice(None, -1)) if keep_clean else None,
        clean1=cat(clean, slice(1, None)) if keep_clean else None,
    )


def map_from_meta(meta: dict) -> AmbientMap:
    m = meta["map"]
    side = int(round(np.sqrt(m["ambient_dim"]))) if m["kind"] == "raster_ball" else None
    return make_ambient_map(m["kind"], m["latent_dim"], m["ambient_dim"], m["seed"], side=side,
                            identity=m.get("identity", False))
