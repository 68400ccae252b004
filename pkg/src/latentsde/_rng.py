"""Counter-based random numbers, numpy implementation.

Every draw is a pure function of ``(key, counter)``: the key is derived from a
user seed and a stream tag, the counter is usually ``step * width + coord``.
Uniforms come from the SplitMix64 finalizer evaluated at ``key + (i+1)*gamma``
(i.e. SplitMix64 jumped directly to position ``i``); normals use Wichura's
AS241 inverse CDF so no pairing or rejection is involved.

``latentsde._kernels`` implements exactly the same recipe in C.
"""
from __future__ import annotations

import math

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

# stream tags; keep them stable, they are part of the on-disk reproducibility
STREAMS = {
    "wiener": 1,
    "obs_noise": 2,
    "reparam": 3,
    "init": 4,
    "map": 5,
    "batch": 6,
    "val": 7,
    "probe": 8,
    "generate": 9,
}


def _mix64_int(x: int) -> int:
    x &= _MASK
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK
    x ^= x >> 31
    return x


def stream_key(seed: int, stream: int | str) -> int:
    """64-bit key for ``(seed, stream)``."""
    if isinstance(stream, str):
        stream = STREAMS[stream]
    if seed < 0:
        raise ValueError("seed must be non-negative")
    k = _mix64_int((seed & _MASK) + 0x9E3779B97F4A7C15)
    return _mix64_int(k ^ ((stream * 0xD1B54A32D192ED03) & _MASK))


def mix64(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def raw_u64(key: int, start: int, count: int) -> np.ndarray:
    idx = np.arange(count, dtype=np.uint64) + np.uint64(start + 1)
    with np.errstate(over="ignore"):
        return mix64(np.uint64(key) + idx * GOLDEN)


def uniforms(key: int, start: int, count: int) -> np.ndarray:
    """Open-interval uniforms on (0, 1) with 53-bit resolution."""
    u = raw_u64(key, start, count) >> np.uint64(11)
    return (u.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


# AS241 (PPND16) coefficients
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _horner(coef, r):
    acc = np.full_like(r, coef[7])
    for c in coef[6::-1]:
        acc = acc * r + c
    return acc


def ndtri(p: np.ndarray) -> np.ndarray:
    """Inverse standard-normal CDF for p in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    out = np.empty_like(p)
    central = np.abs(q) <= 0.425
    if central.any():
        qc = q[central]
        r = 0.180625 - qc * qc
        out[central] = qc * _horner(_A, r) / _horner(_B, r)
    tail = ~central
    if tail.any():
        qt = q[tail]
        r = np.where(qt < 0.0, p[tail], 1.0 - p[tail])
        # libm log, not numpy's SIMD log, so results match the C kernel bit-for-bit
        r = np.sqrt(-np.array([math.log(v) for v in r.tolist()]))
        val = np.empty_like(r)
        near = r <= 5.0
        rn = r[near] - 1.6
        val[near] = _horner(_C, rn) / _horner(_D, rn)
        rf = r[~near] - 5.0
        val[~near] = _horner(_E, rf) / _horner(_F, rf)
        out[tail] = np.where(qt < 0.0, -val, val)
    return out


def normals(key: int, start: int, count: int) -> np.ndarray:
    return ndtri(uniforms(key, start, count))


def em_affine(z0, times, drift_matrix, drift_offset, diffusion, key):
    """Euler-Maruyama for dZ = (B Z + c) dt + M dW with counter-based noise."""
    z0 = np.asarray(z0, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    d = z0.shape[0]
    n = times.shape[0]
    xi = normals(key, 0, (n - 1) * d).reshape(n - 1, d)
    B = np.asarray(drift_matrix, dtype=np.float64)
    c = np.asarray(drift_offset, dtype=np.float64)
    M = np.asarray(diffusion, dtype=np.float64)
    states = np.empty((n, d))
    states[0] = z0
    # python-float loop: faster than tiny numpy ops for d <= 4
    Bl, cl, Ml = B.tolist(), c.tolist(), M.tolist()
    z = z0.tolist()
    rng = range(d)
    for k in range(n - 1):
        dt = float(times[k + 1] - times[k])
        sq = math.sqrt(dt)
        s = [sq * v for v in xi[k].tolist()]
        new = []
        for i in rng:
            mu = cl[i]
            row = Bl[i]
            for j in rng:
                mu += row[j] * z[j]
            dif = 0.0
            mrow = Ml[i]
            for j in rng:
                dif += mrow[j] * s[j]
            new.append(z[i] + mu * dt + dif)
        z = new
        states[k + 1] = z
    return states
