# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled counter-based RNG and Euler-Maruyama kernels.

Same recipe as ``latentsde._rng``; see that module for the definition.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, sqrt
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _mix64(uint64_t x) noexcept nogil:
    x ^= x >> 30
    x *= 0xBF58476D1CE4E5B9ULL
    x ^= x >> 27
    x *= 0x94D049BB133111EBULL
    x ^= x >> 31
    return x


cdef inline double _uniform(uint64_t key, uint64_t i) noexcept nogil:
    cdef uint64_t u = _mix64(key + (i + 1) * GOLDEN) >> 11
    return (<double>u + 0.5) * (1.0 / 9007199254740992.0)


cdef inline double _ndtri(double p) noexcept nogil:
    cdef double q = p - 0.5
    cdef double r, val
    if q <= 0.425 and q >= -0.425:
        r = 0.180625 - q * q
        return q * (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                         + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                       + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                     + 1.3314166789178437745e2) * r + 3.3871328727963666080e0) / \
            (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                  + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
              + 4.2313330701600911252e1) * r + 1.0)
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = sqrt(-log(r))
    if r <= 5.0:
        r = r - 1.6
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0) / \
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                  + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
              + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0) / \
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                  + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
              + 5.99832206555887937690e-1) * r + 1.0)
    if q < 0.0:
        return -val
    return val


def uniforms(uint64_t key, uint64_t start, Py_ssize_t count):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(count, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            o[i] = _uniform(key, start + <uint64_t>i)
    return out


def normals(uint64_t key, uint64_t start, Py_ssize_t count):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(count, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            o[i] = _ndtri(_uniform(key, start + <uint64_t>i))
    return out


def ndtri(p):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pa = np.ascontiguousarray(p, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(pa)
    cdef double[::1] pv = pa
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(pa.shape[0]):
            o[i] = _ndtri(pv[i])
    return out.reshape(np.shape(p))


def em_affine(z0, times, drift_matrix, drift_offset, diffusion, uint64_t key):
    cdef double[::1] z0v = np.ascontiguousarray(z0, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(times, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(drift_matrix, dtype=np.float64)
    cdef double[::1] c = np.ascontiguousarray(drift_offset, dtype=np.float64)
    cdef double[:, ::1] M = np.ascontiguousarray(diffusion, dtype=np.float64)
    cdef Py_ssize_t d = z0v.shape[0]
    cdef Py_ssize_t n = tv.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] S = out
    cdef double[::1] s = np.empty(d, dtype=np.float64)
    cdef Py_ssize_t k, i, j
    cdef double dt, sq, mu, dif
    for i in range(d):
        S[0, i] = z0v[i]
    with nogil:
        for k in range(n - 1):
            dt = tv[k + 1] - tv[k]
            sq = sqrt(dt)
            for j in range(d):
                s[j] = sq * _ndtri(_uniform(key, <uint64_t>(k * d + j)))
            for i in range(d):
                mu = c[i]
                for j in range(d):
                    mu = mu + B[i, j] * S[k, j]
                dif = 0.0
                for j in range(d):
                    dif = dif + M[i, j] * s[j]
                S[k + 1, i] = S[k, i] + mu * dt + dif
    return out
