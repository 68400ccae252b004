"""Recovery metrics up to isometry, CRLB baselines and latent-size criteria."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateDataError, InvalidInputError

PDET_RTOL = 1e-10


@dataclass
class AlignmentResult:
    """Best ``Q a + b`` approximation of truth points by estimates ``a``."""

    Q: np.ndarray
    b: np.ndarray
    residual: float
    mode: str = "orthogonal"

    def apply(self, points) -> np.ndarray:
        """Map row-vector estimates into truth coordinates."""
        return np.asarray(points) @ self.Q.T + self.b

    def inverse(self, points) -> np.ndarray:
        """Map truth coordinates back into estimate coordinates."""
        y = np.asarray(points) - self.b
        if self.mode == "orthogonal":
            return y @ self.Q
        return np.linalg.solve(self.Q, y.T).T


def procrustes(A, B, mode: str = "orthogonal") -> AlignmentResult:
    """min over Q, b of (1/N) ||Q A + b 1^T - B||_F^2 for d x N point sets.

    Orthogonal: Q = U V^T from the SVD of B~ A~^T (reflections allowed).
    Affine: Q = B~ A~^T (A~ A~^T)^{-1}.  In both, b = (1/N)(B - Q A) 1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape != B.shape:
        raise InvalidInputError(f"point sets differ in shape: {A.shape} vs {B.shape}")
    d, N = A.shape
    if N < d + 1:
        raise InvalidInputError(f"need at least d+1 = {d + 1} points, got {N}")
    if mode not in ("orthogonal", "affine"):
        raise InvalidInputError(f"unknown alignment mode {mode!r}")
    a_bar = A.mean(axis=1, keepdims=True)
    b_bar = B.mean(axis=1, keepdims=True)
    At, Bt = A - a_bar, B - b_bar
    if mode == "orthogonal":
        U, _, Vt = np.linalg.svd(Bt @ At.T)
        Q = U @ Vt
    else:
        G = At @ At.T
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise DegenerateDataError("estimates are rank deficient; affine alignment undefined")
        Q = np.linalg.solve(G, At @ Bt.T).T
    b = (b_bar - Q @ a_bar)[:, 0]
    res = float(np.sum((Q @ A + b[:, None] - B) ** 2) / N)
    return AlignmentResult(Q, b, res, mode)


def latent_mse(estimates, truth, mode: str = "orthogonal"):
    """L_latent for row-vector point sets (N x d); returns (value, alignment)."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    al = procrustes(est.T, tru.T, mode)
    return al.residual, al


def drift_mse(drift_fn: Callable, true_mu: Callable, alignment: AlignmentResult, points,
              t: float = 0.0) -> float:
    """Mean of |Q drift(Q^{-1}(x - b)) - mu(x)|^2 over truth points x."""
    x = np.asarray(points, dtype=np.float64)
    est = drift_fn(alignment.inverse(x))
    diff = est @ alignment.Q.T - true_mu(x, t)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def crlb(d: int, dt: float, N: int) -> float:
    """Cramer-Rao bound d / (dt N) on the drift mean squared error."""
    if d <= 0 or dt <= 0 or N <= 0:
        raise InvalidInputError("crlb needs positive d, dt and N")
    return d / (dt * N)


# ---------------------------------------------------------------- linear likelihood

def _pinv_pdet(C, rtol=PDET_RTOL):
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    keep = w > rtol * max(w.max(), 0.0)
    wk, Vk = w[keep], V[:, keep]
    return Vk, wk


def linear_loglik(A, x0, x1, dt, mu: Callable, sigma: Callable, tol: float = 1e-8) -> float:
    """Log-likelihood of increments under X = A Z with dZ = mu dt + sigma dW.

    I ~ N(A mu(A^+ x0) dt, A sigma sigma^T A^T dt) with pseudo-determinant and
    pseudo-inverse.  Returns -inf when A is rank deficient (likelihood
    undefined) or an increment leaves the covariance column space.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (x0.shape[0],))
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.min() <= PDET_RTOL * sv.max():
        return -math.inf
    Ap = np.linalg.pinv(A)
    z = x0 @ Ap.T
    drift = mu(z)
    sig = sigma(z)
    total = 0.0
    for i in range(x0.shape[0]):
        s = np.atleast_2d(sig[i])
        C = A @ s @ s.T @ A.T * dt[i]
        V, w = _pinv_pdet(C)
        r = (x1[i] - x0[i]) - A @ drift[i] * dt[i]
        proj = V.T @ r
        outside = np.linalg.norm(r - V @ proj)
        if outside > tol * (1.0 + np.linalg.norm(r)):
            return -math.inf
        total += -0.5 * (np.log(w).sum() + np.sum(proj * proj / w) + len(w) * math.log(2 * math.pi))
    return float(total)


@dataclass
class LinearFit:
    j: int
    A: np.ndarray
    drift_matrix: np.ndarray
    drift_offset: np.ndarray
    diffusion: np.ndarray
    loglik: float


def fit_linear_candidate(x0, x1, dt, j: int) -> LinearFit:
    """Estimate A_j from the top-j principal directions, then fit an affine
    drift and constant diffusion in that latent space by least squares."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (x0.shape[0],))
    N, n = x0.shape
    if not 1 <= j <= n:
        raise InvalidInputError(f"candidate size {j} outside [1, {n}]")
    pts = np.vstack([x0, x1[-1:]])
    U, S, _ = np.linalg.svd((pts - pts.mean(axis=0)).T, full_matrices=False)
    A = U[:, :j] * (S[:j] / math.sqrt(len(pts)))
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.min() <= PDET_RTOL * sv.max():
        return LinearFit(j, A, np.zeros((j, j)), np.zeros(j), np.zeros((j, j)), -math.inf)
    Ap = np.linalg.pinv(A)
    z0, z1 = x0 @ Ap.T, x1 @ Ap.T
    y = (z1 - z0) / dt[:, None]
    design = np.column_stack([z0, np.ones(N)])
    w = np.sqrt(dt)[:, None]  # weighted LS: Var(y) is proportional to 1/dt
    coef, *_ = np.linalg.lstsq(design * w, y * w, rcond=None)
    Bm, c = coef[:j].T, coef[j]
    resid = (z1 - z0) - (z0 @ Bm.T + c) * dt[:, None]
    cov = (resid / np.sqrt(dt)[:, None]).T @ (resid / np.sqrt(dt)[:, None]) / N
    ev, V = np.linalg.eigh(cov)
    sig = V @ np.diag(np.sqrt(np.clip(ev, 0, None))) @ V.T
    ll = linear_loglik(A, x0, x1, dt, lambda z: z @ Bm.T + c,
                       lambda z: np.broadcast_to(sig, (len(z), j, j)))
    return LinearFit(j, A, Bm, c, sig, ll)


def select_linear_dimension(x0, x1, dt, candidates):
    """argmax_j of the fitted linear log-likelihood; ties go to the smaller j."""
    fits = [fit_linear_candidate(x0, x1, dt, j) for j in candidates]
    best = max(fits, key=lambda f: (f.loglik, -f.j))
    if not np.isfinite(best.loglik):
        raise DegenerateDataError("no candidate size gives a finite likelihood")
    return best.j, fits


# ---------------------------------------------------------------- diag heuristic

@dataclass
class DiagReport:
    values: np.ndarray  # |D_i| sorted descending
    threshold: float
    count_above: int

    @property
    def suggested_dim(self) -> Optional[int]:
        """Count of entries >= threshold x leading entry; None if all pass."""
        return self.count_above if self.count_above < len(self.values) else None


def diffusion_diag_report(model, threshold: float = 0.1) -> DiagReport:
    vals = np.sort(np.abs(np.asarray(model.D, dtype=np.float64)))[::-1]
    count = int(np.sum(vals >= threshold * vals[0]))
    return DiagReport(vals, threshold, count)


# ---------------------------------------------------------------- report

@dataclass
class MetricsReport:
    L_latent: float
    L_mu: float
    reconstruction_mse: float
    crlb: float
    n_pairs: int
    d: int
    dt: float
    alignment_mode: str = "orthogonal"
    truth: str = "raw"
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        vals = [self.L_latent, self.L_mu, self.reconstruction_mse, self.crlb]
        if not all(np.isfinite(vals)) or self.crlb <= 0:
            raise DegenerateDataError(f"metrics not finite: {vals}")


def evaluate_model(model, dataset, spec, mode: str = "orthogonal", truth: str = "raw") -> MetricsReport:
    """L_latent / L_mu against the dataset's latent truth plus reconstruction MSE.

    ``truth='raw'`` undoes any stored rescale first (the unit-diffusion scale
    the model is trained on); ``'rescaled'`` compares with latent0 as stored.
    """
    from .nn import forward
    from .vae import encode_mean

    if dataset.latent0 is None:
        raise InvalidInputError("dataset has no latent truth")
    if truth == "raw":
        z0, _ = dataset.raw_latent()
    elif truth == "rescaled":
        z0 = dataset.latent0
    else:
        raise InvalidInputError(f"unknown truth {truth!r}")
    if z0.shape[1] != model.d:
        raise InvalidInputError(f"model latent size {model.d} != truth dimension {z0.shape[1]}")
    est = encode_mean(model, dataset.x0)
    L_lat, al = latent_mse(est, z0, mode)
    L_mu = drift_mse(lambda z: forward(model.drift, z), spec.drift, al, z0)
    target = dataset.clean0 if dataset.clean0 is not None else dataset.x0
    recon = float(np.mean((forward(model.decoder, est) - target) ** 2))
    dt = float(np.mean(dataset.dt))
    rep = MetricsReport(L_lat, L_mu, recon, crlb(model.d, dt, len(dataset)), len(dataset), model.d,
                        dt, mode, truth)
    rep.check()
    return rep
