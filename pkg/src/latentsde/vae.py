"""Euler-Maruyama VAE: encoder q(z|x), decoder f, drift network and loss.

Per pair (x0, x1, dt) the closed-form objective is

    entropy        = -log det L0 - log det L1 - d
    prior          = nu/2 (tr S0 + |m0|^2)
    transition     = d/2 log dt + sum log D
                     + 1/(2 dt) sum_k (S0_kk + S1_kk + r_k^2) / D_k^2,
                     r = m1 - m0 - drift(m0) dt
    reconstruction = 1/(2 tau) (|f(z0~) - x0|^2 + |f(z1~) - x1|^2)

with S = L L^T and z~ = m + L eta.  Batch terms are means over pairs; the
l1 penalty lambda1 * sum D is added once.  D is fixed at 1 unless
``diffusion_diag`` is on.  Dropped constants (log 2pi, log nu, n/2 log tau)
are reported by :func:`loss_constants`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _backend, _rng
from .errors import InvalidInputError, TrainingDivergedError
from .lsde_io import read_array, read_json, write_array, write_json
from .nn import AdamState, Mlp, adam_step, backward_cached, flatten_grads, forward, forward_cached, init_mlp

TERMS = ("entropy", "prior", "transition", "reconstruction", "l1")
NET_NAMES = ("encoder_body", "mean_head", "chol_head", "decoder", "drift")


def child_seed(seed: int, index: int) -> int:
    return (_rng.stream_key(seed, "init") ^ (index + 1)) >> 1


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class VaeModel:
    encoder_body: Mlp
    mean_head: Mlp
    chol_head: Mlp
    decoder: Mlp
    drift: Mlp
    tau: float = 0.01
    nu: float = 0.0
    diffusion_diag: bool = False
    log_diag: np.ndarray = None
    lambda1: float = 0.0
    diagonal_cov: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.log_diag is None:
            self.log_diag = np.zeros(self.d)
        if self.tau <= 0 or self.nu < 0 or self.lambda1 < 0:
            raise InvalidInputError("need tau > 0, nu >= 0, lambda1 >= 0")

    @property
    def d(self) -> int:
        return self.mean_head.layer_widths[-1]

    @property
    def n(self) -> int:
        return self.encoder_body.layer_widths[0]

    @property
    def D(self) -> np.ndarray:
        return np.exp(self.log_diag) if self.diffusion_diag else np.ones(self.d)

    def nets(self):
        return [self.encoder_body, self.mean_head, self.chol_head, self.decoder, self.drift]

    @property
    def n_params(self) -> int:
        return sum(m.n_params for m in self.nets()) + self.d

    def get_flat(self) -> np.ndarray:
        return np.concatenate([m.get_flat() for m in self.nets()] + [self.log_diag])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise InvalidInputError(f"expected {self.n_params} parameters, got {vec.size}")
        off = 0
        for m in self.nets():
            m.set_flat(vec[off:off + m.n_params])
            off += m.n_params
        self.log_diag = vec[off:].copy()

    def copy(self) -> "VaeModel":
        other = VaeModel(*[m.copy() for m in self.nets()], tau=self.tau, nu=self.nu,
                         diffusion_diag=self.diffusion_diag, log_diag=self.log_diag.copy(),
                         lambda1=self.lambda1, diagonal_cov=self.diagonal_cov, seed=self.seed)
        return other

    def header(self) -> dict:
        return {
            "d": self.d, "n": self.n, "tau": self.tau, "nu": self.nu,
            "diffusion_diag": self.diffusion_diag, "lambda1": self.lambda1,
            "diagonal_cov": self.diagonal_cov, "seed": int(self.seed),
            "nets": {name: m.header() for name, m in zip(
                NET_NAMES, self.nets())},
        }

    def save(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "model.json", self.header())
        write_array(out / "params.bin", self.get_flat())

    @classmethod
    def load(cls, path) -> "VaeModel":
        path = Path(path)
        h = read_json(path / "model.json")
        nets = [init_mlp(spec["layer_widths"], spec["activation"], spec["seed"], init="zeros",
                         output_activation=spec["output_activation"])
                for spec in (h["nets"][name] for name in NET_NAMES)]
        model = cls(*nets, tau=h["tau"], nu=h["nu"], diffusion_diag=h["diffusion_diag"],
                    lambda1=h["lambda1"], diagonal_cov=h["diagonal_cov"], seed=h["seed"])
        model.set_flat(read_array(path / "params.bin").ravel())
        return model


def build_model(n: int, d: int, seed: int = 0, enc_hidden=(64, 64), dec_hidden=(64, 64),
                drift_hidden=(16, 16, 16), tau: float = 0.01, nu: float = 0.0,
                diffusion_diag: bool = False, lambda1: float = 0.0, diagonal_cov: bool = False
                ) -> VaeModel:
    """Leaky-ReLU encoder/decoder (Kaiming init) and a softplus drift net
    (Xavier init, gain 0.5)."""
    if n < 1 or d < 1:
        raise InvalidInputError("need positive n and d")
    enc_hidden, dec_hidden = list(enc_hidden), list(dec_hidden)
    body_out = enc_hidden[-1] if enc_hidden else n
    if enc_hidden:
        body = init_mlp([n] + enc_hidden, "leaky_relu", child_seed(seed, 0),
                        output_activation="leaky_relu")
    else:
        body = Mlp([n, n], "identity", [np.eye(n)], [np.zeros(n)], 0)
    n_chol = d if diagonal_cov else d * (d + 1) // 2
    mean_head = init_mlp([body_out, d], "identity", child_seed(seed, 1), init="xavier")
    chol_head = init_mlp([body_out, n_chol], "identity", child_seed(seed, 2), init="xavier")
    dec_act = "leaky_relu" if dec_hidden else "identity"
    decoder = init_mlp([d] + dec_hidden + [n], dec_act, child_seed(seed, 3))
    drift = init_mlp([d] + list(drift_hidden) + [d], "softplus", child_seed(seed, 4),
                     init="xavier", gain=0.5)
    return VaeModel(body, mean_head, chol_head, decoder, drift, tau=tau, nu=nu,
                    diffusion_diag=diffusion_diag, lambda1=lambda1, diagonal_cov=diagonal_cov,
                    seed=seed)


# ---------------------------------------------------------------- encoder

def _chol_index(d: int, diagonal_cov: bool):
    if diagonal_cov:
        idx = (np.arange(d), np.arange(d))
    else:
        idx = np.tril_indices(d)
    return idx, idx[0] == idx[1]


def _assemble_L(c, d, diagonal_cov):
    (rows, cols), diag = _chol_index(d, diagonal_cov)
    L = np.zeros(c.shape[:-1] + (d, d))
    vals = np.where(diag, softplus(c), c)
    L[..., rows, cols] = vals
    return L


def _encode_cached(model: VaeModel, x):
    h, body_cache = forward_cached(model.encoder_body, x)
    m, mean_cache = forward_cached(model.mean_head, h)
    c, chol_cache = forward_cached(model.chol_head, h)
    L = _assemble_L(c, model.d, model.diagonal_cov)
    return m, L, (c, body_cache, mean_cache, chol_cache)


def encode(model: VaeModel, x):
    """Return the encoder mean and lower-triangular Cholesky factor."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n:
        raise InvalidInputError(f"input width {x.shape[-1]} != model ambient width {model.n}")
    m, L, _ = _encode_cached(model, x)
    return m, L


def encode_mean(model: VaeModel, x) -> np.ndarray:
    return encode(model, x)[0]


# ---------------------------------------------------------------- loss

@dataclass
class LossBreakdown:
    entropy: float
    prior: float
    transition: float
    reconstruction: float
    l1: float

    @property
    def total(self) -> float:
        return self.entropy + self.prior + self.transition + self.reconstruction + self.l1

    def as_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


def loss_constants(model: VaeModel, batch: int = 1) -> dict:
    """Per-pair constants dropped from the objective, for logs."""
    d, n = model.d, model.n
    return {
        "entropy": -d * math.log(2 * math.pi),  # -(d/2) log 2pi per time point
        "prior": d / 2 * math.log(2 * math.pi) - (d / 2 * math.log(model.nu) if model.nu > 0 else 0.0),
        "transition": d / 2 * math.log(2 * math.pi),
        "reconstruction": n * math.log(2 * math.pi * model.tau),  # (n/2) log(2 pi tau) per point
    }


def reparam_noise(seed: int, epoch: int, n_pairs: int, d: int, stream: str = "reparam"
                  ) -> np.ndarray:
    """Standard normals of shape (2, n_pairs, d) keyed on (seed, epoch, pair, time, coord)."""
    key = _rng.stream_key(seed, stream)
    start = epoch * n_pairs * 2 * d
    return _backend.normals(key, start, 2 * n_pairs * d).reshape(n_pairs, 2, d).transpose(1, 0, 2)


def _check_batch(model, x0, x1, dt):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape or x0.shape[-1] != model.n:
        raise InvalidInputError(f"pairs must be (B, {model.n}), got {x0.shape} and {x1.shape}")
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (x0.shape[0],))
    if np.any(dt <= 0):
        raise InvalidInputError("dt must be positive")
    return x0, x1, dt


def loss(model: VaeModel, x0, x1, dt, eta, grad: bool = True):
    """Closed-form objective on a batch; returns (LossBreakdown, flat gradient or None).

    ``eta`` has shape (2, B, d): reparameterisation noise for x0 and x1.
    """
    x0, x1, dt = _check_batch(model, x0, x1, dt)
    B, d = x0.shape[0], model.d
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (2, B, d):
        raise InvalidInputError(f"eta must have shape (2, {B}, {d}), got {eta.shape}")
    w = 1.0 / B
    X = np.concatenate([x0, x1])
    m, L, enc_cache = _encode_cached(model, X)
    E = eta.reshape(2 * B, d)
    zt = m + np.einsum("bij,bj->bi", L, E)
    xhat, dec_cache = forward_cached(model.decoder, zt)
    diff = xhat - X
    diagL = np.diagonal(L, axis1=-2, axis2=-1)
    D = model.D
    inv_D2 = 1.0 / (D * D)
    m0, m1 = m[:B], m[B:]
    mu, drift_cache = forward_cached(model.drift, m0)
    r = m1 - m0 - mu * dt[:, None]
    S_diag = np.einsum("bij,bij->bi", L, L)  # diag of L L^T
    S0, S1 = S_diag[:B], S_diag[B:]

    with np.errstate(all="ignore"):
        ent = w * (-np.log(diagL).sum() - B * d)
        pri = w * 0.5 * model.nu * (np.sum(L[:B] ** 2) + np.sum(m0 ** 2))
        quad = ((S0 + S1 + r * r) * inv_D2).sum(axis=1) / (2.0 * dt)
        trans = w * (0.5 * d * np.log(dt).sum() + B * model.log_diag.sum() * model.diffusion_diag
                     + quad.sum())
        rec = w * np.sum(diff * diff) / (2.0 * model.tau)
        l1 = model.lambda1 * D.sum() if model.diffusion_diag else 0.0
    parts = LossBreakdown(float(ent), float(pri), float(trans), float(rec), float(l1))
    for name in TERMS:
        if not np.isfinite(getattr(parts, name)):
            raise TrainingDivergedError(f"non-finite {name} term", term=name)
    if not grad:
        return parts, None

    # reconstruction -> decoder -> z~
    gz, dec_grads = backward_cached(model.decoder, dec_cache, w * diff / model.tau)
    gm = gz.copy()
    gL = np.einsum("bi,bj->bij", gz, E)
    # entropy
    gdiag = -w / diagL
    # prior (time-0 rows)
    gm[:B] += w * model.nu * m0
    gL[:B] += w * model.nu * L[:B]
    # transition
    coef = (w / dt)[:, None] * inv_D2  # (B, d)
    gL[:B] += coef[:, :, None] * L[:B]
    gL[B:] += coef[:, :, None] * L[B:]
    gr = coef * r
    gm[B:] += gr
    gm[:B] -= gr
    gmu_in, drift_grads = backward_cached(model.drift, drift_cache, -gr * dt[:, None])
    gm[:B] += gmu_in
    if model.diffusion_diag:
        g_logD = 1.0 - w * ((S0 + S1 + r * r) * inv_D2 / dt[:, None]).sum(axis=0)
        g_logD = g_logD + model.lambda1 * D
    else:
        g_logD = np.zeros(d)
    # Cholesky assembly
    (rows, cols), is_diag = _chol_index(d, model.diagonal_cov)
    c, body_cache, mean_cache, chol_cache = enc_cache
    gLv = gL[:, rows, cols]
    gLv = gLv + np.where(is_diag, gdiag[:, rows], 0.0)
    gc = np.where(is_diag, gLv * sigmoid(c), gLv)
    gh1, mean_grads = backward_cached(model.mean_head, mean_cache, gm)
    gh2, chol_grads = backward_cached(model.chol_head, chol_cache, gc)
    _, body_grads = backward_cached(model.encoder_body, body_cache, gh1 + gh2)
    flat = np.concatenate([flatten_grads(body_grads), flatten_grads(mean_grads),
                           flatten_grads(chol_grads), flatten_grads(dec_grads),
                           flatten_grads(drift_grads), g_logD])
    return parts, flat


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 1500
    lr: float = 1e-3
    decay: float = 0.997
    val_size: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


@dataclass
class TrainResult:
    model: VaeModel
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")


def _split(dataset, val_size):
    N = len(dataset)
    if val_size < 0 or val_size >= N:
        raise InvalidInputError(f"validation size {val_size} must be in [0, {N})")
    cut = N - val_size
    tr = (dataset.x0[:cut], dataset.x1[:cut], dataset.dt[:cut])
    va = (dataset.x0[cut:], dataset.x1[cut:], dataset.dt[cut:])
    return tr, va


def train(model: VaeModel, dataset, cfg: TrainConfig, callback=None) -> TrainResult:
    """Full-batch Adam with exponential LR decay; keeps the best-validation
    parameters (trailing ``val_size`` pairs, fixed reparameterisation noise)."""
    if dataset.ambient_dim != model.n:
        raise InvalidInputError(f"dataset width {dataset.ambient_dim} != model width {model.n}")
    model = model.copy()
    (x0, x1, dt), (v0, v1, vdt) = _split(dataset, cfg.val_size)
    B, d = len(dt), model.d
    val_eta = reparam_noise(cfg.seed, 0, len(vdt), d, stream="val")

    def val_total():
        if len(vdt) == 0:
            return loss(model, x0, x1, dt, reparam_noise(cfg.seed, 0, B, d, "val"), grad=False)[0].total
        return loss(model, v0, v1, vdt, val_eta, grad=False)[0].total

    state = AdamState.for_params([np.zeros(model.n_params)], lr=cfg.lr, beta1=cfg.beta1,
                                 beta2=cfg.beta2, eps=cfg.eps_adam, decay=cfg.decay)
    best_val = val_total()
    best = model.get_flat()
    best_epoch = 0
    log = []
    for epoch in range(cfg.epochs):
        eta = reparam_noise(cfg.seed, epoch, B, d)
        try:
            parts, g = loss(model, x0, x1, dt, eta)
            (flat,) = adam_step(state, [model.get_flat()], [g])
        except TrainingDivergedError as exc:
            exc.epoch = epoch
            raise TrainingDivergedError(f"epoch {epoch}: {exc}", term=exc.term, epoch=epoch) from exc
        model.set_flat(flat)
        state.end_epoch()
        try:
            v = val_total()
        except TrainingDivergedError:
            v = float("inf")
        row = {"epoch": epoch + 1, **parts.as_dict(), "val_total": v}
        log.append(row)
        if v < best_val:
            best_val, best, best_epoch = v, model.get_flat(), epoch + 1
        if callback is not None:
            callback(row)
    model.set_flat(best)
    return TrainResult(model, log, best_epoch, best_val)


# ---------------------------------------------------------------- generation

def generate_pairs(model: VaeModel, z0, dt, seed: int):
    """Sample z1 ~ N(z0 + drift(z0) dt, dt D^2) and decode both with N(0, tau I) noise.

    Returns (x0, x1, z0, z1).
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    B, d, n = z0.shape[0], model.d, model.n
    key = _rng.stream_key(seed, "generate")
    xi = _backend.normals(key, 0, B * d).reshape(B, d)
    eps = _backend.normals(key, B * d, 2 * B * n).reshape(2, B, n)
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (B,))[:, None]
    z1 = z0 + forward(model.drift, z0) * dt + np.sqrt(dt) * model.D * xi
    s = math.sqrt(model.tau)
    x0 = forward(model.decoder, z0) + s * eps[0]
    x1 = forward(model.decoder, z1) + s * eps[1]
    return x0, x1, z0, z1


@dataclass
class LinearGaussianModel:
    """Linear decoder, linear drift, Gaussian prior: the pair density is Gaussian.

    z0 ~ N(prior_mean, prior_cov); z1 = z0 + (B z0 + c) dt + sqrt(dt) xi;
    x = A z + a + sqrt(tau) eps.
    """

    A: np.ndarray
    a: np.ndarray
    B: np.ndarray
    c: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    tau: float
    dt: float

    def _joint(self):
        d = self.B.shape[0]
        n = self.A.shape[0]
        F = np.eye(d) + self.B * self.dt
        mz0 = self.prior_mean
        mz1 = F @ mz0 + self.c * self.dt
        P = self.prior_cov
        C = np.block([[P, P @ F.T], [F @ P, F @ P @ F.T + self.dt * np.eye(d)]])
        AA = np.kron(np.eye(2), self.A)
        mean = np.concatenate([self.A @ mz0 + self.a, self.A @ mz1 + self.a])
        cov = AA @ C @ AA.T + self.tau * np.eye(2 * n)
        return mean, cov

    def pair_logpdf(self, x0, x1) -> np.ndarray:
        mean, cov = self._joint()
        X = np.concatenate([np.atleast_2d(x0), np.atleast_2d(x1)], axis=1) - mean
        chol = np.linalg.cholesky(cov)
        sol = np.linalg.solve(chol, X.T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        k = cov.shape[0]
        return -0.5 * (np.sum(sol * sol, axis=0) + logdet + k * math.log(2 * math.pi))

    def transformed(self, Q, b) -> "LinearGaussianModel":
        """Same pair law in coordinates z' = Q z + b."""
        Q = np.asarray(Q, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        Bq = Q @ self.B @ Q.T
        return LinearGaussianModel(
            A=self.A @ Q.T, a=self.a - self.A @ Q.T @ b, B=Bq, c=Q @ self.c - Bq @ b,
            prior_mean=Q @ self.prior_mean + b, prior_cov=Q @ self.prior_cov @ Q.T,
            tau=self.tau, dt=self.dt)

    def sample(self, count: int, seed: int):
        d, n = self.B.shape[0], self.A.shape[0]
        key = _rng.stream_key(seed, "generate")
        u = _backend.normals(key, 0, count * (2 * d + 2 * n)).reshape(count, -1)
        z0 = self.prior_mean + u[:, :d] @ np.linalg.cholesky(self.prior_cov).T
        z1 = z0 + (z0 @ self.B.T + self.c) * self.dt + math.sqrt(self.dt) * u[:, d:2 * d]
        s = math.sqrt(self.tau)
        x0 = z0 @ self.A.T + self.a + s * u[:, 2 * d:2 * d + n]
        x1 = z1 @ self.A.T + self.a + s * u[:, 2 * d + n:]
        return x0, x1
