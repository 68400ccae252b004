"""Experiment configuration: four blocks, JSON round-trip and a stable hash.

Every random quantity has an explicit seed field defaulting to 0; the
serialised form always writes every field back, so a config read from an
output directory reproduces that directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .datasets import MAP_KINDS, NoiseSpec
from .errors import InvalidInputError
from .sde import catalog

ALIGNMENTS = ("orthogonal", "affine")
DIMSEARCH_MODES = ("diag_heuristic", "linear_likelihood")


@dataclass
class DatasetConfig:
    spec: str = "ou2d"
    map: str = "random_smooth"
    n: int = 32
    steps: int = 1000
    dt: Union[float, list] = 0.01
    noise: str = "none"
    rescale: str = "auto"  # auto = only for raster_ball
    trajectories: int = 1
    side: Optional[int] = None
    seed: int = 0
    map_seed: int = 0

    def rescale_enabled(self) -> bool:
        if self.rescale == "auto":
            return self.map == "raster_ball"
        return self.rescale == "on"


@dataclass
class ModelConfig:
    d: Optional[int] = None  # None: the SDE's dimension
    enc_hidden: list = field(default_factory=lambda: [64, 64])
    dec_hidden: list = field(default_factory=lambda: [64, 64])
    drift_hidden: list = field(default_factory=lambda: [16, 16, 16])
    tau: float = 0.01
    nu: float = 0.0
    diffusion_diag: bool = False
    lambda1: float = 0.0
    diagonal_cov: bool = False
    seed: int = 0


@dataclass
class TrainingConfig:
    epochs: int = 1500
    lr: float = 1e-3
    decay: float = 0.999
    val_size: int = 100
    seed: int = 0


@dataclass
class EvaluationConfig:
    alignment: str = "orthogonal"
    truth: str = "raw"
    diag_threshold: float = 0.1
    dimsearch_mode: str = "diag_heuristic"
    candidates: list = field(default_factory=list)


_BLOCKS = {"dataset": DatasetConfig, "model": ModelConfig, "training": TrainingConfig,
           "evaluation": EvaluationConfig}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def latent_dim(self) -> int:
        return self.model.d if self.model.d is not None else catalog(self.dataset.spec).dim

    def validate(self) -> "ExperimentConfig":
        ds, m, tr, ev = self.dataset, self.model, self.training, self.evaluation
        spec = catalog(ds.spec)  # NotFoundError lists the catalog
        if ds.map not in MAP_KINDS:
            raise InvalidInputError(f"unknown map kind {ds.map!r}; expected one of {MAP_KINDS}")
        if ds.n < spec.dim:
            raise InvalidInputError(f"ambient n={ds.n} is smaller than latent dim {spec.dim}")
        if ds.steps < 1 or ds.trajectories < 1:
            raise InvalidInputError("steps and trajectories must be positive")
        dts = ds.dt if isinstance(ds.dt, list) else [ds.dt]
        if not dts or min(dts) <= 0:
            raise InvalidInputError("dt must be positive")
        if isinstance(ds.dt, list) and len(ds.dt) != ds.steps:
            raise InvalidInputError(f"dt schedule has {len(ds.dt)} entries, expected {ds.steps}")
        NoiseSpec.parse(ds.noise)
        if ds.rescale not in ("auto", "on", "off"):
            raise InvalidInputError(f"rescale must be auto, on or off, got {ds.rescale!r}")
        if m.d is not None and m.d < 1:
            raise InvalidInputError("model d must be positive")
        if m.tau <= 0 or m.nu < 0 or m.lambda1 < 0:
            raise InvalidInputError("need tau > 0, nu >= 0, lambda1 >= 0")
        if tr.epochs < 0 or tr.lr <= 0 or not 0 < tr.decay <= 1:
            raise InvalidInputError("need epochs >= 0, lr > 0, 0 < decay <= 1")
        if not 0 <= tr.val_size < ds.steps * ds.trajectories:
            raise InvalidInputError(f"val_size {tr.val_size} must be below the pair count")
        if ev.alignment not in ALIGNMENTS:
            raise InvalidInputError(f"alignment must be one of {ALIGNMENTS}")
        if ev.truth not in ("raw", "rescaled"):
            raise InvalidInputError("truth must be raw or rescaled")
        if ev.dimsearch_mode not in DIMSEARCH_MODES:
            raise InvalidInputError(f"dimsearch mode must be one of {DIMSEARCH_MODES}")
        if not 0 < ev.diag_threshold < 1:
            raise InvalidInputError("diag_threshold must lie in (0, 1)")
        if any(int(c) < 1 for c in ev.candidates):
            raise InvalidInputError("candidate sizes must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_BLOCKS)
        if unknown:
            raise InvalidInputError(f"unknown config block(s) {sorted(unknown)}")
        blocks = {}
        for name, klass in _BLOCKS.items():
            raw = dict(data.get(name) or {})
            allowed = {f.name for f in fields(klass)}
            bad = set(raw) - allowed
            if bad:
                raise InvalidInputError(f"unknown {name} field(s) {sorted(bad)}")
            blocks[name] = klass(**raw)
        return cls(**blocks)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidInputError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def hash(self) -> str:
        """sha256 of the canonical JSON, truncated to 16 hex digits."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_seeds(self, training: int, model: int) -> "ExperimentConfig":
        out = ExperimentConfig.from_dict(self.to_dict())
        out.training.seed = training
        out.model.seed = model
        return out
