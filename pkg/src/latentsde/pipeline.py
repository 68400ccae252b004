"""generate -> train -> evaluate, repeats and latent-size search.

Each run writes into its own directory:

    config.json    the fully expanded ExperimentConfig
    dataset/       PairedDataset files
    model/         model.json + params.bin
    loss_log.csv   one row per epoch
    metrics.json   MetricsReport fields plus provenance (no timestamps)

Repeats go to ``run_000``, ``run_001``, ... and the parent gets a
``metrics.csv`` with mean and std per metric.
"""
from __future__ import annotations

import contextlib
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .datasets import PairedDataset, generate, make_ambient_map
from .errors import DegenerateDataError, InvalidInputError, LatentSdeError
from .evaluation import (MetricsReport, diffusion_diag_report, evaluate_model,
                         select_linear_dimension)
from .sde import catalog
from .vae import TrainConfig, VaeModel, build_model, train

LOG_COLUMNS = ("epoch", "entropy", "prior", "transition", "reconstruction", "l1", "total", "val_total")
METRIC_NAMES = ("L_latent", "L_mu", "reconstruction_mse", "crlb")
RESULTS_COLUMNS = ("dataset", "sde", "L_latent", "L_mu", "CRLB", "recon_mse")


@contextlib.contextmanager
def stage(name: str):
    """Tag any package error raised inside with the pipeline stage."""
    try:
        yield
    except LatentSdeError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise


def max_workers(default: int = 1) -> int:
    raw = os.environ.get("LSDE_THREADS", "")
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise InvalidInputError(f"LSDE_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise InvalidInputError(f"LSDE_THREADS must be a positive integer, got {raw!r}")
    return value


# ---------------------------------------------------------------- stages

def build_dataset(cfg: ExperimentConfig) -> PairedDataset:
    ds = cfg.dataset
    spec = catalog(ds.spec)
    amap = make_ambient_map(ds.map, spec.dim, ds.n, ds.map_seed, side=ds.side)
    return generate(ds.spec, amap, ds.steps, ds.dt, ds.noise, ds.rescale_enabled(), ds.seed,
                    ds.trajectories)


def build_model_for(cfg: ExperimentConfig, n: int, d: Optional[int] = None) -> VaeModel:
    m = cfg.model
    return build_model(n, cfg.latent_dim if d is None else d, seed=m.seed,
                       enc_hidden=m.enc_hidden, dec_hidden=m.dec_hidden,
                       drift_hidden=m.drift_hidden, tau=m.tau, nu=m.nu,
                       diffusion_diag=m.diffusion_diag, lambda1=m.lambda1,
                       diagonal_cov=m.diagonal_cov)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(epochs=t.epochs, lr=t.lr, decay=t.decay, val_size=t.val_size, seed=t.seed)


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(row[k])) if k != "epoch" else int(row[k]) for k in LOG_COLUMNS})


def evaluate(model: VaeModel, dataset: PairedDataset, alignment: str = "orthogonal",
             truth: str = "raw") -> MetricsReport:
    spec = catalog(dataset.meta["spec"])
    if dataset.latent_dim is not None and model.d != dataset.latent_dim:
        raise DegenerateDataError(
            f"model latent size {model.d} differs from the true dimension {dataset.latent_dim}; "
            "L_latent and L_mu are undefined (use dimsearch)")
    return evaluate_model(model, dataset, spec, alignment, truth)


def metrics_payload(report: MetricsReport, cfg: ExperimentConfig, train_info: dict) -> dict:
    out = report.as_dict()
    out["provenance"] = {
        "config_hash": cfg.hash(),
        "seeds": {"dataset": cfg.dataset.seed, "map": cfg.dataset.map_seed,
                  "model": cfg.model.seed, "training": cfg.training.seed},
        "version": __version__,
    }
    out["training"] = train_info
    return out


def append_results_row(path, report: MetricsReport, dataset_name: str, sde: str) -> None:
    """Append one row to a results table (header written on first use)."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULTS_COLUMNS)
        w.writerow([dataset_name, sde, repr(report.L_latent), repr(report.L_mu), repr(report.crlb),
                    repr(report.reconstruction_mse)])


# ---------------------------------------------------------------- runs

@dataclass
class RunResult:
    out: Path
    metrics: dict
    best_epoch: int = 0


def run_single(cfg: ExperimentConfig, out) -> RunResult:
    from .lsde_io import write_json

    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    with stage("generate"):
        dataset = build_dataset(cfg)
        dataset.save(out / "dataset")
    with stage("train"):
        model = build_model_for(cfg, dataset.ambient_dim)
        result = train(model, dataset, train_config(cfg))
        result.model.save(out / "model")
        write_loss_log(out / "loss_log.csv", result.log)
    with stage("evaluate"):
        report = evaluate(result.model, dataset, cfg.evaluation.alignment, cfg.evaluation.truth)
        info = {"best_epoch": result.best_epoch, "best_val": float(result.best_val),
                "epochs": cfg.training.epochs}
        if result.model.diffusion_diag:
            diag = diffusion_diag_report(result.model, cfg.evaluation.diag_threshold)
            info["diffusion_diag"] = diag.values.tolist()
        payload = metrics_payload(report, cfg, info)
        write_json(out / "metrics.json", payload)
    return RunResult(out, payload, result.best_epoch)


def _run_child(args):
    cfg_dict, out = args
    return run_single(ExperimentConfig.from_dict(cfg_dict), out).metrics


def summarize(metrics: list) -> dict:
    """mean and std (population, ddof=0) of each metric over runs."""
    summary = {}
    for name in METRIC_NAMES:
        vals = np.array([m[name] for m in metrics], dtype=np.float64)
        summary[name] = {"mean": float(vals.mean()), "std": float(vals.std()),
                         "values": vals.tolist()}
    return summary


def write_summary_csv(path, summary: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std", "count"])
        for name, s in summary.items():
            w.writerow([name, repr(s["mean"]), repr(s["std"]), len(s["values"])])


def run_experiment(cfg: ExperimentConfig, out, repeat: int = 1, workers: Optional[int] = None) -> dict:
    """Run the pipeline ``repeat`` times varying only training and model seeds.

    Run i uses seeds (training.seed + i, model.seed + i).  With repeat > 1
    each run gets ``out/run_{i:03d}``; ``metrics.csv`` and ``summary.json``
    aggregate them.  Returns the summary dict.
    """
    from .lsde_io import write_json

    if repeat < 1:
        raise InvalidInputError("repeat must be at least 1")
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if repeat == 1:
        metrics = [run_single(cfg, out).metrics]
    else:
        jobs = [(cfg.with_seeds(cfg.training.seed + i, cfg.model.seed + i).to_dict(),
                 str(out / f"run_{i:03d}")) for i in range(repeat)]
        workers = min(repeat, max_workers() if workers is None else workers)
        if workers == 1:
            metrics = [_run_child(j) for j in jobs]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                metrics = list(pool.map(_run_child, jobs))
    summary = {"config_hash": cfg.hash(), "repeat": repeat, "metrics": summarize(metrics)}
    write_summary_csv(out / "metrics.csv", summary["metrics"])
    if repeat > 1:
        write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- dimension search

@dataclass
class DimsearchResult:
    mode: str
    selected: Optional[int]
    rows: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "selected": self.selected, "rows": self.rows}


def dimsearch(cfg: ExperimentConfig, out=None, dataset: Optional[PairedDataset] = None
              ) -> DimsearchResult:
    """Pick a latent size from ``evaluation.candidates``.

    linear_likelihood: fitted linear-Gaussian log-likelihood per candidate,
    argmax wins; refused unless the dataset map is linear.
    diag_heuristic: trains a diagonal-diffusion model per candidate and
    reports the sorted |D|; the selection is the count of entries at or above
    ``diag_threshold`` times the leading one, at the largest candidate.
    """
    cfg.validate()
    ev = cfg.evaluation
    if dataset is None:
        with stage("generate"):
            dataset = build_dataset(cfg)
    kind = dataset.meta.get("map", {}).get("kind", cfg.dataset.map)
    if ev.dimsearch_mode == "linear_likelihood":
        if kind != "linear":
            raise InvalidInputError(
                f"linear_likelihood dimension selection only covers linear maps; dataset map is {kind!r}")
        candidates = [int(c) for c in ev.candidates] or list(range(1, min(dataset.ambient_dim, 2 * cfg.latent_dim + 1) + 1))
        with stage("dimsearch"):
            j, fits = select_linear_dimension(dataset.x0, dataset.x1, dataset.dt, candidates)
        rows = [{"candidate": f.j, "loglik": f.loglik} for f in fits]
        result = DimsearchResult(ev.dimsearch_mode, j, rows)
    else:
        candidates = [int(c) for c in ev.candidates] or [cfg.latent_dim]
        diag_cfg = ExperimentConfig.from_dict(cfg.to_dict())
        diag_cfg.model.diffusion_diag = True
        rows, reports = [], {}
        for c in sorted(candidates):
            with stage("train"):
                model = build_model_for(diag_cfg, dataset.ambient_dim, d=c)
                res = train(model, dataset, train_config(diag_cfg))
            rep = diffusion_diag_report(res.model, ev.diag_threshold)
            reports[c] = rep
            rows.append({"candidate": c, "diagonals": rep.values.tolist(),
                         "count_above": rep.count_above, "suggested": rep.suggested_dim})
        result = DimsearchResult(ev.dimsearch_mode, reports[max(candidates)].count_above, rows)
    if out is not None:
        from .lsde_io import write_json

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        write_json(out / "dimsearch.json", result.as_dict())
    return result
