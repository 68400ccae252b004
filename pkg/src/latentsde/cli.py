"""Command-line entry point: ``latentsde <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 training diverged, 4 evaluation
infeasible.  Flags on ``run``/``dimsearch`` override fields of an optional
``--config`` JSON file; unset flags keep the file's (or default) values.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ALIGNMENTS, DIMSEARCH_MODES, ExperimentConfig
from .errors import (DegenerateDataError, InvalidInputError, InversionError, LatentSdeError,
                     NotFoundError, TrainingDivergedError)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4


def _int_list(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _dt(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or comma-separated schedule, got {text!r}") from None
    return vals[0] if len(vals) == 1 else vals


def _flag_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# flag -> (block, field, type)
DATASET_FLAGS = {
    "spec": ("dataset", "spec", str), "map": ("dataset", "map", str), "n": ("dataset", "n", int),
    "steps": ("dataset", "steps", int), "dt": ("dataset", "dt", _dt),
    "noise": ("dataset", "noise", str), "rescale": ("dataset", "rescale", str),
    "trajectories": ("dataset", "trajectories", int), "side": ("dataset", "side", int),
    "data-seed": ("dataset", "seed", int), "map-seed": ("dataset", "map_seed", int),
}
MODEL_FLAGS = {
    "d": ("model", "d", int), "enc-hidden": ("model", "enc_hidden", _int_list),
    "dec-hidden": ("model", "dec_hidden", _int_list),
    "drift-hidden": ("model", "drift_hidden", _int_list), "tau": ("model", "tau", float),
    "nu": ("model", "nu", float), "diffusion-diag": ("model", "diffusion_diag", _flag_bool),
    "lambda1": ("model", "lambda1", float), "diagonal-cov": ("model", "diagonal_cov", _flag_bool),
    "model-seed": ("model", "seed", int),
}
TRAINING_FLAGS = {
    "epochs": ("training", "epochs", int), "lr": ("training", "lr", float),
    "decay": ("training", "decay", float), "val-size": ("training", "val_size", int),
    "train-seed": ("training", "seed", int),
}
EVAL_FLAGS = {
    "alignment": ("evaluation", "alignment", str), "truth": ("evaluation", "truth", str),
    "threshold": ("evaluation", "diag_threshold", float),
    "mode": ("evaluation", "dimsearch_mode", str),
    "candidates": ("evaluation", "candidates", _int_list),
}


def _add_flags(p: argparse.ArgumentParser, table: dict, title: str) -> None:
    grp = p.add_argument_group(title)
    for flag, (_block, _field, typ) in table.items():
        grp.add_argument(f"--{flag}", type=typ, default=None, dest=f"cfg_{flag.replace('-', '_')}")


def _apply_flags(cfg: ExperimentConfig, args, *tables) -> ExperimentConfig:
    for table in tables:
        for flag, (block, name, _typ) in table.items():
            value = getattr(args, f"cfg_{flag.replace('-', '_')}", None)
            if value is not None:
                setattr(getattr(cfg, block), name, value)
    return cfg


def _base_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    return ExperimentConfig()


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_generate(args) -> int:
    from .pipeline import build_dataset

    cfg = _apply_flags(_base_config(args), args, DATASET_FLAGS)
    cfg.training.val_size = min(cfg.training.val_size, cfg.dataset.steps * cfg.dataset.trajectories - 1)
    cfg.validate()
    ds = build_dataset(cfg)
    ds.save(args.out)
    print(f"wrote {len(ds)} pairs (n={ds.ambient_dim}, d={ds.latent_dim}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .datasets import PairedDataset
    from .pipeline import build_model_for, train_config, write_loss_log
    from .vae import train

    ds = PairedDataset.load(args.data)
    cfg = _apply_flags(_base_config(args), args, MODEL_FLAGS, TRAINING_FLAGS)
    if args.seed is not None:
        cfg.training.seed = args.seed
        if args.cfg_model_seed is None:
            cfg.model.seed = args.seed
    if cfg.model.d is None:
        if ds.latent_dim is None:
            raise InvalidInputError("dataset has no latent truth; pass --d")
        cfg.model.d = ds.latent_dim
    # the dataset block is informational here; mirror the stored dataset so validation applies
    cfg.dataset.spec = ds.meta.get("spec", cfg.dataset.spec)
    cfg.dataset.steps = len(ds)
    cfg.dataset.trajectories = 1
    cfg.dataset.n = ds.ambient_dim
    cfg.dataset.map = ds.meta.get("map", {}).get("kind", cfg.dataset.map)
    cfg.dataset.dt = float(np.mean(ds.dt))
    cfg.validate()
    out = Path(args.out)
    model = build_model_for(cfg, ds.ambient_dim)

    def report(row):
        if args.verbose and (row["epoch"] % 100 == 0 or row["epoch"] == 1):
            print(f"epoch {row['epoch']:5d} total {row['total']:.6g} val {row['val_total']:.6g}",
                  file=sys.stderr)

    result = train(model, ds, train_config(cfg), callback=report)
    result.model.save(out)
    write_loss_log(out / "loss_log.csv", result.log)
    cfg.save(out / "config.json")
    print(f"best epoch {result.best_epoch}, validation total {result.best_val:.6g}; model in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .datasets import PairedDataset
    from .lsde_io import read_json, write_json
    from .pipeline import append_results_row, evaluate
    from .vae import VaeModel

    ds = PairedDataset.load(args.data)
    model = VaeModel.load(args.model)
    if args.alignment not in ALIGNMENTS:
        raise InvalidInputError(f"alignment must be one of {ALIGNMENTS}")
    report = evaluate(model, ds, args.alignment, args.truth)
    payload = report.as_dict()
    cfg_path = Path(args.model) / "config.json"
    model_cfg = read_json(cfg_path) if cfg_path.exists() else None
    basis = {"dataset": ds.meta, "model": model.header(), "config": model_cfg,
             "alignment": args.alignment, "truth": args.truth}
    canon = json.dumps(basis, sort_keys=True, separators=(",", ":"))
    payload["provenance"] = {
        "config_hash": hashlib.sha256(canon.encode()).hexdigest()[:16],
        "seeds": {"dataset": ds.meta.get("seed", 0), "map": ds.meta.get("map", {}).get("seed", 0),
                  "model": model.seed,
                  "training": (model_cfg or {}).get("training", {}).get("seed", 0)},
        "version": __version__,
    }
    out = Path(args.out) if args.out else Path(args.model)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", payload)
    if args.csv:
        append_results_row(args.csv, report, ds.meta.get("map", {}).get("kind", ""),
                           ds.meta.get("spec", ""))
    _print_json({k: payload[k] for k in ("L_latent", "L_mu", "reconstruction_mse", "crlb")})
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import run_experiment

    cfg = _apply_flags(_base_config(args), args, DATASET_FLAGS, MODEL_FLAGS, TRAINING_FLAGS,
                       EVAL_FLAGS)
    summary = run_experiment(cfg, args.out, repeat=args.repeat)
    for name, s in summary["metrics"].items():
        print(f"{name:20s} {s['mean']:.6g} +- {s['std']:.3g}")
    return EXIT_OK


def cmd_dimsearch(args) -> int:
    from .pipeline import dimsearch

    cfg = _apply_flags(_base_config(args), args, DATASET_FLAGS, MODEL_FLAGS, TRAINING_FLAGS,
                       EVAL_FLAGS)
    res = dimsearch(cfg, args.out)
    w = csv.writer(sys.stdout)
    if res.mode == "linear_likelihood":
        w.writerow(["candidate", "loglik"])
        for r in res.rows:
            w.writerow([r["candidate"], repr(r["loglik"])])
    else:
        width = max(len(r["diagonals"]) for r in res.rows)
        w.writerow(["candidate", "count_above"] + [f"D{i + 1}" for i in range(width)])
        for r in res.rows:
            w.writerow([r["candidate"], r["count_above"]] + [f"{v:.6g}" for v in r["diagonals"]])
    print(f"selected dimension: {res.selected}")
    return EXIT_OK


def cmd_lamperti_check(args) -> int:
    from .lamperti import LampertiMap, check_reducible, default_probes
    from .sde import catalog

    spec = catalog(args.spec)
    base = np.zeros(spec.dim) if args.base_point is None else np.array(
        [float(v) for v in args.base_point.split(",")])
    base = spec.check_state(base)
    probes = np.vstack([base, default_probes(spec, base, args.count, args.radius, args.seed)])
    report = check_reducible(spec, probes, args.t, args.tol)
    roundtrip = np.full(len(probes), np.nan)
    if report.curl_ok:
        lm = LampertiMap(spec, base)
        try:
            roundtrip = np.linalg.norm(lm.g(lm.h(probes, args.t), args.t) - probes, axis=-1)
        except InversionError:
            pass
    w = csv.writer(sys.stdout)
    cols = ["point", "t", "curl_residual", "symmetry_residual", "min_eigenvalue", "singular",
            "roundtrip"]
    w.writerow(cols)
    for row, rt in zip(report.rows(), roundtrip):
        w.writerow([row["point"], row["t"], f"{row['curl_residual']:.3e}",
                    f"{row['symmetry_residual']:.3e}", f"{row['min_eigenvalue']:.6g}",
                    int(row["singular"]), f"{rt:.3e}"])
    print(f"# {spec.name}: curl_ok={report.curl_ok} symmetric={report.symmetric} "
          f"positive_definite={report.positive_definite} reducible={report.reducible}",
          file=sys.stderr)
    return EXIT_OK


def cmd_crlb(args) -> int:
    from .evaluation import crlb

    print(repr(crlb(args.d, args.dt, args.N)))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentsde", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a latent SDE and write a paired dataset")
    g.add_argument("--config", help="ExperimentConfig JSON (dataset block is used)")
    _add_flags(g, DATASET_FLAGS, "dataset")
    g.add_argument("--seed", type=int, dest="cfg_data_seed", help="alias for --data-seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the VAE on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="ExperimentConfig JSON (model and training blocks are used)")
    _add_flags(t, MODEL_FLAGS, "model")
    _add_flags(t, TRAINING_FLAGS, "training")
    t.add_argument("--seed", type=int, default=None,
                   help="training seed; also the model seed unless --model-seed is given")
    t.add_argument("--out", required=True)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trained model against latent truth")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--alignment", default="orthogonal", choices=ALIGNMENTS)
    e.add_argument("--truth", default="raw", choices=("raw", "rescaled"))
    e.add_argument("--out", help="directory for metrics.json (default: the model directory)")
    e.add_argument("--csv", help="append a results row to this CSV table")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("run", help="generate, train and evaluate in one go")
    r.add_argument("--config")
    for table, title in ((DATASET_FLAGS, "dataset"), (MODEL_FLAGS, "model"),
                         (TRAINING_FLAGS, "training"), (EVAL_FLAGS, "evaluation")):
        _add_flags(r, table, title)
    r.add_argument("--repeat", type=int, default=1,
                   help="independent runs varying training/model seeds (LSDE_THREADS caps parallelism)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    ds = sub.add_parser("dimsearch", help="select a latent size")
    ds.add_argument("--config")
    for table, title in ((DATASET_FLAGS, "dataset"), (MODEL_FLAGS, "model"),
                         (TRAINING_FLAGS, "training"), (EVAL_FLAGS, "evaluation")):
        _add_flags(ds, table, title)
    ds.add_argument("--out")
    ds.set_defaults(func=cmd_dimsearch)
    ds.epilog = f"modes: {', '.join(DIMSEARCH_MODES)}"

    lc = sub.add_parser("lamperti-check", help="print reducibility residuals as CSV")
    lc.add_argument("--spec", required=True)
    lc.add_argument("--base-point", help="comma-separated base point (default: origin)")
    lc.add_argument("--count", type=int, default=16)
    lc.add_argument("--radius", type=float, default=0.1)
    lc.add_argument("--t", type=float, default=0.0)
    lc.add_argument("--tol", type=float, default=1e-8)
    lc.add_argument("--seed", type=int, default=0)
    lc.set_defaults(func=cmd_lamperti_check)

    c = sub.add_parser("crlb", help="Cramer-Rao bound d/(dt N)")
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--dt", type=float, required=True)
    c.add_argument("--N", type=int, required=True)
    c.set_defaults(func=cmd_crlb)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, (DegenerateDataError, InversionError)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (InvalidInputError, NotFoundError)):
        return EXIT_CONFIG
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LatentSdeError as exc:
        where = getattr(exc, "stage", None)
        prefix = f"{where} stage: " if where else ""
        print(f"latentsde: error: {prefix}{exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
