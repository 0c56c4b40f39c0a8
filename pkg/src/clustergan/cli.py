"""Command-line front end.

Exit codes: 0 success, 1 configuration or data errors (including bad flags),
2 numerical aborts during training or decoding.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig, config_hash, load_config, load_dataset
from .data import DataError, Dataset, read_matrix_csv, write_matrix_csv
from .decode import DecodeError, decode_dataset
from .experiments import PRIORS, ExperimentPlan, export_interpolation, lemma_check, run_k_sweep, \
    run_prior_comparison
from .latent import write_latent_csv
from .metrics import clustering_metrics
from .networks import load_checkpoint
from .training import TrainingAborted, TrainConfig, encode, train

logger = logging.getLogger("clustergan")

RUN_DIR_ENV = "CLUSTERGAN_RUN_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_json_atomic(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(run_dir: Path, command: str, args, config: dict | None, seed, provenance: dict,
                   metrics: dict, checkpoints: list[str]) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config) if config is not None else None,
        "seed": seed,
        "dataset": provenance,
        "metrics": metrics,
        "checkpoints": checkpoints,
        "threads": args.threads,
        "versions": {"clustergan": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    write_json_atomic(run_dir / "manifest.json", manifest)
    write_json_atomic(run_dir / "metrics.json", metrics)
    return manifest


def _run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(RUN_DIR_ENV, "runs")) / command


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    return cfg


def _provenance(ds: Dataset) -> dict:
    prov = {k: v for k, v in ds.provenance.items() if k != "kept_columns"}
    return {"name": ds.name, "rows": len(ds), "columns": ds.dim, **prov}


def _report_dict(rep) -> dict:
    return {"acc": rep.acc, "nmi": rep.nmi, "ari": rep.ari}


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg.data)
    out = _run_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    G, E, D, log = train(ds, cfg.train, out_dir=out, progress_every=args.progress_every)
    log.to_csv(out / "train_log.csv")
    zn, zc = encode(E, ds.X, cfg.train.dn)
    extra = {"label": ds.y.tolist()} if ds.y is not None else None
    write_latent_csv(out / "latent.csv", zn, zc, zc.argmax(axis=1).tolist(), extra)
    metrics = {"final_d_loss": log.records[-1]["d_loss"] if len(log) else None,
               "final_g_loss": log.records[-1]["g_loss"] if len(log) else None,
               "iterations": len(log)}
    if ds.y is not None:
        metrics["encoder_clustering"] = _report_dict(clustering_metrics(zc.argmax(axis=1), ds.y))
    checkpoints = sorted(p.name for p in out.glob("checkpoint_*.npz"))
    write_manifest(out, "train", args, cfg.to_dict(), cfg.train.seed, _provenance(ds), metrics, checkpoints)
    logger.info("trained %d iterations; artifacts in %s", len(log), out)
    return 0


def _load_generator(path):
    try:
        nets, config = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if "G" not in nets:
        raise DataError(f"{path}: checkpoint has no generator")
    return nets, TrainConfig.from_mapping(config) if config else TrainConfig()


def cmd_decode(args) -> int:
    nets, tcfg = _load_generator(args.checkpoint)
    cfg = _config(args)
    dcfg = cfg.decode if args.tau is None else replace(cfg.decode, tau=args.tau)
    X, y, _ = read_matrix_csv(args.data)
    res = decode_dataset(nets["G"], X, tcfg.latent, dcfg, seed=args.seed or 0, workers=args.workers)
    modes = [int(m) for m in res.modes]
    extra = {"loss": [repr(float(v)) for v in res.losses]}
    if y is not None:
        extra["label"] = y.tolist()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_latent_csv(args.out, res.zn, res.zc, modes, extra)
    if res.failures:
        logger.warning("%d rows could not be decoded", len(res.failures))
    logger.info("decoded %d rows into %s", len(res), args.out)
    return 0


def _read_labels(path) -> np.ndarray:
    M, y, _ = read_matrix_csv(path)
    if y is not None:
        return y
    if M.shape[1] != 1:
        raise DataError(f"{path}: expected one label column, found {M.shape[1]}")
    return M[:, 0].astype(int)


def cmd_eval(args) -> int:
    if args.pred:
        pred = _read_labels(args.pred)
    elif args.checkpoint and args.data:
        nets, tcfg = _load_generator(args.checkpoint)
        if "E" not in nets:
            raise DataError(f"{args.checkpoint}: checkpoint has no encoder")
        X, _, _ = read_matrix_csv(args.data)
        pred = encode(nets["E"], X, tcfg.dn)[1].argmax(axis=1)
    else:
        raise UsageError("eval needs --pred, or --checkpoint with --data")
    truth = _read_labels(args.truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction has {pred.size} labels, truth has {truth.size}")
    rep = clustering_metrics(pred, truth)
    doc = rep.as_dict()
    print(json.dumps(doc, sort_keys=True))
    if args.out:
        write_json_atomic(Path(args.out), doc)
    if args.csv_row:
        new = not Path(args.csv_row).exists()
        with open(args.csv_row, "a") as fh:
            if new:
                fh.write("name,acc,nmi,ari\n")
            fh.write(f"{args.name},{rep.acc!r},{rep.nmi!r},{rep.ari!r}\n")
    return 0


def _pairs(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in p.split(":")) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"--pairs expects a,b pairs like 0:1,2:3, got {text!r}") from None


def cmd_interpolate(args) -> int:
    nets, tcfg = _load_generator(args.checkpoint)
    pairs = _pairs(args.pairs) if args.pairs else [(a, (a + 1) % tcfg.k) for a in range(tcfg.k)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    meta, _ = export_interpolation(nets["G"], tcfg.latent, pairs, steps=args.steps, path=args.out, seed=args.seed)
    logger.info("wrote %d interpolated rows to %s", meta.shape[0], args.out)
    return 0


def _plan(cfg: RunConfig, ds: Dataset) -> ExperimentPlan:
    ex = cfg.experiment
    vary = None
    if "vary_key" in ex:
        vary = (ex["vary_key"], [v.strip() for v in ex.get("vary_values", "").split(",") if v.strip()])
    return ExperimentPlan(name=ex.get("name", ds.name), dataset=ds, method=ex.get("method", "clustergan"),
                          train=cfg.train, decode=cfg.decode, runs=ex.get("runs", 1),
                          k_override=ex.get("k_override"), vary=vary, eval_rows=ex.get("eval_rows"),
                          split_seed=ex.get("split_seed", 0))


def cmd_sweep_k(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg.data)
    ks = [int(k) for k in (args.ks or cfg.experiment.get("ks", "3,4,5,6")).split(",")]
    out = _run_dir(args, "sweep-k")
    sweep = run_k_sweep(_plan(cfg, ds), ks)
    metrics = {str(k): s.as_dict() for k, s in sweep.items()}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("k,selected_run,acc,nmi,ari\n")
        for k, s in sweep.items():
            t = s.test_report
            fh.write(f"{k},{s.selected_run},{t.acc!r},{t.nmi!r},{t.ari!r}\n")
    write_manifest(out, "sweep-k", args, cfg.to_dict(), cfg.train.seed, _provenance(ds), metrics, [])
    for k, s in sweep.items():
        print(f"K={k} ACC={s.test_report.acc:.4f} NMI={s.test_report.nmi:.4f} ARI={s.test_report.ari:.4f}")
    return 0


def cmd_compare_priors(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg.data)
    priors = tuple(p.strip() for p in (args.priors or cfg.experiment.get("priors", ",".join(PRIORS))).split(","))
    out = _run_dir(args, "compare-priors")
    out.mkdir(parents=True, exist_ok=True)
    res = run_prior_comparison(ds, cfg.train, cfg.decode, priors=priors,
                               output=cfg.experiment.get("output", "sigmoid"),
                               restarts=cfg.experiment.get("restarts", 1),
                               eval_rows=cfg.experiment.get("eval_rows", 500))
    for name, r in res.items():
        write_matrix_csv(out / f"latent_{name}.csv", r.z, r.labels, prefix="z")
        print(f"{name}: ACC={r.report.acc:.4f} NMI={r.report.nmi:.4f} ARI={r.report.ari:.4f}")
    metrics = {name: _report_dict(r.report) for name, r in res.items()}
    write_manifest(out, "compare-priors", args, cfg.to_dict(), cfg.train.seed, _provenance(ds), metrics, [])
    return 0


def cmd_lemma_check(args) -> int:
    res = lemma_check(n=args.n, seed=args.seed or 0, epochs=args.epochs if args.epochs is not None else 80,
                      eval_rows=args.eval_rows, tau=args.tau or 300, constructed=args.constructed,
                      nonlinear=args.nonlinear, restarts=args.restarts)
    for name, rep in res.items():
        print(f"{name}: ACC = {rep.acc:.3f}, NMI = {rep.nmi:.3f}, ARI = {rep.ari:.3f}")
    if args.out:
        out = Path(args.out)
        config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
        write_manifest(out, "lemma-check", args, config, args.seed or 0, {"name": "lemma_world", "rows": args.n},
                       {k: _report_dict(v) for k, v in res.items()}, [])
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clustergan", description="Clustering with a discrete-continuous GAN latent space.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (recorded in the manifest)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="train G, E and D")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--progress-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", parents=[common], help="recover latents for data rows")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--tau", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", parents=[common], help="ACC/NMI/ARI of predicted against true labels")
    s.add_argument("--pred")
    s.add_argument("--truth", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--csv-row")
    s.add_argument("--name", default="run")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("interpolate", parents=[common], help="generate along one-hot interpolations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pairs")
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("sweep-k", parents=[common], help="rerun the pipeline for several K")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--ks")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("compare-priors", parents=[common], help="plain GANs under several latent priors")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--priors")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_compare_priors)

    s = sub.add_parser("lemma-check", parents=[common], help="linear generator on the 10-Gaussian world")
    s.add_argument("--n", type=int, default=3000)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--eval-rows", type=int, default=500)
    s.add_argument("--tau", type=int)
    s.add_argument("--constructed", action="store_true", help="skip training; use the exact generator")
    s.add_argument("--nonlinear", action="store_true", help="add the MLP + normal-prior contrast run")
    s.add_argument("--restarts", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_lemma_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, DataError, UsageError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 1
    except (TrainingAborted, DecodeError, FloatingPointError) as exc:
        logger.error("numerical abort: %s", exc)
        return 2
    except ValueError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
