"""``eva``: synthesize cohorts, cross-validate, evaluate, score anomalies and
benchmark attention scaling.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .anomaly import score_cohorts
from .config import ConfigError, RunConfig, dump_config, load_config_file, resolve
from .data import EpochSet, SynthConfig, load_epochset, load_manifest, synth_cohort, write_cohort
from .encoder import MODES, attention_benchmark
from .model import load_params, predict_batched
from .training import regression_metrics, run_cv, subject_means

log = logging.getLogger("evanet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------
def new_run_dir(root, command: str, now: Optional[datetime] = None) -> Path:
    """Fresh ``<root>/<command>-<timestamp>[-n]``; existing directories are
    never reused."""
    stamp = (now or datetime.now()).strftime("%Y%m%d-%H%M%S")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    base = root / f"{command}-{stamp}"
    path, n = base, 0
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1
            path = base.with_name(f"{base.name}-{n}")


def _fresh_dir(path) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise UsageError(f"output directory {path} is not empty; runs never overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool_flag(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# flag name -> RunConfig key, for the model/training flags shared by commands
_CONFIG_FLAGS = {
    "seed": int, "n_layers": int, "d_model": int, "n_heads": int, "d_ff": int,
    "sampling_factor": float, "attention_mode": str, "d_latent": int, "beta": float,
    "gamma": float, "no_vib": _bool_flag, "no_align": _bool_flag, "logvar_bias_init": float,
    "max_epochs": int, "batch_size": int, "lr": float, "min_lr": float, "weight_decay": float,
    "patience": int, "folds": int, "val_fraction": float, "epochs_per_pass": int,
    "val_epochs_per_subject": int, "workers": int, "beta_grid": _csv_floats,
    "gamma_grid": _csv_floats,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("hyperparameters (override the config file)")
    for key, typ in _CONFIG_FLAGS.items():
        flag = "--" + key.replace("_", "-")
        if typ is _bool_flag:
            g.add_argument(flag, dest=key, nargs="?", const=True, default=None, type=_bool_flag)
        else:
            g.add_argument(flag, dest=key, type=typ, default=None)
    g.add_argument("--epochs", dest="max_epochs", type=int, default=None,
                   help="alias of --max-epochs")


def _resolve(args, config_path=None) -> RunConfig:
    path = args.config or config_path
    file_values = load_config_file(path) if path else {}
    overrides = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    return resolve(file_values, overrides)


def _write_config(run_dir: Path, cfg: RunConfig, extra: dict) -> None:
    (run_dir / "config.txt").write_text(dump_config(cfg, extra))
    (run_dir / "seed").write_text(f"{cfg.seed}\n")


def _checkpoint_config(checkpoint: Path) -> Optional[Path]:
    """``<run>/config.txt`` for a checkpoint stored as ``<run>/checkpoints/*``."""
    cand = checkpoint.resolve().parent.parent / "config.txt"
    return cand if checkpoint.resolve().parent.name == "checkpoints" and cand.is_file() else None


def _healthy_only(es: EpochSet) -> EpochSet:
    keep = np.flatnonzero(es.label == "healthy")
    if len(keep) < len(es):
        log.warning("training on healthy subjects only; dropped %d epochs", len(es) - len(keep))
    return es.take(keep)


# -- commands -----------------------------------------------------------------------
def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(n_subjects=args.subjects, epochs_per_subject=args.epochs, seed=args.seed,
                          pathology_severity=args.severity, age_min=args.age_min,
                          age_max=args.age_max, id_prefix=args.prefix)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = _fresh_dir(args.out_dir) if args.out_dir else new_run_dir(args.runs_dir, "synth")
    es = synth_cohort(cfg, start_index=args.start_index)
    manifest = write_cohort(es, out)
    echo = [f"{k} = {v}" for k, v in (
        ("subjects", cfg.n_subjects), ("epochs", cfg.epochs_per_subject), ("seed", cfg.seed),
        ("severity", repr(cfg.pathology_severity)), ("label", cfg.label),
        ("age_min", repr(cfg.age_min)), ("age_max", repr(cfg.age_max)),
        ("prefix", cfg.id_prefix), ("start_index", args.start_index))]
    (out / "synth_config.txt").write_text("\n".join(echo) + "\n")
    (out / "seed").write_text(f"{cfg.seed}\n")
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    manifest = _require_file(args.manifest, "manifest")
    es = _healthy_only(load_epochset(manifest))
    if not len(es):
        raise UsageError(f"{manifest} has no healthy subjects to train on")
    run_dir = new_run_dir(args.runs_dir, "train")
    _write_config(run_dir, cfg, {"manifest": manifest.resolve()})
    workers = min(cfg.folds, os.cpu_count() or 1)
    betas = cfg.beta_grid or [cfg.beta]
    gammas = cfg.gamma_grid or [cfg.gamma]
    sweep = len(betas) * len(gammas) > 1
    rows = []
    for b, g in itertools.product(betas, gammas):
        sub = run_dir
        if sweep:
            sub = run_dir / f"beta={b!r}_gamma={g!r}"
            sub.mkdir()
            point = dataclasses.replace(cfg, beta=b, gamma=g, beta_grid=[], gamma_grid=[])
            _write_config(sub, point, {"manifest": manifest.resolve()})
        res = run_cv(es, cfg.model_config(b, g), cfg.train_config(workers), sub)
        s = res.summary()
        rows.append((b, g, s["test_mae"], s["test_rmse"], s["test_r2"]))
        print(f"beta={b!r} gamma={g!r} mae={s['test_mae'][0]:.3f}+-{s['test_mae'][1]:.3f} "
              f"rmse={s['test_rmse'][0]:.3f} r2={s['test_r2'][0]:.3f}")
    if sweep:
        with open(run_dir / "sweep.csv", "w") as fh:
            fh.write("beta,gamma,mae_mean,mae_std,rmse_mean,rmse_std,r2_mean,r2_std\n")
            for b, g, mae, rmse, r2 in rows:
                fh.write(",".join(repr(v) for v in (b, g, *mae, *rmse, *r2)) + "\n")
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cfg = _resolve(args, _checkpoint_config(ckpt))
    manifest = _require_file(args.manifest, "manifest")
    mcfg = cfg.model_config()
    params = load_params(ckpt, mcfg)
    es = load_epochset(manifest)
    if not len(es):
        raise UsageError(f"{manifest} lists no epochs")
    yh, _, _ = predict_batched(es.x, es.age, params, mcfg)
    run_dir = new_run_dir(args.runs_dir, "eval")
    _write_config(run_dir, cfg, {"checkpoint": ckpt.resolve(), "manifest": manifest.resolve()})
    pred_s = subject_means(es.subject, yh)
    ages = es.subject_ages()
    subj = list(pred_s)
    with open(run_dir / "predictions.csv", "w") as fh:
        fh.write("subject_id,age,pred\n")
        for s in subj:
            fh.write(f"{s},{ages[s]!r},{pred_s[s]!r}\n")
    with open(run_dir / "metrics.csv", "w") as fh:
        fh.write("level,mae,rmse,r2\n")
        for level, (p, t) in (("subject", ([pred_s[s] for s in subj], [ages[s] for s in subj])),
                              ("epoch", (yh, es.age))):
            mae, rmse, r2 = regression_metrics(p, t)
            fh.write(f"{level},{mae!r},{rmse!r},{r2!r}\n")
            print(f"{level}: mae={mae:.3f} rmse={rmse:.3f} r2={r2:.3f}")
    print(run_dir)
    return EXIT_OK


def cmd_score(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    cfg = _resolve(args, _checkpoint_config(ckpt))
    healthy = load_manifest(_require_file(args.healthy, "healthy manifest"))
    if args.pathological:
        patho = load_manifest(_require_file(args.pathological, "pathological manifest"))
    else:
        patho = type(healthy)([], healthy.root)
    mcfg = cfg.model_config()
    report = score_cohorts(load_params(ckpt, mcfg), healthy, patho, mcfg)
    run_dir = new_run_dir(args.runs_dir, "score")
    _write_config(run_dir, cfg, {"checkpoint": ckpt.resolve(), "healthy": args.healthy,
                                 "pathological": args.pathological or "none"})
    report.write(run_dir, violin=args.violin)
    sys.stdout.write(report.significance_table())
    print(run_dir)
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = attention_benchmark(args.lengths, args.modes, d_model=args.d_model,
                               n_heads=args.n_heads, c=args.sampling_factor, seed=args.seed)
    lines = ["mode,T,u,mac_count,wall_ms"]
    lines += [f"{r.mode},{r.seq_len},{r.u},{r.mac_count},{r.wall_ms:.3f}" for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if not args.no_save:
        run_dir = new_run_dir(args.runs_dir, "bench")
        (run_dir / "bench.csv").write_text(text)
        (run_dir / "config.txt").write_text(
            f"lengths = {','.join(map(str, args.lengths))}\nmodes = {','.join(args.modes)}\n"
            f"d_model = {args.d_model}\nn_heads = {args.n_heads}\n"
            f"sampling_factor = {args.sampling_factor!r}\nseed = {args.seed}\n")
        (run_dir / "seed").write_text(f"{args.seed}\n")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eva", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort (epochs + manifest)")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--epochs", type=int, default=30, help="epochs per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--severity", type=float, default=0.0, help="0 = healthy")
    p.add_argument("--age-min", type=float, default=10.0)
    p.add_argument("--age-max", type=float, default=85.0)
    p.add_argument("--prefix", default="sub", help="subject id prefix")
    p.add_argument("--start-index", type=int, default=0)
    p.add_argument("--out-dir", help="exact output directory (must be empty or absent)")
    p.add_argument("--runs-dir", default="runs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="subject-level k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--runs-dir", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="age predictions of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--runs-dir", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[common], help="BAG / PAE anomaly report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--healthy", required=True, help="healthy manifest")
    p.add_argument("--pathological", help="pathological manifest (mci/ad labels)")
    p.add_argument("--violin", action="store_true", help="also write long-format violin.csv")
    p.add_argument("--runs-dir", default="runs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", parents=[common], help="attention MAC counts versus sequence length")
    p.add_argument("--lengths", type=_csv_ints, default=[500, 1000, 2000, 4000])
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m],
                   default=["exact_full", "probsparse_sampled_measure"])
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=8)
    p.add_argument("--sampling-factor", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-save", action="store_true", help="print only, no run directory")
    p.add_argument("--runs-dir", default="runs")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench":
        bad = [m for m in args.modes if m not in MODES]
        if bad:
            parser.exit(EXIT_USAGE, f"eva bench: unknown mode {bad[0]!r}; choose from {', '.join(MODES)}\n")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"eva {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"eva {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
