"""Command-line entry point: ``scmil {train,cv,ablate,gradcheck,solve}``.

Exit codes: 0 success, 1 runtime or metric failure, 2 usage error.
Option values resolve as command-line flag > ``--config`` file > default.
"""

import argparse
import csv
import io
import logging
from pathlib import Path
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import checkpoint_from_model, load_checkpoint, save_checkpoint
from .data import Dataset, SynthConfig, load_bags_csv, synth_generate
from .exceptions import FormatError, TrainingError
from .experiments import (ABLATION_COLUMNS, FOLD_COLUMNS, ablate, cross_validate, derive_seed,
                          train_and_evaluate)
from .linalg import overcomplete_dct, spectral_norm
from .mil import Bag, build_model
from .sparse_coding import ISTA_MAX_ITER, ISTA_TOL, ista_solve, kkt_residual, sc_objective
from .training import TrainConfig, grad_check

log = logging.getLogger("scmil")

VARIANT_ALIASES = {"abmil": "abmil", "abmil_gated": "abmil_gated", "max": "max_pool",
                   "mean": "mean_pool", "max_pool": "max_pool", "mean_pool": "mean_pool"}

DEFAULTS = {
    "variant": "abmil_gated", "sc": "on", "atoms": 256, "layers": 5, "embed": 128,
    "epochs": 40, "lr": 1e-4, "weight_decay": 5e-3, "seed": 0, "out": "runs/latest",
    "standardize": "on", "val_frac": 0.0, "lambda_init": 0.01, "attention_dim": 128,
    "k": 10, "reps": 5, "jobs": 1,
    "atoms_grid": "64,128,256,512", "layers_grid": "1,3,5,7,9", "flops_bag_size": 120,
    "d_raw": 10, "instances": 3, "seeds": 5, "eps": 1e-5, "kink_margin": 1e-3,
    "max_iter": ISTA_MAX_ITER, "tol": ISTA_TOL,
}

# synthetic generator defaults used by ``--synth default``
SYNTH_DEFAULT = SynthConfig()


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# option handling


def read_kv_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(args: argparse.Namespace, **overrides) -> dict:
    """Merge defaults (plus per-command ``overrides``), the config file and explicit flags."""
    opts = dict(DEFAULTS, **overrides)
    if getattr(args, "config", None):
        try:
            opts.update(read_kv_file(args.config))
        except OSError as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from None
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "func", "verbose", "command"):
            opts[key] = value
    return opts


def _int(opts, key) -> int:
    try:
        return int(opts[key])
    except (TypeError, ValueError):
        raise UsageError(f"--{key.replace('_', '-')} expects an integer, got {opts[key]!r}") from None


def _float(opts, key) -> float:
    try:
        return float(opts[key])
    except (TypeError, ValueError):
        raise UsageError(f"--{key.replace('_', '-')} expects a number, got {opts[key]!r}") from None


def _onoff(opts, key) -> bool:
    v = str(opts[key]).lower()
    if v not in ("on", "off"):
        raise UsageError(f"--{key} expects on|off, got {opts[key]!r}")
    return v == "on"


def _int_list(opts, key) -> list[int]:
    text = str(opts.get(key) or "").strip()
    if not text:
        raise UsageError(f"--{key.replace('_', '-')} is empty")
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{key.replace('_', '-')} expects comma-separated integers") from None
    if not values:
        raise UsageError(f"--{key.replace('_', '-')} is empty")
    return values


def synth_config(opts) -> SynthConfig:
    spec = opts["synth"]
    fields = SYNTH_DEFAULT.as_dict()
    if spec != "default":
        try:
            fields.update(read_kv_file(spec))
        except OSError as err:
            raise UsageError(f"cannot read synth config {spec}: {err}") from None
    fields["seed"] = derive_seed(_int(opts, "seed"), 3)
    for item in opts.get("synth_set") or []:
        if "=" not in item:
            raise UsageError(f"--synth-set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        fields[k.strip()] = v.strip()
    base = SynthConfig()
    kwargs = {}
    for k, v in fields.items():
        if not hasattr(base, k):
            raise UsageError(f"unknown synthetic parameter {k!r}")
        kwargs[k] = type(getattr(base, k))(v)
    cfg = SynthConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as err:
        raise UsageError(f"synthetic config: {err}") from None
    return cfg


def load_dataset(opts) -> Dataset:
    if bool(opts.get("data")) == bool(opts.get("synth")):
        raise UsageError("give exactly one of --data <csv> or --synth <default|cfg>")
    if opts.get("data"):
        try:
            return load_bags_csv(opts["data"])
        except OSError as err:
            raise UsageError(f"cannot read {opts['data']}: {err}") from None
    return synth_generate(synth_config(opts))


def model_config(opts, d_raw: int) -> dict:
    variant = VARIANT_ALIASES.get(str(opts["variant"]))
    if variant is None:
        raise UsageError(f"--variant must be one of abmil|abmil_gated|max|mean, got {opts['variant']!r}")
    sc = _onoff(opts, "sc")
    embed, atoms, layers = _int(opts, "embed"), _int(opts, "atoms"), _int(opts, "layers")
    if embed < 1 or layers < 1:
        raise UsageError("--embed and --layers must be >= 1")
    if sc and atoms < embed:
        raise UsageError(f"dictionary must be over-complete: --atoms {atoms} < --embed {embed} (need m >= p)")
    cfg = {"variant": variant, "d_raw": d_raw, "embed_dim": embed, "sc": sc,
           "attention_dim": _int(opts, "attention_dim"), "seed": derive_seed(_int(opts, "seed"), 1)}
    if sc:
        cfg.update(atoms=atoms, layers=layers, lambda_init=_float(opts, "lambda_init"))
    return cfg


def train_config(opts) -> TrainConfig:
    try:
        return TrainConfig(epochs=_int(opts, "epochs"), lr0=_float(opts, "lr"),
                           weight_decay=_float(opts, "weight_decay"),
                           seed=derive_seed(_int(opts, "seed"), 2),
                           kink_margin=_float(opts, "kink_margin"))
    except ValueError as err:
        raise UsageError(str(err)) from None


# ---------------------------------------------------------------------------
# output helpers


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row[c]) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_manifest(out: Path, command: str, opts: dict, dataset: Dataset | None, metrics: dict,
                   artifacts: list[str], started: float) -> Path:
    lines = [f"command={command}", f"version={__version__}", f"seed={opts['seed']}"]
    for key in sorted(opts):
        if key in ("seed",):
            continue
        value = opts[key]
        if isinstance(value, list):
            value = ";".join(value)
        lines.append(f"config.{key}={value}")
    if dataset is not None:
        lines.append(f"dataset.name={dataset.name}")
        lines.append(f"dataset.fingerprint={dataset.fingerprint()}")
        lines.append(f"dataset.bags={len(dataset)}")
    for key, value in metrics.items():
        lines.append(f"metric.{key}={fmt(value)}")
    lines.append(f"wall_clock_seconds={time.time() - started:.3f}")
    for a in artifacts:
        lines.append(f"artifact={a}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _outdir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create output directory {out}: {err}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    started = time.time()
    opts = resolve(args)
    ds = load_dataset(opts)
    mcfg, tcfg = model_config(opts, ds.feature_dim), train_config(opts)
    val_frac = _float(opts, "val_frac")
    if not 0 <= val_frac < 1:
        raise UsageError("--val-frac must be in [0, 1)")
    out = _outdir(opts)
    model, history, metrics = train_and_evaluate(
        mcfg, tcfg, ds.bags, ds.bags, val_frac=val_frac, scale=_onoff(opts, "standardize"))
    ckpt = checkpoint_from_model(model, extra_config={f"train.{k}": v for k, v in tcfg.as_dict().items()},
                                 history=history)
    save_checkpoint(out / "model.ckpt", ckpt)
    write_csv(out / "metrics.csv", ["epoch", "lr", "train_loss", "val_accuracy", "val_auc"], history)
    result = {"train_accuracy": metrics["accuracy"], "train_auc": metrics["auc"],
              "final_train_loss": history[-1]["train_loss"], "params": model.num_params()}
    write_manifest(out, "train", opts, ds, result, ["model.ckpt", "metrics.csv"], started)
    print(f"trained {mcfg['variant']} (sc={'on' if mcfg['sc'] else 'off'}) for {tcfg.epochs} epochs; "
          f"train accuracy {metrics['accuracy']:.4f}, auc {metrics['auc']:.4f}")
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def _summary_text(summary: dict) -> str:
    return (f"accuracy {summary['accuracy_mean']:.4f} ± {summary['accuracy_std']:.4f}   "
            f"auc {summary['auc_mean']:.4f} ± {summary['auc_std']:.4f}   ({summary['folds']} folds)")


def cmd_cv(args) -> int:
    started = time.time()
    opts = resolve(args)
    ds = load_dataset(opts)
    mcfg, tcfg = model_config(opts, ds.feature_dim), train_config(opts)
    k, reps, jobs = _int(opts, "k"), _int(opts, "reps"), _int(opts, "jobs")
    if k < 2 or reps < 1 or jobs < 1:
        raise UsageError("need --k >= 2, --reps >= 1, --jobs >= 1")
    out = _outdir(opts)
    rows, summary = cross_validate(ds, mcfg, tcfg, k=k, repetitions=reps, seed=derive_seed(_int(opts, "seed"), 4),
                                   jobs=jobs, val_frac=_float(opts, "val_frac"),
                                   scale=_onoff(opts, "standardize"))
    write_csv(out / "folds.csv", FOLD_COLUMNS, rows)
    write_csv(out / "summary.csv", list(summary), [summary])
    write_manifest(out, "cv", opts, ds, summary, ["folds.csv", "summary.csv"], started)
    for r in rows:
        print(f"rep {r['rep']} fold {r['fold']}: accuracy {r['accuracy']:.4f} auc {r['auc']:.4f}")
    print(_summary_text(summary))
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    opts = resolve(args)
    atoms_grid, layers_grid = _int_list(opts, "atoms_grid"), _int_list(opts, "layers_grid")
    ds = load_dataset(opts)
    embed = _int(opts, "embed")
    if min(atoms_grid) < embed:
        raise UsageError(f"every atom count must be >= --embed {embed} (over-complete dictionary)")
    opts["sc"] = "on"
    opts["atoms"] = atoms_grid[0]
    mcfg, tcfg = model_config(opts, ds.feature_dim), train_config(opts)
    k, reps, jobs = _int(opts, "k"), _int(opts, "reps"), _int(opts, "jobs")
    out = _outdir(opts)
    rows = ablate(ds, mcfg, tcfg, atoms_grid, layers_grid, k=k, repetitions=reps,
                  seed=derive_seed(_int(opts, "seed"), 4), jobs=jobs,
                  flops_bag_size=_int(opts, "flops_bag_size"), scale=_onoff(opts, "standardize"))
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    write_manifest(out, "ablate", opts, ds, {"cells": len(rows)}, ["ablation.csv"], started)
    print(f"{'atoms':>6} {'layers':>6} {'params':>10} {'flops':>12} {'accuracy':>16} {'auc':>16}")
    for r in rows:
        print(f"{r['atoms']:>6} {r['layers']:>6} {r['params']:>10} {r['flops']:>12} "
              f"{r['accuracy_mean']:>8.4f}±{r['accuracy_std']:.4f} {r['auc_mean']:>8.4f}±{r['auc_std']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    opts = resolve(args, embed=8, atoms=16, layers=2)
    d_raw, n, seeds = _int(opts, "d_raw"), _int(opts, "instances"), _int(opts, "seeds")
    eps, margin = _float(opts, "eps"), _float(opts, "kink_margin")
    if eps <= 0:
        raise UsageError("--eps must be positive")
    mcfg = model_config(opts, d_raw)
    threshold = 1e-4 if mcfg["sc"] else 1e-6
    worst_by_group: dict[str, float] = {}
    for s in range(seeds):
        cfg = dict(mcfg, seed=derive_seed(_int(opts, "seed"), 1, s))
        model = build_model(**cfg)
        rng = np.random.default_rng([_int(opts, "seed"), 9, s])
        bag = Bag(rng.standard_normal((n, d_raw)), s % 2, f"gc{s}")
        report = grad_check(model, bag, eps=eps, kink_margin=margin, seed=s)
        for name, err in report.per_param.items():
            worst_by_group[name] = max(worst_by_group.get(name, 0.0), err)
    offenders = []
    for name, err in worst_by_group.items():
        flag = "ok" if err < threshold else "FAIL"
        if err >= threshold:
            offenders.append(name)
        print(f"{name:<20} {err:.3e}  {flag}")
    if offenders:
        print(f"gradient check failed (threshold {threshold:g}): {', '.join(offenders)}")
        return 1
    print(f"gradient check passed (threshold {threshold:g})")
    return 0


def _parse_vector(text: str) -> np.ndarray:
    p = Path(text)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    tokens = [t for t in text.replace("\n", ",").split(",") if t.strip()]
    try:
        v = np.array([float(t) for t in tokens])
    except ValueError:
        raise UsageError("--input must be a comma-separated vector or a file holding one") from None
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise UsageError("--input vector is empty or non-finite")
    return v


def _load_dictionary(spec: str) -> np.ndarray:
    if spec.startswith("dct:"):
        try:
            p, m = (int(t) for t in spec[4:].split(","))
            return overcomplete_dct(p, m)
        except ValueError as err:
            raise UsageError(f"--dict dct:p,m: {err}") from None
    if spec.startswith("identity:"):
        try:
            return np.eye(int(spec[len("identity:"):]))
        except ValueError:
            raise UsageError("--dict identity:n expects an integer") from None
    try:
        ckpt = load_checkpoint(spec)
    except (OSError, FormatError) as err:
        raise UsageError(f"cannot load dictionary from {spec}: {err}") from None
    for name in ("sc.dict", "dict"):
        if name in ckpt.tensors:
            return ckpt.tensors[name]
    raise UsageError(f"{spec} holds no sc.dict tensor")


def cmd_solve(args) -> int:
    opts = resolve(args)
    if not opts.get("dict") or not opts.get("input") or opts.get("lambda") is None:
        raise UsageError("solve needs --dict, --input and --lambda")
    D = _load_dictionary(str(opts["dict"]))
    x = _parse_vector(str(opts["input"]))
    if x.size != D.shape[0]:
        raise UsageError(f"--input has {x.size} entries, dictionary has {D.shape[0]} rows")
    lam = _float(opts, "lambda")
    if lam < 0:
        raise UsageError("--lambda must be non-negative")
    mu = _float(opts, "mu") if opts.get("mu") is not None else spectral_norm(D) ** 2
    if mu <= 0:
        raise UsageError("--mu must be positive")
    alpha, iters = ista_solve(D, x, lam, mu, max_iter=_int(opts, "max_iter"), tol=_float(opts, "tol"))
    print("alpha=" + ",".join(repr(float(a) + 0.0) for a in alpha))
    print(f"objective={sc_objective(D, x, alpha, lam)!r}")
    print(f"iterations={iters}")
    print(f"sparsity={float(np.mean(alpha == 0.0))!r}")
    print(f"kkt_residual={kkt_residual(D, x, alpha, lam)!r}")
    print(f"mu={mu!r}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with option defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="bag CSV (bag_id,label,f0,...)")
    p.add_argument("--synth", help="'default' or a key=value synthetic config file")
    p.add_argument("--synth-set", action="append", metavar="KEY=VALUE",
                   help="override one synthetic generator parameter (repeatable)")
    p.add_argument("--standardize", choices=["on", "off"], help="z-score features (default on)")


def _add_model(p: argparse.ArgumentParser, with_sc: bool = True) -> None:
    p.add_argument("--variant", help="abmil | abmil_gated | max | mean")
    if with_sc:
        p.add_argument("--sc", help="on | off")
    p.add_argument("--atoms", type=int, help="dictionary atoms m")
    p.add_argument("--layers", type=int, help="unrolled layers L")
    p.add_argument("--embed", type=int, help="embedding width p")
    p.add_argument("--attention-dim", type=int)
    p.add_argument("--lambda-init", type=float, help="initial sparsity threshold")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--val-frac", type=float, help="stratified validation hold-out for model selection")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"scmil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross-validation with repetitions")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--k", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="atoms x layers grid")
    _add_common(p), _add_data(p), _add_model(p, with_sc=False), _add_train(p)
    p.add_argument("--atoms-grid")
    p.add_argument("--layers-grid")
    p.add_argument("--k", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--flops-bag-size", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_common(p), _add_model(p)
    p.add_argument("--d-raw", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--kink-margin", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("solve", help="run ISTA on one vector")
    p.add_argument("--config")
    p.add_argument("--dict", help="checkpoint path, dct:p,m or identity:n")
    p.add_argument("--input", help="comma-separated vector or a file holding one")
    p.add_argument("--lambda", type=float)
    p.add_argument("--mu", type=float, help="defaults to ||D||_2^2")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", None) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = args.func
    try:
        return func(args)
    except UsageError as err:
        parser.error(str(err))
    except (TrainingError, FormatError, ValueError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
