"""Cross-validation and ablation drivers shared by the CLI and the tests."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
import math

import numpy as np

from .data import Dataset, kfold_split, standardize
from .mil import Bag, build_model
from .sparse_coding import LAMBDA_HIDDEN, lista_flops
from .training import TrainConfig, evaluate, fit

FOLD_COLUMNS = ["rep", "fold", "n_train", "n_test", "accuracy", "auc", "final_train_loss"]


def derive_seed(*parts: int) -> int:
    """Deterministic 31-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] >> 1)


def holdout_split(bags: list[Bag], frac: float, seed: int):
    """Stratified split into (train, held_out); at least one bag per class is held out."""
    if not 0 < frac < 1:
        raise ValueError("holdout fraction must be in (0, 1)")
    rng = np.random.default_rng([seed, 6])
    held = set()
    for c in (0, 1):
        idx = [i for i, b in enumerate(bags) if b.label == c]
        if len(idx) < 2:
            continue
        n = min(max(1, round(frac * len(idx))), len(idx) - 1)
        held.update(rng.permutation(idx)[:n].tolist())
    return ([b for i, b in enumerate(bags) if i not in held],
            [b for i, b in enumerate(bags) if i in held])


def train_and_evaluate(model_cfg: dict, train_cfg: TrainConfig, train: list[Bag], test: list[Bag],
                       val_frac: float = 0.0, scale: bool = True):
    """Fit a fresh model on ``train`` and score it on ``test``.

    Features are z-scored with training statistics when ``scale`` is set.
    Returns ``(model, history, test_metrics)``.
    """
    val = None
    if val_frac > 0:
        train, val = holdout_split(train, val_frac, train_cfg.seed)
    if scale:
        extra = [val] if val is not None else []
        train, test, *rest = standardize(train, test, *extra)
        if rest:
            val = rest[0]
    model = build_model(**model_cfg)
    model, history = fit(model, train, train_cfg, val=val)
    metrics = evaluate(model, test)
    return model, history, metrics


def _run_fold(job):
    dataset, model_cfg, train_cfg, rep, fold, train_ids, test_ids, val_frac, scale = job
    fold_seed = derive_seed(train_cfg.seed, rep, fold)
    cfg = dict(model_cfg, seed=derive_seed(model_cfg.get("seed", 0), rep, fold))
    tcfg = replace(train_cfg, seed=fold_seed)
    _, history, metrics = train_and_evaluate(cfg, tcfg, dataset.subset(train_ids), dataset.subset(test_ids),
                                             val_frac=val_frac, scale=scale)
    return {"rep": rep, "fold": fold, "n_train": len(train_ids), "n_test": len(test_ids),
            "accuracy": metrics["accuracy"], "auc": metrics["auc"],
            "final_train_loss": history[-1]["train_loss"]}


def cross_validate(dataset: Dataset, model_cfg: dict, train_cfg: TrainConfig, k: int = 10,
                   repetitions: int = 5, seed: int = 0, jobs: int = 1, val_frac: float = 0.0,
                   scale: bool = True):
    """k-fold x repetitions; returns ``(fold_rows, summary)``.

    Rows come back sorted by (rep, fold) whatever order the workers finish in.
    """
    plan = kfold_split(dataset, k, repetitions, seed)
    jobs_list = [(dataset, model_cfg, train_cfg, r, f, tr, te, val_frac, scale) for r, f, tr, te in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_fold, jobs_list))
    else:
        rows = [_run_fold(j) for j in jobs_list]
    rows.sort(key=lambda r: (r["rep"], r["fold"]))
    return rows, summarize(rows)


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std


def summarize(rows: list[dict]) -> dict:
    """Mean and sample standard deviation of accuracy and AUC over fold rows."""
    acc_mean, acc_std = _mean_std([r["accuracy"] for r in rows])
    auc_mean, auc_std = _mean_std([r["auc"] for r in rows])
    return {"folds": len(rows), "accuracy_mean": acc_mean, "accuracy_std": acc_std,
            "auc_mean": auc_mean, "auc_std": auc_std}


ABLATION_COLUMNS = ["atoms", "layers", "params", "flops", "accuracy_mean", "accuracy_std",
                    "auc_mean", "auc_std"]


def sc_flops(embed_dim: int, atoms: int, layers: int, bag_size: int,
             hidden: tuple[int, int] = LAMBDA_HIDDEN) -> int:
    """Analytic SC-module FLOPs for a bag of ``bag_size`` instances."""
    return bag_size * lista_flops(embed_dim, atoms, layers, hidden)


def ablate(dataset: Dataset, model_cfg: dict, train_cfg: TrainConfig, atoms_grid, layers_grid,
           k: int = 5, repetitions: int = 1, seed: int = 0, jobs: int = 1, flops_bag_size: int = 120,
           scale: bool = True) -> list[dict]:
    """Cross-validate every (atoms, layers) cell of the grid."""
    atoms_grid, layers_grid = list(atoms_grid), list(layers_grid)
    if not atoms_grid or not layers_grid:
        raise ValueError("ablation grid is empty")
    out = []
    for m in atoms_grid:
        for L in layers_grid:
            cfg = dict(model_cfg, sc=True, atoms=m, layers=L)
            params = build_model(**cfg).num_params()
            _, summary = cross_validate(dataset, cfg, train_cfg, k, repetitions, seed, jobs, scale=scale)
            hidden = cfg.get("lambda_hidden") or LAMBDA_HIDDEN
            if isinstance(hidden, str):
                hidden = tuple(int(h) for h in hidden.split(","))
            out.append({"atoms": m, "layers": L, "params": params,
                        "flops": sc_flops(cfg["embed_dim"], m, L, flops_bag_size, tuple(hidden)),
                        "accuracy_mean": summary["accuracy_mean"], "accuracy_std": summary["accuracy_std"],
                        "auc_mean": summary["auc_mean"], "auc_std": summary["auc_std"]})
    return out
