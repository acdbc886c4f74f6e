"""Optimisation loop: Adam with decoupled weight decay, cosine LR, batch size 1."""

from dataclasses import asdict, dataclass, field
import logging
import math

import numpy as np

from .data import accuracy, auc
from .exceptions import TrainingError, UndefinedMetricError
from .mil import Bag, MilModel, bce_loss, backward, forward

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 2


@dataclass
class TrainConfig:
    epochs: int = 40
    lr0: float = 1e-4
    weight_decay: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    kink_margin: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total)) / 2 for 0 <= epoch < total."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch must lie in [0, {total}), got {epoch}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def decays(name: str) -> bool:
    """Weight decay applies to everything except log_mu and lambda-net biases."""
    if name.endswith("log_mu"):
        return False
    return not (".lambda.b" in name)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Decoupled weight decay (``p *= 1 - lr * wd``) is applied before the
    moment update, as AdamW does.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}", param=name)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and decays(name):
            p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


def evaluate(model: MilModel, bags: list[Bag]) -> dict:
    """Mean loss, accuracy and AUC (NaN if only one class is present)."""
    probs = np.array([forward(model, b).prob for b in bags])
    labels = np.array([b.label for b in bags])
    out = {"loss": float(np.mean([bce_loss(p, y) for p, y in zip(probs, labels)])),
           "accuracy": accuracy(probs, labels)}
    try:
        out["auc"] = auc(probs, labels)
    except UndefinedMetricError:
        out["auc"] = float("nan")
    out["probs"] = probs
    return out


def _better(cand: tuple[float, float], best: tuple[float, float] | None) -> bool:
    if best is None:
        return True
    acc, a = cand
    bacc, ba = best
    if acc != bacc:
        return acc > bacc
    a = -math.inf if math.isnan(a) else a
    ba = -math.inf if math.isnan(ba) else ba
    return a > ba


def fit(model: MilModel, train: list[Bag], config: TrainConfig, val: list[Bag] | None = None,
        state: AdamState | None = None):
    """Train ``model`` in place, one Adam step per bag.

    Bag order is reshuffled each epoch from ``(seed, epoch)``. With a
    validation split the best-accuracy epoch (AUC breaks ties) is restored
    at the end; without one the final parameters are kept.

    Returns ``(model, history)``; history rows carry epoch, lr, train_loss,
    val_accuracy and val_auc.
    """
    if not train:
        raise ValueError("fit needs at least one training bag")
    state = state if state is not None else AdamState()
    params = model.named_parameters()
    history = []
    best_key, best_params = None, None
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        order = np.random.default_rng([config.seed, SHUFFLE_STREAM, epoch]).permutation(len(train))
        total = 0.0
        for i in order:
            bag = train[i]
            trace = forward(model, bag)
            loss = bce_loss(trace.prob, bag.label)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}", epoch=epoch)
            grads = backward(model, trace, bag.label)
            try:
                adam_step(state, params, grads, lr, config)
            except TrainingError as err:
                err.epoch = epoch
                raise TrainingError(f"epoch {epoch}: {err}", param=err.param, epoch=epoch) from err
            total += loss
        row = {"epoch": epoch, "lr": lr, "train_loss": total / len(train),
               "val_accuracy": float("nan"), "val_auc": float("nan")}
        if val:
            ev = evaluate(model, val)
            row["val_accuracy"], row["val_auc"] = ev["accuracy"], ev["auc"]
            key = (ev["accuracy"], ev["auc"])
            if _better(key, best_key):
                best_key = key
                best_params = {k: a.copy() for k, a in params.items()}
        log.debug("epoch %d lr %.3g loss %.5f", epoch, lr, row["train_loss"])
        history.append(row)
    if best_params is not None:
        for k, a in params.items():
            a[...] = best_params[k]
    return model, history


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]
    coords_checked: int
    resamples: int
    margin: float

    def passed(self, threshold: float) -> bool:
        return self.max_rel_err < threshold


# Central differences at eps=1e-5 carry ~1e-11 of roundoff; entries smaller than
# this floor are compared on an absolute scale.
GRADCHECK_FLOOR = 1e-4
GRADCHECK_MAX_COORDS = 2000


def rel_error(analytic: float, numeric: float, floor: float = GRADCHECK_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: MilModel, bag: Bag, eps: float = 1e-5, kink_margin: float = 1e-3,
               max_coords: int = GRADCHECK_MAX_COORDS, seed: int = 0,
               max_resample: int = 100) -> GradCheckReport:
    """Compare backward() against central differences of the bag loss.

    If any ReLU, soft-threshold or max-pool decision sits within
    ``kink_margin`` of switching, the bag's features are redrawn (same shape,
    seeded) until the margin is respected. Large models are checked on a
    deterministic subsample of at most ``max_coords`` coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng([seed, 7])
    x = bag.instances.copy()
    scale = float(np.std(x)) or 1.0
    resamples = 0
    while True:
        cur = Bag(x, bag.label, bag.id)
        trace = forward(model, cur)
        margin = trace.kink_margin()
        if margin >= kink_margin:
            break
        if resamples >= max_resample:
            raise RuntimeError(f"could not find a bag with kink margin >= {kink_margin} "
                               f"after {max_resample} redraws (last {margin:.3g})")
        resamples += 1
        x = rng.standard_normal(x.shape) * scale + float(np.mean(bag.instances))
    grads = backward(model, trace, cur.label)
    params = model.named_parameters()
    coords = [(name, i) for name, arr in params.items() for i in range(arr.size)]
    if len(coords) > max_coords:
        pick = np.sort(np.random.default_rng([seed, 11]).choice(len(coords), max_coords, replace=False))
        coords = [coords[k] for k in pick]
    per_param: dict[str, float] = {}
    for name, i in coords:
        arr = params[name]
        orig = arr.flat[i]
        arr.flat[i] = orig + eps
        lp = bce_loss(forward(model, cur).prob, cur.label)
        arr.flat[i] = orig - eps
        lm = bce_loss(forward(model, cur).prob, cur.label)
        arr.flat[i] = orig
        num = (lp - lm) / (2 * eps)
        err = rel_error(float(grads[name].flat[i]), num)
        per_param[name] = max(per_param.get(name, 0.0), err)
    worst = max(per_param, key=per_param.get)
    return GradCheckReport(max_rel_err=per_param[worst], worst_param=worst, per_param=per_param,
                           coords_checked=len(coords), resamples=resamples, margin=margin)
