"""Bag datasets: CSV I/O, a synthetic generator, stratified folds, metrics."""

from dataclasses import asdict, dataclass, field
import csv
import hashlib
import io
import math
from pathlib import Path

import numpy as np

from .exceptions import FormatError, UndefinedMetricError
from .mil import Bag

SYNTH_STREAM = 3


@dataclass
class Dataset:
    bags: list[Bag]
    feature_dim: int
    name: str = ""

    def __post_init__(self):
        for b in self.bags:
            if b.feature_dim != self.feature_dim:
                raise ValueError(f"bag {b.id!r} has {b.feature_dim} features, dataset has {self.feature_dim}")

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=int)

    def by_id(self) -> dict[str, Bag]:
        return {b.id: b for b in self.bags}

    def subset(self, ids) -> list[Bag]:
        index = self.by_id()
        return [index[i] for i in ids]

    def fingerprint(self) -> str:
        return hashlib.sha256(dataset_to_csv(self).encode()).hexdigest()

    def num_instances(self) -> int:
        return sum(len(b) for b in self.bags)


# ---------------------------------------------------------------------------
# CSV


def load_bags_csv(path, name: str | None = None) -> Dataset:
    """Read ``bag_id,label,f0,...`` rows (one instance per row) into bags.

    Bags keep their first-appearance order.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_bags_csv(fh, name=name or path.stem)


def parse_bags_csv(fh, name: str = "") -> Dataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty file", lineno=1) from None
    if len(header) < 3 or header[0] != "bag_id" or header[1] != "label":
        raise FormatError("header must start with bag_id,label,f0", lineno=1)
    d = len(header) - 2
    rows: dict[str, list] = {}
    labels: dict[str, int] = {}
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != d + 2:
            raise FormatError(f"expected {d + 2} fields, got {len(row)}", lineno=lineno)
        bag_id = row[0]
        try:
            label = int(row[1])
            feats = [float(v) for v in row[2:]]
        except ValueError as err:
            raise FormatError(str(err), lineno=lineno) from None
        if label not in (0, 1):
            raise FormatError(f"label must be 0 or 1, got {label}", lineno=lineno)
        if not all(math.isfinite(v) for v in feats):
            raise FormatError("non-finite feature value", lineno=lineno)
        if bag_id in labels and labels[bag_id] != label:
            raise FormatError(f"bag {bag_id!r} has rows with labels {labels[bag_id]} and {label}",
                              lineno=lineno)
        labels.setdefault(bag_id, label)
        rows.setdefault(bag_id, []).append(feats)
    if not rows:
        raise FormatError("no instance rows", lineno=reader.line_num or 1)
    bags = [Bag(np.array(r), labels[b], b) for b, r in rows.items()]
    return Dataset(bags, d, name)


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(["bag_id", "label"] + [f"f{j}" for j in range(ds.feature_dim)]) + "\n")
    for b in ds.bags:
        for inst in b.instances:
            buf.write(",".join([b.id, str(b.label)] + [repr(float(v)) for v in inst]) + "\n")
    return buf.getvalue()


def write_bags_csv(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    num_bags: int = 200
    bag_size_min: int = 20
    bag_size_max: int = 50
    d_raw: int = 64
    true_dict_atoms: int = 32
    positive_atom_set_size: int = 4
    positive_instance_rate: float = 0.1
    noise_sigma: float = 0.05
    code_sparsity: int = 3
    coef_min: float = 1.0
    coef_max: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_bags < 2:
            raise ValueError("num_bags must be >= 2")
        if not 1 <= self.bag_size_min <= self.bag_size_max:
            raise ValueError("need 1 <= bag_size_min <= bag_size_max")
        if not 1 <= self.positive_atom_set_size < self.true_dict_atoms:
            raise ValueError("positive_atom_set_size must be in [1, true_dict_atoms)")
        if not 1 <= self.code_sparsity < self.true_dict_atoms:
            raise ValueError("code_sparsity must be in [1, true_dict_atoms)")
        if self.code_sparsity > self.true_dict_atoms - self.positive_atom_set_size:
            raise ValueError("not enough negative atoms for the requested code sparsity")
        if not 0 < self.positive_instance_rate <= 1:
            raise ValueError("positive_instance_rate must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < self.coef_min <= self.coef_max:
            raise ValueError("need 0 < coef_min <= coef_max")
        if self.d_raw < 1:
            raise ValueError("d_raw must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthTruth:
    """Ground truth kept alongside a synthetic dataset (for oracles)."""
    dictionary: np.ndarray
    positive_atoms: np.ndarray
    instance_labels: dict[str, np.ndarray] = field(default_factory=dict)


def true_dictionary(cfg: SynthConfig, rng) -> np.ndarray:
    """Unit-norm atoms; orthonormal when the dictionary is not over-complete."""
    g = rng.standard_normal((cfg.d_raw, cfg.true_dict_atoms))
    if cfg.true_dict_atoms <= cfg.d_raw:
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    return g / np.linalg.norm(g, axis=0)


def synth_generate(cfg: SynthConfig, return_truth: bool = False):
    """Bags of noisy sparse combinations of a hidden dictionary.

    Every instance uses ``code_sparsity`` atoms with coefficient magnitudes
    in [coef_min, coef_max] and random signs. Negative instances draw atoms
    only from outside the positive set; a positive instance swaps one of its
    atoms for a positive-set atom with a positive coefficient. Half the bags
    (rounded down) are positive and hold ``ceil(rate * n)`` positive
    instances at random positions.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, SYNTH_STREAM])
    D = true_dictionary(cfg, rng)
    pos_atoms = rng.choice(cfg.true_dict_atoms, cfg.positive_atom_set_size, replace=False)
    neg_atoms = np.setdiff1d(np.arange(cfg.true_dict_atoms), pos_atoms)
    n_pos_bags = cfg.num_bags // 2
    bag_labels = np.array([1] * n_pos_bags + [0] * (cfg.num_bags - n_pos_bags))
    rng.shuffle(bag_labels)
    truth = SynthTruth(D, np.sort(pos_atoms))
    bags = []
    for b, label in enumerate(bag_labels):
        n = int(rng.integers(cfg.bag_size_min, cfg.bag_size_max + 1))
        inst_labels = np.zeros(n, dtype=int)
        if label:
            k = math.ceil(cfg.positive_instance_rate * n)
            inst_labels[rng.choice(n, k, replace=False)] = 1
        X = np.empty((n, cfg.d_raw))
        for i in range(n):
            support = rng.choice(neg_atoms, cfg.code_sparsity, replace=False)
            coef = rng.uniform(cfg.coef_min, cfg.coef_max, cfg.code_sparsity)
            coef *= rng.choice([-1.0, 1.0], cfg.code_sparsity)
            if inst_labels[i]:
                support[0] = rng.choice(pos_atoms)
                coef[0] = abs(coef[0])
            X[i] = D[:, support] @ coef
        if cfg.noise_sigma > 0:
            X += cfg.noise_sigma * rng.standard_normal(X.shape)
        has_pos = bool(inst_labels.any())
        if has_pos != bool(label):
            raise AssertionError(f"bag {b}: label {label} but positive instances present={has_pos}")
        bag_id = f"bag{b:04d}"
        truth.instance_labels[bag_id] = inst_labels
        bags.append(Bag(X, int(label), bag_id))
    ds = Dataset(bags, cfg.d_raw, "synthetic")
    return (ds, truth) if return_truth else ds


def standardize(train: list[Bag], *others: list[Bag]):
    """z-score features with statistics of the training instances.

    Returns the transformed training list followed by each other list.
    """
    X = np.concatenate([b.instances for b in train])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0

    def apply(bags):
        return [Bag((b.instances - mean) / std, b.label, b.id) for b in bags]

    return [apply(train)] + [apply(o) for o in others]


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldPlan:
    k: int
    repetitions: int
    seed: int
    # folds[rep][fold] = (train_ids, test_ids)
    folds: list[list[tuple[list[str], list[str]]]]

    def __iter__(self):
        for r, rep in enumerate(self.folds):
            for f, (train, test) in enumerate(rep):
                yield r, f, train, test


def kfold_split(dataset: Dataset, k: int, repetitions: int = 1, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan, reshuffled per repetition.

    Each class is permuted and dealt round-robin across folds, continuing
    the deal where the previous class stopped so fold sizes stay balanced.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    ids = np.array([b.id for b in dataset.bags])
    labels = dataset.labels
    for c in (0, 1):
        count = int(np.sum(labels == c))
        if count < k:
            raise ValueError(f"class {c} has only {count} bags, fewer than k={k}; use a smaller k")
    plan = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, 4, rep])
        buckets: list[list[str]] = [[] for _ in range(k)]
        offset = 0
        for c in (0, 1):
            members = ids[labels == c][rng.permutation(int(np.sum(labels == c)))]
            for j, bag_id in enumerate(members):
                buckets[(offset + j) % k].append(str(bag_id))
            offset = (offset + len(members)) % k
        order = {str(b): i for i, b in enumerate(ids)}
        rep_folds = []
        for f in range(k):
            test = sorted(buckets[f], key=order.get)
            test_set = set(test)
            train = [str(b) for b in ids if str(b) not in test_set]
            rep_folds.append((train, test))
        plan.append(rep_folds)
    return FoldPlan(k=k, repetitions=repetitions, seed=seed, folds=plan)


# ---------------------------------------------------------------------------
# metrics


def _pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be non-empty 1-D arrays of equal length")
    return s, y


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    """Fraction of bags whose ``pred >= threshold`` agrees with the label."""
    s, y = _pair(preds, labels)
    return float(np.mean((s >= threshold).astype(int) == y))


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of the ROC area; ties count one half."""
    s, y = _pair(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    diff = pos[:, None] - neg[None, :]
    wins = np.sum(diff > 0) + 0.5 * np.sum(diff == 0)
    return float(wins / (pos.size * neg.size))
