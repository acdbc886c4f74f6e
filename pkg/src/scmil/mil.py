"""Attention-based MIL with an optional sparse-coding stage.

Pipeline per bag: embed each instance (affine + ReLU), optionally replace the
embedding by its LISTA sparse code, pool the instance vectors into one bag
vector (attention, gated attention, max or mean), then a logistic head.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .exceptions import InvalidStateError
from .linalg import sigmoid
from .sparse_coding import LAMBDA_INIT, LISTACache, ScModuleParams, init_sc_module, lista_backward, lista_forward

VARIANTS = ("abmil", "abmil_gated", "max_pool", "mean_pool")
ATTENTION_DIM = 128
PROB_EPS = 1e-7

MilGrads = dict[str, np.ndarray]


@dataclass
class Bag:
    instances: np.ndarray   # (n, d_raw)
    label: int
    id: str = ""

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim == 1:
            self.instances = self.instances[None, :]
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError(f"bag {self.id!r}: need a non-empty (n, d) instance array")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.id!r}: label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)

    def __len__(self) -> int:
        return self.instances.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.instances.shape[1]


@dataclass
class AttentionParams:
    V: np.ndarray                   # (h, dim)
    w: np.ndarray                   # (h,)
    U: np.ndarray | None = None     # (h, dim), gated variant only

    @property
    def gated(self) -> bool:
        return self.U is not None

    @property
    def in_dim(self) -> int:
        return self.V.shape[1]


@dataclass
class MilModel:
    variant: str
    embed_w: np.ndarray             # (p, d_raw)
    embed_b: np.ndarray             # (p,)
    head_w: np.ndarray              # (dim,)
    head_b: np.ndarray              # (1,)
    sc: ScModuleParams | None = None
    pooling: AttentionParams | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        self.head_b = np.asarray(self.head_b, dtype=np.float64).reshape(1)
        self.validate()

    @property
    def d_raw(self) -> int:
        return self.embed_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embed_w.shape[0]

    @property
    def pooled_dim(self) -> int:
        return self.sc.num_atoms if self.sc is not None else self.embed_dim

    def validate(self) -> None:
        """Check the p -> (m) -> pooling -> head dimension chain."""
        p = self.embed_dim
        if self.embed_b.shape != (p,):
            raise InvalidStateError(f"embed bias has shape {self.embed_b.shape}, expected ({p},)")
        if self.sc is not None and self.sc.embed_dim != p:
            raise InvalidStateError(f"embedding width {p} != dictionary rows {self.sc.embed_dim}")
        dim = self.pooled_dim
        attention = self.variant in ("abmil", "abmil_gated")
        if attention:
            if self.pooling is None:
                raise InvalidStateError(f"variant {self.variant} needs attention parameters")
            if self.pooling.in_dim != dim:
                raise InvalidStateError(f"attention expects {self.pooling.in_dim}-dim inputs, got {dim}")
            if self.pooling.gated != (self.variant == "abmil_gated"):
                raise InvalidStateError("gate parameters do not match the variant")
        elif self.pooling is not None:
            raise InvalidStateError(f"variant {self.variant} takes no attention parameters")
        if self.head_w.shape != (dim,):
            raise InvalidStateError(f"head expects {self.head_w.shape}, pooled dim is {dim}")

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Ordered name -> array map; arrays are live views for in-place updates."""
        out = {"embed.weight": self.embed_w, "embed.bias": self.embed_b}
        if self.sc is not None:
            out.update(self.sc.named_arrays("sc."))
        if self.pooling is not None:
            out["attn.V"] = self.pooling.V
            if self.pooling.U is not None:
                out["attn.U"] = self.pooling.U
            out["attn.w"] = self.pooling.w
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.named_parameters().values())

    def config(self) -> dict:
        cfg = {"variant": self.variant, "d_raw": self.d_raw, "embed_dim": self.embed_dim,
               "sc": self.sc is not None}
        if self.sc is not None:
            cfg.update(atoms=self.sc.num_atoms, layers=self.sc.num_layers,
                       lambda_hidden=",".join(str(w.shape[0]) for w in self.sc.lambda_net.weights[:-1]))
        if self.pooling is not None:
            cfg["attention_dim"] = self.pooling.V.shape[0]
        return cfg

    def copy(self) -> "MilModel":
        clone = build_model(**self.config())
        for name, arr in clone.named_parameters().items():
            arr[...] = self.named_parameters()[name]
        return clone


def _uniform(rng, fan_out, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def build_model(variant: str, d_raw: int, embed_dim: int, sc: bool = True, atoms: int | None = None,
                layers: int = 5, attention_dim: int = ATTENTION_DIM, seed: int = 0,
                lambda_hidden=None, lambda_init: float | None = LAMBDA_INIT) -> MilModel:
    """Fresh model. Weights ~ uniform(+-1/sqrt(fan_in)), biases zero.

    The SC module gets its own seed stream derived from ``seed``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    rng = np.random.default_rng([seed, 1])
    embed_w = _uniform(rng, embed_dim, d_raw)
    sc_params = None
    if sc:
        if atoms is None:
            raise ValueError("atoms must be given when sc is enabled")
        if atoms < embed_dim:
            raise ValueError(f"dictionary must be over-complete: atoms={atoms} < embed_dim={embed_dim}")
        kwargs = {"lambda_init": lambda_init}
        if lambda_hidden is not None:
            if isinstance(lambda_hidden, str):
                lambda_hidden = tuple(int(h) for h in lambda_hidden.split(","))
            kwargs["hidden"] = tuple(lambda_hidden)
        sc_params = init_sc_module(embed_dim, atoms, layers, seed=int(rng.integers(2**31)), **kwargs)
    dim = atoms if sc else embed_dim
    pooling = None
    if variant in ("abmil", "abmil_gated"):
        V = _uniform(rng, attention_dim, dim)
        U = _uniform(rng, attention_dim, dim) if variant == "abmil_gated" else None
        w = _uniform(rng, 1, attention_dim)[0]
        pooling = AttentionParams(V=V, w=w, U=U)
    head_w = _uniform(rng, 1, dim)[0]
    return MilModel(variant=variant, embed_w=embed_w, embed_b=np.zeros(embed_dim),
                    head_w=head_w, head_b=np.zeros(1), sc=sc_params, pooling=pooling)


# ---------------------------------------------------------------------------
# pooling


def _check_bag_matrix(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 1:
        H = H[None, :]
    if H.ndim != 2 or H.shape[0] == 0:
        raise ValueError("pooling needs a non-empty bag of equal-length vectors")
    return H


def _softmax(e: np.ndarray) -> np.ndarray:
    z = np.exp(e - np.max(e))
    return z / np.sum(z)


def attention_pool(params: AttentionParams, H, variant: str | None = None):
    """Attention pooling over the rows of ``H``.

    Scores are ``w . tanh(V h)`` (plain) or ``w . (tanh(V h) * sigmoid(U h))``
    (gated), normalised by softmax. Returns ``(z, a)`` with ``z = sum_i a_i h_i``.
    """
    z, a, _ = _attention_forward(params, _check_bag_matrix(H), variant)
    return z, a


def _attention_forward(params: AttentionParams, H: np.ndarray, variant: str | None):
    gated = params.gated if variant is None else variant == "abmil_gated"
    if gated and params.U is None:
        raise ValueError("gated attention needs U")
    if H.shape[1] != params.in_dim:
        raise ValueError(f"attention expects {params.in_dim}-dim instances, got {H.shape[1]}")
    S = np.tanh(H @ params.V.T)
    G = sigmoid(H @ params.U.T) if gated else None
    K = S * G if gated else S
    e = K @ params.w
    a = _softmax(e)
    z = a @ H
    return z, a, {"S": S, "G": G, "K": K, "gated": gated}


def max_pool(H) -> np.ndarray:
    return np.max(_check_bag_matrix(H), axis=0)


def mean_pool(H) -> np.ndarray:
    H = _check_bag_matrix(H)
    return np.sum(H, axis=0) / H.shape[0]


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    variant: str
    x: np.ndarray               # raw instances (n, d_raw)
    embed_pre: np.ndarray       # (n, p) before ReLU
    embeddings: np.ndarray      # (n, p)
    codes: np.ndarray | None    # (n, m) when SC is on
    lam: np.ndarray | None      # (n,)
    H: np.ndarray               # pooled inputs
    attention: np.ndarray | None
    z: np.ndarray
    logit: float
    prob: float
    sc_cache: LISTACache | None = None
    att_cache: dict = field(default_factory=dict)

    @property
    def sparsity(self) -> float | None:
        return None if self.sc_cache is None else self.sc_cache.sparsity

    def kink_margin(self) -> float:
        """Distance of the nearest non-smooth point (ReLU, threshold, max tie)."""
        margins = [float(np.min(np.abs(self.embed_pre)))]
        if self.sc_cache is not None:
            margins.append(self.sc_cache.kink_margin())
        if self.variant == "max_pool" and self.H.shape[0] > 1:
            top2 = -np.sort(-self.H, axis=0)[:2]
            gap = top2[0] - top2[1]
            # exact zero ties come from dead units and stay put under perturbation
            gap = np.where((top2[0] == 0) & (top2[1] == 0), np.inf, gap)
            margins.append(float(np.min(gap)))
        return min(margins)


def embed_instance(model: MilModel, x_raw) -> np.ndarray:
    x = np.asarray(x_raw, dtype=np.float64)
    if x.shape[-1] != model.d_raw:
        raise ValueError(f"instance has {x.shape[-1]} features, model expects {model.d_raw}")
    return np.maximum(x @ model.embed_w.T + model.embed_b, 0.0)


def _instances(model: MilModel, bag) -> np.ndarray:
    x = bag.instances if isinstance(bag, Bag) else _check_bag_matrix(bag)
    if x.shape[1] != model.d_raw:
        raise InvalidStateError(f"bag has {x.shape[1]} features, model expects {model.d_raw}")
    return x


def forward(model: MilModel, bag) -> ForwardTrace:
    """Bag probability plus everything backward() needs."""
    model.validate()
    x = _instances(model, bag)
    pre = x @ model.embed_w.T + model.embed_b
    emb = np.maximum(pre, 0.0)
    codes = lam = cache = None
    H = emb
    if model.sc is not None:
        codes, cache = lista_forward(model.sc, emb)
        lam = cache.lam
        H = codes
    a = None
    att_cache = {}
    if model.variant in ("abmil", "abmil_gated"):
        z, a, att_cache = _attention_forward(model.pooling, H, model.variant)
    elif model.variant == "max_pool":
        z = np.max(H, axis=0)
    else:
        z = np.sum(H, axis=0) / H.shape[0]
    logit = float(z @ model.head_w + model.head_b[0])
    prob = float(sigmoid(logit))
    return ForwardTrace(variant=model.variant, x=x, embed_pre=pre, embeddings=emb, codes=codes,
                        lam=lam, H=H, attention=a, z=z, logit=logit, prob=prob,
                        sc_cache=cache, att_cache=att_cache)


def bce_loss(prob: float, label: int) -> float:
    """Binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    p = min(max(prob, PROB_EPS), 1.0 - PROB_EPS)
    return -(label * math.log(p) + (1 - label) * math.log(1.0 - p))


def predict(model: MilModel, bag) -> float:
    return forward(model, bag).prob


def backward(model: MilModel, trace: ForwardTrace, label: int) -> MilGrads:
    """Gradients of bce_loss(trace.prob, label) for every named parameter."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    if trace.variant != model.variant or trace.x.shape[1] != model.d_raw \
            or trace.H.shape[1] != model.pooled_dim or (trace.sc_cache is None) != (model.sc is None):
        raise InvalidStateError("trace was not produced by this model")
    grads: MilGrads = {}
    # d loss / d logit of the clamped BCE; zero where the clamp is active
    p = trace.prob
    dlogit = p - label if PROB_EPS <= p <= 1.0 - PROB_EPS else 0.0
    grads["head.weight"] = dlogit * trace.z
    grads["head.bias"] = np.array([dlogit])
    dz = dlogit * model.head_w
    H = trace.H

    if model.variant in ("abmil", "abmil_gated"):
        ac, att = trace.att_cache, model.pooling
        a = trace.attention
        dH = a[:, None] * dz[None, :]
        da = H @ dz
        de = a * (da - a @ da)
        grads_w = ac["K"].T @ de
        dK = de[:, None] * att.w[None, :]
        S, G = ac["S"], ac["G"]
        if ac["gated"]:
            dS = dK * G
            dpre_g = dK * S * G * (1.0 - G)
            grads["attn.U"] = dpre_g.T @ H
            dH += dpre_g @ att.U
        else:
            dS = dK
        dpre_s = dS * (1.0 - S * S)
        grads["attn.V"] = dpre_s.T @ H
        dH += dpre_s @ att.V
        grads["attn.w"] = grads_w
    elif model.variant == "max_pool":
        dH = np.zeros_like(H)
        idx = np.argmax(H, axis=0)
        dH[idx, np.arange(H.shape[1])] = dz
    else:
        dH = np.broadcast_to(dz / H.shape[0], H.shape).copy()

    if model.sc is not None:
        sc_g = lista_backward(model.sc, trace.sc_cache, dH)
        grads.update(sc_g.named_arrays("sc."))
        d_emb = sc_g.d_input
    else:
        d_emb = dH
    d_pre = np.where(trace.embed_pre > 0, d_emb, 0.0)
    grads["embed.weight"] = d_pre.T @ trace.x
    grads["embed.bias"] = d_pre.sum(axis=0)
    return {name: grads[name] for name in model.named_parameters()}


def loss_and_grads(model: MilModel, bag: Bag):
    trace = forward(model, bag)
    return bce_loss(trace.prob, bag.label), backward(model, trace, bag.label), trace
