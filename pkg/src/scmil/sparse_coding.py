"""Sparse coding: the ISTA reference solver and the unrolled LISTA module.

The LISTA module keeps one dictionary ``D`` (p x m) and one stepsize
``mu = exp(log_mu)`` shared by every layer. Each layer computes

    alpha <- S_lam(W_t @ alpha + W_e @ x),  W_t = I - D.T D / mu,  W_e = D.T / mu

with a per-instance threshold ``lam`` regressed from ``x`` by a small
softplus MLP. All routines accept a single instance (1-D ``x``) or a stack
of instances (2-D, one per row); row-stacked inputs share the parameters.
"""

from dataclasses import dataclass
import math

import numpy as np

from .exceptions import InvalidStateError
from .linalg import overcomplete_dct, sigmoid, soft_threshold, softplus, spectral_norm

LAMBDA_HIDDEN = (64, 32)
# initial per-instance threshold; zero biases would start every code at zero
LAMBDA_INIT = 0.01
ISTA_TOL = 1e-10
ISTA_MAX_ITER = 100_000
# softplus underflows to 0.0 below about -745; keep the threshold strictly positive
LAMBDA_FLOOR = float(np.finfo(np.float64).tiny)


@dataclass
class LambdaNetParams:
    """Three affine layers p -> h1 -> h2 -> 1, each followed by softplus."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "LambdaNetParams":
        return LambdaNetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "LambdaNetParams":
        return LambdaNetParams([np.zeros_like(w) for w in self.weights],
                               [np.zeros_like(b) for b in self.biases])


@dataclass
class ScModuleParams:
    dictionary: np.ndarray
    # shape (1,) so optimisers can update it in place
    log_mu: np.ndarray
    lambda_net: LambdaNetParams
    num_layers: int

    def __post_init__(self):
        p, m = self.dictionary.shape
        if m < p:
            raise ValueError(f"dictionary must be over-complete (m={m} < p={p})")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.lambda_net.in_dim != p:
            raise ValueError(f"lambda net expects {self.lambda_net.in_dim} inputs, dictionary has p={p}")
        self.log_mu = np.asarray(self.log_mu, dtype=np.float64).reshape(1)

    @property
    def embed_dim(self) -> int:
        return self.dictionary.shape[0]

    @property
    def num_atoms(self) -> int:
        return self.dictionary.shape[1]

    @property
    def mu(self) -> float:
        return math.exp(float(self.log_mu[0]))

    def named_arrays(self, prefix: str = "sc.") -> dict[str, np.ndarray]:
        out = {f"{prefix}dict": self.dictionary, f"{prefix}log_mu": self.log_mu}
        for k, (w, b) in enumerate(zip(self.lambda_net.weights, self.lambda_net.biases)):
            out[f"{prefix}lambda.w{k}"] = w
            out[f"{prefix}lambda.b{k}"] = b
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


@dataclass
class LISTACache:
    x: np.ndarray                    # (n, p) inputs
    lam: np.ndarray                  # (n,) thresholds
    lambda_hidden: list              # [(pre, post)] per lambda-net layer
    pre: list[np.ndarray]            # L pre-activations, (n, m) each
    alphas: list[np.ndarray]         # L + 1 codes, alphas[0] == 0
    w_t: np.ndarray
    w_e: np.ndarray
    mu: float
    dictionary: np.ndarray
    single: bool = False
    lam_fixed: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.pre)

    @property
    def sparsity(self) -> float:
        """Fraction of exactly-zero entries of the final codes."""
        return float(np.mean(self.alphas[-1] == 0.0))

    def kink_margin(self) -> float:
        """Smallest distance of any |pre-activation| to its threshold."""
        return min(float(np.min(np.abs(np.abs(z) - self.lam[:, None]))) for z in self.pre)


@dataclass
class ScGrads:
    d_dict: np.ndarray
    d_log_mu: float
    d_lambda_net: LambdaNetParams
    d_input: np.ndarray

    def named_arrays(self, prefix: str = "sc.") -> dict[str, np.ndarray]:
        out = {f"{prefix}dict": self.d_dict, f"{prefix}log_mu": np.array([self.d_log_mu])}
        for k, (w, b) in enumerate(zip(self.d_lambda_net.weights, self.d_lambda_net.biases)):
            out[f"{prefix}lambda.w{k}"] = w
            out[f"{prefix}lambda.b{k}"] = b
        return out


# ---------------------------------------------------------------------------
# classical solver


def _check_shapes(d, x, alpha=None):
    d = np.asarray(d, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if d.ndim != 2 or x.ndim != 1 or x.shape[0] != d.shape[0]:
        raise ValueError(f"shape mismatch: D {d.shape}, x {x.shape}")
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.shape[0] != d.shape[1]:
            raise ValueError(f"shape mismatch: D {d.shape}, alpha {alpha.shape}")
    return d, x, alpha


def sc_objective(d, x, alpha, lam: float) -> float:
    """0.5 * ||D alpha - x||^2 + lam * ||alpha||_1"""
    d, x, alpha = _check_shapes(d, x, alpha)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    r = d @ alpha - x
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(alpha)))


def ista_solve(d, x, lam: float, mu: float, max_iter: int = ISTA_MAX_ITER,
               tol: float = ISTA_TOL, callback=None):
    """Minimise ``0.5||D a - x||^2 + lam ||a||_1`` by proximal gradient steps.

    Step size is ``1/mu`` (``mu >= ||D||_2^2`` guarantees descent), so the
    proximal threshold is ``lam / mu``. Starts from zero and stops once the
    sup-norm change of an update is below ``tol`` or after ``max_iter``
    updates. ``callback(t, alpha)`` is invoked after every update.

    Returns ``(alpha, iterations)``.
    """
    d, x, _ = _check_shapes(d, x)
    if mu <= 0:
        raise ValueError(f"ista_solve: mu must be positive, got {mu}")
    if lam < 0:
        raise ValueError("ista_solve: lambda must be non-negative")
    alpha = np.zeros(d.shape[1])
    thresh = lam / mu
    it = 0
    for it in range(1, max_iter + 1):
        grad = d.T @ (d @ alpha - x)
        nxt = soft_threshold(alpha - grad / mu, thresh)
        delta = float(np.max(np.abs(nxt - alpha))) if alpha.size else 0.0
        alpha = nxt
        if callback is not None:
            callback(it, alpha)
        if delta < tol:
            break
    return alpha, it


def kkt_residual(d, x, alpha, lam: float) -> float:
    """Worst violation of the l1 subgradient optimality conditions.

    With g = D.T (D alpha - x): zero coordinates need |g_j| <= lam, active
    ones need g_j = -lam * sign(alpha_j).
    """
    d, x, alpha = _check_shapes(d, x, alpha)
    g = d.T @ (d @ alpha - x)
    active = alpha != 0
    viol = np.where(active, np.abs(g + lam * np.sign(alpha)), np.maximum(np.abs(g) - lam, 0.0))
    return float(np.max(viol)) if viol.size else 0.0


# ---------------------------------------------------------------------------
# learned module


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def init_sc_module(p: int, m: int, num_layers: int, seed: int,
                   hidden: tuple[int, int] = LAMBDA_HIDDEN,
                   lambda_init: float | None = LAMBDA_INIT) -> ScModuleParams:
    """DCT dictionary, mu = ||D||_2^2 and a freshly drawn lambda net.

    Lambda-net weights are uniform(+-1/sqrt(fan_in)) and biases zero, except
    the output bias, which is set to softplus^-1(lambda_init) so the
    initial thresholds sit near ``lambda_init`` instead of ln 2. Pass
    ``lambda_init=None`` for all-zero biases.
    """
    if m < p:
        raise ValueError(f"need m >= p for an over-complete dictionary (m={m}, p={p})")
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    d = overcomplete_dct(p, m)
    log_mu = math.log(spectral_norm(d) ** 2)
    rng = np.random.default_rng(seed)
    dims = [p, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if lambda_init is not None:
        biases[-1][:] = softplus_inverse(lambda_init)
    return ScModuleParams(d, np.array([log_mu]), LambdaNetParams(weights, biases), num_layers)


def lista_matrices(params: ScModuleParams) -> tuple[np.ndarray, np.ndarray]:
    d = params.dictionary
    inv_mu = 1.0 / params.mu
    w_t = np.eye(d.shape[1]) - inv_mu * (d.T @ d)
    w_e = inv_mu * d.T
    return w_t, w_e


def _rows(x, width: int, name: str = "x"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise ValueError(f"{name} has shape {x.shape}, expected last dimension {width}")
    return x2, single


def lambda_forward(net: LambdaNetParams, x):
    """Per-instance threshold ``softplus(A3 softplus(A2 softplus(A1 x + b1) + b2) + b3)``.

    Returns ``(lam, hidden)`` where ``hidden`` holds the (pre, post) pair of
    each layer for the backward pass. ``lam`` is a float for a 1-D input and
    an (n,) array for row-stacked inputs.
    """
    h, single = _rows(x, net.in_dim)
    hidden = []
    for w, b in zip(net.weights, net.biases):
        a = h @ w.T + b
        h = softplus(a)
        hidden.append((a, h))
    lam = np.maximum(h[:, 0], LAMBDA_FLOOR)
    return (float(lam[0]) if single else lam), hidden


def lambda_backward(net: LambdaNetParams, x, hidden, d_lam):
    """Gradients of a scalar loss through the lambda net.

    Returns ``(grads, d_x)`` with ``grads`` shaped like ``net``.
    """
    x2, single = _rows(x, net.in_dim)
    g = np.asarray(d_lam, dtype=np.float64).reshape(-1, 1)
    grads = net.zeros_like()
    for k in range(len(net.weights) - 1, -1, -1):
        a, _ = hidden[k]
        g = g * sigmoid(a)
        inp = hidden[k - 1][1] if k > 0 else x2
        grads.weights[k] = g.T @ inp
        grads.biases[k] = g.sum(axis=0)
        g = g @ net.weights[k]
    return grads, (g[0] if single else g)


def lista_forward(params: ScModuleParams, x, lam=None):
    """Run the L-layer unrolled network.

    ``lam`` overrides the lambda net with fixed thresholds (scalar or one per
    row); gradients then do not flow into the lambda net. Returns
    ``(alpha, cache)``.
    """
    x2, single = _rows(x, params.embed_dim)
    n = x2.shape[0]
    if lam is None:
        lam_v, hidden = lambda_forward(params.lambda_net, x2)
        fixed = False
    else:
        lam_v = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
        if np.any(lam_v < 0):
            raise ValueError("fixed lambda must be non-negative")
        hidden, fixed = [], True
    w_t, w_e = lista_matrices(params)
    # W_e x is loop-invariant
    drive = x2 @ w_e.T
    alpha = np.zeros((n, params.num_atoms))
    alphas, pre = [alpha], []
    thr = lam_v[:, None]
    for _ in range(params.num_layers):
        z = alpha @ w_t + drive  # w_t is symmetric
        alpha = np.sign(z) * np.maximum(np.abs(z) - thr, 0.0)
        pre.append(z)
        alphas.append(alpha)
    cache = LISTACache(x=x2, lam=lam_v, lambda_hidden=hidden, pre=pre, alphas=alphas,
                       w_t=w_t, w_e=w_e, mu=params.mu, dictionary=params.dictionary.copy(),
                       single=single, lam_fixed=fixed)
    return (alpha[0] if single else alpha), cache


def _check_cache(params: ScModuleParams, cache: LISTACache) -> None:
    if cache.num_layers != params.num_layers:
        raise InvalidStateError(f"cache has {cache.num_layers} layers, params have {params.num_layers}")
    if cache.dictionary.shape != params.dictionary.shape:
        raise InvalidStateError("cache dictionary shape does not match params")
    if cache.mu != params.mu or not np.array_equal(cache.dictionary, params.dictionary):
        raise InvalidStateError("params changed since the forward pass that produced this cache")


def lista_backward(params: ScModuleParams, cache: LISTACache, d_alpha) -> ScGrads:
    """Reverse-mode gradients through all L layers.

    The soft-threshold uses its a.e. derivative: slope 1 and d/dlam =
    -sign(z) where |z| > lam, zero elsewhere (including the kink). Every
    layer's contribution is accumulated into the single shared D, log_mu and
    lambda net.
    """
    _check_cache(params, cache)
    g = np.asarray(d_alpha, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.alphas[-1].shape:
        raise InvalidStateError(f"d_alpha shape {g.shape} does not match codes {cache.alphas[-1].shape}")
    d, x, mu = params.dictionary, cache.x, cache.mu
    inv_mu = 1.0 / mu
    d_wt = np.zeros_like(cache.w_t)
    d_drive = np.zeros_like(g)
    d_lam = np.zeros(x.shape[0])
    for t in range(params.num_layers - 1, -1, -1):
        z = cache.pre[t]
        active = np.abs(z) > cache.lam[:, None]
        dz = np.where(active, g, 0.0)
        d_lam -= np.sum(np.sign(z) * dz, axis=1)
        d_wt += cache.alphas[t].T @ dz
        d_drive += dz
        g = dz @ cache.w_t
    # drive = x @ W_e.T = x @ D / mu
    d_we_t = x.T @ d_drive                     # grad wrt D / mu, (p, m)
    d_x = d_drive @ cache.w_e
    # W_t = I - (D.T D) / mu
    sym = d_wt + d_wt.T
    d_dict = inv_mu * d_we_t - inv_mu * (d @ sym)
    d_inv_mu = float(np.sum(d_we_t * d)) - float(np.sum(d_wt * (d.T @ d)))
    d_log_mu = -inv_mu * d_inv_mu
    if cache.lam_fixed:
        d_net = params.lambda_net.zeros_like()
    else:
        d_net, d_x_lam = lambda_backward(params.lambda_net, x, cache.lambda_hidden, d_lam)
        d_x = d_x + d_x_lam
    return ScGrads(d_dict=d_dict, d_log_mu=d_log_mu, d_lambda_net=d_net,
                   d_input=d_x[0] if cache.single else d_x)


def lista_flops(p: int, m: int, num_layers: int, hidden: tuple[int, int] = LAMBDA_HIDDEN) -> int:
    """Analytic FLOPs for one instance: L (2m^2 + 2pm + m) plus the lambda-net affine layers."""
    dims = [p, *hidden, 1]
    lam_cost = sum(2 * a * b for a, b in zip(dims[:-1], dims[1:]))
    return num_layers * (2 * m * m + 2 * p * m + m) + lam_cost
